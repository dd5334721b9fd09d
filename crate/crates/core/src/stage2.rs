//! Stage II: a multi-conditional generator. Codes for every factor are computed once per
//! batch and recombined across samples; the frozen Stage I encoder pins the unknown factor.

use rand::Rng;

use crate::config::{Ablation, TrainConfig, TrainParams};
use crate::error::{Error, Result};
use crate::factors::{FactorSet, LabelBatch, Recombination};
use crate::latent::{CodeSample, GaussianBatch};
use crate::losses::{class_penalty_batch, kl_batch, least_squares_batch, squared_error_batch, ClassPenalty};
use crate::netfactory::StageTwoModels;
use crate::nn::{Adam, Module};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTwoLosses {
    pub code_dist: f64,
    pub adv_d: f64,
    pub adv_cls: f64,
    pub kl_labels: f64,
    pub l_r: f64,
    pub l_d: f64,
    pub l_gs: f64,
}

impl StageTwoLosses {
    pub const CSV_HEADER: &'static str =
        "iteration,code_dist,adv_d,adv_cls,kl_labels,l_r,l_d,l_gs,wall_clock_s";

    pub fn csv_row(&self, iteration: u64, seconds: f64) -> String {
        format!(
            "{iteration},{},{},{},{},{},{},{},{seconds:.3}",
            self.code_dist, self.adv_d, self.adv_cls, self.kl_labels, self.l_r, self.l_d, self.l_gs
        )
    }
}

pub struct StageTwoTrainer {
    pub models: StageTwoModels,
    pub factors: FactorSet,
    pub params: TrainParams,
    pub ablation: Ablation,
    pub opt_label_encoders: Adam,
    pub opt_generator: Adam,
    pub opt_recognizer: Adam,
    pub opt_discriminator: Adam,
    /// Test hook: when set, every factor keeps its own batch position.
    pub identity_recombination: bool,
}

fn check(term: &'static str, v: f64, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, iteration })
    }
}

/// Sum of per-factor penalties over concatenated logits, with the concatenated gradient.
fn penalty(
    heads: &[usize],
    logits: &Tensor,
    labels: &[Vec<usize>],
    p: ClassPenalty<'_>,
    scale: f32,
) -> (f64, Tensor) {
    let parts = logits.split_cols(heads).expect("head widths");
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for (part, y) in parts.iter().zip(labels) {
        let (v, g) = class_penalty_batch(part, y, p, scale);
        total += v;
        grads.push(g);
    }
    let refs: Vec<&Tensor> = grads.iter().collect();
    (total, Tensor::concat_cols(&refs).expect("head widths"))
}

impl StageTwoTrainer {
    pub fn new(models: StageTwoModels, factors: FactorSet, cfg: &TrainConfig) -> Self {
        let adam = cfg.train.adam;
        StageTwoTrainer {
            opt_label_encoders: Adam::new(adam, &models.label_encoders),
            opt_generator: Adam::new(adam, &models.generator),
            opt_recognizer: Adam::new(adam, &models.recognizer),
            opt_discriminator: Adam::new(adam, &models.discriminator),
            params: cfg.train.clone(),
            ablation: cfg.ablation.clone(),
            identity_recombination: false,
            factors,
            models,
        }
    }

    /// R step, D step, then a joint G/S step with R, D and E fixed.
    pub fn step(
        &mut self,
        x: &Tensor,
        labels: &LabelBatch,
        rng: &mut impl Rng,
        iteration: u64,
    ) -> Result<StageTwoLosses> {
        let b = x.batch();
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let (lam_adv, lam_kl) = (self.params.lambda_adv2, self.params.lambda_kl);
        let heads = self.models.recognizer.heads.clone();

        // codes for the whole batch, once
        let d_u = self.models.encoder.code_dim();
        let (target_mean, e) = if self.ablation.noise_unknown {
            (None, CodeSample::prior(b, d_u, rng))
        } else {
            let dist = self.models.encoder.infer(x);
            let e = dist.sample(rng);
            (Some(dist.mean), e)
        };
        let mut s_dists = Vec::new();
        let mut s_tapes = Vec::new();
        let mut s_codes = Vec::new();
        for enc in &self.models.label_encoders {
            let (dist, tape) = enc.forward(x);
            s_codes.push(dist.sample(rng));
            s_dists.push(dist);
            s_tapes.push(tape);
        }
        let recomb = if self.identity_recombination {
            Recombination::identity(heads.len(), b)
        } else {
            Recombination::random(heads.len(), b, rng)?
        };
        let y_perm = recomb.apply(labels);
        let permuted: Vec<Tensor> =
            s_codes.iter().zip(&recomb.perms).map(|(s, p)| s.code.select_rows(p)).collect();
        let mut parts = vec![&e.code];
        parts.extend(permuted.iter());
        let z = Tensor::concat_cols(&parts)?;
        let (fake, tape_g) = self.models.generator.forward(&z);

        // R: classify real samples, refuse to classify generated ones
        let (logits_real, tape) = self.models.recognizer.forward(Some(x), None);
        let (nll_real, g) = penalty(&heads, &logits_real, &labels.columns, ClassPenalty::Likelihood, 1.0);
        self.models.recognizer.backward(tape, g);
        let mut l_r = nll_real;
        if !self.ablation.no_nlu_in_r {
            let (logits_fake, tape) = self.models.recognizer.forward(Some(&fake), None);
            let (nlu, g) = penalty(&heads, &logits_fake, &y_perm.columns, ClassPenalty::Unlikelihood, 1.0);
            self.models.recognizer.backward(tape, g);
            l_r += nlu;
        }
        let l_r = check("l_r", l_r, iteration)?;
        self.opt_recognizer.step(&mut self.models.recognizer);

        // D: least squares towards +1 on real, -1 on generated
        let (d_real, tape) = self.models.discriminator.forward(x);
        let (lr, g) = least_squares_batch(&d_real, 1.0, 1.0);
        self.models.discriminator.backward(tape, g);
        let (d_fake, tape) = self.models.discriminator.forward(&fake);
        let (lf, g) = least_squares_batch(&d_fake, -1.0, 1.0);
        self.models.discriminator.backward(tape, g);
        let l_d = check("l_d", lr + lf, iteration)?;
        self.opt_discriminator.step(&mut self.models.discriminator);

        // G and S
        let mut d_fake_img = Tensor::zeros(fake.shape());
        let mut code_dist = 0.0;
        if let (Some(mu), false) = (&target_mean, self.ablation.no_code_dist) {
            let (dist_bar, tape) = self.models.encoder.forward(&fake);
            let (v, d_mean) = squared_error_batch(&dist_bar.mean, mu, 1.0);
            code_dist = check("code_dist", v, iteration)?;
            let zero = Tensor::zeros(d_mean.shape());
            d_fake_img.add_assign(&self.models.encoder.backward_input(tape, &d_mean, &zero));
        }
        let (d_out, tape) = self.models.discriminator.forward(&fake);
        let (adv_d, g) = least_squares_batch(&d_out, 0.0, lam_adv);
        let adv_d = check("adv_d", adv_d, iteration)?;
        d_fake_img.add_assign(&self.models.discriminator.backward_input(tape, g));
        let (logits, tape) = self.models.recognizer.forward(Some(&fake), None);
        let (adv_cls, g) = penalty(&heads, &logits, &y_perm.columns, ClassPenalty::Likelihood, lam_adv);
        let adv_cls = check("adv_cls", adv_cls, iteration)?;
        let (dx, _) = self.models.recognizer.backward_input(tape, g);
        d_fake_img.add_assign(&dx.expect("sample-space recognizer"));

        let dz = self.models.generator.backward(tape_g, d_fake_img);
        let mut widths = vec![d_u];
        widths.extend(self.models.label_encoders.iter().map(|s| s.code_dim));
        let d_codes: Vec<Tensor> = dz.split_cols(&widths)?.into_iter().skip(1).collect();
        let mut kl_labels = 0.0;
        for (i, ((enc, tape), d_perm)) in
            self.models.label_encoders.iter_mut().zip(s_tapes).zip(&d_codes).enumerate()
        {
            // undo the recombination: row j of the permuted codes came from row perm[j]
            let mut d_code = Tensor::zeros(d_perm.shape());
            for (j, &src) in recomb.perms[i].iter().enumerate() {
                for (a, v) in d_code.row_mut(src).iter_mut().zip(d_perm.row(j)) {
                    *a += v;
                }
            }
            let (kl, mut dm, mut dlv) = kl_batch(&s_dists[i], lam_kl);
            kl_labels += kl;
            let (rm, rlv) = s_codes[i].backward(&s_dists[i], &d_code);
            dm.add_assign(&rm);
            dlv.add_assign(&rlv);
            enc.backward(tape, &dm, &dlv);
        }
        let kl_labels = check("kl_labels", kl_labels, iteration)?;
        self.opt_generator.step(&mut self.models.generator);
        self.opt_label_encoders.step(&mut self.models.label_encoders);
        // R and D received input-only gradients; their buffers stay clean.

        let l_gs = code_dist + lam_adv as f64 * (adv_d + adv_cls) + lam_kl as f64 * kl_labels;
        Ok(StageTwoLosses {
            code_dist,
            adv_d,
            adv_cls,
            kl_labels,
            l_r,
            l_d,
            l_gs: check("l_gs", l_gs, iteration)?,
        })
    }

    /// Hash over the networks the G/S half-step updates.
    pub fn gs_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.models.generator.param_hash());
        h.update(self.models.label_encoders.param_hash());
        h.finalize().into()
    }
}

/// `G_Π(e, s'_1, ..)`: the unknown code from `unknown_source`, labeled factor `i` from
/// `labeled_sources[i]`. All sources are `[B, C, H, W]` batches of the same size.
/// With `noise_unknown` the unknown code is a standard-normal draw and the source is ignored.
pub fn generate(
    models: &StageTwoModels,
    unknown_source: &Tensor,
    labeled_sources: &[&Tensor],
    noise_unknown: bool,
    rng: &mut impl Rng,
) -> Tensor {
    let b = unknown_source.batch();
    let e = if noise_unknown {
        CodeSample::prior(b, models.encoder.code_dim(), rng).code
    } else {
        models.encoder.infer(unknown_source).sample(rng).code
    };
    generate_from_codes(models, &e, labeled_sources, rng)
}

/// Generation with an explicit unknown code `[B, d_u]`.
pub fn generate_from_codes(
    models: &StageTwoModels,
    unknown_code: &Tensor,
    labeled_sources: &[&Tensor],
    rng: &mut impl Rng,
) -> Tensor {
    let mut codes = vec![unknown_code.clone()];
    for (enc, src) in models.label_encoders.iter().zip(labeled_sources) {
        codes.push(enc.infer(src).sample(rng).code);
    }
    let refs: Vec<&Tensor> = codes.iter().collect();
    models.generator.infer(&Tensor::concat_cols(&refs).expect("code widths"))
}

/// Labeled-factor codes of `x`, one Gaussian batch per labeled encoder.
pub fn label_codes(models: &StageTwoModels, x: &Tensor) -> Vec<GaussianBatch> {
    models.label_encoders.iter().map(|s| s.infer(x)).collect()
}
