//! Stage I: distill the unknown factor. A real branch reconstructs `x` from its own labels; a
//! mismatched branch swaps in random labels, and a classifier trained on the mixed samples
//! tells E which label information its code still leaks.

use rand::Rng;

use crate::config::{TrainConfig, TrainParams};
use crate::error::{Error, Result};
use crate::factors::{sample_mismatched, FactorSet, LabelBatch};
use crate::latent::{CodeSample, GaussianBatch};
use crate::losses::{class_penalty_batch, kl_batch, squared_error_batch, ClassPenalty};
use crate::netfactory::{ClassifierInput, StageOneModels};
use crate::nn::{Adam, Module, Tape};
use crate::stability_ablation::{Adversary, ClassifierDomain, StabilityVariant};
use crate::tensor::Tensor;

/// Batch means of each Stage I term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageOneLosses {
    pub rec: f64,
    /// Σ_i weighted NLU (or −Σ_i NLL for the maximize-NLL adversary).
    pub adv: f64,
    pub kl_unknown: f64,
    pub kl_labels: f64,
    pub l_c: f64,
    pub l_geb: f64,
}

impl StageOneLosses {
    pub const CSV_HEADER: &'static str = "iteration,rec,adv,kl_unknown,kl_labels,l_c,l_geb,wall_clock_s";

    pub fn csv_row(&self, iteration: u64, seconds: f64) -> String {
        format!(
            "{iteration},{},{},{},{},{},{},{seconds:.3}",
            self.rec, self.adv, self.kl_unknown, self.kl_labels, self.l_c, self.l_geb
        )
    }
}

pub struct StageOneTrainer {
    pub models: StageOneModels,
    pub factors: FactorSet,
    pub params: TrainParams,
    pub variant: StabilityVariant,
    pub opt_encoder: Adam,
    pub opt_embedders: Adam,
    pub opt_generator: Adam,
    pub opt_classifier: Adam,
}

/// One decoded branch: label codes for every factor and the generator's record.
struct Branch {
    dists: Vec<GaussianBatch>,
    codes: Vec<CodeSample>,
    labels: Vec<Vec<usize>>,
    image: Tensor,
    tape: Tape,
}

fn check(term: &'static str, v: f64, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, iteration })
    }
}

impl StageOneTrainer {
    /// `factors` must carry class frequencies from the training split.
    pub fn new(models: StageOneModels, factors: FactorSet, cfg: &TrainConfig) -> Result<Self> {
        if !factors.has_frequencies() {
            return Err(Error::Config("class frequencies must be estimated before training".into()));
        }
        let adam = cfg.train.adam;
        Ok(StageOneTrainer {
            opt_encoder: Adam::new(adam, &models.encoder),
            opt_embedders: Adam::new(adam, &models.embedders),
            opt_generator: Adam::new(adam, &models.generator),
            opt_classifier: Adam::new(adam, &models.classifier),
            variant: StabilityVariant::from_ablation(&cfg.ablation),
            params: cfg.train.clone(),
            factors,
            models,
        })
    }

    fn decode(&self, e: &CodeSample, labels: Vec<Vec<usize>>, rng: &mut impl Rng) -> Branch {
        let dists: Vec<GaussianBatch> =
            self.models.embedders.iter().zip(&labels).map(|(b, y)| b.forward(y)).collect();
        let codes: Vec<CodeSample> = dists.iter().map(|d| d.sample(rng)).collect();
        let mut parts = vec![&e.code];
        parts.extend(codes.iter().map(|c| &c.code));
        let z = Tensor::concat_cols(&parts).expect("code widths");
        let (image, tape) = self.models.generator.forward(&z);
        Branch { dists, codes, labels, image, tape }
    }

    fn classify(&self, mixed: &Tensor, e: &Tensor) -> (Tensor, crate::netfactory::ClassifierTape) {
        match self.models.classifier.input {
            ClassifierInput::Sample => self.models.classifier.forward(Some(mixed), None),
            ClassifierInput::SampleAndCode => self.models.classifier.forward(Some(mixed), Some(e)),
            ClassifierInput::Code => self.models.classifier.forward(None, Some(e)),
        }
    }

    /// Summed per-factor penalty over `[B, Σ m_i]` logits, with its logit gradient.
    fn penalty(
        &self,
        logits: &Tensor,
        labels: &[Vec<usize>],
        kind: PenaltyKind,
        scale: f32,
    ) -> (f64, Tensor) {
        let parts = self.models.classifier.split(logits);
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(parts.len());
        for (i, (part, y)) in parts.iter().zip(labels).enumerate() {
            let p = match kind {
                PenaltyKind::Nll => ClassPenalty::Likelihood,
                PenaltyKind::WeightedNlu => ClassPenalty::WeightedUnlikelihood(self.factors.reference(i)),
                PenaltyKind::NegNll => ClassPenalty::Likelihood,
            };
            let s = if kind == PenaltyKind::NegNll { -scale } else { scale };
            let (v, g) = class_penalty_batch(part, y, p, s);
            total += if kind == PenaltyKind::NegNll { -v } else { v };
            grads.push(g);
        }
        let refs: Vec<&Tensor> = grads.iter().collect();
        (total, Tensor::concat_cols(&refs).expect("head widths"))
    }

    /// One alternation: classifier step on the mismatched branch, then a joint E/B/G step.
    pub fn step(
        &mut self,
        x: &Tensor,
        labels: &LabelBatch,
        rng: &mut impl Rng,
        iteration: u64,
    ) -> Result<StageOneLosses> {
        let b = x.batch();
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let code_space = self.models.classifier.input == ClassifierInput::Code;
        if code_space != (self.variant.domain == ClassifierDomain::CodeSpace) {
            return Err(Error::Config(format!(
                "variant `{}` does not match the classifier the models were built with",
                self.variant.name()
            )));
        }
        let (lam_adv, lam_kl) = (self.params.lambda_adv1, self.params.lambda_kl);

        let (dist_e, tape_e) = self.models.encoder.forward(x);
        let e = dist_e.sample(rng);
        let mismatched = sample_mismatched(labels, rng)?;
        let real = self.decode(&e, labels.columns.clone(), rng);
        let mixed = self.decode(&e, mismatched.columns, rng);
        // C predicts the true labels: anything it recovers from the mixed sample leaked through e.
        let targets = &real.labels;

        // classifier half-step
        let (logits, tape_c) = self.classify(&mixed.image, &e.code);
        let (l_c, g) = self.penalty(&logits, targets, PenaltyKind::Nll, 1.0);
        let l_c = check("l_c", l_c, iteration)?;
        self.models.classifier.backward(tape_c, g);
        self.opt_classifier.step(&mut self.models.classifier);

        // encoder/embedder/generator half-step, classifier held fixed
        let (logits, tape_c) = self.classify(&mixed.image, &e.code);
        let kind = match self.variant.adversary {
            Adversary::NluWeighted => PenaltyKind::WeightedNlu,
            Adversary::MaximizeNll => PenaltyKind::NegNll,
        };
        let (adv, g) = self.penalty(&logits, targets, kind, lam_adv);
        let adv = check("adv", adv, iteration)?;
        let (d_mixed, d_e_cls) = self.models.classifier.backward_input(tape_c, g);

        let (rec, d_real) = squared_error_batch(&real.image, x, 1.0);
        let rec = check("rec", rec, iteration)?;

        let dz_real = self.models.generator.backward(real.tape, d_real);
        let widths = self.code_widths();
        let mut dz_real = dz_real.split_cols(&widths)?.into_iter();
        let mut d_e = dz_real.next().unwrap();
        let d_b_real: Vec<Tensor> = dz_real.collect();

        let mut d_b_mixed = vec![None; widths.len() - 1];
        if let Some(dm) = d_mixed {
            let dz = self.models.generator.backward(mixed.tape, dm);
            let mut it = dz.split_cols(&widths)?.into_iter();
            d_e.add_assign(&it.next().unwrap());
            for (slot, g) in d_b_mixed.iter_mut().zip(it) {
                *slot = Some(g);
            }
        }
        if let Some(de) = d_e_cls {
            d_e.add_assign(&de);
        }

        let (kl_u, mut dm_e, dlv_e) = kl_batch(&dist_e, lam_kl);
        let kl_u = check("kl_unknown", kl_u, iteration)?;
        let (rm, rlv) = e.backward(&dist_e, &d_e);
        dm_e.add_assign(&rm);
        let mut dlv_e = dlv_e;
        dlv_e.add_assign(&rlv);
        self.models.encoder.backward(tape_e, &dm_e, &dlv_e);

        let mut kl_b = 0.0;
        for i in 0..d_b_real.len() {
            let (kl, mut dm, mut dlv) = kl_batch(&real.dists[i], lam_kl);
            kl_b += kl;
            let (rm, rlv) = real.codes[i].backward(&real.dists[i], &d_b_real[i]);
            dm.add_assign(&rm);
            dlv.add_assign(&rlv);
            self.models.embedders[i].backward(&real.labels[i], &dm, &dlv);
            if let Some(g) = &d_b_mixed[i] {
                let (mm, mlv) = mixed.codes[i].backward(&mixed.dists[i], g);
                self.models.embedders[i].backward(&mixed.labels[i], &mm, &mlv);
            }
        }
        let kl_b = check("kl_labels", kl_b, iteration)?;

        self.opt_encoder.step(&mut self.models.encoder);
        self.opt_embedders.step(&mut self.models.embedders);
        self.opt_generator.step(&mut self.models.generator);

        let l_geb = rec + lam_adv as f64 * adv + lam_kl as f64 * (kl_u + kl_b);
        Ok(StageOneLosses {
            rec,
            adv,
            kl_unknown: kl_u,
            kl_labels: kl_b,
            l_c,
            l_geb: check("l_geb", l_geb, iteration)?,
        })
    }

    fn code_widths(&self) -> Vec<usize> {
        let mut w = vec![self.models.encoder.code_dim];
        w.extend(self.models.embedders.iter().map(|b| b.code_dim));
        w
    }

    /// Parameter hash of the networks updated in the E/B/G half-step.
    pub fn geb_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.models.encoder.param_hash());
        h.update(self.models.embedders.param_hash());
        h.update(self.models.generator.param_hash());
        h.finalize().into()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PenaltyKind {
    Nll,
    WeightedNlu,
    NegNll,
}

/// Decodes `x` with the given labels: `G_I(e, b_1..)` with every code sampled.
pub fn reconstruct(models: &StageOneModels, x: &Tensor, labels: &LabelBatch, rng: &mut impl Rng) -> Tensor {
    let e = models.encoder.infer(x).sample(rng);
    let mut codes = vec![e.code];
    for (b, y) in models.embedders.iter().zip(&labels.columns) {
        codes.push(b.forward(y).sample(rng).code);
    }
    let refs: Vec<&Tensor> = codes.iter().collect();
    models.generator.infer(&Tensor::concat_cols(&refs).expect("code widths"))
}

/// The mismatched branch: the same path as [`reconstruct`] with substituted labels.
pub fn mix(models: &StageOneModels, x: &Tensor, random_labels: &LabelBatch, rng: &mut impl Rng) -> Tensor {
    reconstruct(models, x, random_labels, rng)
}
