//! Every network is built from one sizing rule: stride-2 convolutions from 32 channels,
//! doubling up to 256, until the feature map is 4×4; fully-connected layers are 512 wide.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Ablation;
use crate::error::{Error, Result};
use crate::factors::FactorSet;
use crate::latent::GaussianBatch;
use crate::nn::{
    prefixed, prefixed_mut, Conv2d, ConvTranspose2d, Layer, Linear, Module, Param, Sequential, Tape,
};
use crate::tensor::Tensor;

pub const FC_WIDTH: usize = 512;
pub const LEAK: f32 = 0.2;
const FINAL_SPATIAL: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchPlan {
    pub image_size: usize,
    pub channels_in: usize,
    pub conv_channels: Vec<usize>,
    pub fc_width: usize,
    pub fc_count_enc_gen: usize,
    pub fc_count_cls_dis: usize,
}

impl ArchPlan {
    pub fn new(image_size: usize, channels_in: usize) -> Result<Self> {
        let layers = match image_size {
            28 => 3,
            64 => 4,
            128 => 5,
            other => {
                return Err(Error::Config(format!("unsupported image size {other} (expected 28, 64 or 128)")))
            }
        };
        if channels_in == 0 {
            return Err(Error::Config("images need at least one channel".into()));
        }
        let conv_channels = (0..layers).map(|i| (32usize << i).min(256)).collect();
        Ok(ArchPlan {
            image_size,
            channels_in,
            conv_channels,
            fc_width: FC_WIDTH,
            fc_count_enc_gen: 3,
            fc_count_cls_dis: 1,
        })
    }

    /// `(kernel, stride, padding)` of conv layer `i`. The 7→4 step of 28-pixel inputs uses a
    /// 3-wide kernel so the transposed layer maps 4 back to exactly 7.
    pub fn conv_geometry(&self, i: usize) -> (usize, usize, usize) {
        if self.image_size == 28 && i == 2 {
            (3, 2, 1)
        } else {
            (4, 2, 1)
        }
    }

    /// Spatial sizes from the input down to the final 4×4 map.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.image_size];
        for i in 0..self.conv_channels.len() {
            let (k, st, p) = self.conv_geometry(i);
            let prev = *s.last().unwrap();
            s.push((prev + 2 * p - k) / st + 1);
        }
        s
    }

    pub fn trunk_features(&self) -> usize {
        self.conv_channels.last().unwrap() * FINAL_SPATIAL * FINAL_SPATIAL
    }

    /// Stride-2 convolutions with leaky activations, flattened.
    pub fn conv_trunk(&self, rng: &mut impl Rng) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut c_in = self.channels_in;
        for (i, &c) in self.conv_channels.iter().enumerate() {
            let (k, s, p) = self.conv_geometry(i);
            layers.push(Layer::Conv(Conv2d::new(c_in, c, k, s, p, rng)));
            layers.push(Layer::LeakyRelu(LEAK));
            c_in = c;
        }
        layers.push(Layer::Flatten);
        layers
    }

    pub fn encoder(&self, code_dim: usize, rng: &mut impl Rng) -> Encoder {
        let mut layers = self.conv_trunk(rng);
        layers.push(Layer::Linear(Linear::new(self.trunk_features(), self.fc_width, rng)));
        layers.push(Layer::LeakyRelu(LEAK));
        layers.push(Layer::Linear(Linear::new(self.fc_width, self.fc_width, rng)));
        layers.push(Layer::LeakyRelu(LEAK));
        layers.push(Layer::Linear(Linear::new(self.fc_width, 2 * code_dim, rng)));
        Encoder { net: Sequential::new(layers), code_dim }
    }

    /// Codes `[B, in_dim]` to images `[B, C, S, S]` in [-1, 1].
    pub fn generator(&self, in_dim: usize, rng: &mut impl Rng) -> Sequential {
        let last = *self.conv_channels.last().unwrap();
        let mut layers = vec![
            Layer::Linear(Linear::new(in_dim, self.fc_width, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(self.fc_width, self.fc_width, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(self.fc_width, self.trunk_features(), rng)),
            Layer::Relu,
            Layer::Unflatten([last, FINAL_SPATIAL, FINAL_SPATIAL]),
        ];
        let n = self.conv_channels.len();
        for j in 0..n {
            let i = n - 1 - j;
            let c_in = self.conv_channels[i];
            let c_out = if i == 0 { self.channels_in } else { self.conv_channels[i - 1] };
            let (k, s, p) = self.conv_geometry(i);
            layers.push(Layer::ConvT(ConvTranspose2d::new(c_in, c_out, k, s, p, rng)));
            layers.push(if i == 0 { Layer::Tanh } else { Layer::Relu });
        }
        Sequential::new(layers)
    }

    pub fn classifier(
        &self,
        input: ClassifierInput,
        code_dim: usize,
        heads: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Classifier {
        let total: usize = heads.iter().sum();
        let (trunk, head) = match input {
            ClassifierInput::Sample => (
                Sequential::new(self.conv_trunk(rng)),
                Sequential::new(vec![Layer::Linear(Linear::new(self.trunk_features(), total, rng))]),
            ),
            ClassifierInput::SampleAndCode => (
                Sequential::new(self.conv_trunk(rng)),
                Sequential::new(vec![Layer::Linear(Linear::new(
                    self.trunk_features() + code_dim,
                    total,
                    rng,
                ))]),
            ),
            ClassifierInput::Code => {
                let mut layers = Vec::new();
                let mut width = code_dim;
                for _ in 0..4 {
                    layers.push(Layer::Linear(Linear::new(width, self.fc_width, rng)));
                    layers.push(Layer::LeakyRelu(LEAK));
                    width = self.fc_width;
                }
                layers.push(Layer::Linear(Linear::new(width, total, rng)));
                (Sequential::default(), Sequential::new(layers))
            }
        };
        Classifier { input, trunk, head, heads, code_dim }
    }

    /// Images to one unbounded realism score each.
    pub fn discriminator(&self, rng: &mut impl Rng) -> Sequential {
        let mut layers = self.conv_trunk(rng);
        layers.push(Layer::Linear(Linear::new(self.trunk_features(), 1, rng)));
        Sequential::new(layers)
    }
}

/// Image encoder emitting a diagonal Gaussian per sample.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub net: Sequential,
    pub code_dim: usize,
}

impl Encoder {
    pub fn forward(&self, x: &Tensor) -> (GaussianBatch, Tape) {
        let (head, tape) = self.net.forward(x);
        (GaussianBatch::from_head(&head).expect("encoder head"), tape)
    }

    pub fn infer(&self, x: &Tensor) -> GaussianBatch {
        GaussianBatch::from_head(&self.net.infer(x)).expect("encoder head")
    }

    pub fn backward(&mut self, tape: Tape, d_mean: &Tensor, d_log_var: &Tensor) -> Tensor {
        self.net.backward(tape, GaussianBatch::head_grad(d_mean, d_log_var))
    }

    pub fn backward_input(&self, tape: Tape, d_mean: &Tensor, d_log_var: &Tensor) -> Tensor {
        self.net.backward_input(tape, GaussianBatch::head_grad(d_mean, d_log_var))
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<(String, &Param)> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.net.params_mut()
    }
}

/// An encoder whose weights cannot be updated: it exposes no mutable parameters and only
/// input-gradient backpropagation.
#[derive(Clone, Debug)]
pub struct FrozenEncoder(Encoder);

impl FrozenEncoder {
    pub fn new(e: Encoder) -> Self {
        FrozenEncoder(e)
    }

    pub fn code_dim(&self) -> usize {
        self.0.code_dim
    }

    pub fn forward(&self, x: &Tensor) -> (GaussianBatch, Tape) {
        self.0.forward(x)
    }

    pub fn infer(&self, x: &Tensor) -> GaussianBatch {
        self.0.infer(x)
    }

    pub fn backward_input(&self, tape: Tape, d_mean: &Tensor, d_log_var: &Tensor) -> Tensor {
        self.0.backward_input(tape, d_mean, d_log_var)
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        self.0.params()
    }

    pub fn param_hash(&self) -> [u8; 32] {
        self.0.param_hash()
    }

    pub fn inner(&self) -> &Encoder {
        &self.0
    }
}

/// Lookup table from class index to a diagonal Gaussian: one (mean, log-variance) row per class.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: Param,
    pub classes: usize,
    pub code_dim: usize,
}

impl Embedding {
    pub fn new(classes: usize, code_dim: usize, rng: &mut impl Rng) -> Self {
        let mut value = vec![0f32; classes * 2 * code_dim];
        for row in value.chunks_mut(2 * code_dim) {
            for v in &mut row[..code_dim] {
                *v = StandardNormal.sample(rng);
            }
        }
        Embedding { table: Param::new(vec![classes, 2 * code_dim], value), classes, code_dim }
    }

    pub fn forward(&self, labels: &[usize]) -> GaussianBatch {
        let w = 2 * self.code_dim;
        let mut head = Vec::with_capacity(labels.len() * w);
        for &y in labels {
            head.extend_from_slice(&self.table.value[y * w..(y + 1) * w]);
        }
        GaussianBatch::from_head(&Tensor::new(vec![labels.len(), w], head).expect("embedding shape"))
            .expect("embedding head")
    }

    pub fn backward(&mut self, labels: &[usize], d_mean: &Tensor, d_log_var: &Tensor) {
        let d = self.code_dim;
        for (j, &y) in labels.iter().enumerate() {
            let row = &mut self.table.grad[y * 2 * d..(y + 1) * 2 * d];
            for (g, v) in row[..d].iter_mut().zip(d_mean.row(j)) {
                *g += v;
            }
            for (g, v) in row[d..].iter_mut().zip(d_log_var.row(j)) {
                *g += v;
            }
        }
    }
}

impl Module for Embedding {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("table".into(), &self.table)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("table".into(), &mut self.table)]
    }
}

impl<M: Module> Module for Vec<M> {
    fn params(&self) -> Vec<(String, &Param)> {
        self.iter().enumerate().flat_map(|(i, m)| prefixed(&i.to_string(), m.params())).collect()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.iter_mut().enumerate().flat_map(|(i, m)| prefixed_mut(&i.to_string(), m.params_mut())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierInput {
    /// Image only.
    Sample,
    /// Image trunk features concatenated with the unknown code at the fully-connected input.
    SampleAndCode,
    /// The unknown code alone, through a 4×512 MLP.
    Code,
}

/// Shared trunk with one linear head per labeled factor (stored as one matrix, split by rows).
#[derive(Clone, Debug)]
pub struct Classifier {
    pub input: ClassifierInput,
    pub trunk: Sequential,
    pub head: Sequential,
    pub heads: Vec<usize>,
    pub code_dim: usize,
}

pub struct ClassifierTape {
    trunk: Option<Tape>,
    head: Tape,
    trunk_width: usize,
}

impl Classifier {
    /// Logits `[B, Σ m_i]`; `x` and `e` must be given as the input kind requires.
    pub fn forward(&self, x: Option<&Tensor>, e: Option<&Tensor>) -> (Tensor, ClassifierTape) {
        let (features, trunk, trunk_width) = self.features(x, e, true);
        let (logits, head) = self.head.forward(&features);
        (logits, ClassifierTape { trunk, head, trunk_width })
    }

    pub fn infer(&self, x: Option<&Tensor>, e: Option<&Tensor>) -> Tensor {
        let (features, _, _) = self.features(x, e, false);
        self.head.infer(&features)
    }

    fn features(
        &self,
        x: Option<&Tensor>,
        e: Option<&Tensor>,
        record: bool,
    ) -> (Tensor, Option<Tape>, usize) {
        match self.input {
            ClassifierInput::Code => (e.expect("code-space classifier needs e").clone(), None, 0),
            ClassifierInput::Sample | ClassifierInput::SampleAndCode => {
                let x = x.expect("sample-space classifier needs x");
                let (h, tape) = if record {
                    let (h, t) = self.trunk.forward(x);
                    (h, Some(t))
                } else {
                    (self.trunk.infer(x), None)
                };
                let w = h.row_len();
                let h = if self.input == ClassifierInput::SampleAndCode {
                    Tensor::concat_cols(&[&h, e.expect("classifier consumes e")]).expect("concat")
                } else {
                    h
                };
                (h, tape, w)
            }
        }
    }

    /// Per-factor logits.
    pub fn split(&self, logits: &Tensor) -> Vec<Tensor> {
        logits.split_cols(&self.heads).expect("head widths")
    }

    /// Backpropagates logit gradients, accumulating parameter gradients. Returns `(dx, de)`.
    pub fn backward(&mut self, tape: ClassifierTape, d_logits: Tensor) -> (Option<Tensor>, Option<Tensor>) {
        let df = self.head.backward(tape.head, d_logits);
        self.route_back(tape.trunk, tape.trunk_width, df, true)
    }

    /// As [`Classifier::backward`] but leaves parameter gradients untouched.
    pub fn backward_input(
        &mut self,
        tape: ClassifierTape,
        d_logits: Tensor,
    ) -> (Option<Tensor>, Option<Tensor>) {
        let df = self.head.backward_input(tape.head, d_logits);
        self.route_back(tape.trunk, tape.trunk_width, df, false)
    }

    fn route_back(
        &mut self,
        trunk: Option<Tape>,
        width: usize,
        df: Tensor,
        params: bool,
    ) -> (Option<Tensor>, Option<Tensor>) {
        match self.input {
            ClassifierInput::Code => (None, Some(df)),
            ClassifierInput::Sample | ClassifierInput::SampleAndCode => {
                let (dh, de) = if self.input == ClassifierInput::SampleAndCode {
                    let mut parts = df.split_cols(&[width, self.code_dim]).expect("split").into_iter();
                    (parts.next().unwrap(), parts.next())
                } else {
                    (df, None)
                };
                let tape = trunk.expect("trunk tape");
                let dx =
                    if params { self.trunk.backward(tape, dh) } else { self.trunk.backward_input(tape, dh) };
                (Some(dx), de)
            }
        }
    }
}

impl Module for Classifier {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut p = prefixed("trunk", self.trunk.params());
        p.extend(prefixed("head", self.head.params()));
        p
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut p = prefixed_mut("trunk", self.trunk.params_mut());
        p.extend(prefixed_mut("head", self.head.params_mut()));
        p
    }
}

/// Stage I networks: unknown encoder E, label embedders B_i, generator G_I, classifier C.
#[derive(Clone, Debug)]
pub struct StageOneModels {
    pub plan: ArchPlan,
    pub encoder: Encoder,
    pub embedders: Vec<Embedding>,
    pub generator: Sequential,
    pub classifier: Classifier,
}

impl StageOneModels {
    pub fn generator_input_dim(&self) -> usize {
        self.encoder.code_dim + self.embedders.iter().map(|b| b.code_dim).sum::<usize>()
    }
}

impl Module for StageOneModels {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut p = prefixed("encoder", self.encoder.params());
        p.extend(prefixed("embedders", self.embedders.params()));
        p.extend(prefixed("generator", self.generator.params()));
        p.extend(prefixed("classifier", self.classifier.params()));
        p
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut p = prefixed_mut("encoder", self.encoder.params_mut());
        p.extend(prefixed_mut("embedders", self.embedders.params_mut()));
        p.extend(prefixed_mut("generator", self.generator.params_mut()));
        p.extend(prefixed_mut("classifier", self.classifier.params_mut()));
        p
    }
}

pub fn build_stage1(
    plan: &ArchPlan,
    factors: &FactorSet,
    ablation: &Ablation,
    rng: &mut impl Rng,
) -> StageOneModels {
    let d_u = factors.unknown().code_dim;
    let encoder = plan.encoder(d_u, rng);
    let embedders: Vec<Embedding> =
        factors.labeled().map(|s| Embedding::new(s.classes(), s.code_dim, rng)).collect();
    let in_dim = d_u + factors.labeled().map(|s| s.code_dim).sum::<usize>();
    let generator = plan.generator(in_dim, rng);
    let input = if ablation.code_space_classifier {
        ClassifierInput::Code
    } else if ablation.classifier_uses_unknown_code {
        ClassifierInput::SampleAndCode
    } else {
        ClassifierInput::Sample
    };
    let heads = factors.labeled().map(|s| s.classes()).collect();
    let classifier = plan.classifier(input, d_u, heads, rng);
    StageOneModels { plan: plan.clone(), encoder, embedders, generator, classifier }
}

/// Stage II networks: frozen E, labeled encoders S_i, generator G_Π, classifier R, discriminator D.
#[derive(Clone, Debug)]
pub struct StageTwoModels {
    pub plan: ArchPlan,
    pub encoder: FrozenEncoder,
    pub label_encoders: Vec<Encoder>,
    pub generator: Sequential,
    pub recognizer: Classifier,
    pub discriminator: Sequential,
}

impl StageTwoModels {
    /// Trainable networks only; the frozen encoder is stored separately.
    pub fn trainable_params(&self) -> Vec<(String, &Param)> {
        let mut p = prefixed("label_encoders", self.label_encoders.params());
        p.extend(prefixed("generator", self.generator.params()));
        p.extend(prefixed("recognizer", self.recognizer.params()));
        p.extend(prefixed("discriminator", self.discriminator.params()));
        p
    }

    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut p = prefixed_mut("label_encoders", self.label_encoders.params_mut());
        p.extend(prefixed_mut("generator", self.generator.params_mut()));
        p.extend(prefixed_mut("recognizer", self.recognizer.params_mut()));
        p.extend(prefixed_mut("discriminator", self.discriminator.params_mut()));
        p
    }
}

/// Builds Stage II around an already trained unknown encoder, which is frozen.
pub fn build_stage2(
    plan: &ArchPlan,
    factors: &FactorSet,
    encoder: Encoder,
    rng: &mut impl Rng,
) -> Result<StageTwoModels> {
    if encoder.code_dim != factors.unknown().code_dim {
        return Err(Error::Checkpoint(format!(
            "stage I encoder emits {} dims, config declares {} for `{}`",
            encoder.code_dim,
            factors.unknown().code_dim,
            factors.unknown().name
        )));
    }
    let reference =
        plan.encoder(encoder.code_dim, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let shapes_match = reference.params().len() == encoder.params().len()
        && reference.params().iter().zip(encoder.params()).all(|((_, a), (_, b))| a.shape == b.shape);
    if !shapes_match {
        return Err(Error::Checkpoint(format!(
            "stage I encoder does not match the {}-pixel architecture",
            plan.image_size
        )));
    }
    let label_encoders = factors.labeled().map(|s| plan.encoder(s.code_dim, rng)).collect();
    let in_dim = encoder.code_dim + factors.labeled().map(|s| s.code_dim).sum::<usize>();
    let generator = plan.generator(in_dim, rng);
    let heads = factors.labeled().map(|s| s.classes()).collect();
    let recognizer = plan.classifier(ClassifierInput::Sample, 0, heads, rng);
    let discriminator = plan.discriminator(rng);
    Ok(StageTwoModels {
        plan: plan.clone(),
        encoder: FrozenEncoder::new(encoder),
        label_encoders,
        generator,
        recognizer,
        discriminator,
    })
}
