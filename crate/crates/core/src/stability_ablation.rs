//! The two Stage I variants used to study adversarial stability: an NLL-maximizing adversary
//! and a classifier that reads the unknown code instead of generated samples.

use rand::Rng;

use crate::config::Ablation;
use crate::error::Result;
use crate::factors::LabelBatch;
use crate::stage1::{StageOneLosses, StageOneTrainer};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adversary {
    /// Minimize the class-weighted negative log-unlikelihood (standard).
    NluWeighted,
    /// Maximize the classifier's negative log-likelihood.
    MaximizeNll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierDomain {
    /// Classify mismatched generated samples (standard).
    SampleSpace,
    /// Classify the sampled unknown code with a 4×512 MLP.
    CodeSpace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StabilityVariant {
    pub adversary: Adversary,
    pub domain: ClassifierDomain,
}

impl StabilityVariant {
    pub const STANDARD: StabilityVariant =
        StabilityVariant { adversary: Adversary::NluWeighted, domain: ClassifierDomain::SampleSpace };
    pub const MAXIMIZE_NLL: StabilityVariant =
        StabilityVariant { adversary: Adversary::MaximizeNll, domain: ClassifierDomain::SampleSpace };
    pub const CODE_SPACE: StabilityVariant =
        StabilityVariant { adversary: Adversary::NluWeighted, domain: ClassifierDomain::CodeSpace };

    pub fn from_ablation(a: &Ablation) -> Self {
        StabilityVariant {
            adversary: if a.maximize_nll { Adversary::MaximizeNll } else { Adversary::NluWeighted },
            domain: if a.code_space_classifier {
                ClassifierDomain::CodeSpace
            } else {
                ClassifierDomain::SampleSpace
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.adversary, self.domain) {
            (Adversary::NluWeighted, ClassifierDomain::SampleSpace) => "standard",
            (Adversary::MaximizeNll, ClassifierDomain::SampleSpace) => "maximize_nll",
            (Adversary::NluWeighted, ClassifierDomain::CodeSpace) => "code_space",
            (Adversary::MaximizeNll, ClassifierDomain::CodeSpace) => "code_space_maximize_nll",
        }
    }
}

/// One Stage I alternation under `variant`. The trainer's classifier must have been built for
/// the variant's domain.
pub fn stage1_variant_step(
    trainer: &mut StageOneTrainer,
    x: &Tensor,
    labels: &LabelBatch,
    variant: StabilityVariant,
    rng: &mut impl Rng,
    iteration: u64,
) -> Result<StageOneLosses> {
    trainer.variant = variant;
    trainer.step(x, labels, rng, iteration)
}
