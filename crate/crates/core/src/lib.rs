//! Two-stage weakly supervised disentanglement: Stage I distills everything the labels do
//! not explain into one unknown code, Stage II trains a generator conditioned on every factor.
//!
//! The crate carries its own small CPU neural-network engine ([`nn`], [`tensor`]), the loss
//! family ([`losses`]), the two trainers ([`stage1`], [`stage2`]), metrics, datasets and the
//! run plumbing used by the `distill` binary.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod factors;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod netfactory;
pub mod nn;
pub mod pipeline;
pub mod stability_ablation;
pub mod stage1;
pub mod stage2;
pub mod tensor;

pub use config::TrainConfig;
pub use error::{Error, ErrorCategory, Result};
pub use factors::{FactorKind, FactorSet, FactorSpec, LabelBatch};
pub use metrics::MetricsReport;
pub use tensor::Tensor;
