//! Evaluation metrics. All of them are pure functions of tensors and labels; model-level
//! drivers live in [`crate::eval`].

pub mod consistency;
pub mod mig;
pub mod projection;
pub mod stability;

pub use consistency::{consistency_ratio, palette_threshold, probe_colors};
pub use mig::{mig, mig_with_owners, MIMatrix, MIN_POINTS};
pub use projection::{chance_level, nearest_centroid_accuracy, project_top2};
pub use stability::{stability_track, StabilityTrace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel MSE on the [0, 1] scale for two image batches stored in [-1, 1].
pub fn reconstruction_mse(x: &Tensor, recon: &Tensor) -> Result<f64> {
    if x.shape() != recon.shape() || x.is_empty() {
        return Err(Error::Metric(format!("reconstruction {:?} vs input {:?}", recon.shape(), x.shape())));
    }
    let s: f64 = x.data().iter().zip(recon.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    Ok(s / x.len() as f64 / 4.0)
}

/// One named metric value, written as `name,value` CSV rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub checkpoint: String,
    pub values: Vec<MetricValue>,
}

impl MetricsReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.values.push(MetricValue { name: name.into(), value });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|v| v.name == name).map(|v| v.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for v in &self.values {
            s.push_str(&format!("{},{}\n", v.name, v.value));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.values.iter().map(|v| v.name.len()).max().unwrap_or(0);
        let mut s = format!("config {}\ncheckpoint {}\n", self.config_hash, self.checkpoint);
        for v in &self.values {
            s.push_str(&format!("{:width$}  {:.6}\n", v.name, v.value));
        }
        s
    }
}
