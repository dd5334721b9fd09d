//! The declarative experiment file. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factors::{FactorSet, FactorSpec};
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub factors: Vec<FactorSpec>,
    pub image_size: usize,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub metrics: MetricParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `mnist`, `fashion-mnist` (IDX files) or `shapes`.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub subsample: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub correlated: bool,
    #[serde(default = "tenth")]
    pub holdout: f64,
    /// Use only the first `n` training samples (reduced profiles).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
}

fn one() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub lambda_adv1: f32,
    pub lambda_adv2: f32,
    pub lambda_kl: f32,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub stage1_iterations: u64,
    pub stage2_iterations: u64,
    pub snapshot_interval: u64,
    pub log_interval: u64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lambda_adv1: 1.0,
            lambda_adv2: 0.1,
            lambda_kl: 1e-2,
            adam: AdamConfig::default(),
            batch_size: 64,
            stage1_iterations: 50_000,
            stage2_iterations: 50_000,
            snapshot_interval: 2_000,
            log_interval: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub classifier_uses_unknown_code: bool,
    pub no_nlu_in_r: bool,
    pub no_code_dist: bool,
    pub noise_unknown: bool,
    pub code_space_classifier: bool,
    pub maximize_nll: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            classifier_uses_unknown_code: true,
            no_nlu_in_r: false,
            no_code_dist: false,
            noise_unknown: false,
            code_space_classifier: false,
            maximize_nll: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricParams {
    pub mig_bins: usize,
    /// Encode with posterior means instead of one sample per test point.
    pub mig_use_means: bool,
    pub consistency_count: usize,
    /// Ground-truth factor whose probe pixel defines the unknown feature; defaults to the
    /// unknown factor's name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_factor: Option<String>,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams { mig_bins: 20, mig_use_means: false, consistency_count: 10_000, probe_factor: None }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.factor_set()?;
        let t = &self.train;
        for (name, v) in
            [("lambda_adv1", t.lambda_adv1), ("lambda_adv2", t.lambda_adv2), ("lambda_kl", t.lambda_kl)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be a finite value >= 0")));
            }
        }
        if t.stage1_iterations == 0 || t.stage2_iterations == 0 {
            return Err(Error::Config("iteration counts must be > 0".into()));
        }
        if t.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if t.snapshot_interval == 0 || t.log_interval == 0 {
            return Err(Error::Config("snapshot and log intervals must be > 0".into()));
        }
        if ![28, 64, 128].contains(&self.image_size) {
            return Err(Error::Config(format!("image_size {} unsupported (28, 64 or 128)", self.image_size)));
        }
        if self.metrics.mig_bins < 2 {
            return Err(Error::Config("metrics.mig_bins must be >= 2".into()));
        }
        Ok(())
    }

    /// Validated factor declarations (frequencies not yet estimated).
    pub fn factor_set(&self) -> Result<FactorSet> {
        FactorSet::new(self.factors.clone())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn probe_factor(&self) -> String {
        self.metrics.probe_factor.clone().unwrap_or_else(|| {
            self.factors.iter().find(|f| !f.is_labeled()).map(|f| f.name.clone()).unwrap_or_default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MNIST: &str = r#"
image_size = 28

[dataset]
name = "mnist"

[[factors]]
name = "digit"
kind = "labeled-discrete"
num_classes = 10
code_dim = 10

[[factors]]
name = "style"
kind = "unknown"
code_dim = 64
"#;

    #[test]
    fn defaults_fill_in() {
        let c = TrainConfig::from_toml(MNIST).unwrap();
        assert_eq!(c.train.lambda_adv1, 1.0);
        assert_eq!(c.train.lambda_adv2, 0.1);
        assert_eq!(c.train.lambda_kl, 1e-2);
        assert_eq!(c.train.adam.lr, 2e-4);
        assert_eq!(c.metrics.mig_bins, 20);
        assert!(c.ablation.classifier_uses_unknown_code);
        assert_eq!(c.probe_factor(), "style");
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let bad = MNIST.replace("[dataset]", "[train]\nlamda_kl = 0.1\n\n[dataset]");
        let err = TrainConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("lamda_kl"), "{err}");
    }

    #[test]
    fn rejects_negative_lambda_and_two_unknowns() {
        let neg = MNIST.replace("[dataset]", "[train]\nlambda_kl = -1.0\n\n[dataset]");
        assert!(TrainConfig::from_toml(&neg).is_err());
        let two = MNIST.replace("labeled-discrete", "unknown");
        assert!(TrainConfig::from_toml(&two).is_err());
    }

    #[test]
    fn toml_round_trip_and_hash_stability() {
        let c = TrainConfig::from_toml(MNIST).unwrap();
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
        let mut d = c.clone();
        d.train.seed = 1;
        assert_ne!(c.hash(), d.hash());
    }
}
