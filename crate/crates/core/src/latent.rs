//! Diagonal-Gaussian codes and reparameterized sampling.
//!
//! Encoders emit `(mean, ln sigma^2)`. Finite log-variances are clamped to
//! `[LOG_VAR_MIN, LOG_VAR_MAX]` whenever they are used; a log-variance of exactly `-inf`
//! is accepted as an explicit point mass and samples to the mean.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f32 = -12.0;
pub const LOG_VAR_MAX: f32 = 12.0;

/// Clamps a log-variance and reports whether it was inside the clamp range (for gradients).
pub(crate) fn clamp_log_var_checked(lv: f32) -> (f32, bool) {
    if lv < LOG_VAR_MIN {
        (LOG_VAR_MIN, false)
    } else if lv > LOG_VAR_MAX {
        (LOG_VAR_MAX, false)
    } else {
        (lv, true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f32>,
    log_variance: Vec<f32>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f32>, log_variance: Vec<f32>) -> Result<Self> {
        if mean.is_empty() || mean.len() != log_variance.len() {
            return Err(Error::Shape(format!(
                "gaussian mean has {} entries, log-variance {}",
                mean.len(),
                log_variance.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite())
            || log_variance.iter().any(|v| v.is_nan() || *v == f32::INFINITY)
        {
            return Err(Error::InvalidDistribution("non-finite gaussian parameters".into()));
        }
        Ok(DiagonalGaussian { mean, log_variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn log_variance(&self) -> &[f32] {
        &self.log_variance
    }

    pub(crate) fn clamp_log_var(&self, lv: f32) -> f32 {
        clamp_log_var_checked(lv).0
    }

    fn std_dev(&self, lv: f32) -> f32 {
        if lv == f32::NEG_INFINITY {
            0.0
        } else {
            (0.5 * self.clamp_log_var(lv)).exp()
        }
    }

    /// `mean + sigma * z`, `z ~ N(0, I)` drawn from `rng`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f32> {
        self.mean
            .iter()
            .zip(&self.log_variance)
            .map(|(&m, &lv)| {
                let z: f32 = StandardNormal.sample(rng);
                m + self.std_dev(lv) * z
            })
            .collect()
    }

    pub fn mean_only(&self) -> Vec<f32> {
        self.mean.clone()
    }
}

/// A batch of diagonal Gaussians, as produced by an encoder on `[B, ...]` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBatch {
    pub mean: Tensor,
    pub log_var: Tensor,
}

/// A reparameterized draw, remembering the noise needed to backpropagate through it.
#[derive(Clone, Debug)]
pub struct CodeSample {
    pub code: Tensor,
    noise: Tensor,
}

impl GaussianBatch {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.shape() != log_var.shape() || mean.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "gaussian batch mean {:?} vs log-variance {:?}",
                mean.shape(),
                log_var.shape()
            )));
        }
        Ok(GaussianBatch { mean, log_var })
    }

    /// Splits a `[B, 2d]` encoder head into means (first `d`) and log-variances.
    pub fn from_head(head: &Tensor) -> Result<Self> {
        let d2 = head.row_len();
        if !d2.is_multiple_of(2) {
            return Err(Error::Shape(format!("encoder head width {d2} is odd")));
        }
        let parts = head.split_cols(&[d2 / 2, d2 / 2])?;
        let mut it = parts.into_iter();
        GaussianBatch::new(it.next().unwrap(), it.next().unwrap())
    }

    /// Inverse of [`GaussianBatch::from_head`] for gradients.
    pub fn head_grad(d_mean: &Tensor, d_log_var: &Tensor) -> Tensor {
        Tensor::concat_cols(&[d_mean, d_log_var]).expect("matching gradient shapes")
    }

    pub fn batch(&self) -> usize {
        self.mean.batch()
    }

    pub fn dim(&self) -> usize {
        self.mean.row_len()
    }

    pub fn get(&self, i: usize) -> DiagonalGaussian {
        DiagonalGaussian { mean: self.mean.row(i).to_vec(), log_variance: self.log_var.row(i).to_vec() }
    }

    pub fn select_rows(&self, idx: &[usize]) -> GaussianBatch {
        GaussianBatch { mean: self.mean.select_rows(idx), log_var: self.log_var.select_rows(idx) }
    }

    /// One reparameterized sample per row.
    pub fn sample(&self, rng: &mut impl Rng) -> CodeSample {
        let noise = Tensor::new(
            self.mean.shape().to_vec(),
            (0..self.mean.len()).map(|_| StandardNormal.sample(rng)).collect(),
        )
        .expect("noise shape");
        let code = Tensor::new(
            self.mean.shape().to_vec(),
            self.mean
                .data()
                .iter()
                .zip(self.log_var.data())
                .zip(noise.data())
                .map(|((m, lv), z)| m + (0.5 * clamp_log_var_checked(*lv).0).exp() * z)
                .collect(),
        )
        .expect("code shape");
        CodeSample { code, noise }
    }

    /// Posterior means as codes (deterministic evaluation mode).
    pub fn mean_sample(&self) -> CodeSample {
        CodeSample { code: self.mean.clone(), noise: Tensor::zeros(self.mean.shape()) }
    }
}

impl CodeSample {
    /// Standard-normal codes with no encoder behind them.
    pub fn prior(batch: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let code =
            Tensor::new(vec![batch, dim], (0..batch * dim).map(|_| StandardNormal.sample(rng)).collect())
                .expect("prior shape");
        CodeSample { noise: code.clone(), code }
    }

    /// Maps `d code` to `(d mean, d log_var)` through `code = mean + exp(lv / 2) * z`.
    pub fn backward(&self, dist: &GaussianBatch, d_code: &Tensor) -> (Tensor, Tensor) {
        let d_mean = d_code.clone();
        let mut d_lv = Tensor::zeros(d_code.shape());
        for (((g, lv), z), out) in
            d_code.data().iter().zip(dist.log_var.data()).zip(self.noise.data()).zip(d_lv.data_mut())
        {
            let (lvc, inside) = clamp_log_var_checked(*lv);
            if inside {
                *out = g * 0.5 * (0.5 * lvc).exp() * z;
            }
        }
        (d_mean, d_lv)
    }

    pub fn select_rows(&self, idx: &[usize]) -> CodeSample {
        CodeSample { code: self.code.select_rows(idx), noise: self.noise.select_rows(idx) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(DiagonalGaussian::new(vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(DiagonalGaussian::new(vec![f32::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn point_mass_samples_to_mean() {
        let d = DiagonalGaussian::new(vec![1.5, -2.0], vec![f32::NEG_INFINITY; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(d.sample(&mut rng), vec![1.5, -2.0]);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let d = DiagonalGaussian::new(vec![0.0; 4], vec![0.3; 4]).unwrap();
        let a = d.sample(&mut ChaCha8Rng::seed_from_u64(42));
        let b = d.sample(&mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_mean_matches() {
        let d = DiagonalGaussian::new(vec![2.0], vec![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| d.sample(&mut rng)[0] as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.02, "{mean}");
        assert_eq!(d.mean_only(), vec![2.0]);
    }

    #[test]
    fn mean_only_ignores_variance() {
        let d = DiagonalGaussian::new(vec![1.0, 2.0], vec![3.0, -1.0]).unwrap();
        assert_eq!(d.mean_only(), vec![1.0, 2.0]);
        let d = DiagonalGaussian::new(vec![0.0], vec![5f32.ln()]).unwrap();
        assert_eq!(d.mean_only(), vec![0.0]);
    }

    #[test]
    fn sampling_respects_log_variance_clamp() {
        // lv = 40 would give sigma ~ 5e8; the clamp bounds it by exp(6) ~ 403.
        let d = DiagonalGaussian::new(vec![0.0], vec![40.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert!(d.sample(&mut rng)[0].abs() < 403.5 * 6.0);
        }
    }

    #[test]
    fn reparameterization_gradient_matches_monte_carlo_difference() {
        // f(c) = sin(c) + c^2 / 4; d/dmu E[f(mu + sigma z)] by common-random-number
        // finite differences versus the pathwise gradient averaged over the same draws.
        let f = |c: f64| c.sin() + c * c / 4.0;
        let df = |c: f64| c.cos() + c / 2.0;
        let (mu, lv) = (0.4f32, -0.6f32);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let zs: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let sigma = (0.5 * lv).exp();
        let h = 1e-2f32;
        let mut fd = 0.0;
        let mut path = 0.0;
        for &z in &zs {
            let c = (mu + sigma * z) as f64;
            fd += (f((mu + h + sigma * z) as f64) - f((mu - h + sigma * z) as f64)) / (2.0 * h as f64);
            let g = GaussianBatch::new(
                Tensor::new(vec![1, 1], vec![mu]).unwrap(),
                Tensor::new(vec![1, 1], vec![lv]).unwrap(),
            )
            .unwrap();
            let s = CodeSample {
                code: Tensor::new(vec![1, 1], vec![c as f32]).unwrap(),
                noise: Tensor::new(vec![1, 1], vec![z]).unwrap(),
            };
            let (dm, _) = s.backward(&g, &Tensor::new(vec![1, 1], vec![df(c) as f32]).unwrap());
            path += dm.data()[0] as f64;
        }
        assert!((fd / n as f64 - path / n as f64).abs() < 1e-3);
    }

    #[test]
    fn log_variance_gradient_matches_finite_difference() {
        let mean = Tensor::new(vec![1, 3], vec![0.1, -0.3, 0.5]).unwrap();
        let lv = Tensor::new(vec![1, 3], vec![-0.4, 0.2, 1.0]).unwrap();
        let g = GaussianBatch::new(mean.clone(), lv.clone()).unwrap();
        let s = g.sample(&mut ChaCha8Rng::seed_from_u64(5));
        let w = Tensor::new(vec![1, 3], vec![0.7, -1.1, 0.4]).unwrap();
        let (_, dlv) = s.backward(&g, &w);
        let objective = |lv: &Tensor| -> f64 {
            let g2 = GaussianBatch::new(mean.clone(), lv.clone()).unwrap();
            let s2 = g2.sample(&mut ChaCha8Rng::seed_from_u64(5));
            s2.code.data().iter().zip(w.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        for j in 0..3 {
            let mut p = lv.clone();
            p.data_mut()[j] += 1e-3;
            let mut m = lv.clone();
            m.data_mut()[j] -= 1e-3;
            let fd = (objective(&p) - objective(&m)) / 2e-3;
            assert!((fd - dlv.data()[j] as f64).abs() < 1e-3);
        }
    }
}
