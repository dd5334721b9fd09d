//! Classification likelihood/unlikelihood losses, the Gaussian KL term and least-squares
//! adversarial terms, each with its analytic gradient.
//!
//! Scalar forms work in `f64` and are unclamped so they can be checked against
//! independent oracles. Batched forms (`*_batch`) are what training uses: they take raw
//! classifier logits, clamp probabilities to `[EPS, 1 - EPS]` before any logarithm and
//! return the batch-mean loss together with its gradient with respect to the logits.

use crate::error::{Error, Result};
use crate::latent::{DiagonalGaussian, GaussianBatch};
use crate::tensor::Tensor;

/// Probability clamp applied before logarithms in the training-time losses.
pub const EPS: f64 = 1e-7;

const SUM_TOL: f64 = 1e-6;

/// A categorical distribution over `m` classes, optionally remembering its logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
    logits: Option<Vec<f64>>,
}

impl ClassDistribution {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "negative or non-finite probability in {probs:?}"
            )));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {s}")));
        }
        Ok(ClassDistribution { probs, logits: None })
    }

    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidDistribution("logits must be finite and non-empty".into()));
        }
        Ok(ClassDistribution { probs: softmax(&logits), logits: Some(logits) })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    fn prob(&self, k: usize) -> Result<f64> {
        self.probs.get(k).copied().ok_or(Error::IndexOutOfRange { index: k, classes: self.probs.len() })
    }
}

/// Class frequencies of a labeled factor in the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceDistribution {
    q: Vec<f64>,
}

impl ReferenceDistribution {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() || q.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "reference distribution needs strictly positive entries, got {q:?}"
            )));
        }
        let s: f64 = q.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!("reference sums to {s}")));
        }
        Ok(ReferenceDistribution { q })
    }

    pub fn uniform(m: usize) -> Self {
        ReferenceDistribution { q: vec![1.0 / m as f64; m] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// `(1 - q_k) / q_k`.
    pub fn weight(&self, k: usize) -> Result<f64> {
        let qk = *self.q.get(k).ok_or(Error::IndexOutOfRange { index: k, classes: self.q.len() })?;
        Ok((1.0 - qk) / qk)
    }
}

pub fn softmax(t: &[f64]) -> Vec<f64> {
    let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = t.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-ln p_k`; `+inf` when `p_k = 0`.
pub fn nll(p: &ClassDistribution, k: usize) -> Result<f64> {
    Ok(-p.prob(k)?.ln())
}

/// `-ln(1 - p_k)`; `+inf` when `p_k = 1`.
pub fn nlu(p: &ClassDistribution, k: usize) -> Result<f64> {
    if p.num_classes() < 2 {
        return Err(Error::InvalidDistribution("unlikelihood needs at least two classes".into()));
    }
    let pk = p.prob(k)?;
    // 1 - p_k evaluated as the mass of the other classes keeps precision near p_k = 1.
    let rest: f64 = p.probs.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, v)| v).sum();
    let rest = if pk == 0.0 { 1.0 } else { rest.min(1.0 - pk).max(0.0) };
    Ok(-rest.ln())
}

/// `-((1 - q_k) / q_k) ln(1 - p_k)`.
pub fn nlu_weighted(p: &ClassDistribution, k: usize, q: &ReferenceDistribution) -> Result<f64> {
    if q.len() != p.num_classes() {
        return Err(Error::InvalidDistribution(format!(
            "reference has {} classes, distribution has {}",
            q.len(),
            p.num_classes()
        )));
    }
    let w = q.weight(k)?;
    let v = nlu(p, k)?;
    Ok(if v == 0.0 { 0.0 } else { w * v })
}

fn check_class(t: &[f64], k: usize) -> Result<()> {
    if k >= t.len() {
        return Err(Error::IndexOutOfRange { index: k, classes: t.len() });
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDistribution("non-finite logits".into()));
    }
    Ok(())
}

/// Gradient of `nll(softmax(t), k)` with respect to `t`: `softmax(t)_i - [i == k]`.
pub fn nll_grad_logits(t: &[f64], k: usize) -> Result<Vec<f64>> {
    check_class(t, k)?;
    let mut g = softmax(t);
    g[k] -= 1.0;
    Ok(g)
}

/// Gradient of `nlu(softmax(t), k)` with respect to `t`:
/// `s_k` at `i == k`, and `-s_k s_i / (1 - s_k)` elsewhere.
pub fn nlu_grad_logits(t: &[f64], k: usize) -> Result<Vec<f64>> {
    check_class(t, k)?;
    let s = softmax(t);
    let rest: f64 = s.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, v)| v).sum();
    if rest <= f64::EPSILON {
        return Err(Error::Saturated { class: k, prob: s[k] });
    }
    Ok(s.iter().enumerate().map(|(i, &si)| if i == k { s[k] } else { -s[k] * si / rest }).collect())
}

/// Gradient of `nlu_weighted(softmax(t), k, q)` with respect to `t`.
pub fn nlu_weighted_grad_logits(t: &[f64], k: usize, q: &ReferenceDistribution) -> Result<Vec<f64>> {
    let w = q.weight(k)?;
    Ok(nlu_grad_logits(t, k)?.into_iter().map(|g| w * g).collect())
}

/// `KL(N(mu, diag(sigma^2)) || N(0, I))`.
pub fn kl_standard_normal(d: &DiagonalGaussian) -> Result<f64> {
    let mut kl = 0.0;
    for (&m, &lv) in d.mean().iter().zip(d.log_variance()) {
        if lv == f32::NEG_INFINITY {
            return Err(Error::InvalidDistribution("KL needs strictly positive variance".into()));
        }
        let lv = d.clamp_log_var(lv) as f64;
        let m = m as f64;
        kl += 0.5 * (m * m + lv.exp() - 1.0 - lv);
    }
    Ok(kl)
}

/// `((d_real - 1)^2 + (d_fake + 1)^2, d_fake^2)`: discriminator loss and the generator's
/// adversarial term.
pub fn lsgan_terms(d_real: f64, d_fake: f64) -> (f64, f64) {
    ((d_real - 1.0).powi(2) + (d_fake + 1.0).powi(2), d_fake.powi(2))
}

/// Which classification penalty a batched loss applies.
#[derive(Clone, Copy, Debug)]
pub enum ClassPenalty<'a> {
    /// `-ln p_k`
    Likelihood,
    /// `-ln(1 - p_k)`
    Unlikelihood,
    /// `-((1 - q_k)/q_k) ln(1 - p_k)`
    WeightedUnlikelihood(&'a ReferenceDistribution),
}

/// Batch-mean classification penalty over logits `[B, m]`; returns the loss and its gradient
/// with respect to the logits, scaled by `scale / B`.
pub fn class_penalty_batch(
    logits: &Tensor,
    labels: &[usize],
    penalty: ClassPenalty<'_>,
    scale: f32,
) -> (f64, Tensor) {
    let b = logits.batch();
    let m = logits.row_len();
    assert_eq!(labels.len(), b, "one label per row");
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (i, &k) in labels.iter().enumerate() {
        let t: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
        let s = softmax(&t);
        assert!(k < m, "label {k} out of range for {m} classes");
        let rest: f64 = s.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| v).sum();
        let g = grad.row_mut(i);
        match penalty {
            ClassPenalty::Likelihood => {
                total += -s[k].max(EPS).ln();
                for (j, gj) in g.iter_mut().enumerate() {
                    let d = s[j] - if j == k { 1.0 } else { 0.0 };
                    *gj = (d * scale as f64 / b as f64) as f32;
                }
            }
            ClassPenalty::Unlikelihood | ClassPenalty::WeightedUnlikelihood(_) => {
                let w = match penalty {
                    ClassPenalty::WeightedUnlikelihood(q) => {
                        q.weight(k).expect("reference covers every class")
                    }
                    _ => 1.0,
                };
                let denom = rest.max(EPS);
                total += -w * denom.ln();
                for (j, gj) in g.iter_mut().enumerate() {
                    let d = if j == k { s[k] * rest / denom } else { -s[k] * s[j] / denom };
                    *gj = (w * d * scale as f64 / b as f64) as f32;
                }
            }
        }
    }
    (total / b as f64, grad)
}

/// Batch-mean KL of `N(mean, exp(log_var))` against the standard normal, and its gradient
/// `(d_mean, d_log_var)` scaled by `scale / B`.
pub fn kl_batch(g: &GaussianBatch, scale: f32) -> (f64, Tensor, Tensor) {
    let b = g.batch() as f32;
    let mut d_mean = Tensor::zeros(g.mean.shape());
    let mut d_lv = Tensor::zeros(g.log_var.shape());
    let mut total = 0.0f64;
    for (((m, lv), dm), dlv) in
        g.mean.data().iter().zip(g.log_var.data()).zip(d_mean.data_mut()).zip(d_lv.data_mut())
    {
        let (lvc, inside) = crate::latent::clamp_log_var_checked(*lv);
        let var = lvc.exp();
        total += 0.5 * ((*m as f64).powi(2) + var as f64 - 1.0 - lvc as f64);
        *dm = scale * m / b;
        *dlv = if inside { scale * 0.5 * (var - 1.0) / b } else { 0.0 };
    }
    (total / b as f64, d_mean, d_lv)
}

/// Batch-mean squared error `||a - b||^2` (summed over each row), with gradient with respect
/// to `a` scaled by `scale / B`.
pub fn squared_error_batch(a: &Tensor, b: &Tensor, scale: f32) -> (f64, Tensor) {
    assert_eq!(a.shape(), b.shape());
    let n = a.batch() as f32;
    let mut grad = Tensor::zeros(a.shape());
    let mut total = 0.0f64;
    for ((x, y), g) in a.data().iter().zip(b.data()).zip(grad.data_mut()) {
        let d = x - y;
        total += (d as f64) * (d as f64);
        *g = scale * 2.0 * d / n;
    }
    (total / n as f64, grad)
}

/// Batch-mean of `(d - target)^2` over a `[B, 1]` output, with gradient scaled by `scale / B`.
pub fn least_squares_batch(d: &Tensor, target: f32, scale: f32) -> (f64, Tensor) {
    let n = d.batch() as f32;
    let mut grad = Tensor::zeros(d.shape());
    let mut total = 0.0f64;
    for (v, g) in d.data().iter().zip(grad.data_mut()) {
        let e = v - target;
        total += (e as f64) * (e as f64);
        *g = scale * 2.0 * e / n;
    }
    (total / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(v: &[f64]) -> ClassDistribution {
        ClassDistribution::from_probs(v.to_vec()).unwrap()
    }

    #[test]
    fn nll_examples() {
        assert!((nll(&p(&[0.5, 0.5]), 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(nll(&p(&[0.0, 1.0]), 1).unwrap(), 0.0);
        assert!((nll(&p(&[0.1, 0.2, 0.7]), 2).unwrap() - 0.356675).abs() < 1e-6);
        assert_eq!(nll(&p(&[0.0, 1.0]), 0).unwrap(), f64::INFINITY);
        assert!(matches!(nll(&p(&[0.5, 0.5]), 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn nlu_examples() {
        assert!((nlu(&p(&[0.5, 0.5]), 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(nlu(&p(&[1.0, 0.0]), 1).unwrap(), 0.0);
        assert!((nlu(&p(&[0.2, 0.3, 0.5]), 2).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(nlu(&p(&[1.0, 0.0]), 0).unwrap(), f64::INFINITY);
        assert!(nlu(&p(&[1.0]), 0).is_err());
    }

    #[test]
    fn weighted_nlu_examples() {
        let q = ReferenceDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!((nlu_weighted(&p(&[0.5, 0.5]), 0, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let q = ReferenceDistribution::new(vec![0.9, 0.1]).unwrap();
        let v = nlu_weighted(&p(&[0.9, 0.1]), 1, &q).unwrap();
        assert!((v - 0.948245).abs() < 1e-6, "{v}");
        assert_eq!(nlu_weighted(&p(&[1.0, 0.0]), 1, &q).unwrap(), 0.0);
    }

    #[test]
    fn reference_rejects_zero_class() {
        assert!(ReferenceDistribution::new(vec![1.0, 0.0]).is_err());
        assert!(ReferenceDistribution::new(vec![0.6, 0.6]).is_err());
    }

    #[test]
    fn class_distribution_validates() {
        assert!(ClassDistribution::from_probs(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::from_probs(vec![-0.1, 1.1]).is_err());
        let d = ClassDistribution::from_logits(vec![1.0, 2.0, 3.0]).unwrap();
        let s: f64 = d.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(d.logits().unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn gradient_examples() {
        let g = nll_grad_logits(&[0.0, 0.0], 0).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
        let g = nll_grad_logits(&[0.0, 0.0, 0.0], 1).unwrap();
        for (a, b) in g.iter().zip([1.0 / 3.0, -2.0 / 3.0, 1.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = nlu_grad_logits(&[0.0, 0.0], 0).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
        let g = nlu_grad_logits(&[0.0, 0.0, 0.0], 0).unwrap();
        for (a, b) in g.iter().zip([1.0 / 3.0, -1.0 / 6.0, -1.0 / 6.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nlu_gradient_saturates() {
        assert!(matches!(nlu_grad_logits(&[800.0, 0.0], 0), Err(Error::Saturated { class: 0, .. })));
    }

    #[test]
    fn kl_examples() {
        let kl = |m: Vec<f32>, v: Vec<f32>| {
            let lv = v.iter().map(|x| x.ln()).collect();
            kl_standard_normal(&DiagonalGaussian::new(m, lv).unwrap()).unwrap()
        };
        assert_eq!(kl(vec![0.0], vec![1.0]), 0.0);
        assert!((kl(vec![1.0], vec![1.0]) - 0.5).abs() < 1e-12);
        assert_eq!(kl(vec![0.0, 0.0], vec![1.0, 1.0]), 0.0);
        let degenerate = DiagonalGaussian::new(vec![0.0], vec![f32::NEG_INFINITY]).unwrap();
        assert!(kl_standard_normal(&degenerate).is_err());
    }

    #[test]
    fn lsgan_examples() {
        assert_eq!(lsgan_terms(1.0, -1.0), (0.0, 1.0));
        assert_eq!(lsgan_terms(0.0, 0.0), (2.0, 0.0));
        assert_eq!(lsgan_terms(0.5, 0.25), (1.8125, 0.0625));
    }

    #[test]
    fn batched_penalties_agree_with_scalar_forms() {
        let logits = Tensor::new(vec![2, 3], vec![0.1, -0.4, 1.2, 2.0, 0.0, -1.0]).unwrap();
        let labels = [2usize, 1];
        let q = ReferenceDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        for penalty in
            [ClassPenalty::Likelihood, ClassPenalty::Unlikelihood, ClassPenalty::WeightedUnlikelihood(&q)]
        {
            let (v, g) = class_penalty_batch(&logits, &labels, penalty, 2.0);
            let mut want = 0.0;
            for (i, &k) in labels.iter().enumerate() {
                let t: Vec<f64> = logits.row(i).iter().map(|&x| x as f64).collect();
                let d = ClassDistribution::from_logits(t.clone()).unwrap();
                let (val, grad) = match penalty {
                    ClassPenalty::Likelihood => (nll(&d, k).unwrap(), nll_grad_logits(&t, k).unwrap()),
                    ClassPenalty::Unlikelihood => (nlu(&d, k).unwrap(), nlu_grad_logits(&t, k).unwrap()),
                    ClassPenalty::WeightedUnlikelihood(q) => {
                        (nlu_weighted(&d, k, q).unwrap(), nlu_weighted_grad_logits(&t, k, q).unwrap())
                    }
                };
                want += val / 2.0;
                for (a, b) in g.row(i).iter().zip(grad) {
                    assert!((*a as f64 - b).abs() < 1e-6);
                }
            }
            assert!((v - want).abs() < 1e-9);
        }
    }

    #[test]
    fn clamped_losses_stay_finite_at_saturation() {
        let logits = Tensor::new(vec![1, 2], vec![200.0, -200.0]).unwrap();
        let (v, g) = class_penalty_batch(&logits, &[1], ClassPenalty::Likelihood, 1.0);
        assert!(v.is_finite() && g.all_finite());
        let (v, g) = class_penalty_batch(&logits, &[0], ClassPenalty::Unlikelihood, 1.0);
        assert!(v.is_finite() && g.all_finite());
        assert!((v - -(EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn nlu_is_bounded_where_nll_is_not() {
        let eps = 1e-3;
        let d = p(&[eps / 2.0, 1.0 - eps / 2.0]);
        assert!(nll(&d, 0).unwrap() > -(eps.ln()));
        let d = p(&[1.0 - eps, eps]);
        assert!(nlu(&d, 0).unwrap() <= -(eps.ln()) + 1e-9);
    }

    proptest! {
        #[test]
        fn logit_gradients_sum_to_zero(t in prop::collection::vec(-8.0f64..8.0, 2..12), k in 0usize..12) {
            let k = k % t.len();
            let a: f64 = nll_grad_logits(&t, k).unwrap().iter().sum();
            let b: f64 = nlu_grad_logits(&t, k).unwrap().iter().sum();
            prop_assert!(a.abs() < 1e-12);
            prop_assert!(b.abs() < 1e-9);
        }

        #[test]
        fn uniform_reference_scales_nlu_by_m_minus_one(
            t in prop::collection::vec(-4.0f64..4.0, 2..10), k in 0usize..10
        ) {
            let k = k % t.len();
            let m = t.len();
            let d = ClassDistribution::from_logits(t).unwrap();
            let q = ReferenceDistribution::uniform(m);
            let w = nlu_weighted(&d, k, &q).unwrap();
            let u = nlu(&d, k).unwrap();
            prop_assert!((w - (m as f64 - 1.0) * u).abs() < 1e-9 * (1.0 + w.abs()));
        }
    }
}
