//! Drift of the code space between training snapshots.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StabilityTrace {
    /// `(iteration of the later snapshot, mean squared displacement)`.
    pub points: Vec<(u64, f64)>,
}

impl StabilityTrace {
    pub fn median(&self) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = self.points.iter().map(|p| p.1).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

/// Mean over samples of `||a_i - b_i||^2` for two `[N, d]` code matrices.
pub fn mean_squared_displacement(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.batch() == 0 {
        return Err(Error::Metric(format!("snapshot codes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    Ok(total / a.batch() as f64)
}

/// Consecutive displacements of posterior means, one snapshot per `(iteration, codes)` entry.
pub fn stability_track(snapshots: &[(u64, Tensor)]) -> Result<StabilityTrace> {
    if snapshots.len() < 2 {
        return Err(Error::Metric(format!("stability needs at least 2 snapshots, got {}", snapshots.len())));
    }
    let mut points = Vec::with_capacity(snapshots.len() - 1);
    for w in snapshots.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::Metric("snapshot iterations must strictly increase".into()));
        }
        points.push((w[1].0, mean_squared_displacement(&w[0].1, &w[1].1)?));
    }
    Ok(StabilityTrace { points })
}
