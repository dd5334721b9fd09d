//! 2-D code projections for scatter plots, and a nearest-centroid score that stands in for
//! eyeballing whether the colours separate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Indices of the two highest-variance dimensions (one if the code is 1-D).
pub fn top_variance_dims(codes: &Tensor) -> Vec<usize> {
    let n = codes.batch() as f64;
    let d = codes.row_len();
    let mut var: Vec<(usize, f64)> = (0..d)
        .map(|k| {
            let col = (0..codes.batch()).map(|r| codes.data()[r * d + k] as f64);
            let mean = col.clone().sum::<f64>() / n;
            (k, col.map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        })
        .collect();
    var.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    var.into_iter().take(2).map(|(k, _)| k).collect()
}

/// Each row projected onto the two highest-variance dimensions (second coordinate 0 for 1-D codes).
pub fn project_top2(codes: &Tensor) -> Vec<[f64; 2]> {
    let dims = top_variance_dims(codes);
    (0..codes.batch())
        .map(|r| {
            let row = codes.row(r);
            [row[dims[0]] as f64, dims.get(1).map(|&k| row[k] as f64).unwrap_or(0.0)]
        })
        .collect()
}

/// Accuracy of assigning every point to the label whose centroid is nearest.
pub fn nearest_centroid_accuracy(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Metric("one label per projected point is required".into()));
    }
    let m = labels.iter().max().unwrap() + 1;
    let mut sums = vec![[0.0f64; 2]; m];
    let mut counts = vec![0usize; m];
    for (p, &l) in points.iter().zip(labels) {
        sums[l][0] += p[0];
        sums[l][1] += p[1];
        counts[l] += 1;
    }
    let centroids: Vec<Option<[f64; 2]>> =
        sums.iter().zip(&counts).map(|(s, &c)| (c > 0).then(|| [s[0] / c as f64, s[1] / c as f64])).collect();
    let correct = points
        .iter()
        .zip(labels)
        .filter(|(p, &l)| {
            let best = centroids
                .iter()
                .enumerate()
                .filter_map(|(k, c)| c.map(|c| (k, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(l)
        })
        .count();
    Ok(correct as f64 / points.len() as f64)
}

/// Accuracy of always predicting the most frequent label.
pub fn chance_level(labels: &[usize]) -> f64 {
    let m = labels.iter().max().map(|v| v + 1).unwrap_or(0);
    let mut counts = vec![0usize; m];
    for &l in labels {
        counts[l] += 1;
    }
    counts.into_iter().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}
