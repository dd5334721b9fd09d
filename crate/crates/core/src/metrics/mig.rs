//! Mutual information gap for factor-wise encoders. Each code dimension is discretized into
//! equal-mass bins; the normalized mutual information of a factor with an encoder is the best
//! over that encoder's dimensions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fewest test points the estimator accepts.
pub const MIN_POINTS: usize = 1000;

/// `entries[i][j]`: normalized MI between labeled factor `i` and encoder `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MIMatrix {
    pub entries: Vec<Vec<f64>>,
    pub bin_count: usize,
    pub sample_count: usize,
}

/// Upper bin edges at the `k/bins` quantiles. Bins are assigned by value, so equal values
/// always share a bin and a constant dimension collapses into one bin.
pub fn quantile_bins(values: &[f32], bins: usize) -> Vec<usize> {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let edges: Vec<f32> = (1..bins).map(|k| sorted[(k * n / bins).min(n - 1)]).collect();
    values.iter().map(|v| edges.partition_point(|e| e.total_cmp(v).is_le())).collect()
}

/// Entropy in nats of a discrete variable with the given counts.
fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Discrete mutual information in nats between two index sequences.
pub fn mutual_information(a: &[usize], a_card: usize, b: &[usize], b_card: usize) -> f64 {
    let n = a.len();
    let mut joint = vec![0usize; a_card * b_card];
    let mut ca = vec![0usize; a_card];
    let mut cb = vec![0usize; b_card];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * b_card + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for x in 0..a_card {
        for y in 0..b_card {
            let c = joint[x * b_card + y];
            if c > 0 {
                let pxy = c as f64 / nf;
                mi += pxy * (pxy * nf * nf / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Normalized MI matrix between `labels` (one column per factor) and `codes` (one `[N, d_j]`
/// tensor per encoder).
pub fn mi_matrix(codes: &[&Tensor], labels: &[Vec<usize>], bins: usize) -> Result<MIMatrix> {
    let n = labels.first().map(Vec::len).unwrap_or(0);
    if n < MIN_POINTS {
        return Err(Error::Metric(format!("MIG needs at least {MIN_POINTS} test points, got {n}")));
    }
    if bins < 2 {
        return Err(Error::Metric("MIG needs at least 2 bins".into()));
    }
    for c in codes {
        if c.batch() != n {
            return Err(Error::Metric(format!("{} codes for {n} labels", c.batch())));
        }
    }
    let mut binned: Vec<Vec<Vec<usize>>> = Vec::with_capacity(codes.len());
    for c in codes {
        let d = c.row_len();
        let mut dims = Vec::with_capacity(d);
        for k in 0..d {
            let col: Vec<f32> = (0..n).map(|r| c.data()[r * d + k]).collect();
            dims.push(quantile_bins(&col, bins));
        }
        binned.push(dims);
    }
    let mut entries = Vec::with_capacity(labels.len());
    for (i, y) in labels.iter().enumerate() {
        let m = y.iter().max().map(|v| v + 1).unwrap_or(0);
        let mut counts = vec![0usize; m];
        for &v in y {
            counts[v] += 1;
        }
        let h = entropy(&counts, n);
        if h <= 0.0 {
            return Err(Error::Metric(format!(
                "factor {i} has a single observed class; its entropy is zero"
            )));
        }
        let row = binned
            .iter()
            .map(|dims| dims.iter().map(|b| mutual_information(y, m, b, bins) / h).fold(0.0, f64::max))
            .collect();
        entries.push(row);
    }
    Ok(MIMatrix { entries, bin_count: bins, sample_count: n })
}

/// Gap for each factor given which encoder is its own.
pub fn gaps(matrix: &MIMatrix, own: &[usize]) -> Vec<f64> {
    matrix
        .entries
        .iter()
        .zip(own)
        .map(|(row, &j)| {
            let other = row.iter().enumerate().filter(|(k, _)| *k != j).map(|(_, v)| *v).fold(0.0, f64::max);
            row[j] - other
        })
        .collect()
}

/// MIG with factor `i` owned by encoder `i`; `codes` may hold extra encoders (the unknown
/// one) that only act as competitors.
pub fn mig(codes: &[&Tensor], labels: &[Vec<usize>], bins: usize) -> Result<(f64, MIMatrix)> {
    let own: Vec<usize> = (0..labels.len()).collect();
    mig_with_owners(codes, labels, &own, bins)
}

pub fn mig_with_owners(
    codes: &[&Tensor],
    labels: &[Vec<usize>],
    own: &[usize],
    bins: usize,
) -> Result<(f64, MIMatrix)> {
    if own.len() != labels.len() || own.iter().any(|&j| j >= codes.len()) {
        return Err(Error::Metric("every factor needs an encoder of its own".into()));
    }
    let m = mi_matrix(codes, labels, bins)?;
    let g = gaps(&m, own);
    Ok((g.iter().sum::<f64>() / g.len() as f64, m))
}
