//! How often generated samples keep one unknown feature while the labeled codes vary.

use std::collections::HashMap;

use crate::data::{shapes, to_byte};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half the mean RGB distance between adjacent palette hues (byte scale).
pub fn palette_threshold() -> f64 {
    shapes::adjacent_hue_distance() / 2.0
}

/// Byte-scale RGB colour at `(row, col)` of each image in a `[B, 3, H, W]` batch in [-1, 1].
pub fn probe_colors(images: &Tensor, (row, col): (usize, usize)) -> Result<Vec<[u8; 3]>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || row >= s[2] || col >= s[3] {
        return Err(Error::Metric(format!("probe ({row}, {col}) invalid for images {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    Ok((0..s[0])
        .map(|b| {
            let img = images.row(b);
            [0, 1, 2].map(|c| to_byte(img[c * h * w + row * w + col]))
        })
        .collect())
}

fn dist(a: &[u8; 3], b: &[u8; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Fraction of features within `threshold` of the modal feature: the observed colour with the
/// most features inside its threshold ball. Ties go to the lexicographically smallest colour.
pub fn consistency_ratio(features: &[[u8; 3]], threshold: f64) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::Metric("consistency ratio of an empty run".into()));
    }
    let mut distinct: HashMap<[u8; 3], usize> = HashMap::new();
    for f in features {
        *distinct.entry(*f).or_default() += 1;
    }
    let mut colors: Vec<([u8; 3], usize)> = distinct.into_iter().collect();
    colors.sort();
    let mut best = 0usize;
    for (c, _) in &colors {
        let support: usize = colors.iter().filter(|(o, _)| dist(c, o) <= threshold).map(|(_, n)| n).sum();
        if support > best {
            best = support;
        }
    }
    Ok(best as f64 / features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_features_are_fully_consistent() {
        assert_eq!(consistency_ratio(&[[10, 20, 30]; 100], 5.0).unwrap(), 1.0);
    }

    #[test]
    fn two_distant_hues_split_evenly() {
        let p = shapes::palette();
        let f: Vec<[u8; 3]> = (0..10_000).map(|i| if i % 2 == 0 { p[0] } else { p[5] }).collect();
        assert_eq!(consistency_ratio(&f, palette_threshold()).unwrap(), 0.5);
    }

    #[test]
    fn ratio_ignores_order() {
        let p = shapes::palette();
        let mut f: Vec<[u8; 3]> = (0..300).map(|i| p[i % 3 * (i % 2)]).collect();
        let a = consistency_ratio(&f, palette_threshold()).unwrap();
        f.reverse();
        assert_eq!(a, consistency_ratio(&f, palette_threshold()).unwrap());
    }

    #[test]
    fn threshold_sits_between_hues() {
        let t = palette_threshold();
        let p = shapes::palette();
        for k in 0..10 {
            assert!(dist(&p[k], &p[(k + 1) % 10]) > t);
        }
    }
}
