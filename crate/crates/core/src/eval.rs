//! Model-level evaluation: encodes or regenerates a test split and feeds the pure metrics.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::factors::FactorSet;
use crate::metrics::{self, MIMatrix, StabilityTrace};
use crate::netfactory::{Encoder, StageOneModels, StageTwoModels};
use crate::stage1::reconstruct;
use crate::tensor::Tensor;

/// Rows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 128;

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_BATCH).map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

fn stack(parts: Vec<Tensor>) -> Tensor {
    let d = parts.first().map(Tensor::row_len).unwrap_or(0);
    let data: Vec<f32> = parts.into_iter().flat_map(Tensor::into_data).collect();
    let n = data.len() / d.max(1);
    Tensor::new(vec![n, d], data).expect("stacked codes")
}

/// Codes of every sample in `ds`: posterior means, or one reparameterized sample each.
pub fn encode(encoder: &Encoder, ds: &Dataset, means: bool, rng: &mut impl Rng) -> Tensor {
    stack(
        chunks(ds.len())
            .map(|idx| {
                let dist = encoder.infer(&ds.batch(&idx));
                if means {
                    dist.mean
                } else {
                    dist.sample(rng).code
                }
            })
            .collect(),
    )
}

/// MIG over the labeled factors, with the unknown encoder as an extra competitor.
/// Returns the score and the `labeled x (labeled + 1)` matrix; the last column is E.
pub fn mig(
    models: &StageTwoModels,
    factors: &FactorSet,
    test: &Dataset,
    bins: usize,
    means: bool,
    rng: &mut impl Rng,
) -> Result<(f64, MIMatrix)> {
    let labels = test.labels_for(factors)?;
    let mut codes: Vec<Tensor> = models.label_encoders.iter().map(|s| encode(s, test, means, rng)).collect();
    codes.push(encode(models.encoder.inner(), test, means, rng));
    let refs: Vec<&Tensor> = codes.iter().collect();
    metrics::mig(&refs, &labels.columns, bins)
}

/// Stage I reconstruction error with true labels, on the [0, 1] scale.
pub fn stage1_mse(
    models: &StageOneModels,
    factors: &FactorSet,
    test: &Dataset,
    rng: &mut impl Rng,
) -> Result<f64> {
    let labels = test.labels_for(factors)?;
    let mut total = 0.0;
    for idx in chunks(test.len()) {
        let x = test.batch(&idx);
        let r = reconstruct(models, &x, &labels.select(&idx), rng);
        total += metrics::reconstruction_mse(&x, &r)? * idx.len() as f64;
    }
    Ok(total / test.len() as f64)
}

/// Stage II reconstruction error: every condition comes from the sample itself.
pub fn stage2_mse(models: &StageTwoModels, test: &Dataset, rng: &mut impl Rng) -> Result<f64> {
    let mut total = 0.0;
    for idx in chunks(test.len()) {
        let x = test.batch(&idx);
        let sources = vec![&x; models.label_encoders.len()];
        let r = crate::stage2::generate(models, &x, &sources, false, rng);
        total += metrics::reconstruction_mse(&x, &r)? * idx.len() as f64;
    }
    Ok(total / test.len() as f64)
}

/// Outcome of one consistency run.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRun {
    pub ratio: f64,
    /// Test index whose unknown code was shared (absent when the code is a prior draw).
    pub source: Option<usize>,
    pub threshold: f64,
}

/// Generates `count` samples that share one unknown code while every labeled condition is
/// taken from an independently drawn test sample, and measures how many keep the unknown
/// factor's probe colour. With `noise_unknown` the shared code is one prior draw.
pub fn consistency(
    models: &StageTwoModels,
    test: &Dataset,
    probe_factor: &str,
    count: usize,
    noise_unknown: bool,
    rng: &mut impl Rng,
) -> Result<ConsistencyRun> {
    let probe = test.probe(probe_factor)?;
    if count == 0 || test.is_empty() {
        return Err(Error::Metric("consistency needs a non-empty run".into()));
    }
    let d_u = models.encoder.code_dim();
    let (code, source) = if noise_unknown {
        (crate::latent::CodeSample::prior(1, d_u, rng).code, None)
    } else {
        let j = rng.random_range(0..test.len());
        (models.encoder.infer(&test.batch(&[j])).sample(rng).code, Some(j))
    };
    let mut colors = Vec::with_capacity(count);
    let mut done = 0;
    while done < count {
        let b = EVAL_BATCH.min(count - done);
        let shared = Tensor::new(vec![b, d_u], code.data().repeat(b))?;
        let sources: Vec<Tensor> = (0..models.label_encoders.len())
            .map(|_| {
                let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..test.len())).collect();
                test.batch(&idx)
            })
            .collect();
        let refs: Vec<&Tensor> = sources.iter().collect();
        let images = crate::stage2::generate_from_codes(models, &shared, &refs, rng);
        colors.extend(metrics::probe_colors(&images, probe)?);
        done += b;
    }
    let threshold = metrics::palette_threshold();
    Ok(ConsistencyRun { ratio: metrics::consistency_ratio(&colors, threshold)?, source, threshold })
}

/// Code-space drift across encoder snapshots, measured on posterior means of `test`.
pub fn stability(snapshots: &[(u64, Encoder)], test: &Dataset) -> Result<StabilityTrace> {
    if snapshots.len() < 2 {
        return Err(Error::Metric(format!("stability needs at least 2 snapshots, got {}", snapshots.len())));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let codes: Vec<(u64, Tensor)> =
        snapshots.iter().map(|(it, e)| (*it, encode(e, test, true, &mut rng))).collect();
    metrics::stability_track(&codes)
}

/// `(k + 1)^2` tiles, row-major. Row 0 holds the labeled-condition sources, column 0 the
/// unknown-condition sources, tile `(i, j)` is generated from the unknown code of row source
/// `i` and the labeled codes of column source `j`. Codes are posterior means, so the grid is
/// a function of the chosen sources only. The corner tile is blank (-1).
pub fn sample_grid(
    models: &StageTwoModels,
    test: &Dataset,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    if k < 1 {
        return Err(Error::Config("grid size must be at least 1".into()));
    }
    if test.len() < 2 * k {
        return Err(Error::Data(format!("{} test samples for a {k}x{k} grid", test.len())));
    }
    let picks = rand::seq::index::sample(rng, test.len(), 2 * k).into_vec();
    let (cols, rows) = (picks[..k].to_vec(), picks[k..].to_vec());
    let xc = test.batch(&cols);
    let xr = test.batch(&rows);
    let e = models.encoder.infer(&xr).mean;
    let s: Vec<Tensor> = models.label_encoders.iter().map(|enc| enc.infer(&xc).mean).collect();

    let [c, h, w] = test.image_shape();
    let per = c * h * w;
    let side = k + 1;
    let mut tiles = vec![-1.0f32; side * side * per];
    for j in 0..k {
        tiles[(j + 1) * per..(j + 2) * per].copy_from_slice(xc.row(j));
    }
    for i in 0..k {
        let at = (i + 1) * side * per;
        tiles[at..at + per].copy_from_slice(xr.row(i));
        // one generator pass per grid row
        let ei = Tensor::new(vec![k, e.row_len()], e.row(i).repeat(k))?;
        let mut parts = vec![&ei];
        parts.extend(s.iter());
        let z = Tensor::concat_cols(&parts)?;
        let out = models.generator.infer(&z);
        for j in 0..k {
            let at = ((i + 1) * side + j + 1) * per;
            tiles[at..at + per].copy_from_slice(out.row(j));
        }
    }
    Ok((Tensor::new(vec![side * side, c, h, w], tiles)?, rows, cols))
}

/// Lays `[n, C, H, W]` tiles in [-1, 1] out as one interleaved byte image, `cols` tiles per row
/// with a one-pixel gutter. Returns `(width, height, bytes)`.
pub fn tile_image(tiles: &Tensor, cols: usize) -> (usize, usize, Vec<u8>) {
    let s = tiles.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut out = vec![255u8; width * height * c];
    for t in 0..n {
        let (ty, tx) = (t / cols, t % cols);
        let img = tiles.row(t);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (ty * (h + 1) + 1 + y, tx * (w + 1) + 1 + x);
                for ch in 0..c {
                    out[(py * width + px) * c + ch] = crate::data::to_byte(img[ch * h * w + y * w + x]);
                }
            }
        }
    }
    (width, height, out)
}

/// Codes of the encoder owning `encoding_factor`, projected to their two largest-variance
/// dimensions, with the labels of `coloring_factor` and the nearest-centroid accuracy.
pub struct CodeProjection {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub accuracy: f64,
    pub chance: f64,
}

pub fn project_codes(
    models: &StageTwoModels,
    factors: &FactorSet,
    test: &Dataset,
    encoding_factor: &str,
    coloring_factor: &str,
    rng: &mut impl Rng,
) -> Result<CodeProjection> {
    let encoder = if factors.unknown().name == encoding_factor {
        models.encoder.inner()
    } else {
        let i = factors
            .labeled_index(encoding_factor)
            .ok_or_else(|| Error::Config(format!("`{encoding_factor}` is not a declared factor")))?;
        &models.label_encoders[i]
    };
    let labels = match factors.labeled_index(coloring_factor) {
        Some(i) => test.labels_for(factors)?.columns.swap_remove(i),
        None => test.factor_labels(coloring_factor).map_err(|_| {
            Error::Config(format!("`{coloring_factor}` is neither declared nor a ground-truth factor"))
        })?,
    };
    let codes = encode(encoder, test, false, rng);
    let points = metrics::project_top2(&codes);
    let accuracy = metrics::nearest_centroid_accuracy(&points, &labels)?;
    Ok(CodeProjection { chance: metrics::chance_level(&labels), points, labels, accuracy })
}
