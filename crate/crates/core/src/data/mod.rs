//! Datasets with ground-truth factors: IDX digit files and the procedural shapes room.

pub mod container;
pub mod idx;
pub mod shapes;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::factors::{FactorKind, FactorSet, LabelBatch};
use crate::tensor::Tensor;

/// One ground-truth factor of a dataset, as annotated at generation time.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub name: String,
    pub classes: usize,
    /// Physical value of each class, used when the factor is declared continuous.
    pub values: Vec<f64>,
}

impl GroundTruth {
    fn indexed(name: &str, classes: usize) -> Self {
        GroundTruth { name: name.to_string(), classes, values: (0..classes).map(|c| c as f64).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Images {
    /// Channel-major bytes, one contiguous block per sample.
    Stored(Vec<u8>),
    /// Shapes are rendered on demand from their factor tuples.
    Shapes(Vec<[u8; 6]>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub factors: Vec<GroundTruth>,
    /// `labels[f][j]`: class of ground-truth factor `f` for sample `j`.
    pub labels: Vec<Vec<u16>>,
    images: Images,
}

pub const SHAPES: &str = "shapes";

/// Byte value to the training range [-1, 1].
pub fn to_signed(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Inverse of [`to_signed`], clamping to the byte range.
pub fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl Dataset {
    pub fn from_bytes(
        name: &str,
        shape: [usize; 3],
        factors: Vec<GroundTruth>,
        labels: Vec<Vec<u16>>,
        bytes: Vec<u8>,
    ) -> Result<Self> {
        let n = labels.first().map(Vec::len).unwrap_or(0);
        let per = shape.iter().product::<usize>();
        if bytes.len() != n * per {
            return Err(Error::Data(format!(
                "{} image bytes for {n} samples of shape {shape:?}",
                bytes.len()
            )));
        }
        if factors.len() != labels.len() || labels.iter().any(|c| c.len() != n) {
            return Err(Error::Data("label table does not match factor list".into()));
        }
        for (f, col) in factors.iter().zip(&labels) {
            if let Some(&bad) = col.iter().find(|&&c| c as usize >= f.classes) {
                return Err(Error::Data(format!("factor `{}` has label {bad} >= {}", f.name, f.classes)));
            }
        }
        Ok(Dataset {
            name: name.to_string(),
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            factors,
            labels,
            images: Images::Stored(bytes),
        })
    }

    /// Digit images from an IDX pair; the single factor is `digit`.
    pub fn from_idx(pair: idx::IdxPair) -> Result<Self> {
        let labels = pair.labels.iter().map(|&l| l as u16).collect();
        Dataset::from_bytes(
            "mnist",
            [1, pair.rows, pair.cols],
            vec![GroundTruth::indexed("digit", 10)],
            vec![labels],
            pair.images,
        )
    }

    pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Self> {
        Dataset::from_idx(idx::read_pair(images_path, labels_path)?)
    }

    /// The full 480000-tuple shapes enumeration, or an exact seeded fraction of it.
    pub fn shapes(subsample: f64, seed: u64) -> Result<Self> {
        if !(subsample > 0.0 && subsample <= 1.0) {
            return Err(Error::Config(format!("subsample {subsample} not in (0, 1]")));
        }
        let k = ((shapes::TOTAL as f64) * subsample).round() as usize;
        let mut indices: Vec<usize> = if k >= shapes::TOTAL {
            (0..shapes::TOTAL).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, shapes::TOTAL, k).into_vec()
        };
        indices.sort_unstable();
        Ok(Dataset::shapes_from_tuples(indices.into_iter().map(shapes::decode).collect()))
    }

    fn shapes_from_tuples(tuples: Vec<[u8; 6]>) -> Self {
        let factors = shapes::FACTORS
            .iter()
            .map(|&(name, m)| {
                let mut g = GroundTruth::indexed(name, m);
                if name == "orientation" {
                    g.values = (0..m).map(|o| o as f64 * shapes::ORIENTATION_STEP_DEG).collect();
                }
                g
            })
            .collect();
        let labels = (0..6).map(|f| tuples.iter().map(|t| t[f] as u16).collect()).collect();
        Dataset {
            name: SHAPES.to_string(),
            channels: 3,
            height: shapes::SIZE,
            width: shapes::SIZE,
            factors,
            labels,
            images: Images::Shapes(tuples),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.first().map(Vec::len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_shapes(&self) -> bool {
        self.name == SHAPES
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// Channel-major bytes of sample `i`.
    pub fn image_bytes(&self, i: usize, out: &mut [u8]) {
        match &self.images {
            Images::Stored(b) => {
                let n = self.pixels();
                out.copy_from_slice(&b[i * n..(i + 1) * n]);
            }
            Images::Shapes(t) => shapes::render(&t[i], out),
        }
    }

    /// Samples `idx` as a `[B, C, H, W]` tensor scaled to [-1, 1].
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let n = self.pixels();
        let mut data = vec![0f32; idx.len() * n];
        let mut buf = vec![0u8; n];
        for (row, &i) in data.chunks_mut(n).zip(idx) {
            self.image_bytes(i, &mut buf);
            for (d, &b) in row.iter_mut().zip(&buf) {
                *d = to_signed(b);
            }
        }
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape")
    }

    /// All image bytes, rendering on demand if needed.
    pub fn all_bytes(&self) -> Vec<u8> {
        match &self.images {
            Images::Stored(b) => b.clone(),
            Images::Shapes(_) => {
                let n = self.pixels();
                let mut out = vec![0u8; self.len() * n];
                for (i, chunk) in out.chunks_mut(n).enumerate() {
                    self.image_bytes(i, chunk);
                }
                out
            }
        }
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let labels = self.labels.iter().map(|c| idx.iter().map(|&j| c[j]).collect()).collect();
        let images = match &self.images {
            Images::Stored(b) => {
                let n = self.pixels();
                let mut out = Vec::with_capacity(idx.len() * n);
                for &j in idx {
                    out.extend_from_slice(&b[j * n..(j + 1) * n]);
                }
                Images::Stored(out)
            }
            Images::Shapes(t) => Images::Shapes(idx.iter().map(|&j| t[j]).collect()),
        };
        Dataset { labels, images, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            factors: self.factors.clone(),
            labels: Vec::new(),
            images: Images::Stored(Vec::new()),
        }
    }

    /// Rows whose floor and wall hues differ by 0 or ±1 modulo 10.
    pub fn correlated_subset(&self) -> Result<Dataset> {
        let (Some(f), Some(w)) = (self.factor_index("floor_hue"), self.factor_index("wall_hue")) else {
            return Err(Error::Data(format!("dataset `{}` has no floor_hue/wall_hue factors", self.name)));
        };
        let m = self.factors[f].classes;
        let keep: Vec<usize> = (0..self.len())
            .filter(|&j| {
                let d = (self.labels[f][j] as usize + m - self.labels[w][j] as usize) % m;
                d == 0 || d == 1 || d == m - 1
            })
            .collect();
        Ok(self.select(&keep))
    }

    /// Seeded disjoint split; the test part holds `round(holdout * len)` samples.
    pub fn split(&self, holdout: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(holdout > 0.0 && holdout < 1.0) {
            return Err(Error::Config(format!("holdout {holdout} not in (0, 1)")));
        }
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * holdout).round() as usize;
        let (test, train) = perm.split_at(n_test);
        let mut test = test.to_vec();
        let mut train = train.to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok((self.select(&train), self.select(&test)))
    }

    /// Class labels of the declared labeled factors, in declaration order.
    pub fn labels_for(&self, factors: &FactorSet) -> Result<LabelBatch> {
        let mut columns = Vec::new();
        for spec in factors.labeled() {
            let f = self.factor_index(&spec.name).ok_or_else(|| {
                Error::Config(format!(
                    "factor `{}` is not a ground-truth factor of `{}` (have: {})",
                    spec.name,
                    self.name,
                    self.factors.iter().map(|g| g.name.as_str()).collect::<Vec<_>>().join(", ")
                ))
            })?;
            let gt = &self.factors[f];
            let col = match spec.kind {
                FactorKind::LabeledDiscrete => {
                    if spec.classes() != gt.classes {
                        return Err(Error::Config(format!(
                            "factor `{}` declares {} classes, dataset has {}",
                            spec.name,
                            spec.classes(),
                            gt.classes
                        )));
                    }
                    self.labels[f].iter().map(|&c| c as usize).collect()
                }
                FactorKind::LabeledContinuous => self.labels[f]
                    .iter()
                    .map(|&c| spec.quantize(gt.values[c as usize]))
                    .collect::<Result<Vec<_>>>()?,
                FactorKind::Unknown => unreachable!(),
            };
            columns.push(col);
        }
        Ok(LabelBatch { columns })
    }

    /// Ground-truth labels of one factor, widened.
    pub fn factor_labels(&self, name: &str) -> Result<Vec<usize>> {
        let f = self
            .factor_index(name)
            .ok_or_else(|| Error::Data(format!("no factor `{name}` in `{}`", self.name)))?;
        Ok(self.labels[f].iter().map(|&c| c as usize).collect())
    }

    /// Probe pixel revealing `factor`, defined only for the shapes room.
    pub fn probe(&self, factor: &str) -> Result<(usize, usize)> {
        if !self.is_shapes() {
            return Err(Error::Metric(format!("no probe pixels are defined for dataset `{}`", self.name)));
        }
        shapes::probe(factor).ok_or_else(|| Error::Metric(format!("factor `{factor}` has no probe pixel")))
    }
}
