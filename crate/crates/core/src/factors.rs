//! Factor declarations and label handling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ReferenceDistribution;

/// Bucket count for a continuous factor that does not set one.
pub const DEFAULT_BUCKETS: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorKind {
    LabeledDiscrete,
    LabeledContinuous,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub name: String,
    pub kind: FactorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub code_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_buckets: Option<usize>,
    #[serde(skip)]
    pub frequencies: Option<ReferenceDistribution>,
}

impl FactorSpec {
    pub fn discrete(name: &str, num_classes: usize, code_dim: usize) -> Self {
        FactorSpec {
            name: name.to_string(),
            kind: FactorKind::LabeledDiscrete,
            num_classes: Some(num_classes),
            code_dim,
            range: None,
            num_buckets: None,
            frequencies: None,
        }
    }

    pub fn continuous(name: &str, lo: f64, hi: f64, num_buckets: Option<usize>, code_dim: usize) -> Self {
        FactorSpec {
            name: name.to_string(),
            kind: FactorKind::LabeledContinuous,
            num_classes: None,
            code_dim,
            range: Some([lo, hi]),
            num_buckets,
            frequencies: None,
        }
    }

    pub fn unknown(name: &str, code_dim: usize) -> Self {
        FactorSpec {
            name: name.to_string(),
            kind: FactorKind::Unknown,
            num_classes: None,
            code_dim,
            range: None,
            num_buckets: None,
            frequencies: None,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.kind != FactorKind::Unknown
    }

    /// Class count after quantization; zero for the unknown factor.
    pub fn classes(&self) -> usize {
        match self.kind {
            FactorKind::LabeledDiscrete => self.num_classes.unwrap_or(0),
            FactorKind::LabeledContinuous => self.num_buckets.unwrap_or(DEFAULT_BUCKETS),
            FactorKind::Unknown => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_dim == 0 {
            return Err(Error::Config(format!("factor `{}`: code_dim must be >= 1", self.name)));
        }
        match self.kind {
            FactorKind::LabeledDiscrete => match self.num_classes {
                Some(m) if m >= 2 => Ok(()),
                _ => Err(Error::Config(format!(
                    "factor `{}`: discrete factors need num_classes >= 2",
                    self.name
                ))),
            },
            FactorKind::LabeledContinuous => {
                let [lo, hi] = self.range.ok_or_else(|| {
                    Error::Config(format!("factor `{}`: continuous factors need a range", self.name))
                })?;
                if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
                    return Err(Error::Config(format!("factor `{}`: range needs lo < hi", self.name)));
                }
                if self.classes() < 2 {
                    return Err(Error::Config(format!("factor `{}`: num_buckets must be >= 2", self.name)));
                }
                Ok(())
            }
            FactorKind::Unknown => Ok(()),
        }
    }

    /// Equal-width bucket of `value` in `[lo, hi)`.
    pub fn quantize(&self, value: f64) -> Result<usize> {
        if self.kind != FactorKind::LabeledContinuous {
            return Err(Error::Config(format!("factor `{}` is not continuous", self.name)));
        }
        let [lo, hi] = self.range.expect("validated continuous factor");
        if !(value >= lo && value < hi) {
            return Err(Error::ValueOutOfRange { factor: self.name.clone(), value, lo, hi });
        }
        let n = self.classes();
        let b = ((value - lo) / (hi - lo) * n as f64).floor() as usize;
        Ok(b.min(n - 1))
    }
}

/// The factor declarations of one dataset: labeled factors in order, plus one unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSet {
    specs: Vec<FactorSpec>,
}

impl FactorSet {
    pub fn new(specs: Vec<FactorSpec>) -> Result<Self> {
        let unknown = specs.iter().filter(|s| s.kind == FactorKind::Unknown).count();
        if unknown != 1 {
            return Err(Error::Config(format!("exactly one factor must be unknown, found {unknown}")));
        }
        if specs.iter().filter(|s| s.is_labeled()).count() == 0 {
            return Err(Error::Config("at least one labeled factor is required".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        for (i, s) in specs.iter().enumerate() {
            if specs[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate factor `{}`", s.name)));
            }
        }
        Ok(FactorSet { specs })
    }

    pub fn all(&self) -> &[FactorSpec] {
        &self.specs
    }

    pub fn labeled(&self) -> impl Iterator<Item = &FactorSpec> {
        self.specs.iter().filter(|s| s.is_labeled())
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled().count()
    }

    pub fn unknown(&self) -> &FactorSpec {
        self.specs.iter().find(|s| s.kind == FactorKind::Unknown).expect("validated: one unknown")
    }

    pub fn labeled_index(&self, name: &str) -> Option<usize> {
        self.labeled().position(|s| s.name == name)
    }

    /// Reference distribution of labeled factor `i`; panics if frequencies were not estimated.
    pub fn reference(&self, i: usize) -> &ReferenceDistribution {
        self.labeled()
            .nth(i)
            .and_then(|s| s.frequencies.as_ref())
            .expect("frequencies estimated before training")
    }

    pub fn has_frequencies(&self) -> bool {
        self.labeled().all(|s| s.frequencies.is_some())
    }

    /// Class frequencies of every labeled factor, empty if not yet estimated.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        if !self.has_frequencies() {
            return Vec::new();
        }
        (0..self.labeled_count()).map(|i| self.reference(i).as_slice().to_vec()).collect()
    }

    /// Restores frequencies saved with [`FactorSet::frequencies`].
    pub fn set_frequencies(&mut self, q: &[Vec<f64>]) -> Result<()> {
        if q.len() != self.labeled_count() {
            return Err(Error::Checkpoint(format!(
                "{} frequency tables for {} labeled factors",
                q.len(),
                self.labeled_count()
            )));
        }
        for (spec, q) in self.specs.iter_mut().filter(|s| s.is_labeled()).zip(q) {
            if q.len() != spec.classes() {
                return Err(Error::Checkpoint(format!(
                    "factor `{}` has {} classes, saved frequencies have {}",
                    spec.name,
                    spec.classes(),
                    q.len()
                )));
            }
            spec.frequencies = Some(ReferenceDistribution::new(q.clone())?);
        }
        Ok(())
    }

    /// Fills every labeled factor's class frequencies from the training labels.
    pub fn estimate_frequencies(&mut self, labels: &LabelBatch) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Config("cannot estimate frequencies from no labels".into()));
        }
        if labels.factors() != self.labeled_count() {
            return Err(Error::Config(format!(
                "labels carry {} factors, spec declares {} labeled",
                labels.factors(),
                self.labeled_count()
            )));
        }
        let n = labels.len() as f64;
        let mut estimates = Vec::new();
        for (spec, column) in self.labeled().zip(&labels.columns) {
            let m = spec.classes();
            let mut counts = vec![0usize; m];
            for &c in column {
                if c >= m {
                    return Err(Error::IndexOutOfRange { index: c, classes: m });
                }
                counts[c] += 1;
            }
            if let Some(class) = counts.iter().position(|&c| c == 0) {
                return Err(Error::UnseenClass { factor: spec.name.clone(), class });
            }
            let q = counts.iter().map(|&c| c as f64 / n).collect();
            estimates.push(ReferenceDistribution::new(q)?);
        }
        for (spec, q) in self.specs.iter_mut().filter(|s| s.is_labeled()).zip(estimates) {
            spec.frequencies = Some(q);
        }
        Ok(())
    }
}

/// Labels of one sample, one class index per labeled factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelVector(pub Vec<usize>);

/// Column-major labels for a batch: `columns[i][j]` is factor `i` of sample `j`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelBatch {
    pub columns: Vec<Vec<usize>>,
}

impl LabelBatch {
    pub fn from_rows(rows: &[LabelVector]) -> Self {
        let f = rows.first().map(|r| r.0.len()).unwrap_or(0);
        LabelBatch { columns: (0..f).map(|i| rows.iter().map(|r| r.0[i]).collect()).collect() }
    }

    pub fn len(&self) -> usize {
        self.columns.first().map(Vec::len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn factors(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, j: usize) -> LabelVector {
        LabelVector(self.columns.iter().map(|c| c[j]).collect())
    }

    pub fn select(&self, idx: &[usize]) -> LabelBatch {
        LabelBatch { columns: self.columns.iter().map(|c| idx.iter().map(|&j| c[j]).collect()).collect() }
    }

    pub fn validate(&self, factors: &FactorSet) -> Result<()> {
        if self.factors() != factors.labeled_count() {
            return Err(Error::Shape(format!(
                "{} label columns for {} labeled factors",
                self.factors(),
                factors.labeled_count()
            )));
        }
        for (spec, col) in factors.labeled().zip(&self.columns) {
            if let Some(&bad) = col.iter().find(|&&c| c >= spec.classes()) {
                return Err(Error::IndexOutOfRange { index: bad, classes: spec.classes() });
            }
        }
        Ok(())
    }
}

/// Independent uniform permutation of batch positions per labeled factor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recombination {
    /// `perms[i][j]`: batch position whose factor-`i` label (and code) sample `j` receives.
    pub perms: Vec<Vec<usize>>,
}

impl Recombination {
    pub fn identity(factors: usize, batch: usize) -> Self {
        Recombination { perms: vec![(0..batch).collect(); factors] }
    }

    pub fn random(factors: usize, batch: usize, rng: &mut impl Rng) -> Result<Self> {
        if batch < 2 {
            return Err(Error::BatchTooSmall(batch));
        }
        let perms = (0..factors)
            .map(|_| {
                let mut p: Vec<usize> = (0..batch).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        Ok(Recombination { perms })
    }

    pub fn apply(&self, labels: &LabelBatch) -> LabelBatch {
        LabelBatch {
            columns: labels
                .columns
                .iter()
                .zip(&self.perms)
                .map(|(c, p)| p.iter().map(|&j| c[j]).collect())
                .collect(),
        }
    }
}

/// Labels drawn independently of each sample: every factor column is shuffled by its own
/// uniform permutation of the batch, so batch marginals are preserved exactly. Coincidental
/// matches with the true label are allowed.
pub fn sample_mismatched(batch: &LabelBatch, rng: &mut impl Rng) -> Result<LabelBatch> {
    let r = Recombination::random(batch.factors(), batch.len(), rng)?;
    Ok(r.apply(batch))
}
