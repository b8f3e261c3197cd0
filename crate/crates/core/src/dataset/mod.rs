//! Feature datasets, class proxies, and the on-disk containers shared with
//! the feature exporter.
//!
//! Ground-truth attributes are carried by [`FeatureDataset`] for evaluation.
//! Training entry points take a [`crate::probe::TrainView`] of features and
//! targets, so no trainer can see them.

mod container;
mod synthetic;

pub use container::{
    load, load_proxies, read_dataset, read_proxies, save, save_proxies, sidecar_path, write_dataset, write_proxies,
    DatasetMeta, DATASET_MAGIC, FORMAT_VERSION, PROXY_MAGIC,
};
pub use synthetic::{generate_synthetic, preset, SyntheticSpec, PRESET_NAMES};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix};
use crate::probe::GroupPrior;

/// Which partition a sample belongs to. Codes match the container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix<f64>,
    labels: Vec<usize>,
    attributes: Option<Vec<usize>>,
    splits: Option<Vec<Split>>,
    class_count: usize,
    attribute_count: Option<usize>,
}

impl FeatureDataset {
    /// Validates and assembles a dataset. A missing split vector means every
    /// sample is a training sample.
    pub fn new(
        features: Matrix<f64>,
        labels: Vec<usize>,
        attributes: Option<Vec<usize>>,
        splits: Option<Vec<Split>>,
        class_count: usize,
        attribute_count: Option<usize>,
    ) -> Result<Self> {
        let (n, d) = features.shape();
        if n == 0 || d == 0 {
            return Err(Error::InvalidDataset(format!("need N ≥ 1 and d ≥ 1, got {n}x{d}")));
        }
        if labels.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::InvalidDataset("class_count must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if let Some(attrs) = &attributes {
            if attrs.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "{} attributes for {n} samples",
                    attrs.len()
                )));
            }
            if let Some(ac) = attribute_count {
                if let Some(bad) = attrs.iter().find(|&&a| a >= ac) {
                    return Err(Error::InvalidDataset(format!(
                        "attribute {bad} out of range for {ac} attribute values"
                    )));
                }
            }
        }
        if let Some(s) = &splits {
            if s.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "{} split codes for {n} samples",
                    s.len()
                )));
            }
        }
        if attribute_count == Some(0) {
            return Err(Error::InvalidDataset(
                "attribute_count of 0; use None for unknown".into(),
            ));
        }
        Ok(Self {
            features,
            labels,
            attributes,
            splits,
            class_count,
            attribute_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn attribute_count(&self) -> Option<usize> {
        self.attribute_count
    }

    pub fn has_attributes(&self) -> bool {
        self.attributes.is_some()
    }

    pub fn has_splits(&self) -> bool {
        self.splits.is_some()
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits.as_ref().map_or(Split::Train, |s| s[i])
    }

    /// Ground-truth attributes, when present.
    pub fn attributes(&self) -> Option<&[usize]> {
        self.attributes.as_deref()
    }

    pub(crate) fn splits_raw(&self) -> Option<&[Split]> {
        self.splits.as_deref()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_of(i) == split).collect()
    }

    /// Copy of the samples in `split`, preserving order.
    pub fn split(&self, split: Split) -> Result<Self> {
        let idx = self.split_indices(split);
        if idx.is_empty() {
            return Err(Error::EmptySplit(split.name()));
        }
        Ok(self.select(&idx))
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            attributes: self.attributes.as_ref().map(|a| idx.iter().map(|&i| a[i]).collect()),
            splits: self.splits.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
            class_count: self.class_count,
            attribute_count: self.attribute_count,
        }
    }

    /// Number of attribute values, taken from the header or inferred from the
    /// attributes themselves.
    pub fn effective_attribute_count(&self) -> Option<usize> {
        self.attribute_count.or_else(|| {
            self.attributes
                .as_ref()
                .map(|a| a.iter().copied().max().map_or(1, |m| m + 1))
        })
    }

    /// Rows rescaled to unit L2 norm; all-zero rows are left unchanged.
    pub fn l2_normalized(&self) -> Self {
        let mut out = self.clone();
        for i in 0..out.features.rows() {
            let row = out.features.row_mut(i);
            let n = norm2(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    }

    /// Same samples, with ground-truth attributes dropped.
    pub fn without_attributes(&self) -> Self {
        Self {
            attributes: None,
            ..self.clone()
        }
    }

    /// Per-class sample counts over the whole dataset.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// K×d matrix whose rows stand in for the classes' text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProxyMatrix {
    proxies: Matrix<f64>,
    class_names: Option<Vec<String>>,
}

impl ClassProxyMatrix {
    pub fn new(proxies: Matrix<f64>, class_names: Option<Vec<String>>) -> Result<Self> {
        for i in 0..proxies.rows() {
            if norm2(proxies.row(i)) == 0.0 {
                return Err(Error::InvalidArgument(format!("proxy row {i} has zero norm")));
            }
        }
        if let Some(names) = &class_names {
            if names.len() != proxies.rows() {
                return Err(Error::InvalidArgument(format!(
                    "{} class names for {} proxies",
                    names.len(),
                    proxies.rows()
                )));
            }
        }
        Ok(Self { proxies, class_names })
    }

    pub fn matrix(&self) -> &Matrix<f64> {
        &self.proxies
    }

    pub fn class_count(&self) -> usize {
        self.proxies.rows()
    }

    pub fn dim(&self) -> usize {
        self.proxies.cols()
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Checks that the proxies can be paired with `ds`.
    pub fn check_compatible(&self, ds: &FeatureDataset) -> Result<()> {
        if self.class_count() != ds.class_count() || self.dim() != ds.dim() {
            return Err(Error::DimensionMismatch(format!(
                "proxies are {}x{}, dataset has {} classes in {} dims",
                self.class_count(),
                self.dim(),
                ds.class_count(),
                ds.dim()
            )));
        }
        Ok(())
    }
}

/// Class prior over the train split with `smoothing` pseudo-counts per class.
pub fn empirical_class_prior(ds: &FeatureDataset, smoothing: f64) -> Result<GroupPrior> {
    let idx = ds.split_indices(Split::Train);
    if idx.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut counts = vec![0usize; ds.class_count()];
    for &i in &idx {
        counts[ds.labels()[i]] += 1;
    }
    GroupPrior::from_counts(&counts, smoothing, 1.0)
}

/// Resamples the attribute half of `round(p·N)` group labels, chosen without
/// replacement. Group labels are encoded `class * attrs_per_class + attr`;
/// the class half is never touched.
pub fn inject_pseudo_label_noise(groups: &[usize], attrs_per_class: usize, p: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("noise fraction {p} outside [0, 1]")));
    }
    if attrs_per_class == 0 {
        return Err(Error::InvalidArgument("attrs_per_class must be positive".into()));
    }
    let n = groups.len();
    let k = (p * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, n, k.min(n)).into_vec();
    chosen.sort_unstable();
    let mut out = groups.to_vec();
    for i in chosen {
        let class = out[i] / attrs_per_class;
        out[i] = class * attrs_per_class + rng.random_range(0..attrs_per_class);
    }
    Ok(out)
}
