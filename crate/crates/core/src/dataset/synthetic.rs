//! Gaussian two-class, two-attribute worlds with a tunable spurious
//! correlation, used as a desk-scale stand-in for Waterbirds-style data.
//!
//! Layout of every feature vector: `core_dims` core coordinates, then the
//! spurious coordinates, then `distractor_dims` pure-noise coordinates.
//! Class `y` has core mean `(2y − 1)·sep_core/2`, attribute `a` has spurious
//! mean `(2a − 1)·sep_spur/2`, and attribute `a = y` is the class-aligned
//! (majority) value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassProxyMatrix, FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const PRESET_NAMES: [&str; 3] = ["synthetic-waterbirds", "synthetic-balanced", "synthetic-celeba-like"];

const CLASSES: usize = 2;
const ATTRS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Training samples per class.
    pub train_class_counts: [usize; CLASSES],
    /// Fraction of each class that carries the class-aligned attribute.
    pub spurious_correlation_rho: f64,
    /// Per-class override of `spurious_correlation_rho`.
    #[serde(default)]
    pub per_class_rho: Option<[f64; CLASSES]>,
    /// Validation samples per (class, attribute) cell.
    pub val_per_group: usize,
    /// The test split repeats the training cell counts this many times, so
    /// it follows the training distribution.
    pub test_multiplier: usize,
    pub core_mean_separation: f64,
    pub spurious_mean_separation: f64,
    pub noise_sigma: f64,
    pub feature_dim: usize,
    pub core_dims: usize,
    pub distractor_dims: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn spurious_dims(&self) -> usize {
        self.feature_dim.saturating_sub(self.core_dims + self.distractor_dims)
    }

    fn rho_for(&self, class: usize) -> f64 {
        self.per_class_rho.map_or(self.spurious_correlation_rho, |r| r[class])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.feature_dim < 2 {
            return bad(format!("feature_dim {} < 2", self.feature_dim));
        }
        if self.core_dims == 0 || self.spurious_dims() == 0 {
            return bad(format!(
                "need at least one core and one spurious dim (d={}, core={}, distractor={})",
                self.feature_dim, self.core_dims, self.distractor_dims
            ));
        }
        if self.core_dims + self.distractor_dims >= self.feature_dim {
            return bad("core and distractor dims leave no room for spurious dims".into());
        }
        for y in 0..CLASSES {
            let rho = self.rho_for(y);
            if !(rho > 0.0 && rho < 1.0) {
                return bad(format!("rho {rho} outside (0, 1)"));
            }
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be positive", self.noise_sigma));
        }
        if !self.core_mean_separation.is_finite() || !self.spurious_mean_separation.is_finite() {
            return bad("separations must be finite".into());
        }
        if self.train_class_counts.contains(&0) {
            return bad("every class needs training samples".into());
        }
        if self.val_per_group == 0 || self.test_multiplier == 0 {
            return bad("val and test splits must be populated".into());
        }
        if self.train_cells().iter().flatten().any(|&c| c == 0) {
            return bad("rho leaves a training cell empty".into());
        }
        Ok(())
    }

    /// Training counts per `[class][attribute]` cell, by exact quota.
    pub fn train_cells(&self) -> [[usize; ATTRS]; CLASSES] {
        let mut cells = [[0; ATTRS]; CLASSES];
        for (y, row) in cells.iter_mut().enumerate() {
            let total = self.train_class_counts[y];
            let majority = ((self.rho_for(y) * total as f64).round() as usize).min(total);
            row[y] = majority;
            row[1 - y] = total - majority;
        }
        cells
    }

    fn cells(&self, split: Split) -> [[usize; ATTRS]; CLASSES] {
        match split {
            Split::Train => self.train_cells(),
            Split::Val => [[self.val_per_group; ATTRS]; CLASSES],
            Split::Test => self.train_cells().map(|row| row.map(|c| c * self.test_multiplier)),
        }
    }

    /// Per-group accuracy of the group-balanced Bayes classifier. With the
    /// attribute independent of the class, only the core coordinates carry
    /// signal and the optimal rule thresholds their sum at zero.
    pub fn balanced_bayes_accuracy(&self) -> f64 {
        let z = (self.core_dims as f64).sqrt() * self.core_mean_separation / (2.0 * self.noise_sigma);
        0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
    }
}

/// Named desk-scale configurations.
pub fn preset(name: &str, seed: u64) -> Result<SyntheticSpec> {
    let base = SyntheticSpec {
        train_class_counts: [3000, 1000],
        spurious_correlation_rho: 0.95,
        per_class_rho: None,
        val_per_group: 300,
        test_multiplier: 5,
        core_mean_separation: 2.0,
        spurious_mean_separation: 4.0,
        noise_sigma: 1.0,
        feature_dim: 16,
        core_dims: 2,
        distractor_dims: 13,
        seed,
    };
    match name {
        "synthetic-waterbirds" => Ok(base),
        "synthetic-balanced" => Ok(SyntheticSpec {
            train_class_counts: [2000, 2000],
            spurious_correlation_rho: 0.5,
            ..base
        }),
        // hair colour (0 = not blond, 1 = blond) vs gender (1 = woman), with
        // the training cell proportions of CelebA scaled to 4000 samples
        "synthetic-celeba-like" => {
            let (blond, not_blond) = (24_267.0_f64, 138_503.0_f64);
            let n_blond = (4000.0 * blond / (blond + not_blond)).round() as usize;
            Ok(SyntheticSpec {
                train_class_counts: [4000 - n_blond, n_blond],
                per_class_rho: Some([66_874.0 / not_blond, 22_880.0 / blond]),
                ..base
            })
        }
        other => Err(Error::InvalidSpec(format!(
            "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
        ))),
    }
}

/// Draws train/val/test samples with exact cell quotas and returns them with
/// the matching proxy matrix. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(FeatureDataset, ClassProxyMatrix)> {
    spec.validate()?;
    let d = spec.feature_dim;
    let n_spur = spec.spurious_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidSpec(format!("noise distribution: {e}")))?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut attributes = Vec::new();
    let mut splits = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let cells = spec.cells(split);
        for (y, row) in cells.iter().enumerate() {
            for (a, &count) in row.iter().enumerate() {
                let core_mean = sign(y) * spec.core_mean_separation / 2.0;
                let spur_mean = sign(a) * spec.spurious_mean_separation / 2.0;
                for _ in 0..count {
                    for j in 0..d {
                        let mean = if j < spec.core_dims {
                            core_mean
                        } else if j < spec.core_dims + n_spur {
                            spur_mean
                        } else {
                            0.0
                        };
                        // stored precision of the container
                        features.push(f64::from((mean + noise.sample(&mut rng)) as f32));
                    }
                    labels.push(y);
                    attributes.push(a);
                    splits.push(split);
                }
            }
        }
    }
    let n = labels.len();
    let ds = FeatureDataset::new(
        Matrix::new(n, d, features)?,
        labels,
        Some(attributes),
        Some(splits),
        CLASSES,
        Some(ATTRS),
    )?;

    let inv = 1.0 / (spec.core_dims as f64).sqrt();
    let proxies = Matrix::from_fn(CLASSES, d, |y, j| {
        if j < spec.core_dims {
            f64::from((sign(y) * inv) as f32)
        } else {
            0.0
        }
    });
    let z = ClassProxyMatrix::new(proxies, None)?;
    Ok((ds, z))
}

fn sign(idx: usize) -> f64 {
    if idx == 0 {
        -1.0
    } else {
        1.0
    }
}
