//! Project-Probe-Aggregate: group-robust linear probes on frozen
//! vision-language features.
//!
//! The pipeline projects features onto the null space of the class proxies,
//! trains a biased probe there, reads pseudo-attributes off its mistakes,
//! trains a group-logit-adjusted probe on the full features and sums its group
//! heads back into a class classifier.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod pipeline;
pub mod probe;
pub mod projection;
pub mod scalar;
pub mod theory;

pub use dataset::{ClassProxyMatrix, FeatureDataset, Split};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use probe::{GroupPrior, LinearScorer, LossKind, TargetSpace, TrainConfig};
pub use projection::ProjectionOperator;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type LinearScorer64 = LinearScorer<f64>;
pub type LinearScorer32 = LinearScorer<f32>;
pub type ProjectionOperator64 = ProjectionOperator<f64>;
pub type ProjectionOperator32 = ProjectionOperator<f32>;
