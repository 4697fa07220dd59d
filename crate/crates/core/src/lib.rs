//! Coarse-to-fine sparse query inference for feature-pyramid detection heads.
//!
//! High-resolution pyramid levels are only evaluated where a coarser level's
//! query head predicts a small object. The crate provides the dense reference
//! head, submanifold sparse execution, the cascaded query pipeline and its
//! two baselines, target and loss math, post-processing, a cost model and a
//! benchmark harness.

pub mod analysis;
pub mod error;
pub mod format;
pub mod model;
pub mod postproc;
pub mod query;
pub mod report;
pub mod sparse;
pub mod targets;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use model::{FeaturePyramid, HeadWeights};
pub use query::{CascadeResult, QueryConfig, Strategy};
pub use sparse::{GridPos, KeySet, SparseFeature};
pub use tensor::{ConvWeights, DenseTensor};

/// Schema tag carried by every JSON artifact.
pub const SCHEMA: &str = "qd/1";
