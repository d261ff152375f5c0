//! Supervised contrastive learning with heterogeneous t-vMF similarity,
//! trained on synthetic subpopulation-shift and domain-shift benchmarks.
//!
//! Everything is `f64` and single-threaded; a run is a pure function of its
//! config and seed.

pub mod error;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod moco;
pub mod net;
pub mod optim;
pub mod shiftgen;
pub mod simcore;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use simcore::SimilaritySpec;
pub use trainer::{train, RunHistory, TrainConfig};
