//! Continual least-squares classification on random ReLU features, with a
//! truncated incremental SVD state, baselines, bound diagnostics and an
//! incremental-learning harness.

pub mod baselines;
pub mod codec;
pub mod error;
pub mod harness;
pub mod io;
pub mod itsvd;
pub mod lift;
pub mod linalg;
pub mod manifest;
pub mod report;
pub mod solver;
pub mod theory;

pub use error::{Error, Result};
pub use itsvd::TruncatedFactorState;
pub use lift::{FeatureBlock, RandomEmbedding};
pub use solver::{ClassifierWeights, Learner, TruncationPolicy};
