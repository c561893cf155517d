//! Out-of-distribution identification for C/C++ source code.
//!
//! The pipeline normalizes functions into statement token sequences, encodes
//! each statement with an embedding + 1-D convolution + max-pool, learns a
//! per-statement selection network with a relaxed Bernoulli mask, shapes the
//! masked representations with cluster-contrastive training, and finally
//! scores test functions by their minimum Mahalanobis distance to clusters of
//! the training representations.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod normalize;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scorer;
pub mod selector;
pub mod tensor;

pub use error::{LeoError, Result};
pub use tensor::Tensor;
