//! Secure-Aggregation-compatible uplink compression for federated learning.

pub mod codec_pq;
pub mod codec_prune;
pub mod codec_scalar;
pub mod error;
pub mod finite_group;
pub mod flsim;
pub mod protocol;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
