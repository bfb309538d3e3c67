//! Shared matrix atoms for attention projections.
//!
//! Each projection kind (query, key, value, output) of every block is a
//! linear combination of a small dictionary of matrix atoms. The crate
//! covers training such models from scratch at toy scale and compressing
//! dense checkpoints into shared form without training.

pub mod activation;
pub mod checkpoint;
pub mod compress;
pub mod corpus;
pub mod error;
pub mod linalg;
pub mod masa;
pub mod model;

pub use error::{MasaError, Result};
pub use linalg::Matrix;
pub use masa::{ProjectionKind, SharingMode};
pub use model::{ModelParams, ToyConfig};
