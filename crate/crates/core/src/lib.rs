//! Set-based gait recognition.
//!
//! A gait is treated as an unordered set of silhouettes. Frames go through a
//! shared convolutional backbone, a permutation-invariant set pooling joins
//! them into set-level maps, and horizontal pyramid mapping turns those maps
//! into strip embeddings trained with a batch-all triplet loss.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradsuite;
pub mod metric;
pub mod network;
pub mod setpool;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
