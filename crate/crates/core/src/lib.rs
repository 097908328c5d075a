//! Two-branch neural networks for cross-modal matching: an embedding network
//! trained with a bi-directional triplet ranking loss plus neighborhood
//! constraints, and a similarity network trained with logistic regression
//! over fused features. Includes the mini-batch mining algorithms, recall@K
//! evaluation protocols, and a synthetic planted-correspondence dataset for
//! end-to-end verification.

pub mod branches;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod optim;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
