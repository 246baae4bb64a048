//! Training and evaluation toolkit for privacy-preserving representations.
//!
//! A private sphere maps raw features to a narrow released representation,
//! a public sphere predicts the utility label from it, and a privacy loss
//! keeps a sensitive label from being recoverable.

pub mod adversary;
pub mod autodiff;
pub mod data;
pub mod duca;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
