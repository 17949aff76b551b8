//! Core engine for distill-and-select video similarity indexing and retrieval:
//! tensor autodiff, feature storage, similarity kernels, trainable models,
//! training loops, routing policies, and the end-to-end pipeline.

pub mod autodiff;
pub mod features;
pub mod kernels;
pub mod models;
pub mod tensor;

pub use tensor::Tensor;
