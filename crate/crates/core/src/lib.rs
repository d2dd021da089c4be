//! Data-free knowledge distillation with diffusion-style augmentation.
//!
//! Trains a student classifier from a frozen teacher without the teacher's
//! original training data. Each round: a generator is inverted against the
//! teacher (class prior + batch-norm statistic matching + a contrastive
//! diversity term over a memory bank), the resulting synthetic batch is
//! expanded into diverse variants through a diffusion backend, spurious
//! variants are filtered by embedding-space cosine similarity, and the
//! student is trained on the retained pool with a temperature-softened KL
//! objective plus a self-supervised class loss.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contracts;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod grad_check;
pub mod imgio;
pub mod memory;
pub mod models;
pub mod nn;
pub mod report;
pub mod rng;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
