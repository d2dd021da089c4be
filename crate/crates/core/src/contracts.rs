//! Behavioral contracts for the models in the pipeline.
//!
//! Everything downstream (synthesis, augmentation, distillation, evaluation)
//! talks to classifiers, generators, projection heads, and diffusion backends
//! through the traits here, never to a concrete network. The teacher is
//! frozen by construction: a frozen instance has `requires_grad = false`
//! parameters and nothing in this crate ever updates them.

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{BnBatchStats, Mode};
use crate::tensor::Tensor;
use ndarray::{Array1, ArrayD};
use std::collections::BTreeMap;

/// Read-only snapshot of a model's batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    /// Per-channel running mean.
    pub mean: Array1<f64>,
    /// Per-channel running variance (componentwise non-negative).
    pub var: Array1<f64>,
}

/// What a classifier forward should compute besides logits.
#[derive(Debug, Clone, Copy)]
pub struct TraceOptions {
    pub mode: Mode,
    /// Collect differentiable per-layer batch statistics at each BN input.
    pub batch_stats: bool,
    /// Collect globally pooled intermediate features (for the projection
    /// head and the pooled-feature distances).
    pub pool_features: bool,
}

impl TraceOptions {
    pub fn eval() -> Self {
        TraceOptions {
            mode: Mode::Eval,
            batch_stats: false,
            pool_features: false,
        }
    }

    pub fn train() -> Self {
        TraceOptions {
            mode: Mode::Train,
            batch_stats: false,
            pool_features: false,
        }
    }

    pub fn with_batch_stats(mut self) -> Self {
        self.batch_stats = true;
        self
    }

    pub fn with_pool_features(mut self) -> Self {
        self.pool_features = true;
        self
    }
}

/// One classifier forward pass.
pub struct ForwardTrace {
    /// `(B, label_count)`.
    pub logits: Tensor,
    /// Penultimate embedding `(B, d)`.
    pub embedding: Tensor,
    /// Globally pooled intermediate features, shallow to deep, each `(B, C_l)`.
    pub pool_features: Vec<Tensor>,
    /// Differentiable (mean, unbiased variance) at each BN input, in layer order.
    pub batch_stats: Vec<BnBatchStats>,
}

/// A classification network: feature extractor plus linear head.
pub trait Classifier {
    fn arch_id(&self) -> &str;
    fn label_count(&self) -> usize;
    /// Penultimate embedding width `d`.
    fn feature_dim(&self) -> usize;
    fn bn_layer_count(&self) -> usize;
    /// Expected `(C, H, W)` of input images.
    fn input_shape(&self) -> (usize, usize, usize);
    fn trace(&self, images: &Tensor, opts: &TraceOptions) -> ForwardTrace;
    fn parameters(&self) -> Vec<Tensor>;
    fn running_bn(&self) -> Vec<BnStats>;
    fn state(&self) -> Vec<(String, ArrayD<f64>)>;
    fn load_state(&self, state: &BTreeMap<String, ArrayD<f64>>) -> Result<()>;
}

/// An image generator mapping latent rows `(B, latent_dim)` to images in `[0, 1]`.
pub trait Generator {
    fn latent_dim(&self) -> usize;
    fn output_shape(&self) -> (usize, usize, usize);
    fn forward(&self, latent: &Tensor, mode: Mode) -> Tensor;
    fn parameters(&self) -> Vec<Tensor>;
    fn state(&self) -> Vec<(String, ArrayD<f64>)>;
    fn load_state(&self, state: &BTreeMap<String, ArrayD<f64>>) -> Result<()>;
}

/// Embedding head used by the contrastive diversity loss: maps images to a
/// projection vector that is L2-normalized (with epsilon) before cosines.
pub trait Projector {
    fn project(&self, images: &Tensor) -> Result<Tensor>;

    /// Project straight from an existing forward trace when the head knows
    /// how, saving a second backbone pass over the same images.
    fn project_trace(&self, _trace: &ForwardTrace) -> Option<Result<Tensor>> {
        None
    }

    fn parameters(&self) -> Vec<Tensor>;
}

fn check_batch(model: &dyn Classifier, batch: &ImageBatch, context: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid(format!("{context}: empty batch")));
    }
    let got = batch.image_shape();
    let want = model.input_shape();
    if got != want {
        return Err(Error::shape(context, format!("{want:?}"), format!("{got:?}")));
    }
    Ok(())
}

/// Logits of a classifier on a batch: `(B, label_count)`, guaranteed finite.
pub fn forward_logits(model: &dyn Classifier, batch: &ImageBatch) -> Result<Tensor> {
    check_batch(model, batch, "forward_logits")?;
    let trace = model.trace(&batch.to_tensor(), &TraceOptions::eval());
    if !trace.logits.is_finite() {
        return Err(Error::Pipeline {
            stage: "forward_logits".into(),
            detail: "non-finite logits".into(),
        });
    }
    Ok(trace.logits)
}

/// Penultimate embedding rows: `(B, d)`.
pub fn penultimate_embedding(model: &dyn Classifier, batch: &ImageBatch) -> Result<Tensor> {
    check_batch(model, batch, "penultimate_embedding")?;
    let trace = model.trace(&batch.to_tensor(), &TraceOptions::eval());
    if !trace.embedding.is_finite() {
        return Err(Error::Pipeline {
            stage: "penultimate_embedding".into(),
            detail: "non-finite embedding".into(),
        });
    }
    Ok(trace.embedding)
}

/// Differentiable per-layer (mean, variance) of this batch's activations at
/// each BN input. Empty for BN-free models; batches of fewer than two images
/// are rejected (the variance estimate needs them).
pub fn batch_bn_statistics(
    model: &dyn Classifier,
    batch: &ImageBatch,
) -> Result<Vec<BnBatchStats>> {
    check_batch(model, batch, "batch_bn_statistics")?;
    if batch.len() < 2 {
        return Err(Error::invalid(
            "batch_bn_statistics: batch size must be >= 2 for a defined variance",
        ));
    }
    if model.bn_layer_count() == 0 {
        return Ok(Vec::new());
    }
    let trace = model.trace(
        &batch.to_tensor(),
        &TraceOptions::eval().with_batch_stats(),
    );
    debug_assert_eq!(trace.batch_stats.len(), model.bn_layer_count());
    Ok(trace.batch_stats)
}

/// Read-only snapshot of the model's running BN statistics.
pub fn running_bn_statistics(model: &dyn Classifier) -> Vec<BnStats> {
    model.running_bn()
}

/// FNV-1a checksum over a model's full state (weights and running buffers),
/// used to assert that frozen models stay frozen.
pub fn model_checksum(model: &dyn Classifier) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for (name, arr) in model.state() {
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        for v in arr.iter() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}
