//! Diverse diffusion augmentation with cosine-similarity filtering.
//!
//! Each synthetic image is encoded to a latent, expanded into K variants by a
//! diffusion backend, scored by the student's cross-entropy on the source
//! label, and filtered: a variant survives only if the cosine similarity
//! between its embedding and the source's embedding strictly exceeds the
//! threshold. Filtered-out variants are discarded; if every variant of a
//! source is cut, the source image itself stands in so no sample is lost.

mod remote;
mod surrogate;

pub use remote::{
    AugmentRequest, AugmentResponse, HttpTransport, RemoteDiffusion, RetryPolicy, Transport,
    TransportError,
};
pub use surrogate::{IdentityDiffusion, ImageAutoencoder, SurrogateConfig, SurrogateDiffusion};

use crate::contracts::{Classifier, Projector, TraceOptions};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::memory::COSINE_EPS;
use crate::synthesis::HyperParams;
use crate::tensor::Tensor;
use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Latent representation of one image under a backend's encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: ArrayD<f64>,
}

/// Backend knobs for one generation call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSettings {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Augmentation strength multiplier (adaptive policy output; 1.0 = base).
    pub intensity: f64,
}

impl DiffusionSettings {
    pub fn from_hyperparams(hp: &HyperParams, intensity: f64) -> Self {
        DiffusionSettings {
            steps: hp.diffusion_steps,
            guidance_scale: hp.guidance_scale,
            intensity,
        }
    }
}

/// A frozen image-to-image augmenter.
pub trait DiffusionModel {
    fn backend_kind(&self) -> &'static str;
    fn version(&self) -> String;
    fn image_shape(&self) -> (usize, usize, usize);
    fn encode(&self, image: &Array3<f64>) -> Result<Latent>;
    fn generate(&self, latent: &Latent, settings: &DiffusionSettings, seed: u64) -> Result<Array3<f64>>;
}

/// Deterministic latent of one image under the backend's encoder.
pub fn encode_latent(backend: &dyn DiffusionModel, image: &Array3<f64>) -> Result<Latent> {
    backend.encode(image)
}

/// K augmented images from one latent, one seed per variant.
pub fn diffuse_augment(
    backend: &dyn DiffusionModel,
    latent: &Latent,
    k: usize,
    seeds: &[u64],
    settings: &DiffusionSettings,
) -> Result<Vec<Array3<f64>>> {
    if k == 0 {
        return Err(Error::invalid("diffuse_augment: K must be >= 1"));
    }
    if seeds.len() != k {
        return Err(Error::invalid(format!(
            "diffuse_augment: need {k} seeds, got {}",
            seeds.len()
        )));
    }
    let mut out = Vec::with_capacity(k);
    for &seed in seeds {
        out.push(backend.generate(latent, settings, seed)?);
    }
    Ok(out)
}

/// Student cross-entropy on a single augmented variant against the
/// pre-augmentation label. Differentiable w.r.t. student parameters.
pub fn self_supervised_loss(
    student: &dyn Classifier,
    variant: &Array3<f64>,
    source_label: usize,
) -> Result<Tensor> {
    if source_label >= student.label_count() {
        return Err(Error::invalid(format!(
            "self_supervised_loss: label {source_label} out of range ({})",
            student.label_count()
        )));
    }
    let (c, h, w) = variant.dim();
    let x = Tensor::constant(
        variant
            .clone()
            .into_shape_with_order(ndarray::IxDyn(&[1, c, h, w]))
            .unwrap(),
    );
    let trace = student.trace(&x, &TraceOptions::eval());
    crate::synthesis::class_prior_loss(&trace.logits, &[source_label])
}

/// Which embedding space the similarity filter measures in.
pub enum SimilaritySpace<'a> {
    /// Penultimate embedding of a (frozen) classifier — the default; it is
    /// stationary across the run.
    Embedding(&'a dyn Classifier),
    /// The contrastive projection head.
    Projection(&'a dyn Projector),
}

impl SimilaritySpace<'_> {
    fn embed(&self, image: &Array3<f64>) -> Result<Vec<f64>> {
        let (c, h, w) = image.dim();
        let x = Tensor::constant(
            image
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&[1, c, h, w]))
                .unwrap(),
        );
        let row = match self {
            SimilaritySpace::Embedding(model) => {
                model.trace(&x, &TraceOptions::eval()).embedding
            }
            SimilaritySpace::Projection(proj) => proj.project(&x)?,
        };
        let vals: Vec<f64> = row.data().iter().cloned().collect();
        Ok(vals)
    }
}

/// Cosine similarity of two images in the chosen embedding space, in
/// `[-1, 1]`. A zero-norm embedding yields 0 with a logged warning.
pub fn similarity(space: &SimilaritySpace<'_>, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "similarity",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let ea = space.embed(a)?;
    let eb = space.embed(b)?;
    let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
    let na: f64 = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("similarity: degenerate zero-norm embedding, reporting 0");
        return Ok(0.0);
    }
    Ok((dot / (na * nb + COSINE_EPS)).clamp(-1.0, 1.0))
}

/// Retention mask: strictly `s > omega`, elementwise.
pub fn filter_mask(similarities: &[f64], omega: f64) -> Vec<bool> {
    similarities.iter().map(|&s| s > omega).collect()
}

/// One source image's augmentation outcome.
#[derive(Debug, Clone)]
pub struct AugmentationRecord {
    pub source_index: usize,
    pub source: Array3<f64>,
    pub label: usize,
    pub latent: Latent,
    pub seeds: Vec<u64>,
    pub variants: Vec<Array3<f64>>,
    pub similarities: Vec<f64>,
    pub mask: Vec<bool>,
    pub self_losses: Vec<f64>,
    /// True when every variant was filtered out and the source image is the
    /// round's stand-in sample.
    pub used_fallback: bool,
}

impl AugmentationRecord {
    pub fn retained(&self) -> impl Iterator<Item = &Array3<f64>> {
        self.variants
            .iter()
            .zip(self.mask.iter())
            .filter_map(|(v, &keep)| keep.then_some(v))
    }

    pub fn retained_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-source augmentation intensity policy.
pub trait AugmentPolicy {
    fn intensity_for(&self, label: usize) -> f64;
    /// Digest one round's records before the next round runs.
    fn observe(&mut self, records: &[AugmentationRecord]);
}

/// Intensity for the next round scales with the mean self-supervised loss of
/// this round's retained variants, per class (labels persist across rounds;
/// individual source images do not). Clamped to `[0.5, 2.0]` times base; a
/// class's multiplier is 1 at the uniform-prediction loss `ln(C)`.
pub struct AdaptiveIntensity {
    base: f64,
    label_count: usize,
    multipliers: Vec<f64>,
}

impl AdaptiveIntensity {
    pub fn new(base: f64, label_count: usize) -> Self {
        AdaptiveIntensity {
            base,
            label_count,
            multipliers: vec![1.0; label_count],
        }
    }
}

impl AugmentPolicy for AdaptiveIntensity {
    fn intensity_for(&self, label: usize) -> f64 {
        self.base * self.multipliers.get(label).copied().unwrap_or(1.0)
    }

    fn observe(&mut self, records: &[AugmentationRecord]) {
        let reference = (self.label_count as f64).ln();
        let mut sums = vec![0.0; self.label_count];
        let mut counts = vec![0usize; self.label_count];
        for rec in records {
            for (i, &keep) in rec.mask.iter().enumerate() {
                if keep {
                    sums[rec.label] += rec.self_losses[i];
                    counts[rec.label] += 1;
                }
            }
        }
        for c in 0..self.label_count {
            if counts[c] > 0 {
                let mean = sums[c] / counts[c] as f64;
                self.multipliers[c] = (mean / reference).clamp(0.5, 2.0);
            }
        }
    }
}

/// Constant-intensity policy.
pub struct FixedIntensity(pub f64);

impl AugmentPolicy for FixedIntensity {
    fn intensity_for(&self, _label: usize) -> f64 {
        self.0
    }

    fn observe(&mut self, _records: &[AugmentationRecord]) {}
}

/// Expand a synthetic batch through the backend and filter it.
///
/// `filter_enabled = false` retains every variant regardless of similarity
/// (similarities are still measured and recorded). A backend that reports
/// itself unreachable downgrades the whole round to no augmentation: every
/// record comes back with zero variants and the source as fallback.
#[allow(clippy::too_many_arguments)]
pub fn augment_pipeline(
    synth_batch: &ImageBatch,
    student: &dyn Classifier,
    space: &SimilaritySpace<'_>,
    backend: &dyn DiffusionModel,
    hp: &HyperParams,
    policy: &dyn AugmentPolicy,
    filter_enabled: bool,
    round: usize,
    master_seed: u64,
) -> Result<Vec<AugmentationRecord>> {
    if synth_batch.is_empty() {
        return Err(Error::invalid("augment_pipeline: empty batch"));
    }
    hp.validate()?;
    let k = hp.augment_factor;
    let mut records = Vec::with_capacity(synth_batch.len());
    let mut outage: Option<Error> = None;

    for i in 0..synth_batch.len() {
        let source = synth_batch.image(i);
        let label = synth_batch.labels[i];
        let latent = encode_latent(backend, &source)?;
        let seeds: Vec<u64> = (0..k)
            .map(|v| {
                crate::rng::derive_seed(
                    master_seed,
                    "augment-variant",
                    &[round as u64, i as u64, v as u64],
                )
            })
            .collect();
        let settings = DiffusionSettings::from_hyperparams(hp, policy.intensity_for(label));

        let variants = if outage.is_some() {
            Vec::new()
        } else {
            match diffuse_augment(backend, &latent, k, &seeds, &settings) {
                Ok(v) => v,
                Err(e @ Error::BackendUnreachable { .. }) => {
                    log::warn!("augmentation degraded to no-augmentation this round: {e}");
                    outage = Some(e);
                    Vec::new()
                }
                Err(other) => return Err(other),
            }
        };

        let mut similarities = Vec::with_capacity(variants.len());
        let mut self_losses = Vec::with_capacity(variants.len());
        for v in &variants {
            similarities.push(similarity(space, v, &source)?);
            self_losses.push(self_supervised_loss(student, v, label)?.item());
        }
        let mask = if filter_enabled {
            filter_mask(&similarities, hp.omega)
        } else {
            vec![true; variants.len()]
        };
        let used_fallback = !mask.iter().any(|&m| m);
        records.push(AugmentationRecord {
            source_index: i,
            source,
            label,
            latent,
            seeds,
            variants,
            similarities,
            mask,
            self_losses,
            used_fallback,
        });
    }
    Ok(records)
}

/// Manifest row for one cached variant.
#[derive(Debug, Serialize, Deserialize)]
pub struct CacheEntry {
    pub source_id: usize,
    pub variant_index: usize,
    pub seed: u64,
    pub similarity: f64,
    pub mask: bool,
    pub self_loss: f64,
    pub label: usize,
    pub file: String,
}

/// Write retained variants (plus fallback sources) of one round to
/// `dir/round_XXXX/` as PNGs with a JSON manifest.
pub fn write_augment_cache(dir: &Path, round: usize, records: &[AugmentationRecord]) -> Result<()> {
    let round_dir = dir.join(format!("round_{round:04}"));
    std::fs::create_dir_all(&round_dir)?;
    let mut entries = Vec::new();
    for rec in records {
        for (vi, variant) in rec.variants.iter().enumerate() {
            if !rec.mask[vi] {
                continue;
            }
            let file = format!("src{:04}_var{}.png", rec.source_index, vi);
            std::fs::write(
                round_dir.join(&file),
                crate::imgio::encode_png16(variant)?,
            )?;
            entries.push(CacheEntry {
                source_id: rec.source_index,
                variant_index: vi,
                seed: rec.seeds[vi],
                similarity: rec.similarities[vi],
                mask: rec.mask[vi],
                self_loss: rec.self_losses[vi],
                label: rec.label,
                file,
            });
        }
        if rec.used_fallback {
            let file = format!("src{:04}_fallback.png", rec.source_index);
            std::fs::write(
                round_dir.join(&file),
                crate::imgio::encode_png16(&rec.source)?,
            )?;
            entries.push(CacheEntry {
                source_id: rec.source_index,
                variant_index: usize::MAX,
                seed: 0,
                similarity: 1.0,
                mask: true,
                self_loss: f64::NAN,
                label: rec.label,
                file,
            });
        }
    }
    let manifest = serde_json::to_vec_pretty(&entries)
        .map_err(|e| Error::invalid(format!("manifest encode: {e}")))?;
    std::fs::write(round_dir.join("manifest.json"), manifest)?;
    Ok(())
}
