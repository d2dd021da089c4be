//! Desk-scale model zoo.
//!
//! * [`SmallCnn`] — three conv/BN/ReLU stages with average pooling, a global
//!   average pool embedding, and a linear head. `cnn16` is the teacher width,
//!   `cnn16-half` the student.
//! * [`ConvGenerator`] — latent rows through a linear stem into a 4x4 map,
//!   then nearest-upsample + conv blocks up to the image size, sigmoid output.
//! * [`DiscriminatorHead`] — the contrastive projection head: a two-layer
//!   perceptron over the frozen teacher's penultimate embedding concatenated
//!   with its globally pooled intermediate features.
//! * [`LinearClassifier`] — BN-free toy whose embedding is the flattened
//!   input; handy as a minimal teacher in tests.

use crate::contracts::{BnStats, Classifier, ForwardTrace, Generator, Projector, TraceOptions};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2dLayer, Linear, Mode};
use crate::tensor::{avg_pool2d, global_avg_pool, upsample_nearest2, Tensor};
use ndarray::{Array1, ArrayD};
use std::collections::BTreeMap;
use std::rc::Rc;

/// Classifier widths per architecture id.
pub fn classifier_widths(arch_id: &str) -> Result<[usize; 3]> {
    match arch_id {
        "cnn16" => Ok([16, 32, 64]),
        "cnn16-half" => Ok([8, 16, 32]),
        other => Err(Error::Config(format!(
            "unknown classifier architecture `{other}` (known: cnn16, cnn16-half)"
        ))),
    }
}

pub struct SmallCnn {
    arch_id: String,
    input_shape: (usize, usize, usize),
    label_count: usize,
    convs: [Conv2dLayer; 3],
    bns: [BatchNorm; 3],
    fc: Linear,
}

impl SmallCnn {
    pub fn new(
        arch_id: &str,
        input_shape: (usize, usize, usize),
        label_count: usize,
        seed: u64,
        trainable: bool,
    ) -> Result<Self> {
        let (c_in, h, w) = input_shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "SmallCnn needs H and W divisible by 4, got {h}x{w}"
            )));
        }
        let widths = classifier_widths(arch_id)?;
        let mut rng = crate::rng::stream(seed, "init-classifier", &[widths[0] as u64]);
        let convs = [
            Conv2dLayer::new(&mut rng, c_in, widths[0], 3, 1, trainable),
            Conv2dLayer::new(&mut rng, widths[0], widths[1], 3, 1, trainable),
            Conv2dLayer::new(&mut rng, widths[1], widths[2], 3, 1, trainable),
        ];
        let bns = [
            BatchNorm::new(widths[0], trainable),
            BatchNorm::new(widths[1], trainable),
            BatchNorm::new(widths[2], trainable),
        ];
        let fc = Linear::new(&mut rng, widths[2], label_count, trainable);
        Ok(SmallCnn {
            arch_id: arch_id.to_string(),
            input_shape,
            label_count,
            convs,
            bns,
            fc,
        })
    }

    /// Apply the linear head to an embedding (exactly the head used by
    /// `trace`, so head(embedding) reproduces logits bit for bit).
    pub fn head(&self, embedding: &Tensor) -> Tensor {
        self.fc.forward(embedding)
    }
}

impl Classifier for SmallCnn {
    fn arch_id(&self) -> &str {
        &self.arch_id
    }

    fn label_count(&self) -> usize {
        self.label_count
    }

    fn feature_dim(&self) -> usize {
        self.bns[2].channels
    }

    fn bn_layer_count(&self) -> usize {
        3
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn trace(&self, images: &Tensor, opts: &TraceOptions) -> ForwardTrace {
        let mut batch_stats = Vec::new();
        let mut pool_features = Vec::new();
        let mut x = images.clone();
        for (i, (conv, bn)) in self.convs.iter().zip(self.bns.iter()).enumerate() {
            let pre = conv.forward(&x);
            if opts.batch_stats {
                batch_stats.push(BatchNorm::batch_stats(&pre));
            }
            let act = bn.forward(&pre, opts.mode).relu();
            if i < 2 {
                x = avg_pool2d(&act, 2);
                if opts.pool_features {
                    pool_features.push(global_avg_pool(&x));
                }
            } else {
                x = act;
            }
        }
        let embedding = global_avg_pool(&x);
        let logits = self.fc.forward(&embedding);
        ForwardTrace {
            logits,
            embedding,
            pool_features,
            batch_stats,
        }
    }

    fn parameters(&self) -> Vec<Tensor> {
        let mut p = Vec::new();
        for conv in &self.convs {
            p.extend(conv.parameters());
        }
        for bn in &self.bns {
            p.extend(bn.parameters());
        }
        p.extend(self.fc.parameters());
        p
    }

    fn running_bn(&self) -> Vec<BnStats> {
        self.bns
            .iter()
            .map(|bn| BnStats {
                mean: bn.running_mean.borrow().clone(),
                var: bn.running_var.borrow().clone(),
            })
            .collect()
    }

    fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut s = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            s.extend(conv.state(&format!("conv{}", i + 1)));
        }
        for (i, bn) in self.bns.iter().enumerate() {
            s.extend(bn.state(&format!("bn{}", i + 1)));
        }
        s.extend(self.fc.state("fc"));
        s
    }

    fn load_state(&self, state: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        load_into(state, &self.state_tensors())
    }
}

impl SmallCnn {
    fn state_tensors(&self) -> Vec<(String, StateSlot<'_>)> {
        let mut s: Vec<(String, StateSlot)> = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            s.push((format!("conv{}.weight", i + 1), StateSlot::Param(&conv.w)));
            s.push((format!("conv{}.bias", i + 1), StateSlot::Param(&conv.b)));
        }
        for (i, bn) in self.bns.iter().enumerate() {
            s.push((format!("bn{}.gamma", i + 1), StateSlot::Param(&bn.gamma)));
            s.push((format!("bn{}.beta", i + 1), StateSlot::Param(&bn.beta)));
            s.push((
                format!("bn{}.running_mean", i + 1),
                StateSlot::Buffer(&bn.running_mean),
            ));
            s.push((
                format!("bn{}.running_var", i + 1),
                StateSlot::Buffer(&bn.running_var),
            ));
        }
        s.push(("fc.weight".into(), StateSlot::Param(&self.fc.w)));
        s.push(("fc.bias".into(), StateSlot::Param(&self.fc.b)));
        s
    }
}

/// Where a named state entry lands when loading a checkpoint.
enum StateSlot<'a> {
    Param(&'a Tensor),
    Buffer(&'a std::cell::RefCell<Array1<f64>>),
}

fn load_into(state: &BTreeMap<String, ArrayD<f64>>, slots: &[(String, StateSlot<'_>)]) -> Result<()> {
    for (name, slot) in slots {
        let arr = state
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        match slot {
            StateSlot::Param(t) => {
                if t.shape() != arr.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        arr.shape(),
                        t.shape()
                    )));
                }
                t.update_data(|d| d.assign(arr));
            }
            StateSlot::Buffer(cell) => {
                let v = arr
                    .clone()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::Checkpoint(format!("buffer `{name}` is not 1-D")))?;
                if v.len() != cell.borrow().len() {
                    return Err(Error::Checkpoint(format!(
                        "buffer `{name}` has length {}, expected {}",
                        v.len(),
                        cell.borrow().len()
                    )));
                }
                *cell.borrow_mut() = v;
            }
        }
    }
    Ok(())
}

/// Latent-to-image generator: linear stem to a 4x4 map, then
/// upsample + conv blocks, sigmoid into `[0, 1]`.
pub struct ConvGenerator {
    latent_dim: usize,
    output_shape: (usize, usize, usize),
    stem: Linear,
    stem_bn: BatchNorm,
    stem_channels: usize,
    blocks: Vec<(Conv2dLayer, BatchNorm)>,
    out_conv: Conv2dLayer,
}

impl ConvGenerator {
    pub fn new(
        latent_dim: usize,
        output_shape: (usize, usize, usize),
        seed: u64,
        trainable: bool,
    ) -> Result<Self> {
        let (c_out, h, w) = output_shape;
        if h != w || !h.is_power_of_two() || h < 8 {
            return Err(Error::invalid(format!(
                "ConvGenerator expects square power-of-two images >= 8, got {h}x{w}"
            )));
        }
        let ups = (h / 4).trailing_zeros() as usize;
        let mut rng = crate::rng::stream(seed, "init-generator", &[latent_dim as u64]);
        let stem_channels = 48;
        let stem = Linear::new(&mut rng, latent_dim, stem_channels * 16, trainable);
        let stem_bn = BatchNorm::new(stem_channels, trainable);
        let mut blocks = Vec::new();
        let mut c = stem_channels;
        for _ in 0..ups {
            let next = (c / 2).max(16);
            blocks.push((
                Conv2dLayer::new(&mut rng, c, next, 3, 1, trainable),
                BatchNorm::new(next, trainable),
            ));
            c = next;
        }
        let out_conv = Conv2dLayer::new(&mut rng, c, c_out, 3, 1, trainable);
        Ok(ConvGenerator {
            latent_dim,
            output_shape,
            stem,
            stem_bn,
            stem_channels,
            blocks,
            out_conv,
        })
    }
}

impl Generator for ConvGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn output_shape(&self) -> (usize, usize, usize) {
        self.output_shape
    }

    fn forward(&self, latent: &Tensor, mode: Mode) -> Tensor {
        let b = latent.shape()[0];
        let x = self.stem.forward(latent).reshape(&[b, self.stem_channels, 4, 4]);
        let mut x = self.stem_bn.forward(&x, mode).relu();
        for (conv, bn) in &self.blocks {
            x = upsample_nearest2(&x);
            x = bn.forward(&conv.forward(&x), mode).relu();
        }
        self.out_conv.forward(&x).sigmoid()
    }

    fn parameters(&self) -> Vec<Tensor> {
        let mut p = self.stem.parameters();
        p.extend(self.stem_bn.parameters());
        for (conv, bn) in &self.blocks {
            p.extend(conv.parameters());
            p.extend(bn.parameters());
        }
        p.extend(self.out_conv.parameters());
        p
    }

    fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut s = self.stem.state("stem");
        s.extend(self.stem_bn.state("stem_bn"));
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            s.extend(conv.state(&format!("block{i}.conv")));
            s.extend(bn.state(&format!("block{i}.bn")));
        }
        s.extend(self.out_conv.state("out"));
        s
    }

    fn load_state(&self, state: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        let mut slots: Vec<(String, StateSlot)> = vec![
            ("stem.weight".into(), StateSlot::Param(&self.stem.w)),
            ("stem.bias".into(), StateSlot::Param(&self.stem.b)),
            ("stem_bn.gamma".into(), StateSlot::Param(&self.stem_bn.gamma)),
            ("stem_bn.beta".into(), StateSlot::Param(&self.stem_bn.beta)),
            (
                "stem_bn.running_mean".into(),
                StateSlot::Buffer(&self.stem_bn.running_mean),
            ),
            (
                "stem_bn.running_var".into(),
                StateSlot::Buffer(&self.stem_bn.running_var),
            ),
        ];
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            slots.push((format!("block{i}.conv.weight"), StateSlot::Param(&conv.w)));
            slots.push((format!("block{i}.conv.bias"), StateSlot::Param(&conv.b)));
            slots.push((format!("block{i}.bn.gamma"), StateSlot::Param(&bn.gamma)));
            slots.push((format!("block{i}.bn.beta"), StateSlot::Param(&bn.beta)));
            slots.push((
                format!("block{i}.bn.running_mean"),
                StateSlot::Buffer(&bn.running_mean),
            ));
            slots.push((
                format!("block{i}.bn.running_var"),
                StateSlot::Buffer(&bn.running_var),
            ));
        }
        slots.push(("out.weight".into(), StateSlot::Param(&self.out_conv.w)));
        slots.push(("out.bias".into(), StateSlot::Param(&self.out_conv.b)));
        load_into(state, &slots)
    }
}

/// Two-layer perceptron over `[embedding | pooled features]` of a frozen
/// classifier; the contrastive loss measures cosines in its output space.
pub struct DiscriminatorHead {
    backbone: Rc<dyn Classifier>,
    fc1: Linear,
    fc2: Linear,
    projection_dim: usize,
}

impl DiscriminatorHead {
    pub fn new(backbone: Rc<dyn Classifier>, seed: u64, trainable: bool) -> Self {
        // Pool widths from a dry run would need an image; derive from arch:
        // the two pooled stages have the first two widths of the backbone.
        let d = backbone.feature_dim();
        let pool_dims = DiscriminatorHead::pool_dims(backbone.as_ref());
        let in_dim = d + pool_dims.iter().sum::<usize>();
        let mut rng = crate::rng::stream(seed, "init-discriminator", &[in_dim as u64]);
        let hidden = 64;
        let projection_dim = 32;
        DiscriminatorHead {
            backbone,
            fc1: Linear::new(&mut rng, in_dim, hidden, trainable),
            fc2: Linear::new(&mut rng, hidden, projection_dim, trainable),
            projection_dim,
        }
    }

    fn pool_dims(backbone: &dyn Classifier) -> Vec<usize> {
        match classifier_widths(backbone.arch_id()) {
            Ok(widths) => vec![widths[0], widths[1]],
            Err(_) => Vec::new(),
        }
    }

    pub fn projection_dim(&self) -> usize {
        self.projection_dim
    }

    pub fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut s = self.fc1.state("fc1");
        s.extend(self.fc2.state("fc2"));
        s
    }

    pub fn load_state(&self, state: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        let slots: Vec<(String, StateSlot)> = vec![
            ("fc1.weight".into(), StateSlot::Param(&self.fc1.w)),
            ("fc1.bias".into(), StateSlot::Param(&self.fc1.b)),
            ("fc2.weight".into(), StateSlot::Param(&self.fc2.w)),
            ("fc2.bias".into(), StateSlot::Param(&self.fc2.b)),
        ];
        load_into(state, &slots)
    }
}

impl DiscriminatorHead {
    fn head_over(&self, embedding: Tensor, pool_features: Vec<Tensor>) -> Result<Tensor> {
        let mut parts = vec![embedding];
        parts.extend(pool_features);
        let x = Tensor::concat_cols(&parts);
        let h = self.fc1.forward(&x).relu();
        let z = self.fc2.forward(&h);
        if !z.is_finite() {
            return Err(Error::Pipeline {
                stage: "discriminator".into(),
                detail: "non-finite projection".into(),
            });
        }
        Ok(z)
    }
}

impl Projector for DiscriminatorHead {
    fn project(&self, images: &Tensor) -> Result<Tensor> {
        let opts = TraceOptions::eval().with_pool_features();
        let trace = self.backbone.trace(images, &opts);
        self.head_over(trace.embedding, trace.pool_features)
    }

    fn project_trace(&self, trace: &crate::contracts::ForwardTrace) -> Option<Result<Tensor>> {
        if trace.pool_features.is_empty() {
            return None;
        }
        Some(self.head_over(trace.embedding.clone(), trace.pool_features.clone()))
    }

    fn parameters(&self) -> Vec<Tensor> {
        let mut p = self.fc1.parameters();
        p.extend(self.fc2.parameters());
        p
    }
}

/// Projects an image to its flattened pixels. Test fixture for the
/// contrastive loss's hand-computed cases.
pub struct IdentityProjector;

impl Projector for IdentityProjector {
    fn project(&self, images: &Tensor) -> Result<Tensor> {
        let shape = images.shape();
        let b = shape[0];
        let f: usize = shape[1..].iter().product();
        Ok(images.reshape(&[b, f]))
    }

    fn parameters(&self) -> Vec<Tensor> {
        Vec::new()
    }
}

/// BN-free linear classifier; its embedding is the flattened input.
pub struct LinearClassifier {
    input_shape: (usize, usize, usize),
    label_count: usize,
    fc: Linear,
}

impl LinearClassifier {
    pub fn new(
        input_shape: (usize, usize, usize),
        label_count: usize,
        seed: u64,
        trainable: bool,
    ) -> Self {
        let (c, h, w) = input_shape;
        let mut rng = crate::rng::stream(seed, "init-linear", &[]);
        LinearClassifier {
            input_shape,
            label_count,
            fc: Linear::new(&mut rng, c * h * w, label_count, trainable),
        }
    }

    /// All-zero weights: logits are identically zero.
    pub fn zeroed(input_shape: (usize, usize, usize), label_count: usize) -> Self {
        let lc = LinearClassifier::new(input_shape, label_count, 0, false);
        lc.fc.w.update_data(|w| w.fill(0.0));
        lc
    }
}

impl Classifier for LinearClassifier {
    fn arch_id(&self) -> &str {
        "linear"
    }

    fn label_count(&self) -> usize {
        self.label_count
    }

    fn feature_dim(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    fn bn_layer_count(&self) -> usize {
        0
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn trace(&self, images: &Tensor, _opts: &TraceOptions) -> ForwardTrace {
        let shape = images.shape();
        let b = shape[0];
        let f: usize = shape[1..].iter().product();
        let embedding = images.reshape(&[b, f]);
        let logits = self.fc.forward(&embedding);
        ForwardTrace {
            logits,
            embedding,
            pool_features: Vec::new(),
            batch_stats: Vec::new(),
        }
    }

    fn parameters(&self) -> Vec<Tensor> {
        self.fc.parameters()
    }

    fn running_bn(&self) -> Vec<BnStats> {
        Vec::new()
    }

    fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        self.fc.state("fc")
    }

    fn load_state(&self, state: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        let slots: Vec<(String, StateSlot)> = vec![
            ("fc.weight".into(), StateSlot::Param(&self.fc.w)),
            ("fc.bias".into(), StateSlot::Param(&self.fc.b)),
        ];
        load_into(state, &slots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{
        batch_bn_statistics, forward_logits, model_checksum, penultimate_embedding,
        running_bn_statistics,
    };
    use crate::data::{digits, ImageBatch};

    fn tiny_batch(n: usize) -> ImageBatch {
        digits(n, 1, 99).train
    }

    #[test]
    fn zero_weight_linear_model_gives_zero_logits() {
        let model = LinearClassifier::zeroed((1, 16, 16), 2);
        let logits = forward_logits(&model, &tiny_batch(3)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(logits.shape(), vec![3, 2]);
    }

    #[test]
    fn identity_feature_model_embeds_flattened_input() {
        let model = LinearClassifier::new((1, 16, 16), 10, 4, false);
        let batch = tiny_batch(2);
        let emb = penultimate_embedding(&model, &batch).unwrap();
        let flat: Vec<f64> = batch.images.iter().cloned().collect();
        let got: Vec<f64> = emb.data().iter().cloned().collect();
        assert_eq!(flat, got);
    }

    #[test]
    fn logits_are_deterministic_across_calls() {
        let model = SmallCnn::new("cnn16", (1, 16, 16), 10, 11, false).unwrap();
        let batch = tiny_batch(4);
        let a = forward_logits(&model, &batch).unwrap().to_array();
        let b = forward_logits(&model, &batch).unwrap().to_array();
        assert_eq!(a, b);
    }

    #[test]
    fn head_of_embedding_reproduces_logits_exactly() {
        let model = SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap();
        for seed in 0..10u64 {
            let batch = digits(6, 1, 100 + seed).train;
            let logits = forward_logits(&model, &batch).unwrap().to_array();
            let emb = penultimate_embedding(&model, &batch).unwrap();
            let via_head = model.head(&emb).to_array();
            assert_eq!(logits, via_head);
        }
    }

    #[test]
    fn feature_dim_matches_embedding_width() {
        for arch in ["cnn16", "cnn16-half"] {
            let model = SmallCnn::new(arch, (1, 16, 16), 10, 2, false).unwrap();
            let emb = penultimate_embedding(&model, &tiny_batch(2)).unwrap();
            assert_eq!(emb.shape()[1], model.feature_dim());
        }
    }

    #[test]
    fn fresh_bn_running_stats_are_zero_mean_unit_var() {
        let model = SmallCnn::new("cnn16", (1, 16, 16), 10, 3, false).unwrap();
        for stats in running_bn_statistics(&model) {
            assert!(stats.mean.iter().all(|&v| v == 0.0));
            assert!(stats.var.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn frozen_model_snapshots_are_identical() {
        let model = SmallCnn::new("cnn16", (1, 16, 16), 10, 5, false).unwrap();
        let before = model_checksum(&model);
        let _ = forward_logits(&model, &tiny_batch(4)).unwrap();
        let s1 = running_bn_statistics(&model);
        let s2 = running_bn_statistics(&model);
        assert_eq!(s1, s2);
        assert_eq!(before, model_checksum(&model));
    }

    #[test]
    fn batch_stats_invariant_under_batch_permutation() {
        let model = SmallCnn::new("cnn16", (1, 16, 16), 10, 7, false).unwrap();
        let batch = tiny_batch(6);
        let permuted = batch.select(&[3, 1, 5, 0, 4, 2]);
        let a = batch_bn_statistics(&model, &batch).unwrap();
        let b = batch_bn_statistics(&model, &permuted).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            let dm = (&sa.mean.to_array() - &sb.mean.to_array())
                .mapv(f64::abs)
                .sum();
            let dv = (&sa.var.to_array() - &sb.var.to_array())
                .mapv(f64::abs)
                .sum();
            assert!(dm < 1e-10 && dv < 1e-10, "stats changed under permutation");
        }
    }

    #[test]
    fn batch_stats_reject_single_image() {
        let model = SmallCnn::new("cnn16", (1, 16, 16), 10, 7, false).unwrap();
        assert!(batch_bn_statistics(&model, &tiny_batch(1)).is_err());
    }

    #[test]
    fn bn_free_model_has_empty_stats() {
        let model = LinearClassifier::new((1, 16, 16), 10, 1, false);
        let stats = batch_bn_statistics(&model, &tiny_batch(4)).unwrap();
        assert!(stats.is_empty());
    }

    #[test]
    fn identical_images_give_zero_variance_on_flat_bn() {
        // Variance across the batch axis only, so a BN layer over (B, F)
        // sees zero variance when every image is identical.
        let bn = BatchNorm::new(4, false);
        let row = [1.0, -2.0, 0.5, 3.0];
        let x = Tensor::constant(
            ndarray::arr2(&[row, row, row]).into_dyn(),
        );
        let stats = BatchNorm::batch_stats(&x);
        assert!(stats.var.to_array().iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(bn.channels, 4);
    }

    #[test]
    fn checkpoint_state_roundtrip() {
        let a = SmallCnn::new("cnn16", (1, 16, 16), 10, 21, true).unwrap();
        let b = SmallCnn::new("cnn16", (1, 16, 16), 10, 22, false).unwrap();
        let state: BTreeMap<String, ArrayD<f64>> = a.state().into_iter().collect();
        b.load_state(&state).unwrap();
        assert_eq!(model_checksum(&a), model_checksum(&b));
        let batch = tiny_batch(3);
        assert_eq!(
            forward_logits(&a, &batch).unwrap().to_array(),
            forward_logits(&b, &batch).unwrap().to_array()
        );
    }

    #[test]
    fn generator_outputs_unit_range_images() {
        let g = ConvGenerator::new(64, (1, 16, 16), 9, true).unwrap();
        let z = Tensor::constant(crate::nn::standard_normal(
            &mut crate::rng::stream(1, "z", &[]),
            &[5, 64],
        ));
        let imgs = g.forward(&z, Mode::Train);
        assert_eq!(imgs.shape(), vec![5, 1, 16, 16]);
        assert!(imgs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn discriminator_projects_and_backpropagates_to_pixels() {
        let teacher: Rc<dyn Classifier> =
            Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 31, false).unwrap());
        let disc = DiscriminatorHead::new(teacher, 32, true);
        let images = tiny_batch(3).to_variable();
        let z = disc.project(&images).unwrap();
        assert_eq!(z.shape(), vec![3, disc.projection_dim()]);
        z.square().sum_all().backward();
        let g = images.grad().expect("no gradient to pixels");
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
