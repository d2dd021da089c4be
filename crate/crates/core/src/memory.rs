//! Bounded FIFO store of synthetic samples and the contrastive diversity
//! loss over it.
//!
//! The bank keeps detached pixel snapshots: once pushed, later generator
//! updates cannot change stored images. For each anchor the loss pulls a
//! randomly augmented positive view close and pushes bank negatives away in
//! the projection head's embedding space. The denominator sums over
//! negatives only; `HyperParams::contrastive_includes_positive` switches to
//! the variant that also counts the positive term.

use crate::contracts::Projector;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

pub const COSINE_EPS: f64 = 1e-8;

/// One stored sample.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub image: Array3<f64>,
    pub label: usize,
    pub insertion_round: usize,
}

/// Bounded FIFO of synthetic samples.
#[derive(Debug)]
pub struct MemoryBank {
    capacity: usize,
    image_shape: (usize, usize, usize),
    entries: VecDeque<BankEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize, image_shape: (usize, usize, usize)) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("memory bank capacity must be positive"));
        }
        Ok(MemoryBank {
            capacity,
            image_shape,
            entries: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn entry(&self, i: usize) -> &BankEntry {
        &self.entries[i]
    }

    /// Append a batch; evicts oldest entries first once past capacity.
    pub fn push(&mut self, batch: &ImageBatch, round: usize) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        if batch.image_shape() != self.image_shape {
            return Err(Error::shape(
                "memory_bank.push",
                format!("{:?}", self.image_shape),
                format!("{:?}", batch.image_shape()),
            ));
        }
        for i in 0..batch.len() {
            self.entries.push_back(BankEntry {
                image: batch.image(i),
                label: batch.labels[i],
                insertion_round: round,
            });
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// Uniform sample of `n` distinct entry indices.
    pub fn sample_indices(&self, n: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
        let n = n.min(self.entries.len());
        // Partial Fisher-Yates over index vector.
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        for i in 0..n {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    }

    fn stack(&self, indices: &[usize]) -> Array4<f64> {
        let (c, h, w) = self.image_shape;
        let mut out = Array4::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.entries[i].image);
        }
        out
    }

    const MAGIC: &'static [u8; 4] = b"DFKB";
    const VERSION: u32 = 1;

    /// Persist the bank (versioned header + raw f64 pixels).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (c, h, w) = self.image_shape;
        let mut buf = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&Self::VERSION.to_le_bytes());
        for v in [self.capacity, self.entries.len(), c, h, w] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for e in &self.entries {
            buf.extend_from_slice(&(e.label as u64).to_le_bytes());
            buf.extend_from_slice(&(e.insertion_round as u64).to_le_bytes());
            for v in e.image.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cursor = Cursor { buf: &bytes, pos: 0 };
        if cursor.take(4)? != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic in bank file".into()));
        }
        let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported bank version {version}"
            )));
        }
        let (capacity, count, c, h, w) = (
            cursor.u64()? as usize,
            cursor.u64()? as usize,
            cursor.u64()? as usize,
            cursor.u64()? as usize,
            cursor.u64()? as usize,
        );
        let mut bank = MemoryBank::new(capacity, (c, h, w))?;
        for _ in 0..count {
            let label = cursor.u64()? as usize;
            let round = cursor.u64()? as usize;
            let mut img = Array3::zeros((c, h, w));
            for v in img.iter_mut() {
                *v = f64::from_le_bytes(cursor.take(8)?.try_into().unwrap());
            }
            bank.entries.push_back(BankEntry {
                image: img,
                label,
                insertion_round: round,
            });
        }
        Ok(bank)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("bank file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Positive-view augmentation policy: horizontal flip, zero-pad-and-crop
/// translation, brightness jitter. All-zero parameters are the identity.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewPolicy {
    pub flip_p: f64,
    pub crop_pad: usize,
    pub jitter: f64,
}

impl Default for ViewPolicy {
    fn default() -> Self {
        ViewPolicy {
            flip_p: 0.5,
            crop_pad: 4,
            jitter: 0.1,
        }
    }
}

impl ViewPolicy {
    pub fn identity() -> Self {
        ViewPolicy {
            flip_p: 0.0,
            crop_pad: 0,
            jitter: 0.0,
        }
    }
}

/// Randomly augmented copy of `image`, same shape, clamped to `[0, 1]`.
pub fn make_positive_view(
    image: &Array3<f64>,
    policy: &ViewPolicy,
    rng: &mut ChaCha12Rng,
) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let mut out = image.clone();
    if rng.random_range(0.0..1.0) < policy.flip_p {
        let mut flipped = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    flipped[(ci, y, x)] = out[(ci, y, w - 1 - x)];
                }
            }
        }
        out = flipped;
    }
    if policy.crop_pad > 0 {
        let p = policy.crop_pad as i64;
        let dy = rng.random_range(-p..=p) as isize;
        let dx = rng.random_range(-p..=p) as isize;
        let mut shifted = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx = x as isize + dx;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        shifted[(ci, y, x)] = out[(ci, sy as usize, sx as usize)];
                    }
                }
            }
        }
        out = shifted;
    }
    if policy.jitter > 0.0 {
        let delta = rng.random_range(-policy.jitter..=policy.jitter);
        out.mapv_inplace(|v| v + delta);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Cosine between each row of `rows` and the single row `z`: `(M)`.
fn cos_rows_vs(rows: &Tensor, z: &Tensor) -> Tensor {
    let m = rows.shape()[0];
    let p = rows.shape()[1];
    let dots = rows.matmul(&z.reshape(&[p, 1])).reshape(&[m]);
    let row_norms = rows.square().row_sum().sqrt();
    let z_norm = z.square().row_sum().sqrt(); // (1)
    let denom = row_norms.mul_scalar_t(&z_norm).add_scalar(COSINE_EPS);
    dots.div(&denom)
}

/// Cosine between two single-row tensors: scalar tensor.
fn cos_pair(a: &Tensor, b: &Tensor) -> Tensor {
    let dot = a.mul(b).row_sum(); // (1)
    let na = a.square().row_sum().sqrt();
    let nb = b.square().row_sum().sqrt();
    let denom = na.mul(&nb).add_scalar(COSINE_EPS);
    dot.div(&denom)
}

/// Inputs to one anchor's contrastive term, already projected.
struct AnchorViews {
    /// `(1, P)` anchor projection (on the tape).
    anchor: Tensor,
    /// `(1, P)` positive-view projection.
    positive: Tensor,
    /// `(M, P)` negative projections.
    negatives: Tensor,
}

fn anchor_term(views: &AnchorViews, tp: f64, include_positive: bool) -> Tensor {
    let num = cos_pair(&views.anchor, &views.positive).mul_scalar(1.0 / tp); // (1)
    let neg_cos = cos_rows_vs(&views.negatives, &views.anchor).mul_scalar(1.0 / tp); // (M)
    let mut denom = neg_cos.exp().sum_all();
    if include_positive {
        denom = denom.add(&num.exp());
    }
    denom.ln().sub(&num)
}

/// Contrastive loss over already-built views. Core math of the diversity
/// term; use [`contrastive_loss`] to build views from a bank and policy.
pub fn contrastive_loss_with_views(
    anchors_proj: &Tensor,           // (B, P), typically on the tape
    positives_proj: &Tensor,         // (B, P)
    negatives_proj: &Tensor,         // (N, P) pool
    negative_sets: &[Vec<usize>],    // per-anchor indices into the pool
    tp: f64,
    include_positive: bool,
) -> Result<Tensor> {
    if tp <= 0.0 {
        return Err(Error::invalid(format!(
            "contrastive temperature must be positive, got {tp}"
        )));
    }
    let b = anchors_proj.shape()[0];
    if b == 0 {
        return Err(Error::invalid("contrastive_loss: no anchors"));
    }
    if negative_sets.len() != b {
        return Err(Error::invalid(
            "contrastive_loss: one negative set per anchor required",
        ));
    }
    let mut total = Tensor::scalar(0.0);
    for i in 0..b {
        if negative_sets[i].is_empty() {
            return Err(Error::invalid(format!(
                "contrastive_loss: anchor {i} has no negatives"
            )));
        }
        let views = AnchorViews {
            anchor: anchors_proj.select_rows(&[i]),
            positive: positives_proj.select_rows(&[i]),
            negatives: negatives_proj.select_rows(&negative_sets[i]),
        };
        total = total.add(&anchor_term(&views, tp, include_positive));
    }
    Ok(total.mul_scalar(1.0 / b as f64))
}

/// Candidate negatives drawn per optimization step before per-anchor
/// sampling; keeps the per-step projection cost bounded as the bank grows.
pub const NEGATIVE_POOL_PER_STEP: usize = 128;

/// Spec-level contrastive loss: builds positive views by random augmentation
/// of each anchor, draws negatives from the bank (up to
/// `negatives_per_anchor`, without replacement, within a per-step candidate
/// pool of [`NEGATIVE_POOL_PER_STEP`]), and falls back to intra-batch
/// negatives when the bank is empty. Differentiable w.r.t. anchor pixels and
/// projector parameters; gradients also flow into intra-batch negatives.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss(
    anchors: &Tensor,
    bank: &MemoryBank,
    disc: &dyn Projector,
    tp: f64,
    policy: &ViewPolicy,
    negatives_per_anchor: usize,
    include_positive: bool,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    contrastive_loss_with_anchor_proj(
        anchors,
        None,
        bank,
        disc,
        tp,
        policy,
        negatives_per_anchor,
        include_positive,
        rng,
    )
}

/// As [`contrastive_loss`], optionally reusing an anchor projection already
/// computed from a forward trace of the same images.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss_with_anchor_proj(
    anchors: &Tensor,
    anchors_proj: Option<Tensor>,
    bank: &MemoryBank,
    disc: &dyn Projector,
    tp: f64,
    policy: &ViewPolicy,
    negatives_per_anchor: usize,
    include_positive: bool,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    let shape = anchors.shape();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::invalid("contrastive_loss: anchors must be a non-empty image batch"));
    }
    let b = shape[0];
    let (c, h, w) = (shape[1], shape[2], shape[3]);

    // Positive views from detached anchor pixels.
    let mut positives = Array4::zeros((b, c, h, w));
    {
        let data = anchors.data();
        for i in 0..b {
            let img = data
                .index_axis(ndarray::Axis(0), i)
                .to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            positives
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&make_positive_view(&img, policy, rng));
        }
    }
    let anchors_proj = match anchors_proj {
        Some(p) => p,
        None => disc.project(anchors)?,
    };
    let positives_proj = disc.project(&Tensor::constant(positives.into_dyn()))?;

    let (negatives_proj, negative_sets) = if bank.is_empty() {
        if b < 2 {
            return Err(Error::invalid(
                "contrastive_loss: empty bank and a single anchor leaves no negatives",
            ));
        }
        // Fresh batch supplies the negatives; anchor i excludes itself.
        let sets: Vec<Vec<usize>> = (0..b)
            .map(|i| (0..b).filter(|&j| j != i).collect())
            .collect();
        (anchors_proj.clone(), sets)
    } else {
        // Per-step candidate pool, then per-anchor sampling inside it.
        let candidates = bank.sample_indices(NEGATIVE_POOL_PER_STEP, rng);
        let per_anchor = negatives_per_anchor.min(candidates.len());
        let mut sets = Vec::with_capacity(b);
        for _ in 0..b {
            // Partial Fisher-Yates over candidate rows.
            let mut rows: Vec<usize> = (0..candidates.len()).collect();
            for i in 0..per_anchor {
                let j = rng.random_range(i..rows.len());
                rows.swap(i, j);
            }
            rows.truncate(per_anchor);
            sets.push(rows);
        }
        let stacked = bank.stack(&candidates);
        let proj = disc.project(&Tensor::constant(stacked.into_dyn()))?;
        (proj, sets)
    };

    contrastive_loss_with_views(
        &anchors_proj,
        &positives_proj,
        &negatives_proj,
        &negative_sets,
        tp,
        include_positive,
    )
}
