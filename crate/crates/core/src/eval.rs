//! Evaluation: classification accuracy, Fréchet distance between Gaussian
//! feature summaries at three pooling depths, and similarity-distribution
//! profiles of augmentation records.

use crate::augment::AugmentationRecord;
use crate::contracts::{Classifier, TraceOptions};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Fraction of argmax-correct predictions on a labelled set.
pub fn accuracy(model: &dyn Classifier, dataset: &ImageBatch) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("accuracy: empty dataset"));
    }
    let mut correct = 0usize;
    let chunk = 256;
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + chunk).min(dataset.len());
        let idx: Vec<usize> = (start..end).collect();
        let sub = dataset.select(&idx);
        let logits = crate::contracts::forward_logits(model, &sub)?;
        let data = logits.data();
        let rows = data.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (row, &label) in rows.rows().into_iter().zip(&sub.labels) {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Depth tags for feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureDepth {
    FirstPool,
    SecondPool,
    FinalPool,
}

impl FeatureDepth {
    pub const ALL: [FeatureDepth; 3] =
        [FeatureDepth::FirstPool, FeatureDepth::SecondPool, FeatureDepth::FinalPool];

    pub fn label(&self) -> &'static str {
        match self {
            FeatureDepth::FirstPool => "first-pool",
            FeatureDepth::SecondPool => "second-pool",
            FeatureDepth::FinalPool => "final-pool",
        }
    }
}

/// Gaussian summary of a feature set: mean, unbiased covariance, count.
#[derive(Debug, Clone)]
pub struct FeatureSetSummary {
    pub depth: FeatureDepth,
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
    /// Set when `count < dim + 1`: the covariance estimate is rank-deficient.
    pub low_rank: bool,
}

/// Feature rows of `images` at one depth of `model`'s pooling stack.
pub fn feature_rows(
    model: &dyn Classifier,
    images: &ImageBatch,
    depth: FeatureDepth,
) -> Result<Array2<f64>> {
    if images.is_empty() {
        return Err(Error::invalid("feature_rows: empty image set"));
    }
    let mut rows: Option<Array2<f64>> = None;
    let chunk = 256;
    let mut start = 0;
    while start < images.len() {
        let end = (start + chunk).min(images.len());
        let idx: Vec<usize> = (start..end).collect();
        let sub = images.select(&idx);
        let opts = TraceOptions::eval().with_pool_features();
        let trace = model.trace(&sub.to_tensor(), &opts);
        let feats = match depth {
            FeatureDepth::FirstPool => trace
                .pool_features
                .first()
                .ok_or_else(|| Error::invalid("model exposes no first-pool features"))?
                .clone(),
            FeatureDepth::SecondPool => trace
                .pool_features
                .get(1)
                .ok_or_else(|| Error::invalid("model exposes no second-pool features"))?
                .clone(),
            FeatureDepth::FinalPool => trace.embedding,
        };
        let arr = feats
            .to_array()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        rows = Some(match rows {
            None => arr,
            Some(prev) => ndarray::concatenate(ndarray::Axis(0), &[prev.view(), arr.view()])
                .expect("feature concat"),
        });
        start = end;
    }
    Ok(rows.unwrap())
}

/// Mean and unbiased covariance of feature rows.
pub fn summarize_features(depth: FeatureDepth, rows: &Array2<f64>) -> Result<FeatureSetSummary> {
    let (n, d) = rows.dim();
    if n < 2 {
        return Err(Error::invalid(
            "summarize_features: need at least 2 samples for a covariance",
        ));
    }
    let mean = rows.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in rows.rows() {
        let centered = &row.to_owned() - &mean;
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    let low_rank = n < d + 1;
    if low_rank {
        log::warn!(
            "feature summary at {} is low-rank ({} samples for {} dims)",
            depth.label(),
            n,
            d
        );
    }
    Ok(FeatureSetSummary {
        depth,
        mean,
        cov,
        count: n,
        low_rank,
    })
}

fn to_na(m: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    let (r, c) = m.dim();
    nalgebra::DMatrix::from_fn(r, c, |i, j| m[(i, j)])
}

/// Matrix square root of a symmetric PSD matrix via symmetric eigen
/// decomposition. Eigenvalues below `-1e-6` are a hard error; small negative
/// values (numerical) clip to zero.
fn sqrtm_psd(m: &nalgebra::DMatrix<f64>) -> Result<nalgebra::DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-6 {
            return Err(Error::invalid(format!(
                "matrix square root: eigenvalue {v} below the -1e-6 PSD tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = nalgebra::DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian summaries:
/// `||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})`.
///
/// `Tr((Sa Sb)^{1/2})` is computed as `Tr(sqrtm(A Sb A))` with `A = Sa^{1/2}`,
/// which keeps every decomposition symmetric. Reported values clip tiny
/// negative numerical residue to zero.
pub fn fid(a: &FeatureSetSummary, b: &FeatureSetSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape(
            "fid",
            format!("{} dims", a.mean.len()),
            format!("{} dims", b.mean.len()),
        ));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = to_na(&a.cov);
    let sb = to_na(&b.cov);
    let a_half = sqrtm_psd(&sa)?;
    let inner = &a_half * &sb * &a_half;
    let cross = sqrtm_psd(&inner)?;
    let trace_term = sa.trace() + sb.trace() - 2.0 * cross.trace();
    let v = mean_term + trace_term;
    if !v.is_finite() {
        return Err(Error::invalid(format!(
            "fid: non-finite value (mean term {mean_term}, trace term {trace_term})"
        )));
    }
    Ok(if v < 0.0 { 0.0 } else { v })
}

/// Distribution summary of augmentation similarities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub count: usize,
    pub mean: f64,
    /// (quantile, value) at 10/25/50/75/90%.
    pub quantiles: Vec<(f64, f64)>,
    /// (omega, fraction of variants with similarity > omega).
    pub retained_fraction: Vec<(f64, f64)>,
}

/// Summarize the similarity distribution of a set of records over an
/// `omega` grid from -1 to 1.
pub fn similarity_profile(records: &[AugmentationRecord]) -> Result<SimilarityProfile> {
    let mut sims: Vec<f64> = records
        .iter()
        .flat_map(|r| r.similarities.iter().cloned())
        .collect();
    if sims.is_empty() {
        return Err(Error::invalid("similarity_profile: no similarities recorded"));
    }
    sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sims.len();
    let mean = sims.iter().sum::<f64>() / n as f64;
    let quantile = |q: f64| -> f64 {
        let pos = q * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sims[lo] * (1.0 - frac) + sims[hi] * frac
    };
    let quantiles = [0.1, 0.25, 0.5, 0.75, 0.9]
        .iter()
        .map(|&q| (q, quantile(q)))
        .collect();
    let mut retained_fraction = Vec::new();
    let mut omega = -1.0;
    while omega <= 1.0 + 1e-12 {
        let kept = sims.iter().filter(|&&s| s > omega).count();
        retained_fraction.push((omega, kept as f64 / n as f64));
        omega += 0.05;
    }
    Ok(SimilarityProfile {
        count: n,
        mean,
        quantiles,
        retained_fraction,
    })
}
