//! Layers and optimizers for the desk-scale networks.
//!
//! Layers hold parameter tensors and write their forward pass as graph ops,
//! so gradients come from the tape with no per-layer backward code. Batch
//! normalization is the one stateful layer: it keeps running statistics
//! (updated outside the tape in training mode) and can emit the differentiable
//! batch mean/variance of its input, which the inversion losses match against
//! the frozen running statistics.

use crate::tensor::{conv2d, Tensor};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;

/// Whether a forward pass updates batch-norm running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Differentiable per-channel batch statistics captured during a forward.
#[derive(Clone)]
pub struct BnBatchStats {
    pub mean: Tensor,
    /// Unbiased (N-1 denominator) variance.
    pub var: Tensor,
}

pub fn kaiming_normal(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

pub fn standard_normal(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
    let dist = Normal::new(0.0, 1.0).unwrap();
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize, trainable: bool) -> Self {
        Linear {
            w: Tensor::new(kaiming_normal(rng, &[fan_in, fan_out], fan_in), trainable),
            b: Tensor::new(ArrayD::zeros(IxDyn(&[fan_out])), trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let out = x.matmul(&self.w);
        let shape = out.shape();
        out.add(&self.b.broadcast_per_channel(&shape))
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, ArrayD<f64>)> {
        vec![
            (format!("{prefix}.weight"), self.w.to_array()),
            (format!("{prefix}.bias"), self.b.to_array()),
        ]
    }
}

pub struct Conv2dLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        rng: &mut ChaCha12Rng,
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        trainable: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        Conv2dLayer {
            w: Tensor::new(kaiming_normal(rng, &[cout, cin, k, k], fan_in), trainable),
            b: Tensor::new(ArrayD::zeros(IxDyn(&[cout])), trainable),
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.w, &self.b, self.pad)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, ArrayD<f64>)> {
        vec![
            (format!("{prefix}.weight"), self.w.to_array()),
            (format!("{prefix}.bias"), self.b.to_array()),
        ]
    }
}

/// Batch normalization over axis 1, for `(B, C)` or `(B, C, H, W)` inputs.
///
/// Fresh layers start at running mean 0 / running variance 1. Training mode
/// normalizes with (biased) batch statistics and folds the unbiased batch
/// variance into the running buffers; eval mode normalizes with the stored
/// running statistics, which keeps a frozen model's forward independent of
/// batch composition.
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Array1<f64>>,
    pub running_var: RefCell<Array1<f64>>,
    pub momentum: f64,
    pub eps: f64,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(channels: usize, trainable: bool) -> Self {
        BatchNorm {
            gamma: Tensor::new(ArrayD::ones(IxDyn(&[channels])), trainable),
            beta: Tensor::new(ArrayD::zeros(IxDyn(&[channels])), trainable),
            running_mean: RefCell::new(Array1::zeros(channels)),
            running_var: RefCell::new(Array1::ones(channels)),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    fn elements_per_channel(shape: &[usize]) -> f64 {
        shape
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, &d)| d as f64)
            .product()
    }

    /// Differentiable batch mean and unbiased variance of `x` per channel.
    pub fn batch_stats(x: &Tensor) -> BnBatchStats {
        let shape = x.shape();
        let n = Self::elements_per_channel(&shape);
        let mean = x.sum_per_channel().mul_scalar(1.0 / n);
        let centered = x.sub(&mean.broadcast_per_channel(&shape));
        let var_biased = centered.square().sum_per_channel().mul_scalar(1.0 / n);
        let var = var_biased.mul_scalar(n / (n - 1.0));
        BnBatchStats { mean, var }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape[1], self.channels, "batchnorm channel mismatch");
        match mode {
            Mode::Train => {
                let n = Self::elements_per_channel(&shape);
                let (out, batch_mean, batch_var) =
                    x.batch_norm_train(&self.gamma, &self.beta, self.eps);
                // Fold this batch into the running buffers (untaped).
                let m = self.momentum;
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                let bessel = n / (n - 1.0);
                for c in 0..self.channels {
                    rm[c] = (1.0 - m) * rm[c] + m * batch_mean[c];
                    rv[c] = (1.0 - m) * rv[c] + m * batch_var[c] * bessel;
                }
                out
            }
            Mode::Eval => {
                // y = x * (gamma * k) + (beta - gamma * k * rm), k = 1/sqrt(rv + eps).
                let (k, rm): (Array1<f64>, Array1<f64>) = {
                    let rv = self.running_var.borrow();
                    let rm = self.running_mean.borrow();
                    (rv.mapv(|v| 1.0 / (v + self.eps).sqrt()), rm.clone())
                };
                let k_t = Tensor::constant(k.clone().into_dyn());
                let km_t = Tensor::constant((&k * &rm).into_dyn());
                let scale = self.gamma.mul(&k_t);
                let shift = self.beta.sub(&self.gamma.mul(&km_t));
                x.channel_affine(&scale, &shift)
            }
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, ArrayD<f64>)> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.to_array()),
            (format!("{prefix}.beta"), self.beta.to_array()),
            (
                format!("{prefix}.running_mean"),
                self.running_mean.borrow().clone().into_dyn(),
            ),
            (
                format!("{prefix}.running_var"),
                self.running_var.borrow().clone().into_dyn(),
            ),
        ]
    }
}

/// SGD with classic momentum, L2 weight decay, and an externally driven
/// learning rate (see [`cosine_lr`]).
pub struct Sgd {
    params: Vec<Tensor>,
    velocity: Vec<ArrayD<f64>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params
            .iter()
            .map(|p| ArrayD::zeros(IxDyn(&p.shape())))
            .collect();
        Sgd {
            params,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) {
        for (p, vel) in self.params.iter().zip(self.velocity.iter_mut()) {
            let Some(grad) = p.grad() else { continue };
            let momentum = self.momentum;
            let weight_decay = self.weight_decay;
            let lr = self.lr;
            p.update_data(|w| {
                let mut g = grad;
                if weight_decay != 0.0 {
                    g = g + &*w * weight_decay;
                }
                *vel = &*vel * momentum + &g;
                *w -= &(&*vel * lr);
            });
        }
    }
}

/// Adam with bias correction.
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Self {
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(IxDyn(&p.shape())))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::zeros(IxDyn(&p.shape())))
            .collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in self.params.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let Some(grad) = p.grad() else { continue };
            *m = &*m * self.beta1 + &(&grad * (1.0 - self.beta1));
            *v = &*v * self.beta2 + &(&grad * &grad * (1.0 - self.beta2));
            let lr = self.lr;
            let eps = self.eps;
            let (m_ref, v_ref) = (&*m, &*v);
            p.update_data(|w| {
                ndarray::Zip::from(&mut *w)
                    .and(m_ref)
                    .and(v_ref)
                    .for_each(|wv, &mv, &vv| {
                        let mhat = mv / bc1;
                        let vhat = vv / bc2;
                        *wv -= lr * mhat / (vhat.sqrt() + eps);
                    });
            });
        }
    }
}

/// Cosine-annealed learning rate from `base` down to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).clamp(0.0, 1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Randomly shuffled index order, seeded.
pub fn shuffled_indices(rng: &mut ChaCha12Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
