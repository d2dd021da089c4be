//! Differentiable tensor operations.
//!
//! Elementwise ops require identical shapes; the only broadcasts are the two
//! explicit primitives [`Tensor::broadcast_per_channel`] (a channel vector
//! expanded over a `(B, C, ...)` activation) and scalar variants. Keeping
//! broadcasting explicit keeps every backward rule a few lines and easy to
//! verify against finite differences.

use super::{BackCtx, Tensor};
use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Row-major `(B, C, ...)` layout: for each (batch, channel) there is one
/// contiguous block of `shape[2..].product()` elements. Calls `f(c, block)`.
fn for_channel_blocks(shape: &[usize], data: &[f64], mut f: impl FnMut(usize, &[f64])) {
    let b = shape[0];
    let c = shape[1];
    let block: usize = shape[2..].iter().product::<usize>().max(1);
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * block;
            f(ci, &data[off..off + block]);
        }
    }
}

fn for_channel_blocks_mut(shape: &[usize], data: &mut [f64], mut f: impl FnMut(usize, &mut [f64])) {
    let b = shape[0];
    let c = shape[1];
    let block: usize = shape[2..].iter().product::<usize>().max(1);
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * block;
            f(ci, &mut data[off..off + block]);
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: operand shapes differ ({:?} vs {:?})",
        a.shape(),
        b.shape()
    );
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "add");
        let data = &*self.data() + &*other.data();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "sub");
        let data = &*self.data() - &*other.data();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| vec![Some(ctx.grad.clone()), Some(-ctx.grad.clone())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "mul");
        let data = &*self.data() * &*other.data();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                vec![Some(ctx.grad * &*b), Some(ctx.grad * &*a)]
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "div");
        let data = &*self.data() / &*other.data();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let ga = ctx.grad / &*b;
                let gb = -(ctx.grad * &*a) / (&*b * &*b);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = &*self.data() + c;
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| vec![Some(ctx.grad.clone())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = &*self.data() * c;
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| vec![Some(ctx.grad * c)]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Multiply by a single-element tensor (gradient flows into both sides).
    pub fn mul_scalar_t(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.len(), 1, "mul_scalar_t: scalar operand must have 1 element");
        let sv = s.item();
        let data = &*self.data() * sv;
        Tensor::from_op(
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                let ds = (ctx.grad * &*x).sum();
                vec![
                    Some(ctx.grad * sv),
                    Some(ArrayD::from_elem(IxDyn(&[1]), ds)),
                ]
            }),
        )
    }

    pub fn recip(&self) -> Tensor {
        let data = self.data().mapv(|v| 1.0 / v);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                // d(1/x) = -1/x^2 = -y^2
                vec![Some(ctx.grad * &(-(ctx.output * ctx.output)))]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().mapv(|v| v.max(0.0));
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![Some(ctx.grad * &mask)]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let data = self.data().mapv(|v| if v > 0.0 { v } else { slope * v });
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { slope });
                vec![Some(ctx.grad * &mask)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let y = ctx.output;
                vec![Some(ctx.grad * &(y * &y.mapv(|v| 1.0 - v)))]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().mapv(f64::tanh);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let y = ctx.output;
                vec![Some(ctx.grad * &y.mapv(|v| 1.0 - v * v))]
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().mapv(f64::exp);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| vec![Some(ctx.grad * ctx.output)]),
        )
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().mapv(f64::ln);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                vec![Some(ctx.grad / &*x)]
            }),
        )
    }

    /// Elementwise square root. Zero inputs get a zero subgradient so that
    /// exact-match norms (distance 0) do not poison the sweep with NaNs.
    pub fn sqrt(&self) -> Tensor {
        let data = self.data().mapv(f64::sqrt);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.output, |gv, &y| {
                    *gv = if y > 0.0 { *gv / (2.0 * y) } else { 0.0 };
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn square(&self) -> Tensor {
        let data = self.data().mapv(|v| v * v);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                vec![Some(ctx.grad * &(&*x * 2.0))]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let shape = ctx.parents[0].shape();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), ctx.grad[0]))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Row-wise sum of a 2-D tensor: `(B, F) -> (B)`.
    pub fn row_sum(&self) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "row_sum expects a 2-D tensor");
        let data = self
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .sum_axis(Axis(1))
            .into_dyn();
        let cols = shape[1];
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let rows = ctx.grad.len();
                let mut g = ArrayD::zeros(IxDyn(&[rows, cols]));
                {
                    let mut g2 = g.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (i, &gv) in ctx.grad.iter().enumerate() {
                        g2.row_mut(i).fill(gv);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Sum over every axis except axis 1: `(B, C, ...) -> (C)`.
    pub fn sum_per_channel(&self) -> Tensor {
        let shape = self.shape();
        assert!(shape.len() >= 2, "sum_per_channel expects >= 2 dims");
        let channels = shape[1];
        let mut out = ArrayD::zeros(IxDyn(&[channels]));
        {
            let d = self.data();
            let slice = d.as_slice().expect("contiguous");
            for_channel_blocks(&shape, slice, |c, block| {
                out[c] += block.iter().sum::<f64>();
            });
        }
        let in_shape = shape.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let mut g = ArrayD::zeros(IxDyn(&in_shape));
                let gs = ctx.grad.as_slice().expect("contiguous");
                for_channel_blocks_mut(&in_shape, g.as_slice_mut().unwrap(), |c, block| {
                    block.fill(gs[c]);
                });
                vec![Some(g)]
            }),
        )
    }

    /// Expand a channel vector `(C)` across a `(B, C, ...)` shape.
    pub fn broadcast_per_channel(&self, like: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 1, "broadcast_per_channel expects a vector");
        assert!(like.len() >= 2 && like[1] == shape[0], "broadcast shape mismatch");
        let like_shape = like.to_vec();
        let mut out = ArrayD::zeros(IxDyn(like));
        {
            let v = self.data();
            let vs = v.as_slice().expect("contiguous");
            for_channel_blocks_mut(&like_shape, out.as_slice_mut().unwrap(), |c, block| {
                block.fill(vs[c]);
            });
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let channels = ctx.parents[0].len();
                let mut g = ArrayD::zeros(IxDyn(&[channels]));
                let gs = ctx.grad.as_slice().expect("contiguous");
                for_channel_blocks(&like_shape, gs, |c, block| {
                    g[c] += block.iter().sum::<f64>();
                });
                vec![Some(g)]
            }),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-D");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D");
        assert_eq!(sa[1], sb[0], "matmul inner dims differ: {sa:?} x {sb:?}");
        let data = {
            let a = self.data();
            let b = other.data();
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            a2.dot(&b2).into_dyn()
        };
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let ga = g2.dot(&b2.t()).into_dyn();
                let gb = a2.t().dot(&g2).into_dyn();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape element count mismatch");
        let old_shape = self.shape();
        let data = self
            .data()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx
                    .grad
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward");
                vec![Some(g)]
            }),
        )
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), 2, "concat_cols expects 2-D tensors");
                assert_eq!(s[0], rows, "concat_cols row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = ArrayD::zeros(IxDyn(&[rows, total]));
        {
            let mut o2 = out.view_mut().into_dimensionality::<Ix2>().unwrap();
            let mut col = 0;
            for p in parts {
                let d = p.data();
                let d2 = d.view().into_dimensionality::<Ix2>().unwrap();
                o2.slice_mut(ndarray::s![.., col..col + d2.ncols()])
                    .assign(&d2);
                col += d2.ncols();
            }
        }
        Tensor::from_op(
            out,
            parts.to_vec(),
            Box::new(move |ctx: &BackCtx| {
                let g2 = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut grads = Vec::with_capacity(widths.len());
                let mut col = 0;
                for &w in &widths {
                    grads.push(Some(
                        g2.slice(ndarray::s![.., col..col + w]).to_owned().into_dyn(),
                    ));
                    col += w;
                }
                grads
            }),
        )
    }

    /// Select rows of a 2-D tensor (duplicates allowed; gradients scatter-add).
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "select_rows expects a 2-D tensor");
        for &r in rows {
            assert!(r < shape[0], "select_rows index {r} out of {}", shape[0]);
        }
        let data = {
            let d = self.data();
            let d2 = d.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = ndarray::Array2::<f64>::zeros((rows.len(), shape[1]));
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(i).assign(&d2.row(r));
            }
            out.into_dyn()
        };
        let idx: Vec<usize> = rows.to_vec();
        let (nrows, ncols) = (shape[0], shape[1]);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g2 = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut g = ndarray::Array2::<f64>::zeros((nrows, ncols));
                for (i, &r) in idx.iter().enumerate() {
                    let mut row = g.row_mut(r);
                    row += &g2.row(i);
                }
                vec![Some(g.into_dyn())]
            }),
        )
    }

    /// Pick one column per row: `out[i] = x[i, indices[i]]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "gather_rows expects a 2-D tensor");
        assert_eq!(indices.len(), shape[0], "gather_rows needs one index per row");
        for &c in indices {
            assert!(c < shape[1], "gather_rows column {c} out of {}", shape[1]);
        }
        let data = {
            let d = self.data();
            let d2 = d.view().into_dimensionality::<Ix2>().unwrap();
            let vals: Vec<f64> = indices.iter().enumerate().map(|(i, &c)| d2[(i, c)]).collect();
            ArrayD::from_shape_vec(IxDyn(&[shape[0]]), vals).unwrap()
        };
        let idx: Vec<usize> = indices.to_vec();
        let (nrows, ncols) = (shape[0], shape[1]);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g1 = ctx.grad.view().into_dimensionality::<Ix1>().unwrap();
                let mut g = ndarray::Array2::<f64>::zeros((nrows, ncols));
                for (i, &c) in idx.iter().enumerate() {
                    g[(i, c)] += g1[i];
                }
                vec![Some(g.into_dyn())]
            }),
        )
    }

    /// Per-channel affine map over axis 1: `out[.., c, ..] = x * scale[c] + shift[c]`.
    /// One fused op instead of two broadcasts and two elementwise passes;
    /// this is the eval-mode batch-norm path.
    pub fn channel_affine(&self, scale: &Tensor, shift: &Tensor) -> Tensor {
        let shape = self.shape();
        let channels = shape[1];
        assert_eq!(scale.shape(), vec![channels], "channel_affine scale shape");
        assert_eq!(shift.shape(), vec![channels], "channel_affine shift shape");
        let shape_v = shape.clone();
        let mut out = self.data().clone();
        {
            let s = scale.data();
            let t = shift.data();
            for_channel_blocks_mut(&shape_v, out.as_slice_mut().unwrap(), |c, block| {
                let (sc, tc) = (s[c], t[c]);
                for v in block {
                    *v = *v * sc + tc;
                }
            });
        }
        Tensor::from_op(
            out,
            vec![self.clone(), scale.clone(), shift.clone()],
            Box::new(move |ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                let s = ctx.parents[1].data();
                let xs = x.as_slice().expect("contiguous");
                let mut dx = ctx.grad.clone();
                let mut ds = ArrayD::zeros(IxDyn(&[channels]));
                let mut dt = ArrayD::zeros(IxDyn(&[channels]));
                {
                    let gs = ctx.grad.as_slice().expect("contiguous");
                    let block: usize = shape_v[2..].iter().product::<usize>().max(1);
                    let cdim = shape_v[1];
                    for bi in 0..shape_v[0] {
                        for c in 0..cdim {
                            let off = (bi * cdim + c) * block;
                            let (mut acc_s, mut acc_t) = (0.0, 0.0);
                            for i in off..off + block {
                                acc_s += gs[i] * xs[i];
                                acc_t += gs[i];
                            }
                            ds[c] += acc_s;
                            dt[c] += acc_t;
                        }
                    }
                }
                for_channel_blocks_mut(&shape_v, dx.as_slice_mut().unwrap(), |c, blockv| {
                    let sc = s[c];
                    for v in blockv {
                        *v *= sc;
                    }
                });
                vec![Some(dx), Some(ds), Some(dt)]
            }),
        )
    }

    /// Fused training-mode batch normalization over axis 1 with the standard
    /// closed-form backward. Returns the normalized output plus the plain
    /// (biased) batch mean/variance values for running-statistic updates.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> (Tensor, ndarray::Array1<f64>, ndarray::Array1<f64>) {
        let shape = self.shape();
        let channels = shape[1];
        assert_eq!(gamma.shape(), vec![channels], "batch_norm gamma shape");
        assert_eq!(beta.shape(), vec![channels], "batch_norm beta shape");
        let n: f64 = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, &d)| d as f64)
            .product();

        let shape_v = shape.clone();
        let block: usize = shape_v[2..].iter().product::<usize>().max(1);
        let batches = shape_v[0];
        let mut mean = ndarray::Array1::<f64>::zeros(channels);
        let mut var = ndarray::Array1::<f64>::zeros(channels);
        {
            let x = self.data();
            let xs = x.as_slice().expect("contiguous");
            for_channel_blocks(&shape_v, xs, |c, blockv| {
                mean[c] += blockv.iter().sum::<f64>();
            });
            mean.mapv_inplace(|v| v / n);
            for_channel_blocks(&shape_v, xs, |c, blockv| {
                let m = mean[c];
                var[c] += blockv.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            });
            var.mapv_inplace(|v| v / n);
        }
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        // xhat is saved for the backward closure.
        let mut xhat = self.data().clone();
        {
            let mvals = mean.clone();
            let is = invstd.clone();
            for_channel_blocks_mut(&shape_v, xhat.as_slice_mut().unwrap(), |c, blockv| {
                let (m, s) = (mvals[c], is[c]);
                for v in blockv {
                    *v = (*v - m) * s;
                }
            });
        }
        let mut out = xhat.clone();
        {
            let g = gamma.data();
            let b = beta.data();
            for_channel_blocks_mut(&shape_v, out.as_slice_mut().unwrap(), |c, blockv| {
                let (gc, bc) = (g[c], b[c]);
                for v in blockv {
                    *v = *v * gc + bc;
                }
            });
        }
        let invstd_saved = invstd.clone();
        let tensor = Tensor::from_op(
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g_param = ctx.parents[1].data();
                let gs = ctx.grad.as_slice().expect("contiguous");
                let xh = xhat.as_slice().expect("contiguous");
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for bi in 0..batches {
                    for c in 0..channels {
                        let off = (bi * channels + c) * block;
                        let (mut a, mut b) = (0.0, 0.0);
                        for i in off..off + block {
                            a += gs[i];
                            b += gs[i] * xh[i];
                        }
                        sum_g[c] += a;
                        sum_gx[c] += b;
                    }
                }
                let mut dx = ctx.grad.clone();
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    for bi in 0..batches {
                        for c in 0..channels {
                            let k = g_param[c] * invstd_saved[c];
                            let mean_g = sum_g[c] / n;
                            let mean_gx = sum_gx[c] / n;
                            let off = (bi * channels + c) * block;
                            for i in off..off + block {
                                dxs[i] = k * (dxs[i] - mean_g - xh[i] * mean_gx);
                            }
                        }
                    }
                }
                let dgamma = ArrayD::from_shape_vec(IxDyn(&[channels]), sum_gx).unwrap();
                let dbeta = ArrayD::from_shape_vec(IxDyn(&[channels]), sum_g).unwrap();
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        );
        (tensor, mean, var)
    }

    /// Numerically stable row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_rows(&self) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "log_softmax_rows expects a 2-D tensor");
        let data = {
            let d = self.data();
            let d2 = d.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = d2.to_owned();
            for mut row in out.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
                row.mapv_inplace(|v| v - lse);
            }
            out.into_dyn()
        };
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let y = ctx.output.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = g2.to_owned();
                for (mut orow, (yrow, grow)) in
                    out.rows_mut().into_iter().zip(y.rows().into_iter().zip(g2.rows()))
                {
                    let gsum: f64 = grow.sum();
                    for (o, &yv) in orow.iter_mut().zip(yrow.iter()) {
                        *o -= yv.exp() * gsum;
                    }
                }
                vec![Some(out.into_dyn())]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check::{finite_difference, max_rel_err};
    use ndarray::{arr1, arr2};

    fn leaf(vals: &[f64]) -> Tensor {
        Tensor::new(arr1(vals).into_dyn(), true)
    }

    /// FD-check `build` (a scalar-valued graph of one input) at `x0`.
    fn fd_check(x0: ArrayD<f64>, build: impl Fn(&Tensor) -> Tensor) {
        let x = Tensor::new(x0.clone(), true);
        let y = build(&x);
        y.backward();
        let analytic = x.grad().expect("no gradient");
        let numeric = finite_difference(&x0, 1e-5, |a| {
            build(&Tensor::new(a.clone(), true)).item()
        });
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "rel err {err} too large\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let x0 = arr1(&[0.7, -0.3, 1.9, 0.05]).into_dyn();
        let c = Tensor::constant(arr1(&[0.4, 1.3, -0.8, 2.0]).into_dyn());
        fd_check(x0.clone(), |x| x.add(&c).sum_all());
        fd_check(x0.clone(), |x| x.sub(&c).square().sum_all());
        fd_check(x0.clone(), |x| x.mul(&c).sum_all());
        fd_check(x0.clone(), |x| x.div(&c).sum_all());
        fd_check(x0.clone(), |x| x.mul_scalar(3.5).add_scalar(1.0).sum_all());
        fd_check(x0.clone(), |x| x.sigmoid().sum_all());
        fd_check(x0.clone(), |x| x.tanh().sum_all());
        fd_check(x0.clone(), |x| x.exp().sum_all());
        fd_check(x0.clone(), |x| x.leaky_relu(0.2).sum_all());
        fd_check(x0.clone(), |x| x.square().mean_all());
        fd_check(x0, |x| x.mul_scalar_t(&Tensor::scalar(2.5)).sum_all());
        // Positive-only domains.
        let xp = arr1(&[0.7, 0.3, 1.9, 0.05]).into_dyn();
        fd_check(xp.clone(), |x| x.ln().sum_all());
        fd_check(xp.clone(), |x| x.sqrt().sum_all());
        fd_check(xp, |x| x.recip().sum_all());
    }

    #[test]
    fn relu_grad_matches_fd_away_from_kink() {
        fd_check(arr1(&[0.7, -0.3, 1.9, -0.05]).into_dyn(), |x| {
            x.relu().sum_all()
        });
    }

    #[test]
    fn matmul_grads_match_fd() {
        let a0 = arr2(&[[0.5, -1.0, 0.25], [2.0, 0.1, -0.4]]).into_dyn();
        let b = Tensor::constant(arr2(&[[1.0, 2.0], [-0.5, 0.3], [0.7, 0.7]]).into_dyn());
        fd_check(a0, |a| a.matmul(&b).square().sum_all());
        let b0 = arr2(&[[1.0, 2.0], [-0.5, 0.3], [0.7, 0.7]]).into_dyn();
        let a = Tensor::constant(arr2(&[[0.5, -1.0, 0.25], [2.0, 0.1, -0.4]]).into_dyn());
        fd_check(b0, |b| a.matmul(b).square().sum_all());
    }

    #[test]
    fn reduction_and_broadcast_grads_match_fd() {
        let x0 = arr2(&[[0.5, -1.0], [2.0, 0.1], [0.3, 0.9]]).into_dyn();
        fd_check(x0.clone(), |x| x.row_sum().square().sum_all());
        fd_check(x0.clone(), |x| x.sum_per_channel().square().sum_all());
        let v0 = arr1(&[0.5, -0.25]).into_dyn();
        fd_check(v0, |v| {
            v.broadcast_per_channel(&[3, 2]).square().sum_all()
        });
        // 4-D channel reduction.
        let x4 = ArrayD::from_shape_vec(
            IxDyn(&[2, 3, 2, 2]),
            (0..24).map(|i| (i as f64) * 0.17 - 1.3).collect(),
        )
        .unwrap();
        fd_check(x4, |x| x.sum_per_channel().square().sum_all());
    }

    #[test]
    fn structural_op_grads_match_fd() {
        let x0 = arr2(&[[0.5, -1.0, 0.3], [2.0, 0.1, -0.7]]).into_dyn();
        fd_check(x0.clone(), |x| x.reshape(&[3, 2]).square().sum_all());
        fd_check(x0.clone(), |x| x.select_rows(&[1, 0, 1]).square().sum_all());
        fd_check(x0.clone(), |x| x.gather_rows(&[2, 0]).square().sum_all());
        fd_check(x0.clone(), |x| {
            Tensor::concat_cols(&[x.clone(), x.square()]).square().sum_all()
        });
        fd_check(x0, |x| x.log_softmax_rows().square().sum_all());
    }

    #[test]
    fn channel_affine_grads_match_fd() {
        let x0 = ArrayD::from_shape_vec(
            IxDyn(&[2, 3, 2, 2]),
            (0..24).map(|i| (i as f64) * 0.21 - 2.0).collect(),
        )
        .unwrap();
        let scale = Tensor::constant(arr1(&[0.5, -1.5, 2.0]).into_dyn());
        let shift = Tensor::constant(arr1(&[0.1, 0.0, -0.7]).into_dyn());
        fd_check(x0.clone(), |x| {
            x.channel_affine(&scale, &shift).square().sum_all()
        });
        // Gradients w.r.t. scale and shift.
        let xc = Tensor::constant(x0);
        let s0 = arr1(&[0.5, -1.5, 2.0]).into_dyn();
        fd_check(s0, |s| {
            xc.channel_affine(s, &shift).square().sum_all()
        });
        let t0 = arr1(&[0.1, 0.0, -0.7]).into_dyn();
        fd_check(t0, |t| {
            xc.channel_affine(&scale, t).square().sum_all()
        });
    }

    #[test]
    fn batch_norm_train_fused_grads_match_fd() {
        let x0 = ArrayD::from_shape_vec(
            IxDyn(&[3, 2, 2, 2]),
            (0..24).map(|i| ((i * 7 + 3) % 13) as f64 * 0.3 - 1.1).collect(),
        )
        .unwrap();
        let weights = Tensor::constant(ArrayD::from_shape_vec(
            IxDyn(&[3, 2, 2, 2]),
            (0..24).map(|i| ((i * 5 + 1) % 11) as f64 * 0.2 - 1.0).collect(),
        ).unwrap());
        let gamma = Tensor::constant(arr1(&[1.3, 0.7]).into_dyn());
        let beta = Tensor::constant(arr1(&[0.2, -0.4]).into_dyn());
        fd_check(x0.clone(), |x| {
            x.batch_norm_train(&gamma, &beta, 1e-5).0.mul(&weights).sum_all()
        });
        let xc = Tensor::constant(x0);
        fd_check(arr1(&[1.3, 0.7]).into_dyn(), |g| {
            xc.batch_norm_train(g, &beta, 1e-5).0.mul(&weights).sum_all()
        });
        fd_check(arr1(&[0.2, -0.4]).into_dyn(), |b| {
            xc.batch_norm_train(&gamma, b, 1e-5).0.mul(&weights).sum_all()
        });
    }

    #[test]
    fn fused_bn_reports_biased_batch_stats() {
        let x = Tensor::constant(arr2(&[[1.0, 10.0], [3.0, 30.0]]).into_dyn());
        let gamma = Tensor::constant(arr1(&[1.0, 1.0]).into_dyn());
        let beta = Tensor::constant(arr1(&[0.0, 0.0]).into_dyn());
        let (_, mean, var) = x.batch_norm_train(&gamma, &beta, 1e-5);
        assert_eq!(mean[0], 2.0);
        assert_eq!(mean[1], 20.0);
        assert_eq!(var[0], 1.0); // biased: ((1-2)^2 + (3-2)^2)/2
        assert_eq!(var[1], 100.0);
    }

    #[test]
    fn log_softmax_rows_is_normalized() {
        let x = leaf(&[3.0, 1.0, -2.0]).reshape(&[1, 3]);
        let y = x.log_softmax_rows();
        let total: f64 = y.data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_log_softmax_is_minus_ln_c() {
        for c in [2usize, 10, 100] {
            let x = Tensor::zeros(&[1, c], false).log_softmax_rows();
            for v in x.data().iter() {
                assert!((v + (c as f64).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = leaf(&[2.0]);
        let y = x.detach().mul(&x).sum_all();
        y.backward();
        // Only the non-detached path contributes: d/dx (c*x) = c = 2.
        assert_eq!(x.grad().unwrap()[0], 2.0);
    }
}
