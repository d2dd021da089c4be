//! Spatial ops on `(B, C, H, W)` activations: convolution (stride 1,
//! symmetric zero padding), average pooling, and nearest-neighbour upsampling.
//!
//! Convolution lowers to an im2col matrix product so the heavy lifting stays
//! in the BLAS-like `dot` kernel; the patch matrix is captured for the
//! backward pass.

use super::{BackCtx, Tensor};
use ndarray::{Array2, Array4, ArrayD, Ix4, IxDyn};

fn as4(t: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("expected 4-D tensor")
}

/// Transposed patch matrix `(C*KH*KW, B*OH*OW)`: row r = kernel offset
/// `(ci, ky, kx)`, column = output position. Rows are built from contiguous
/// input-row segments, so construction is close to memcpy speed, and the
/// forward product `W @ cols_t` needs no transpose.
fn im2col_t(x: &ndarray::ArrayView4<'_, f64>, kh: usize, kw: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let bow = b * oh * ow;
    let xs = x.to_slice().expect("contiguous input");
    let mut cols = Array2::<f64>::zeros((c * kh * kw, bow));
    {
        let cs = cols.as_slice_mut().unwrap();
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let row_base = row * bow;
                    // Valid output xs for this kernel offset: ox such that
                    // 0 <= ox + kx - pad < w.
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for bi in 0..b {
                        for oy in 0..oh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let src = ((bi * c + ci) * h + iy as usize) * w
                                + (ox_lo + kx - pad);
                            let dst = row_base + (bi * oh + oy) * ow + ox_lo;
                            let len = ox_hi - ox_lo;
                            cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_t`]: accumulate patch gradients `(C*KH*KW, B*OH*OW)`
/// back onto the input, segment-wise.
fn col2im_t(
    dcols: &Array2<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let bow = b * oh * ow;
    let mut x = Array4::<f64>::zeros((b, c, h, w));
    let ds = dcols.as_slice().expect("contiguous dcols");
    {
        let xsl = x.as_slice_mut().unwrap();
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let row_base = row * bow;
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for bi in 0..b {
                        for oy in 0..oh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let dst = ((bi * c + ci) * h + iy as usize) * w
                                + (ox_lo + kx - pad);
                            let src = row_base + (bi * oh + oy) * ow + ox_lo;
                            let len = ox_hi - ox_lo;
                            for i in 0..len {
                                xsl[dst + i] += ds[src + i];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution, stride 1. `x: (B, Cin, H, W)`, `w: (Cout, Cin, KH, KW)`,
/// `b: (Cout)`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be 4-D");
    assert_eq!(ws.len(), 4, "conv2d weight must be 4-D");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
    assert_eq!(b.shape(), vec![ws[0]], "conv2d bias shape");
    let (bsz, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = h + 2 * pad - kh + 1;
    let ow = wdt + 2 * pad - kw + 1;

    let cols_t = {
        let xd = x.data();
        im2col_t(&as4(&xd), kh, kw, pad)
    };
    // out_mat: (Cout, B*OH*OW); per (image, channel) the spatial block is
    // contiguous, so assembly below is a straight copy.
    let out_mat = {
        let wd = w.data();
        let wmat = wd
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        wmat.dot(&cols_t)
    };
    let hw = oh * ow;
    let mut out = Array4::<f64>::zeros((bsz, cout, oh, ow));
    {
        let bd = b.data();
        let om = out_mat.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for co in 0..cout {
            let bias = bd[co];
            for bi in 0..bsz {
                let src = co * (bsz * hw) + bi * hw;
                let dst = (bi * cout + co) * hw;
                for i in 0..hw {
                    os[dst + i] = om[src + i] + bias;
                }
            }
        }
    }

    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |ctx: &BackCtx| {
            let gs = ctx.grad.as_slice().expect("contiguous");
            let hw = oh * ow;
            let mut g_mat = Array2::<f64>::zeros((cout, bsz * hw));
            let mut db = ndarray::Array1::<f64>::zeros(cout);
            {
                let gm = g_mat.as_slice_mut().unwrap();
                for co in 0..cout {
                    let mut acc = 0.0;
                    for bi in 0..bsz {
                        let src = (bi * cout + co) * hw;
                        let dst = co * (bsz * hw) + bi * hw;
                        for i in 0..hw {
                            let v = gs[src + i];
                            gm[dst + i] = v;
                            acc += v;
                        }
                    }
                    db[co] = acc;
                }
            }
            let wd = ctx.parents[1].data();
            let wmat = wd
                .view()
                .into_shape_with_order((cout, cin * kh * kw))
                .unwrap();
            // dW = g_mat . cols_t^T ; dcols_t = W^T . g_mat ; dx = col2im(dcols_t).
            let dw = g_mat.dot(&cols_t.t());
            let dcols_t = wmat.t().dot(&g_mat);
            let dx = col2im_t(&dcols_t, bsz, cin, h, wdt, kh, kw, pad);
            vec![
                Some(dx.into_dyn()),
                Some(
                    dw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                        .unwrap(),
                ),
                Some(db.into_dyn()),
            ]
        }),
    )
}

/// Non-overlapping average pooling with window = stride = `k`.
pub fn avg_pool2d(x: &Tensor, k: usize) -> Tensor {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "avg_pool2d input must be 4-D");
    assert!(xs[2] % k == 0 && xs[3] % k == 0, "avg_pool2d needs H, W divisible by {k}");
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Array4::<f64>::zeros((b, c, oh, ow));
    {
        let xd = x.data();
        let xs = xd.as_slice().expect("contiguous");
        let os = out.as_slice_mut().unwrap();
        for plane in 0..b * c {
            let src = plane * h * w;
            let dst = plane * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let row = src + (oy * k + dy) * w + ox * k;
                        for dx in 0..k {
                            s += xs[row + dx];
                        }
                    }
                    os[dst + oy * ow + ox] = s * inv;
                }
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let gsl = ctx.grad.as_slice().expect("contiguous");
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            {
                let ds = dx.as_slice_mut().unwrap();
                for plane in 0..b * c {
                    let src = plane * oh * ow;
                    let dst = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gsl[src + oy * ow + ox] * inv;
                            for dy in 0..k {
                                let row = dst + (oy * k + dy) * w + ox * k;
                                for dx_ in 0..k {
                                    ds[row + dx_] = gv;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Spatial mean: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "global_avg_pool input must be 4-D");
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let inv = 1.0 / (h * w) as f64;
    let mut out = Array2::<f64>::zeros((b, c));
    {
        let xd = x.data();
        let xs = xd.as_slice().expect("contiguous");
        let os = out.as_slice_mut().unwrap();
        for plane in 0..b * c {
            os[plane] = xs[plane * h * w..(plane + 1) * h * w].iter().sum::<f64>() * inv;
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let gsl = ctx.grad.as_slice().expect("contiguous");
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            {
                let ds = dx.as_slice_mut().unwrap();
                for plane in 0..b * c {
                    let gv = gsl[plane] * inv;
                    ds[plane * h * w..(plane + 1) * h * w].fill(gv);
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "upsample input must be 4-D");
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
    {
        let xd = x.data();
        let xs = xd.as_slice().expect("contiguous");
        let os = out.as_slice_mut().unwrap();
        let (oh, ow) = (2 * h, 2 * w);
        for plane in 0..b * c {
            let src = plane * h * w;
            let dst = plane * oh * ow;
            for y in 0..h {
                for xx in 0..w {
                    let v = xs[src + y * w + xx];
                    let o = dst + 2 * y * ow + 2 * xx;
                    os[o] = v;
                    os[o + 1] = v;
                    os[o + ow] = v;
                    os[o + ow + 1] = v;
                }
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let gsl = ctx.grad.as_slice().expect("contiguous");
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            {
                let ds = dx.as_slice_mut().unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let _ = oh;
                for plane in 0..b * c {
                    let src = plane * 4 * h * w;
                    let dst = plane * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let o = src + 2 * y * ow + 2 * xx;
                            ds[dst + y * w + xx] =
                                gsl[o] + gsl[o + 1] + gsl[o + ow] + gsl[o + ow + 1];
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}
