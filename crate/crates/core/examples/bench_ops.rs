//! Per-op timing at the desk-scale teacher's shapes, B = 128.

use dfkd_core::nn::{BatchNorm, Conv2dLayer, Mode};
use dfkd_core::rng::stream;
use dfkd_core::tensor::{avg_pool2d, conv2d, global_avg_pool, Tensor};
use ndarray::ArrayD;
use std::time::Instant;

fn timeit(name: &str, mut f: impl FnMut()) {
    for _ in 0..2 { f(); }
    let n = 10;
    let t0 = Instant::now();
    for _ in 0..n { f(); }
    println!("{name:<34} {:>8.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}

fn main() {
    let mut rng = stream(1, "b", &[]);
    let x1 = Tensor::constant(dfkd_core::nn::standard_normal(&mut rng, &[128, 1, 16, 16]));
    let x2 = Tensor::constant(dfkd_core::nn::standard_normal(&mut rng, &[128, 16, 8, 8]));
    let x3 = Tensor::constant(dfkd_core::nn::standard_normal(&mut rng, &[128, 32, 4, 4]));
    let a1 = Tensor::constant(dfkd_core::nn::standard_normal(&mut rng, &[128, 16, 16, 16]));
    let c1 = Conv2dLayer::new(&mut rng, 1, 16, 3, 1, true);
    let c2 = Conv2dLayer::new(&mut rng, 16, 32, 3, 1, true);
    let c3 = Conv2dLayer::new(&mut rng, 32, 64, 3, 1, true);
    let bn = BatchNorm::new(16, true);

    timeit("conv1 1->16 @16x16 fwd", || { std::hint::black_box(conv2d(&x1, &c1.w, &c1.b, 1)); });
    timeit("conv2 16->32 @8x8 fwd", || { std::hint::black_box(conv2d(&x2, &c2.w, &c2.b, 1)); });
    timeit("conv3 32->64 @4x4 fwd", || { std::hint::black_box(conv2d(&x3, &c3.w, &c3.b, 1)); });
    timeit("conv2 fwd+bwd", || {
        conv2d(&x2, &c2.w, &c2.b, 1).sum_all().backward();
        c2.w.zero_grad(); c2.b.zero_grad();
    });
    timeit("bn train fwd @16ch 16x16", || { std::hint::black_box(bn.forward(&a1, Mode::Train)); });
    timeit("bn eval fwd", || { std::hint::black_box(bn.forward(&a1, Mode::Eval)); });
    timeit("relu", || { std::hint::black_box(a1.relu()); });
    timeit("avg_pool2", || { std::hint::black_box(avg_pool2d(&a1, 2)); });
    timeit("gap", || { std::hint::black_box(global_avg_pool(&a1)); });
    timeit("sum_all", || { std::hint::black_box(a1.sum_all()); });

    let big = Tensor::constant(ArrayD::zeros(ndarray::IxDyn(&[128, 16, 16, 16])));
    timeit("alloc+clone 512K f64", || { std::hint::black_box(big.to_array()); });
}
