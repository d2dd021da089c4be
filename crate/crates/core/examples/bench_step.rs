//! Rough per-step timing of the desk-scale networks.

use dfkd_core::contracts::{Classifier, TraceOptions};
use dfkd_core::data::digits;
use dfkd_core::models::SmallCnn;
use dfkd_core::nn::{Mode, Sgd};
use dfkd_core::synthesis::class_prior_loss;
use std::time::Instant;

fn main() {
    let ds = digits(256, 10, 7);
    let model = SmallCnn::new("cnn16", (1, 16, 16), 10, 1, true).unwrap();
    let mut opt = Sgd::new(model.parameters(), 0.05, 0.9, 5e-4);
    let idx: Vec<usize> = (0..128).collect();
    let sub = ds.train.select(&idx);
    let x = sub.to_tensor();
    let step = |opt: &mut Sgd| {
        let t = model.trace(
            &x,
            &TraceOptions {
                mode: Mode::Train,
                batch_stats: false,
                pool_features: false,
            },
        );
        let loss = class_prior_loss(&t.logits, &sub.labels).unwrap();
        opt.zero_grad();
        loss.backward();
        opt.step();
    };
    for _ in 0..2 {
        step(&mut opt);
    }
    let n = 10;
    let t0 = Instant::now();
    for _ in 0..n {
        step(&mut opt);
    }
    println!(
        "train step (fwd+bwd+sgd, B=128): {:.1} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / n as f64
    );

    let t0 = Instant::now();
    for _ in 0..n {
        let t = model.trace(
            &x,
            &TraceOptions {
                mode: Mode::Eval,
                batch_stats: false,
                pool_features: false,
            },
        );
        std::hint::black_box(t.logits.sum_all().item());
    }
    println!(
        "eval fwd logits->item (B=128): {:.1} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / n as f64
    );
}
