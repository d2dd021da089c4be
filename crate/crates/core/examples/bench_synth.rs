//! Per-piece timing of one synthesis step.

use dfkd_core::contracts::{Classifier, Generator, Projector, TraceOptions};
use dfkd_core::data::digits;
use dfkd_core::memory::MemoryBank;
use dfkd_core::models::{ConvGenerator, DiscriminatorHead, SmallCnn};
use dfkd_core::nn::{standard_normal, Mode};
use dfkd_core::synthesis::HyperParams;
use dfkd_core::tensor::Tensor;
use std::rc::Rc;
use std::time::Instant;

fn t(name: &str, mut f: impl FnMut()) {
    f();
    let n = 5;
    let t0 = Instant::now();
    for _ in 0..n {
        f();
    }
    println!("{name:<44} {:>7.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}

fn main() {
    let hp = HyperParams { alpha: 5.0, ..HyperParams::default() };
    let teacher = Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 3, false).unwrap());
    let generator = ConvGenerator::new(64, (1, 16, 16), 5, true).unwrap();
    let tdyn: Rc<dyn Classifier> = teacher.clone();
    let disc = DiscriminatorHead::new(tdyn, 6, true);
    let mut bank = MemoryBank::new(4096, (1, 16, 16)).unwrap();
    bank.push(&digits(200, 1, 5).train, 0).unwrap();
    let mut rng = dfkd_core::rng::stream(1, "b", &[]);
    let z = Tensor::new(standard_normal(&mut rng, &[100, 64]), true);

    t("generator fwd (B=100)", || {
        std::hint::black_box(generator.forward(&z, Mode::Train));
    });
    let imgs = generator.forward(&z, Mode::Train);
    t("generator fwd+bwd", || {
        let x = generator.forward(&z, Mode::Train);
        x.sum_all().backward();
        z.zero_grad();
    });
    t("teacher trace eval+stats+pools (B=100)", || {
        std::hint::black_box(teacher.trace(
            &imgs,
            &TraceOptions::eval().with_batch_stats().with_pool_features(),
        ));
    });
    t("teacher trace + backward to pixels", || {
        let tr = teacher.trace(&imgs, &TraceOptions::eval().with_batch_stats());
        tr.logits.sum_all().backward();
    });
    t("disc.project (B=100) fresh", || {
        std::hint::black_box(disc.project(&imgs).unwrap());
    });
    let mut view_rng = dfkd_core::rng::stream(2, "v", &[]);
    t("full objective graph + backward", || {
        let x = generator.forward(&z, Mode::Train);
        let (obj, _) = dfkd_core::synthesis::synthesis_objective_graph(
            &x,
            &(0..100).map(|i| i % 10).collect::<Vec<_>>(),
            &*teacher,
            &disc,
            &bank,
            &hp,
            &mut view_rng,
        )
        .unwrap();
        obj.backward();
        z.zero_grad();
    });
}
