//! Stage-level timing of one desk-scale round.

use dfkd_core::augment::{augment_pipeline, FixedIntensity, SimilaritySpace, SurrogateDiffusion};
use dfkd_core::contracts::{Classifier, Generator, Projector};
use dfkd_core::data::digits;
use dfkd_core::distill::{train_epoch_on_pool, DistillPool, DistillState};
use dfkd_core::memory::MemoryBank;
use dfkd_core::models::{ConvGenerator, DiscriminatorHead, SmallCnn};
use dfkd_core::nn::Adam;
use dfkd_core::synthesis::{run_synthesis_round, HyperParams, SynthesisRound};
use std::rc::Rc;
use std::time::Instant;

fn main() {
    let hp = HyperParams {
        alpha: 5.0,
        ..HyperParams::default()
    };
    let teacher = Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 3, false).unwrap());
    let student = SmallCnn::new("cnn16-half", (1, 16, 16), 10, 4, true).unwrap();
    let generator = ConvGenerator::new(64, (1, 16, 16), 5, true).unwrap();
    let tdyn: Rc<dyn Classifier> = teacher.clone();
    let disc = DiscriminatorHead::new(tdyn, 6, true);
    let mut bank = MemoryBank::new(4096, (1, 16, 16)).unwrap();
    bank.push(&digits(200, 1, 5).train, 0).unwrap();
    let mut opt = Adam::new(
        generator.parameters().into_iter().chain(disc.parameters()).collect(),
        1e-3,
    );
    let round = SynthesisRound {
        round_index: 1,
        batch_size: 100,
        step_count: 50,
        learning_rate: 0.05,
    };

    let t0 = Instant::now();
    let synth =
        run_synthesis_round(&generator, &*teacher, &disc, &mut opt, &bank, &hp, &round, 1)
            .unwrap();
    println!("synthesis round (50 steps, B=100): {:.1} s", t0.elapsed().as_secs_f64());

    let backend = SurrogateDiffusion::untrained((1, 16, 16), 7).unwrap();
    let t0 = Instant::now();
    let records = augment_pipeline(
        &synth.batch,
        &student,
        &SimilaritySpace::Embedding(&*teacher),
        &backend,
        &hp,
        &FixedIntensity(1.0),
        true,
        0,
        1,
    )
    .unwrap();
    println!("augment (100 sources, K=3): {:.1} s", t0.elapsed().as_secs_f64());

    let mut pool = DistillPool::default();
    pool.extend_from_records(&records);
    while pool.len() < 2000 {
        pool.extend_from_records(&records);
    }
    let mut state = DistillState::new(&student, 0.08, 0.9, 1e-4, 60, 100, 3);
    let t0 = Instant::now();
    train_epoch_on_pool(&mut state, &pool, &*teacher, &hp, 0).unwrap();
    println!(
        "distill epoch (pool {}, batch 100): {:.1} s",
        pool.len(),
        t0.elapsed().as_secs_f64()
    );

    let ds = digits(10, 2000, 7);
    let t0 = Instant::now();
    let acc = dfkd_core::eval::accuracy(&student, &ds.test).unwrap();
    println!("eval 2000 images: {:.1} s (acc {:.3})", t0.elapsed().as_secs_f64(), acc);
}
