//! Property tests over the bank, the filter, the view policy, and the
//! loss-weight algebra.

use dfkd_core::augment::filter_mask;
use dfkd_core::data::ImageBatch;
use dfkd_core::memory::{make_positive_view, MemoryBank, ViewPolicy};
use dfkd_core::synthesis::{inversion_loss, HyperParams};
use dfkd_core::tensor::Tensor;
use ndarray::{Array3, Array4};
use proptest::prelude::*;

fn batch_of_values(values: &[f64]) -> ImageBatch {
    let mut images = Array4::zeros((values.len(), 1, 4, 4));
    for (i, &v) in values.iter().enumerate() {
        images.index_axis_mut(ndarray::Axis(0), i).fill(v);
    }
    ImageBatch::new(images, (0..values.len()).map(|i| i % 10).collect()).unwrap()
}

proptest! {
    /// Size never exceeds capacity, and the survivors are exactly the most
    /// recent `capacity` items of the push stream, in order.
    #[test]
    fn bank_capacity_and_fifo_survivorship(
        capacity in 1usize..24,
        pushes in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 0..12), 0..12),
    ) {
        let mut bank = MemoryBank::new(capacity, (1, 4, 4)).unwrap();
        let mut stream: Vec<f64> = Vec::new();
        for (round, push) in pushes.iter().enumerate() {
            if push.is_empty() {
                bank.push(&ImageBatch::empty(1, 4, 4), round).unwrap();
            } else {
                bank.push(&batch_of_values(push), round).unwrap();
            }
            stream.extend(push.iter().cloned());
            prop_assert!(bank.len() <= capacity);
        }
        let expected: Vec<f64> = stream
            .iter()
            .cloned()
            .skip(stream.len().saturating_sub(capacity))
            .collect();
        let got: Vec<f64> = bank.entries().map(|e| e.image[(0, 0, 0)]).collect();
        prop_assert_eq!(got, expected);
    }

    /// Strictness plus threshold monotonicity: raising omega never retains
    /// more, and the retained set at the higher threshold is a subset.
    #[test]
    fn filter_mask_is_strict_and_monotone(
        sims in prop::collection::vec(-1.0f64..=1.0, 1..32),
        w1 in -1.0f64..=1.0,
        w2 in -1.0f64..=1.0,
    ) {
        let (lo, hi) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
        let m_lo = filter_mask(&sims, lo);
        let m_hi = filter_mask(&sims, hi);
        for ((&s, &keep_lo), &keep_hi) in sims.iter().zip(&m_lo).zip(&m_hi) {
            prop_assert_eq!(keep_lo, s > lo);
            prop_assert_eq!(keep_hi, s > hi);
            // subset property
            prop_assert!(!keep_hi || keep_lo);
        }
    }

    /// Any policy preserves shape and the unit range.
    #[test]
    fn positive_views_preserve_shape_and_range(
        flip_p in 0.0f64..=1.0,
        crop_pad in 0usize..5,
        jitter in 0.0f64..0.3,
        seed in 0u64..1000,
    ) {
        let policy = ViewPolicy { flip_p, crop_pad, jitter };
        let img = dfkd_core::data::digits(1, 1, 1).train.image(0);
        let out = make_positive_view(&img, &policy, &mut dfkd_core::rng::stream(seed, "pv", &[]));
        prop_assert_eq!(out.dim(), img.dim());
        prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// Doubling both inputs doubles the unified inversion loss.
    #[test]
    fn inversion_loss_is_homogeneous(
        cls in 0.0f64..10.0,
        bn in 0.0f64..10.0,
        alpha in 0.0f64..5.0,
        beta in 0.0f64..20.0,
    ) {
        let hp = HyperParams { alpha, beta, ..HyperParams::default() };
        let one = inversion_loss(&Tensor::scalar(cls), &Tensor::scalar(bn), &hp).item();
        let two = inversion_loss(&Tensor::scalar(2.0 * cls), &Tensor::scalar(2.0 * bn), &hp).item();
        prop_assert!((two - 2.0 * one).abs() < 1e-9);
    }
}

#[test]
fn bank_rejects_zero_capacity() {
    assert!(MemoryBank::new(0, (1, 4, 4)).is_err());
}

#[test]
fn view_of_all_black_stays_black_without_jitter() {
    let img = Array3::zeros((1, 8, 8));
    let policy = ViewPolicy {
        flip_p: 1.0,
        crop_pad: 2,
        jitter: 0.0,
    };
    let out = make_positive_view(&img, &policy, &mut dfkd_core::rng::stream(3, "pv", &[]));
    assert!(out.iter().all(|&v| v == 0.0));
}
