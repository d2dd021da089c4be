//! Model-inversion data synthesis.
//!
//! A generator's shared weights and a per-round latent batch are optimized
//! jointly against a frozen teacher: cross-entropy toward sampled target
//! labels (the class prior), an L2 penalty matching the batch's per-layer
//! activation statistics to the teacher's stored batch-norm statistics, and
//! a contrastive diversity term over the memory bank. One batch of images is
//! synthesized per round.

use crate::contracts::{BnStats, Classifier, Generator, Projector, TraceOptions};
use crate::data::{batch_from_tensor, ImageBatch};
use crate::error::{Error, Result};
use crate::memory::{contrastive_loss_with_anchor_proj, MemoryBank, ViewPolicy};
use crate::nn::{standard_normal, Adam, BnBatchStats, Mode};
use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Every scalar the losses need. Loss weights must be non-negative,
/// temperatures positive, the filter threshold in `[-1, 1]`, and the
/// augmentation factor at least 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Class-prior weight in the inversion loss.
    pub alpha: f64,
    /// BN-regularization weight in the inversion loss.
    pub beta: f64,
    /// Inversion-term weight in the joint synthesis objective.
    pub alpha_prime: f64,
    /// Contrastive-term weight in the joint synthesis objective.
    pub beta_prime: f64,
    /// KD-term weight in the total loss.
    pub eta_kl: f64,
    /// Synthesis-objective weight in the total loss (logged under
    /// alternating optimization; it never touches student parameters).
    pub eta_synth: f64,
    /// Self-supervised-term weight in the total loss.
    pub eta_self: f64,
    /// KD softmax temperature.
    pub tau: f64,
    /// Contrastive temperature.
    pub tp: f64,
    /// Cosine-similarity filter threshold.
    pub omega: f64,
    /// Augmented variants per synthetic image (K).
    pub augment_factor: usize,
    /// Diffusion step count handed to the backend.
    pub diffusion_steps: usize,
    /// Diffusion guidance scale handed to the backend.
    pub guidance_scale: f64,
    /// Negatives sampled per anchor from the bank.
    pub negatives_per_anchor: usize,
    /// Count the positive term in the contrastive denominator (off
    /// reproduces the printed form).
    pub contrastive_includes_positive: bool,
    /// Positive-view augmentation policy.
    pub view_policy: ViewPolicy,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 1.0,
            beta: 10.0,
            alpha_prime: 1.0,
            beta_prime: 0.5,
            eta_kl: 1.0,
            eta_synth: 1.0,
            eta_self: 0.5,
            tau: 4.0,
            tp: 0.07,
            omega: 0.75,
            augment_factor: 3,
            diffusion_steps: 50,
            guidance_scale: 0.5,
            negatives_per_anchor: 64,
            contrastive_includes_positive: false,
            view_policy: ViewPolicy::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha_prime", self.alpha_prime),
            ("beta_prime", self.beta_prime),
            ("eta_kl", self.eta_kl),
            ("eta_synth", self.eta_synth),
            ("eta_self", self.eta_self),
        ];
        for (name, v) in weights {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.tau <= 0.0 || self.tp <= 0.0 {
            return Err(Error::Config(format!(
                "temperatures must be positive (tau={}, tp={})",
                self.tau, self.tp
            )));
        }
        if !(-1.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!(
                "omega must lie in [-1, 1], got {}",
                self.omega
            )));
        }
        if self.augment_factor == 0 {
            return Err(Error::Config("augment_factor (K) must be >= 1".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion_steps must be >= 1".into()));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::Config(format!(
                "guidance_scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        if self.negatives_per_anchor == 0 {
            return Err(Error::Config("negatives_per_anchor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy of logits against target class indices.
/// Differentiable w.r.t. the logits.
pub fn class_prior_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid("class_prior_loss: logits must be (B, C), B >= 1"));
    }
    if targets.len() != shape[0] {
        return Err(Error::invalid(format!(
            "class_prior_loss: {} targets for {} rows",
            targets.len(),
            shape[0]
        )));
    }
    for &t in targets {
        if t >= shape[1] {
            return Err(Error::invalid(format!(
                "class_prior_loss: label {t} out of range (C = {})",
                shape[1]
            )));
        }
    }
    Ok(logits
        .log_softmax_rows()
        .gather_rows(targets)
        .mean_all()
        .neg())
}

/// Sum over layers of the L2 distances between this batch's BN-input
/// statistics and the stored running statistics:
/// `sum_l ( ||mu_l(x) - mu_l|| + ||var_l(x) - var_l|| )`.
/// The norms are unsquared, so the loss is zero iff every layer matches
/// exactly. Differentiable w.r.t. the batch statistics.
pub fn bn_regularization_loss(batch_stats: &[BnBatchStats], running: &[BnStats]) -> Result<Tensor> {
    if batch_stats.len() != running.len() {
        return Err(Error::invalid(format!(
            "bn_regularization_loss: {} batch layers vs {} running layers",
            batch_stats.len(),
            running.len()
        )));
    }
    let mut total = Tensor::scalar(0.0);
    for (i, (bs, rs)) in batch_stats.iter().zip(running.iter()).enumerate() {
        if bs.mean.len() != rs.mean.len() || bs.var.len() != rs.var.len() {
            return Err(Error::shape(
                format!("bn_regularization_loss layer {i}"),
                format!("{} channels", rs.mean.len()),
                format!("{} channels", bs.mean.len()),
            ));
        }
        let rm = Tensor::constant(rs.mean.clone().into_dyn());
        let rv = Tensor::constant(rs.var.clone().into_dyn());
        let mean_dist = bs.mean.sub(&rm).square().sum_all().sqrt();
        let var_dist = bs.var.sub(&rv).square().sum_all().sqrt();
        total = total.add(&mean_dist).add(&var_dist);
    }
    Ok(total)
}

/// Unified inversion loss: `alpha * cls + beta * bn`.
pub fn inversion_loss(cls: &Tensor, bn: &Tensor, hp: &HyperParams) -> Tensor {
    cls.mul_scalar(hp.alpha).add(&bn.mul_scalar(hp.beta))
}

/// Per-step loss components of the synthesis objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SynthesisLosses {
    pub class_prior: f64,
    pub bn_regularization: f64,
    pub inversion: f64,
    pub contrastive: f64,
    pub objective: f64,
}

/// The joint objective on a generated batch, as a graph node plus its
/// component values:
/// `alpha' * L_in(generated) + beta' * L_c(generated ∪ bank)`.
///
/// With an empty bank the contrastive term degenerates to intra-batch
/// negatives; with `beta_prime == 0` the term is skipped entirely and the
/// objective reduces to `alpha' * L_in`.
#[allow(clippy::too_many_arguments)]
pub fn synthesis_objective_graph(
    images: &Tensor,
    targets: &[usize],
    teacher: &dyn Classifier,
    disc: &dyn Projector,
    bank: &MemoryBank,
    hp: &HyperParams,
    rng: &mut ChaCha12Rng,
) -> Result<(Tensor, SynthesisLosses)> {
    let shape = images.shape();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::invalid("synthesis_objective: empty generated batch"));
    }
    let want_pools = hp.beta_prime > 0.0;
    let mut opts = TraceOptions::eval().with_batch_stats();
    if want_pools {
        opts = opts.with_pool_features();
    }
    let trace = teacher.trace(images, &opts);
    let cls = class_prior_loss(&trace.logits, targets)?;
    let bn = bn_regularization_loss(&trace.batch_stats, &teacher.running_bn())?;
    let inv = inversion_loss(&cls, &bn, hp);

    let (objective, contrastive_val) = if hp.beta_prime > 0.0 {
        // When the head can project from this trace, the anchors need no
        // second backbone pass.
        let anchors_proj = disc.project_trace(&trace).transpose()?;
        let lc = contrastive_loss_with_anchor_proj(
            images,
            anchors_proj,
            bank,
            disc,
            hp.tp,
            &hp.view_policy,
            hp.negatives_per_anchor,
            hp.contrastive_includes_positive,
            rng,
        )?;
        let obj = inv
            .mul_scalar(hp.alpha_prime)
            .add(&lc.mul_scalar(hp.beta_prime));
        (obj, lc.item())
    } else {
        (inv.mul_scalar(hp.alpha_prime), 0.0)
    };

    let losses = SynthesisLosses {
        class_prior: cls.item(),
        bn_regularization: bn.item(),
        inversion: inv.item(),
        contrastive: contrastive_val,
        objective: objective.item(),
    };
    Ok((objective, losses))
}

/// Spec-level objective on an already-materialized batch (no tape reuse);
/// returns the component values.
pub fn synthesis_objective(
    generated: &ImageBatch,
    bank: &MemoryBank,
    teacher: &dyn Classifier,
    disc: &dyn Projector,
    hp: &HyperParams,
    rng: &mut ChaCha12Rng,
) -> Result<SynthesisLosses> {
    let (_, losses) = synthesis_objective_graph(
        &generated.to_tensor(),
        &generated.labels,
        teacher,
        disc,
        bank,
        hp,
        rng,
    )?;
    Ok(losses)
}

/// Configuration of one synthesis round.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthesisRound {
    pub round_index: usize,
    pub batch_size: usize,
    pub step_count: usize,
    pub learning_rate: f64,
}

/// Output of one round: the synthesized batch and per-step loss components.
#[derive(Debug)]
pub struct SynthesisOutcome {
    pub batch: ImageBatch,
    pub steps: Vec<SynthesisLosses>,
}

/// Balanced target labels: every class appears `floor(B/C)` or `ceil(B/C)`
/// times, order shuffled.
pub fn balanced_labels(batch_size: usize, label_count: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut labels = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        labels.push(i % label_count);
    }
    let order = crate::nn::shuffled_indices(rng, batch_size);
    order.into_iter().map(|i| labels[i]).collect()
}

/// Run one synthesis round: re-draw `f_ini` from a standard normal, then
/// jointly optimize `(f_ini, theta_w, discriminator)` with Adam for
/// `step_count` steps, minimizing the synthesis objective. The teacher is
/// frozen. Returns the final generated batch (labels = the sampled targets).
///
/// `shared_opt` owns the persistent parameters (generator weights and the
/// projection head); a fresh Adam over `f_ini` is created per round.
#[allow(clippy::too_many_arguments)]
pub fn run_synthesis_round(
    gen: &dyn Generator,
    teacher: &dyn Classifier,
    disc: &dyn Projector,
    shared_opt: &mut Adam,
    bank: &MemoryBank,
    hp: &HyperParams,
    round: &SynthesisRound,
    master_seed: u64,
) -> Result<SynthesisOutcome> {
    if round.step_count == 0 {
        return Err(Error::invalid("synthesis round needs step_count >= 1"));
    }
    if round.batch_size == 0 {
        return Err(Error::invalid("synthesis round needs batch_size >= 1"));
    }
    hp.validate()?;
    let r = round.round_index as u64;
    let mut label_rng = crate::rng::stream(master_seed, "synthesis-labels", &[r]);
    let mut latent_rng = crate::rng::stream(master_seed, "synthesis-latent", &[r]);
    let mut view_rng = crate::rng::stream(master_seed, "synthesis-views", &[r]);

    let targets = balanced_labels(round.batch_size, teacher.label_count(), &mut label_rng);
    let f_ini = Tensor::new(
        standard_normal(&mut latent_rng, &[round.batch_size, gen.latent_dim()]),
        true,
    );
    let mut latent_opt = Adam::new(vec![f_ini.clone()], round.learning_rate);

    let mut steps = Vec::with_capacity(round.step_count);
    for step in 0..round.step_count {
        let images = gen.forward(&f_ini, Mode::Train);
        let (objective, losses) =
            synthesis_objective_graph(&images, &targets, teacher, disc, bank, hp, &mut view_rng)?;
        if !losses.objective.is_finite() {
            return Err(Error::NonFinite {
                stage: "synthesis".into(),
                step,
                detail: format!(
                    "cls={} bn={} contrastive={}",
                    losses.class_prior, losses.bn_regularization, losses.contrastive
                ),
            });
        }
        latent_opt.zero_grad();
        shared_opt.zero_grad();
        objective.backward();
        latent_opt.step();
        shared_opt.step();
        steps.push(losses);
    }

    let final_images = gen.forward(&f_ini, Mode::Train).detach();
    let batch = batch_from_tensor(&final_images, targets)?;
    Ok(SynthesisOutcome { batch, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::model_checksum;
    use crate::models::{ConvGenerator, DiscriminatorHead, LinearClassifier, SmallCnn};
    use crate::rng::stream;
    use ndarray::{arr1, arr2, Array1};
    use std::rc::Rc;

    #[test]
    fn saturated_correct_prediction_has_negligible_loss() {
        // +30 vs 0 stands in for the one-hot limit.
        let logits = Tensor::constant(arr2(&[[30.0, 0.0], [0.0, 30.0]]).into_dyn());
        let loss = class_prior_loss(&logits, &[0, 1]).unwrap();
        assert!(loss.item() < 1e-10, "got {}", loss.item());
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 10, 100] {
            let logits = Tensor::zeros(&[4, c], false);
            let targets = vec![0usize; 4];
            let loss = class_prior_loss(&logits, &targets).unwrap();
            assert!(
                (loss.item() - (c as f64).ln()).abs() < 1e-6,
                "C={c}: got {}",
                loss.item()
            );
        }
    }

    /// Independent scalar-loop oracle for the mean cross-entropy.
    fn ce_oracle(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &t) in logits.iter().zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let p = (row[t] - m).exp() / z;
            total += -p.ln();
        }
        total / logits.len() as f64
    }

    #[test]
    fn random_logits_match_scalar_oracle() {
        let mut rng = stream(3, "ce", &[]);
        let vals = crate::nn::standard_normal(&mut rng, &[4, 3]);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..3).map(|j| vals[[i, j]] * 2.0).collect())
            .collect();
        let targets = vec![2usize, 0, 1, 1];
        let logits = Tensor::constant(vals.mapv(|v| v * 2.0));
        let got = class_prior_loss(&logits, &targets).unwrap().item();
        let want = ce_oracle(&rows, &targets);
        assert!(
            (got - want).abs() / want.abs().max(1e-12) < 1e-6,
            "got {got}, oracle {want}"
        );
    }

    #[test]
    fn class_prior_rejects_bad_label() {
        let logits = Tensor::zeros(&[2, 3], false);
        assert!(class_prior_loss(&logits, &[0, 3]).is_err());
    }

    fn stats_of(mean: &[f64], var: &[f64]) -> BnBatchStats {
        BnBatchStats {
            mean: Tensor::constant(arr1(mean).into_dyn()),
            var: Tensor::constant(arr1(var).into_dyn()),
        }
    }

    fn running_of(mean: &[f64], var: &[f64]) -> BnStats {
        BnStats {
            mean: Array1::from_vec(mean.to_vec()),
            var: Array1::from_vec(var.to_vec()),
        }
    }

    #[test]
    fn bn_loss_zero_iff_statistics_match() {
        let bs = vec![stats_of(&[0.3, -0.1], &[1.0, 2.0])];
        let rs = vec![running_of(&[0.3, -0.1], &[1.0, 2.0])];
        let loss = bn_regularization_loss(&bs, &rs).unwrap();
        assert_eq!(loss.item(), 0.0);
        let rs2 = vec![running_of(&[0.3, -0.1], &[1.0, 2.1])];
        assert!(bn_regularization_loss(&bs, &rs2).unwrap().item() > 0.0);
    }

    /// Hand case: one layer, one channel, mean gap 0.5, matching variance.
    #[test]
    fn bn_loss_hand_case_half() {
        let bs = vec![stats_of(&[0.5], &[1.0])];
        let rs = vec![running_of(&[0.0], &[1.0])];
        let loss = bn_regularization_loss(&bs, &rs).unwrap();
        assert_eq!(loss.item(), 0.5);
    }

    #[test]
    fn bn_loss_adds_over_layers() {
        let bs = vec![stats_of(&[0.5], &[1.0]), stats_of(&[0.0], &[1.5])];
        let rs = vec![running_of(&[0.0], &[1.0]), running_of(&[0.0], &[1.0])];
        let loss = bn_regularization_loss(&bs, &rs).unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bn_loss_rejects_width_mismatch() {
        let bs = vec![stats_of(&[0.5, 0.1], &[1.0, 1.0])];
        let rs = vec![running_of(&[0.0], &[1.0])];
        assert!(bn_regularization_loss(&bs, &rs).is_err());
    }

    #[test]
    fn inversion_loss_weights_components() {
        let hp = HyperParams {
            alpha: 0.5,
            beta: 10.0,
            ..HyperParams::default()
        };
        let loss = inversion_loss(&Tensor::scalar(0.2), &Tensor::scalar(0.03), &hp);
        assert!((loss.item() - 0.4).abs() < 1e-12);

        let zero = HyperParams {
            alpha: 0.0,
            beta: 0.0,
            ..HyperParams::default()
        };
        assert_eq!(
            inversion_loss(&Tensor::scalar(9.0), &Tensor::scalar(4.0), &zero).item(),
            0.0
        );

        let proj = HyperParams {
            alpha: 1.0,
            beta: 0.0,
            ..HyperParams::default()
        };
        assert_eq!(
            inversion_loss(&Tensor::scalar(0.7), &Tensor::scalar(123.0), &proj).item(),
            0.7
        );
    }

    #[test]
    fn inversion_loss_is_linear() {
        let hp = HyperParams::default();
        let a = inversion_loss(&Tensor::scalar(0.3), &Tensor::scalar(0.2), &hp).item();
        let b = inversion_loss(&Tensor::scalar(0.6), &Tensor::scalar(0.4), &hp).item();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn balanced_labels_cover_classes_evenly() {
        let mut rng = stream(8, "bl", &[]);
        let labels = balanced_labels(25, 10, &mut rng);
        for c in 0..10 {
            let n = labels.iter().filter(|&&l| l == c).count();
            assert!(n == 2 || n == 3, "class {c} appears {n} times");
        }
    }

    #[test]
    fn objective_reduces_to_inversion_when_beta_prime_zero() {
        let teacher = SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap();
        let disc: Rc<dyn Classifier> =
            Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap());
        let head = DiscriminatorHead::new(disc, 2, true);
        let bank = MemoryBank::new(8, (1, 16, 16)).unwrap();
        let batch = crate::data::digits(4, 1, 77).train;
        let hp = HyperParams {
            beta_prime: 0.0,
            alpha_prime: 1.0,
            ..HyperParams::default()
        };
        let losses =
            synthesis_objective(&batch, &bank, &teacher, &head, &hp, &mut stream(1, "o", &[]))
                .unwrap();
        assert!((losses.objective - losses.inversion).abs() < 1e-12);
        assert_eq!(losses.contrastive, 0.0);
    }

    #[test]
    fn objective_composes_both_terms() {
        let teacher = SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap();
        let backbone: Rc<dyn Classifier> =
            Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap());
        let head = DiscriminatorHead::new(backbone, 2, true);
        let mut bank = MemoryBank::new(8, (1, 16, 16)).unwrap();
        bank.push(&crate::data::digits(4, 1, 78).train, 0).unwrap();
        let batch = crate::data::digits(4, 1, 79).train;
        let hp = HyperParams {
            alpha_prime: 1.0,
            beta_prime: 0.5,
            ..HyperParams::default()
        };
        let losses =
            synthesis_objective(&batch, &bank, &teacher, &head, &hp, &mut stream(2, "o", &[]))
                .unwrap();
        let expect = hp.alpha_prime * losses.inversion + hp.beta_prime * losses.contrastive;
        assert!((losses.objective - expect).abs() < 1e-10);
    }

    #[test]
    fn empty_generated_batch_is_rejected() {
        let teacher = SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap();
        let backbone: Rc<dyn Classifier> =
            Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap());
        let head = DiscriminatorHead::new(backbone, 2, true);
        let bank = MemoryBank::new(8, (1, 16, 16)).unwrap();
        let empty = Tensor::zeros(&[0, 1, 16, 16], false);
        assert!(synthesis_objective_graph(
            &empty,
            &[],
            &teacher,
            &head,
            &bank,
            &HyperParams::default(),
            &mut stream(3, "o", &[]),
        )
        .is_err());
    }

    #[test]
    fn zero_step_round_is_rejected() {
        let teacher = SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap();
        let gen = ConvGenerator::new(16, (1, 16, 16), 4, true).unwrap();
        let backbone: Rc<dyn Classifier> =
            Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap());
        let head = DiscriminatorHead::new(backbone, 2, true);
        let bank = MemoryBank::new(8, (1, 16, 16)).unwrap();
        let mut opt = Adam::new(gen.parameters(), 1e-3);
        let round = SynthesisRound {
            round_index: 0,
            batch_size: 4,
            step_count: 0,
            learning_rate: 1e-3,
        };
        let err = run_synthesis_round(
            &gen,
            &teacher,
            &head,
            &mut opt,
            &bank,
            &HyperParams::default(),
            &round,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("step_count"));
    }

    /// With only the class prior active and a linear teacher, optimization
    /// should reduce the loss from its starting point on most seeds.
    #[test]
    fn class_prior_descends_on_linear_teacher() {
        let mut improved = 0;
        for seed in 0..10u64 {
            let teacher = LinearClassifier::new((1, 16, 16), 10, 123, false);
            let gen = ConvGenerator::new(16, (1, 16, 16), 200 + seed, true).unwrap();
            let backbone: Rc<dyn Classifier> =
                Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 1, false).unwrap());
            let head = DiscriminatorHead::new(backbone, 2, true);
            let bank = MemoryBank::new(8, (1, 16, 16)).unwrap();
            let hp = HyperParams {
                alpha: 1.0,
                beta: 0.0,
                beta_prime: 0.0,
                ..HyperParams::default()
            };
            let mut opt = Adam::new(gen.parameters(), 2e-3);
            let round = SynthesisRound {
                round_index: 0,
                batch_size: 8,
                step_count: 25,
                learning_rate: 2e-3,
            };
            let out = run_synthesis_round(
                &gen, &teacher, &head, &mut opt, &bank, &hp, &round, seed,
            )
            .unwrap();
            if out.steps.last().unwrap().class_prior < out.steps[0].class_prior {
                improved += 1;
            }
        }
        assert!(improved >= 9, "class prior improved on only {improved}/10 seeds");
    }

    #[test]
    fn synthesis_never_touches_the_teacher() {
        let teacher = SmallCnn::new("cnn16", (1, 16, 16), 10, 42, false).unwrap();
        let before = model_checksum(&teacher);
        let gen = ConvGenerator::new(16, (1, 16, 16), 5, true).unwrap();
        let backbone: Rc<dyn Classifier> =
            Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 42, false).unwrap());
        let head = DiscriminatorHead::new(backbone, 2, true);
        let mut bank = MemoryBank::new(32, (1, 16, 16)).unwrap();
        bank.push(&crate::data::digits(8, 1, 80).train, 0).unwrap();
        let mut opt = Adam::new(
            gen.parameters().into_iter().chain(head.parameters()).collect(),
            1e-3,
        );
        let round = SynthesisRound {
            round_index: 1,
            batch_size: 6,
            step_count: 4,
            learning_rate: 1e-3,
        };
        let out = run_synthesis_round(
            &gen,
            &teacher,
            &head,
            &mut opt,
            &bank,
            &HyperParams::default(),
            &round,
            9,
        )
        .unwrap();
        assert_eq!(before, model_checksum(&teacher));
        assert_eq!(out.batch.len(), 6);
        assert_eq!(out.steps.len(), 4);
        assert!(out.batch.labels.iter().all(|&l| l < 10));
        assert!(out
            .batch
            .images
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rounds_are_reproducible_for_fixed_seed() {
        let run = || {
            let teacher = SmallCnn::new("cnn16", (1, 16, 16), 10, 42, false).unwrap();
            let gen = ConvGenerator::new(16, (1, 16, 16), 5, true).unwrap();
            let backbone: Rc<dyn Classifier> =
                Rc::new(SmallCnn::new("cnn16", (1, 16, 16), 10, 42, false).unwrap());
            let head = DiscriminatorHead::new(backbone, 2, true);
            let bank = MemoryBank::new(32, (1, 16, 16)).unwrap();
            let mut opt = Adam::new(gen.parameters(), 1e-3);
            let round = SynthesisRound {
                round_index: 0,
                batch_size: 4,
                step_count: 3,
                learning_rate: 1e-3,
            };
            run_synthesis_round(
                &gen,
                &teacher,
                &head,
                &mut opt,
                &bank,
                &HyperParams::default(),
                &round,
                77,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.batch.images, b.batch.images);
        assert_eq!(a.steps, b.steps);
    }
}
