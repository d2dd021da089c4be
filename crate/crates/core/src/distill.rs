//! Knowledge distillation and the full pipeline loop.
//!
//! Per round: synthesize one batch by model inversion, expand and filter it
//! through the diffusion backend, store the retained variants, then run
//! student epochs over the cumulative pool. Optimization alternates: the
//! synthesis objective updates the generator latents/weights and the
//! projection head; the student epochs update student parameters with the
//! KD term plus the self-supervised class term. The total loss is still
//! assembled and logged per step with all three terms.

use crate::augment::{
    augment_pipeline, write_augment_cache, AdaptiveIntensity, AugmentPolicy, AugmentationRecord,
    DiffusionModel, SimilaritySpace,
};
use crate::contracts::{model_checksum, Classifier, Generator, Projector, TraceOptions};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::nn::{cosine_lr, Adam, Sgd};
use crate::synthesis::{run_synthesis_round, HyperParams, SynthesisLosses, SynthesisRound};
use crate::tensor::Tensor;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Temperature-softened KL divergence `KL(softmax(t/tau) || softmax(s/tau))`,
/// batch mean, scaled by `tau^2` so gradient magnitude stays stable across
/// temperatures. Teacher logits are treated as constants; the gradient flows
/// into the student logits.
pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(kd_divergence(teacher_logits, student_logits, tau)?.mul_scalar(tau * tau))
}

/// The unscaled softened divergence (no `tau^2` factor). Goes to zero as
/// `tau` grows on fixed logits; [`kd_loss`] is this times `tau^2`.
pub fn kd_divergence(teacher_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!(
            "kd temperature must be positive, got {tau}"
        )));
    }
    let (ts, ss) = (teacher_logits.shape(), student_logits.shape());
    if ts != ss {
        return Err(Error::shape("kd_loss", format!("{ts:?}"), format!("{ss:?}")));
    }
    if ts.len() != 2 || ts[0] == 0 {
        return Err(Error::invalid("kd_loss: logits must be (B, C), B >= 1"));
    }
    let b = ts[0];
    // Teacher side is constant: p and ln p computed outside the tape.
    let p_log = teacher_logits
        .detach()
        .mul_scalar(1.0 / tau)
        .log_softmax_rows();
    let p = Tensor::constant(p_log.data().mapv(f64::exp));
    let p_log = p_log.detach();
    let s_log = student_logits.mul_scalar(1.0 / tau).log_softmax_rows();
    let kl = p.mul(&p_log.sub(&s_log)).sum_all().mul_scalar(1.0 / b as f64);
    Ok(kl)
}

/// Total loss bookkeeping per the three-term decomposition:
/// `eta_kl * kd + eta_synth * synth_obj + eta_self * self_sup`.
///
/// The synthesis term enters as a constant: under alternating optimization it
/// never routes gradient into student parameters, but its weighted value is
/// part of the reported total.
pub fn total_loss(kd: &Tensor, synth_obj: f64, self_sup: &Tensor, hp: &HyperParams) -> Tensor {
    kd.mul_scalar(hp.eta_kl)
        .add(&self_sup.mul_scalar(hp.eta_self))
        .add_scalar(hp.eta_synth * synth_obj)
}

/// One optimizer step's loss components.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub round: usize,
    pub epoch: usize,
    pub step: usize,
    pub kd: f64,
    pub synth: f64,
    pub self_sup: f64,
    pub total: f64,
    pub lr: f64,
}

/// Mutable student-side training state.
pub struct DistillState<'a> {
    pub student: &'a dyn Classifier,
    pub optimizer: Sgd,
    pub base_lr: f64,
    /// Epoch-granular cosine annealing horizon.
    pub total_epochs: usize,
    pub epoch: usize,
    pub batch_size: usize,
    pub history: Vec<StepRecord>,
    /// Last synthesis objective, logged into the total.
    pub last_synth_obj: f64,
    pub seed: u64,
}

impl<'a> DistillState<'a> {
    pub fn new(
        student: &'a dyn Classifier,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        total_epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        DistillState {
            student,
            optimizer: Sgd::new(student.parameters(), lr, momentum, weight_decay),
            base_lr: lr,
            total_epochs,
            epoch: 0,
            batch_size,
            history: Vec::new(),
            last_synth_obj: 0.0,
            seed,
        }
    }
}

/// Cumulative training pool of retained variants and fallback sources.
#[derive(Default)]
pub struct DistillPool {
    images: Vec<Array3<f64>>,
    labels: Vec<usize>,
}

impl DistillPool {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Retained variants carry the source label; fully filtered sources
    /// contribute themselves.
    pub fn extend_from_records(&mut self, records: &[AugmentationRecord]) {
        for rec in records {
            for v in rec.retained() {
                self.images.push(v.clone());
                self.labels.push(rec.label);
            }
            if rec.used_fallback {
                self.images.push(rec.source.clone());
                self.labels.push(rec.label);
            }
        }
    }

    fn minibatch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.images[0].dim();
        let mut arr = ndarray::Array4::<f64>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            arr.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images[i]);
            labels.push(self.labels[i]);
        }
        (Tensor::constant(arr.into_dyn()), labels)
    }
}

/// Per-epoch aggregate metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub round: usize,
    pub epoch: usize,
    pub steps: usize,
    pub mean_kd: f64,
    pub mean_self: f64,
    pub mean_total: f64,
    pub images_per_second: f64,
}

/// One pass over a pool: shuffled minibatches, student step on
/// `eta_kl * kd + eta_self * ce`. Halts on a non-finite loss.
pub fn train_epoch_on_pool(
    state: &mut DistillState<'_>,
    pool: &DistillPool,
    teacher: &dyn Classifier,
    hp: &HyperParams,
    round: usize,
) -> Result<EpochMetrics> {
    if pool.is_empty() {
        return Err(Error::invalid("train_student_epoch: no retained data"));
    }
    let started = std::time::Instant::now();
    state.optimizer.lr = cosine_lr(state.base_lr, state.epoch, state.total_epochs);
    let mut rng = crate::rng::stream(state.seed, "distill-epoch", &[round as u64, state.epoch as u64]);
    let order = crate::nn::shuffled_indices(&mut rng, pool.len());
    let (mut sum_kd, mut sum_self, mut sum_total) = (0.0, 0.0, 0.0);
    let mut steps = 0usize;
    for chunk in order.chunks(state.batch_size) {
        let (x, labels) = pool.minibatch(chunk);
        let teacher_logits = teacher.trace(&x, &TraceOptions::eval()).logits;
        let student_logits = state.student.trace(&x, &TraceOptions::train()).logits;
        let kd = kd_loss(&teacher_logits, &student_logits, hp.tau)?;
        let self_sup = crate::synthesis::class_prior_loss(&student_logits, &labels)?;
        let total = total_loss(&kd, state.last_synth_obj, &self_sup, hp);
        let objective = kd.mul_scalar(hp.eta_kl).add(&self_sup.mul_scalar(hp.eta_self));
        let (kd_v, self_v, total_v) = (kd.item(), self_sup.item(), total.item());
        if !total_v.is_finite() {
            return Err(Error::NonFinite {
                stage: "distillation".into(),
                step: steps,
                detail: format!("kd={kd_v} self={self_v}"),
            });
        }
        state.optimizer.zero_grad();
        objective.backward();
        state.optimizer.step();
        state.history.push(StepRecord {
            round,
            epoch: state.epoch,
            step: steps,
            kd: kd_v,
            synth: state.last_synth_obj,
            self_sup: self_v,
            total: total_v,
            lr: state.optimizer.lr,
        });
        sum_kd += kd_v;
        sum_self += self_v;
        sum_total += total_v;
        steps += 1;
    }
    state.epoch += 1;
    let elapsed = started.elapsed().as_secs_f64().max(1e-9);
    Ok(EpochMetrics {
        round,
        epoch: state.epoch - 1,
        steps,
        mean_kd: sum_kd / steps as f64,
        mean_self: sum_self / steps as f64,
        mean_total: sum_total / steps as f64,
        images_per_second: pool.len() as f64 / elapsed,
    })
}

/// One pass over the retained variants (and fallback sources) of a set of
/// augmentation records.
pub fn train_student_epoch(
    state: &mut DistillState<'_>,
    data: &[AugmentationRecord],
    teacher: &dyn Classifier,
    hp: &HyperParams,
    round: usize,
) -> Result<EpochMetrics> {
    let mut pool = DistillPool::default();
    pool.extend_from_records(data);
    train_epoch_on_pool(state, &pool, teacher, hp, round)
}

/// Ablation switches (both true = the full method).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub diffusion: bool,
    pub filter: bool,
}

impl Ablation {
    pub fn full() -> Self {
        Ablation {
            diffusion: true,
            filter: true,
        }
    }
}

/// Round/epoch schedule and optimizer settings for one run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub rounds: usize,
    pub images_per_round: usize,
    pub steps_per_round: usize,
    pub epochs_per_round: usize,
    pub distill_batch: usize,
    pub generator_lr: f64,
    /// Learning rate for the per-round latent batch; the latents see only
    /// `steps_per_round` updates, so short rounds want this well above the
    /// generator rate.
    pub latent_lr: f64,
    pub student_lr: f64,
    pub student_momentum: f64,
    pub student_weight_decay: f64,
    pub bank_capacity: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            rounds: 10,
            images_per_round: 100,
            steps_per_round: 20,
            epochs_per_round: 5,
            distill_batch: 100,
            generator_lr: 1e-3,
            latent_lr: 0.05,
            student_lr: 0.1,
            student_momentum: 0.9,
            student_weight_decay: 1e-4,
            bank_capacity: 4096,
        }
    }
}

/// Per-round metrics for the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub synthesis_final: SynthesisLosses,
    pub variants_total: usize,
    pub variants_retained: usize,
    pub retained_fraction: f64,
    pub fallback_sources: usize,
    pub mean_similarity: f64,
    pub pool_size: usize,
    pub student_accuracy: Option<f64>,
    pub epochs: Vec<EpochMetrics>,
}

/// Everything a finished (or failed) run reports.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RunOutcome {
    pub rounds: Vec<RoundMetrics>,
    pub history: Vec<StepRecord>,
    pub final_accuracy: Option<f64>,
    pub initial_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub best_round: Option<usize>,
    pub teacher_checksum_before: u64,
    pub teacher_checksum_after: u64,
    /// Stage name when the run aborted early.
    pub failed_stage: Option<String>,
}

/// Output locations for caches and checkpoints; all optional.
#[derive(Debug, Clone, Default)]
pub struct RunDirs {
    pub checkpoints: Option<PathBuf>,
    pub synth_cache: Option<PathBuf>,
    pub aug_cache: Option<PathBuf>,
}

/// Borrowed pieces of a full distillation run.
pub struct DdaPipeline<'a> {
    pub teacher: &'a dyn Classifier,
    pub student: &'a dyn Classifier,
    pub generator: &'a dyn Generator,
    pub disc: &'a dyn Projector,
    pub backend: &'a dyn DiffusionModel,
    pub bank: &'a mut MemoryBank,
    pub hp: &'a HyperParams,
    pub schedule: &'a Schedule,
    pub ablation: Ablation,
    /// Measure the similarity filter in the projection head's space instead
    /// of the teacher embedding.
    pub filter_in_projection_space: bool,
    /// Labelled set for the accuracy trajectory (evaluation only; training
    /// never sees it).
    pub eval_set: Option<&'a ImageBatch>,
    pub dirs: RunDirs,
    pub seed: u64,
}

fn save_round_checkpoints(
    dir: &Path,
    round: usize,
    student: &dyn Classifier,
    generator: &dyn Generator,
    disc_state: &[(String, ndarray::ArrayD<f64>)],
    bank: &MemoryBank,
) -> Result<PathBuf> {
    let round_dir = dir.join(format!("round_{round:04}"));
    std::fs::create_dir_all(&round_dir)?;
    let meta = crate::checkpoint::ModelMeta::new(
        student.arch_id(),
        student.label_count(),
        student.feature_dim(),
        student.bn_layer_count(),
        student.input_shape(),
    );
    crate::checkpoint::save_model(&round_dir.join("student"), &meta, &student.state())?;
    let (gc, gh, gw) = generator.output_shape();
    let gen_meta = crate::checkpoint::ModelMeta::new("generator", 0, generator.latent_dim(), 0, (gc, gh, gw));
    crate::checkpoint::save_model(&round_dir.join("generator"), &gen_meta, &generator.state())?;
    let disc_meta = crate::checkpoint::ModelMeta::new("discriminator", 0, 0, 0, student.input_shape());
    crate::checkpoint::save_model(&round_dir.join("discriminator"), &disc_meta, disc_state)?;
    bank.save(&round_dir.join("bank.bin"))?;
    Ok(round_dir)
}

/// Delete round checkpoint dirs other than best and last.
fn prune_checkpoints(dir: &Path, keep: &[usize]) -> Result<()> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(());
    };
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(num) = name.strip_prefix("round_").and_then(|s| s.parse::<usize>().ok()) {
            if !keep.contains(&num) {
                std::fs::remove_dir_all(entry.path())?;
            }
        }
    }
    Ok(())
}

/// Sources-only records for the no-diffusion ablation: zero variants, the
/// source image stands in for itself.
fn source_only_records(batch: &ImageBatch) -> Vec<AugmentationRecord> {
    (0..batch.len())
        .map(|i| AugmentationRecord {
            source_index: i,
            source: batch.image(i),
            label: batch.labels[i],
            latent: crate::augment::Latent {
                values: batch.image(i).into_dyn(),
            },
            seeds: Vec::new(),
            variants: Vec::new(),
            similarities: Vec::new(),
            mask: Vec::new(),
            self_losses: Vec::new(),
            used_fallback: true,
        })
        .collect()
}

/// Write one round's synthetic batch as PNGs plus a manifest.
fn write_synth_cache(
    dir: &Path,
    round: usize,
    batch: &ImageBatch,
    final_losses: &SynthesisLosses,
    seed: u64,
) -> Result<()> {
    let round_dir = dir.join(format!("round_{round:04}"));
    std::fs::create_dir_all(&round_dir)?;
    let mut files = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let file = format!("synth{i:04}.png");
        std::fs::write(
            round_dir.join(&file),
            crate::imgio::encode_png16(&batch.image(i))?,
        )?;
        files.push(file);
    }
    #[derive(Serialize)]
    struct SynthManifest<'a> {
        round: usize,
        seed: u64,
        labels: &'a [usize],
        final_losses: &'a SynthesisLosses,
        files: Vec<String>,
    }
    let manifest = SynthManifest {
        round,
        seed,
        labels: &batch.labels,
        final_losses,
        files,
    };
    std::fs::write(
        round_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?,
    )?;
    Ok(())
}

/// The full loop: rounds of synthesis, augmentation + filtering, storage,
/// and student epochs. Returns the report; the student (passed by reference)
/// carries the trained weights.
pub fn run_dda(p: DdaPipeline<'_>) -> Result<RunOutcome> {
    p.hp.validate()?;
    let mut outcome = RunOutcome {
        teacher_checksum_before: model_checksum(p.teacher),
        ..RunOutcome::default()
    };
    if let Some(eval) = p.eval_set {
        outcome.initial_accuracy = Some(crate::eval::accuracy(p.student, eval)?);
    }

    let mut shared_params = p.generator.parameters();
    shared_params.extend(p.disc.parameters());
    let mut shared_opt = Adam::new(shared_params, p.schedule.generator_lr);
    let mut policy = AdaptiveIntensity::new(1.0, p.teacher.label_count());
    let mut pool = DistillPool::default();
    let mut state = DistillState::new(
        p.student,
        p.schedule.student_lr,
        p.schedule.student_momentum,
        p.schedule.student_weight_decay,
        p.schedule.rounds * p.schedule.epochs_per_round,
        p.schedule.distill_batch,
        p.seed,
    );
    let space = if p.filter_in_projection_space {
        SimilaritySpace::Projection(p.disc)
    } else {
        SimilaritySpace::Embedding(p.teacher)
    };

    let mut best: Option<(f64, usize)> = None;
    let mut last_round_dir: Option<usize> = None;

    for round in 0..p.schedule.rounds {
        let stage = |name: &str| format!("{name} (round {round})");

        let round_cfg = SynthesisRound {
            round_index: round,
            batch_size: p.schedule.images_per_round,
            step_count: p.schedule.steps_per_round,
            learning_rate: p.schedule.latent_lr,
        };
        let synth = match run_synthesis_round(
            p.generator,
            p.teacher,
            p.disc,
            &mut shared_opt,
            p.bank,
            p.hp,
            &round_cfg,
            p.seed,
        ) {
            Ok(s) => s,
            Err(e) => {
                outcome.failed_stage = Some(stage("synthesis"));
                outcome.teacher_checksum_after = model_checksum(p.teacher);
                log::error!("synthesis failed in round {round}: {e}");
                return Err(Error::Pipeline {
                    stage: stage("synthesis"),
                    detail: e.to_string(),
                });
            }
        };
        let synth_final = *synth.steps.last().expect("at least one step");
        state.last_synth_obj = synth_final.objective;
        if let Some(dir) = &p.dirs.synth_cache {
            write_synth_cache(dir, round, &synth.batch, &synth_final, p.seed)?;
        }

        let records = if p.ablation.diffusion {
            match augment_pipeline(
                &synth.batch,
                p.student,
                &space,
                p.backend,
                p.hp,
                &policy,
                p.ablation.filter,
                round,
                p.seed,
            ) {
                Ok(r) => r,
                Err(e) => {
                    outcome.failed_stage = Some(stage("augmentation"));
                    outcome.teacher_checksum_after = model_checksum(p.teacher);
                    return Err(Error::Pipeline {
                        stage: stage("augmentation"),
                        detail: e.to_string(),
                    });
                }
            }
        } else {
            source_only_records(&synth.batch)
        };
        policy.observe(&records);
        p.bank.push(&synth.batch, round)?;
        if let Some(dir) = &p.dirs.aug_cache {
            write_augment_cache(dir, round, &records)?;
        }

        let variants_total: usize = records.iter().map(|r| r.variants.len()).sum();
        let variants_retained: usize = records.iter().map(|r| r.retained_count()).sum();
        let fallback_sources = records.iter().filter(|r| r.used_fallback).count();
        let mean_similarity = if variants_total > 0 {
            records
                .iter()
                .flat_map(|r| r.similarities.iter())
                .sum::<f64>()
                / variants_total as f64
        } else {
            1.0
        };
        pool.extend_from_records(&records);

        let mut epochs = Vec::with_capacity(p.schedule.epochs_per_round);
        for _ in 0..p.schedule.epochs_per_round {
            match train_epoch_on_pool(&mut state, &pool, p.teacher, p.hp, round) {
                Ok(m) => epochs.push(m),
                Err(e) => {
                    outcome.failed_stage = Some(stage("distillation"));
                    outcome.history = std::mem::take(&mut state.history);
                    outcome.teacher_checksum_after = model_checksum(p.teacher);
                    // Last-good checkpoint stays on disk from the previous round.
                    return Err(Error::Pipeline {
                        stage: stage("distillation"),
                        detail: e.to_string(),
                    });
                }
            }
        }

        let student_accuracy = match p.eval_set {
            Some(eval) => Some(crate::eval::accuracy(p.student, eval)?),
            None => None,
        };
        if let Some(acc) = student_accuracy {
            if best.map(|(b, _)| acc > b).unwrap_or(true) {
                best = Some((acc, round));
            }
        }

        if let Some(dir) = &p.dirs.checkpoints {
            save_round_checkpoints(
                dir,
                round,
                p.student,
                p.generator,
                &p.disc_state(),
                p.bank,
            )?;
            let mut keep = vec![round];
            if let Some((_, br)) = best {
                keep.push(br);
            }
            prune_checkpoints(dir, &keep)?;
            last_round_dir = Some(round);
        }

        outcome.rounds.push(RoundMetrics {
            round,
            synthesis_final: synth_final,
            variants_total,
            variants_retained,
            retained_fraction: if variants_total > 0 {
                variants_retained as f64 / variants_total as f64
            } else {
                0.0
            },
            fallback_sources,
            mean_similarity,
            pool_size: pool.len(),
            student_accuracy,
            epochs,
        });
    }

    let _ = last_round_dir;
    outcome.history = state.history;
    outcome.final_accuracy = outcome.rounds.last().and_then(|r| r.student_accuracy);
    outcome.best_accuracy = best.map(|(a, _)| a);
    outcome.best_round = best.map(|(_, r)| r);
    outcome.teacher_checksum_after = model_checksum(p.teacher);
    Ok(outcome)
}

impl DdaPipeline<'_> {
    fn disc_state(&self) -> Vec<(String, ndarray::ArrayD<f64>)> {
        // Projection heads expose parameters; name them positionally for the
        // per-round snapshot.
        self.disc
            .parameters()
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("param{i}"), t.to_array()))
            .collect()
    }
}
