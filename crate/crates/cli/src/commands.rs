//! The five commands: teacher pretraining (which also fits the surrogate
//! backend's autoencoder), full distillation runs, parameter sweeps,
//! checkpoint evaluation with optional three-depth Fréchet distances, and
//! chart emission.

use dfkd_core::augment::{
    DiffusionModel, ImageAutoencoder, RemoteDiffusion, SurrogateDiffusion,
};
use dfkd_core::checkpoint::{load_model, save_model, ModelMeta};
use dfkd_core::config::{BackendConfig, BackendKind, FilterSpace, RunConfig};
use dfkd_core::contracts::{Classifier, TraceOptions};
use dfkd_core::data::ImageBatch;
use dfkd_core::distill::{run_dda, DdaPipeline, RunDirs, RunOutcome};
use dfkd_core::error::{Error, Result};
use dfkd_core::eval::{fid, feature_rows, summarize_features, FeatureDepth};
use dfkd_core::memory::MemoryBank;
use dfkd_core::models::{ConvGenerator, DiscriminatorHead, SmallCnn};
use dfkd_core::nn::{cosine_lr, Mode, Sgd};
use dfkd_core::report::{self, MetricRow, RunDir};
use dfkd_core::rng::derive_seed;
use dfkd_core::synthesis::class_prior_loss;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::rc::Rc;

/// Outputs of `train-teacher`.
#[derive(Debug)]
pub struct TeacherArtifacts {
    pub run_dir: PathBuf,
    pub teacher_dir: PathBuf,
    pub surrogate_dir: PathBuf,
    pub accuracy: f64,
    pub ae_mse: f64,
}

/// Supervised training of a classifier on a labelled set.
fn train_supervised(
    model: &SmallCnn,
    train: &ImageBatch,
    cfg: &dfkd_core::config::TeacherTrainConfig,
    seed: u64,
) -> Result<()> {
    let mut opt = Sgd::new(
        model.parameters(),
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    for epoch in 0..cfg.epochs {
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut rng = dfkd_core::rng::stream(seed, "teacher-epoch", &[epoch as u64]);
        let order = dfkd_core::nn::shuffled_indices(&mut rng, train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let sub = train.select(chunk);
            let x = sub.to_tensor();
            let trace = model.trace(
                &x,
                &TraceOptions {
                    mode: Mode::Train,
                    batch_stats: false,
                    pool_features: false,
                },
            );
            let loss = class_prior_loss(&trace.logits, &sub.labels)?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite {
                    stage: "teacher-training".into(),
                    step: epoch,
                    detail: format!("loss {}", loss.item()),
                });
            }
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    Ok(())
}

fn classifier_meta(model: &SmallCnn) -> ModelMeta {
    ModelMeta::new(
        model.arch_id(),
        model.label_count(),
        model.feature_dim(),
        model.bn_layer_count(),
        model.input_shape(),
    )
}

/// Train the teacher and the surrogate backend's autoencoder; both
/// checkpoints land in a fresh run directory.
pub fn cmd_train_teacher(config: &RunConfig) -> Result<TeacherArtifacts> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let shape = dataset.image_shape();
    let seed = config.run.seed;

    let teacher = SmallCnn::new(
        &config.models.teacher_arch,
        shape,
        dataset.label_count,
        derive_seed(seed, "teacher-init", &[]),
        true,
    )?;
    train_supervised(&teacher, &dataset.train, &config.teacher, seed)?;
    let accuracy = dfkd_core::eval::accuracy(&teacher, &dataset.test)?;

    let ae = ImageAutoencoder::new(shape, derive_seed(seed, "ae-init", &[]), true)?;
    let ae_mse = ae.fit(
        &dataset.train,
        config.backend.ae_epochs,
        config.backend.ae_batch,
        derive_seed(seed, "ae-fit", &[]),
    )?;

    let run_dir = RunDir::create(Path::new(&config.run.out_dir), "train-teacher")?;
    let teacher_dir = run_dir.root.join("teacher");
    save_model(&teacher_dir, &classifier_meta(&teacher), &teacher.state())?;
    let surrogate_dir = run_dir.root.join("surrogate");
    let (c, h, w) = shape;
    let ae_meta = ModelMeta::new("ae16", 0, ae.latent_shape().0, 0, (c, h, w));
    save_model(&surrogate_dir, &ae_meta, &ae.state())?;

    std::fs::write(run_dir.config_echo(), config.echo())?;
    report::append_metrics(
        &run_dir.metrics(),
        &[
            MetricRow::Eval {
                label: "teacher/accuracy".into(),
                value: accuracy,
            },
            MetricRow::Eval {
                label: "surrogate/ae_mse".into(),
                value: ae_mse,
            },
        ],
    )?;
    std::fs::write(
        run_dir.report(),
        format!(
            "== teacher training ==\n\ndataset: {} ({} train / {} test)\nteacher: {} -> accuracy {:.2}%\nsurrogate autoencoder: final reconstruction mse {:.6}\ncheckpoints:\n  {}\n  {}\n",
            dataset.id,
            dataset.train.len(),
            dataset.test.len(),
            config.models.teacher_arch,
            accuracy * 100.0,
            ae_mse,
            teacher_dir.display(),
            surrogate_dir.display(),
        ),
    )?;
    Ok(TeacherArtifacts {
        run_dir: run_dir.root,
        teacher_dir,
        surrogate_dir,
        accuracy,
        ae_mse,
    })
}

/// Load a frozen classifier checkpoint.
pub fn load_teacher(dir: &Path) -> Result<SmallCnn> {
    let (meta, state) = load_model(dir)?;
    let model = SmallCnn::new(&meta.arch_id, meta.input_shape, meta.label_count, 0, false)?;
    model.load_state(&state)?;
    Ok(model)
}

/// Load the surrogate backend's trained autoencoder.
pub fn load_surrogate(dir: &Path, backend: &BackendConfig) -> Result<SurrogateDiffusion> {
    let (meta, state) = load_model(dir)?;
    if meta.arch_id != "ae16" {
        return Err(Error::Checkpoint(format!(
            "{} holds arch `{}`, expected the surrogate autoencoder",
            dir.display(),
            meta.arch_id
        )));
    }
    let ae = ImageAutoencoder::new(meta.input_shape, 0, false)?;
    ae.load_state(&state)?;
    Ok(SurrogateDiffusion::new(ae, backend.surrogate))
}

fn resolve_teacher_dirs(config: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    if config.run.teacher_dir.is_empty() {
        return Err(Error::Config(
            "no teacher checkpoint configured; run `dfkd train-teacher` first and pass \
             --teacher <dir> (or set [run].teacher_dir)"
                .into(),
        ));
    }
    let teacher_dir = PathBuf::from(&config.run.teacher_dir);
    let surrogate_dir = if config.run.surrogate_dir.is_empty() {
        teacher_dir
            .parent()
            .map(|p| p.join("surrogate"))
            .unwrap_or_else(|| PathBuf::from("surrogate"))
    } else {
        PathBuf::from(&config.run.surrogate_dir)
    };
    Ok((teacher_dir, surrogate_dir))
}

/// Outputs of `distill`.
#[derive(Debug)]
pub struct DistillArtifacts {
    pub run_dir: PathBuf,
    pub student_dir: PathBuf,
    pub outcome: RunOutcome,
}

/// Run the full pipeline per the config.
pub fn cmd_distill(config: &RunConfig) -> Result<DistillArtifacts> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let shape = dataset.image_shape();
    let seed = config.run.seed;
    let (teacher_dir, surrogate_dir) = resolve_teacher_dirs(config)?;
    let teacher = Rc::new(load_teacher(&teacher_dir)?);
    if teacher.input_shape() != shape {
        return Err(Error::shape(
            "distill",
            format!("teacher expects {:?}", teacher.input_shape()),
            format!("dataset provides {shape:?}"),
        ));
    }

    let backend: Box<dyn DiffusionModel> = match config.backend.kind {
        BackendKind::Surrogate => Box::new(load_surrogate(&surrogate_dir, &config.backend)?),
        BackendKind::Remote => Box::new(RemoteDiffusion::new(
            &config.backend.endpoint,
            shape,
            config.backend.retry,
        )),
    };

    let student = SmallCnn::new(
        &config.models.student_arch,
        shape,
        dataset.label_count,
        derive_seed(seed, "student-init", &[]),
        true,
    )?;
    let generator = ConvGenerator::new(
        config.models.latent_dim,
        shape,
        derive_seed(seed, "generator-init", &[]),
        true,
    )?;
    let teacher_dyn: Rc<dyn Classifier> = teacher.clone();
    let disc = DiscriminatorHead::new(teacher_dyn, derive_seed(seed, "disc-init", &[]), true);
    let mut bank = MemoryBank::new(config.schedule.bank_capacity, shape)?;

    let run_dir = RunDir::create(Path::new(&config.run.out_dir), "distill")?;
    std::fs::write(run_dir.config_echo(), config.echo())?;
    let dirs = RunDirs {
        checkpoints: Some(run_dir.checkpoints()),
        synth_cache: config.run.write_caches.then(|| run_dir.synth_cache()),
        aug_cache: config.run.write_caches.then(|| run_dir.aug_cache()),
    };

    let outcome = run_dda(DdaPipeline {
        teacher: &*teacher,
        student: &student,
        generator: &generator,
        disc: &disc,
        backend: &*backend,
        bank: &mut bank,
        hp: &config.hyperparams,
        schedule: &config.schedule,
        ablation: config.run.ablate.to_ablation(),
        filter_in_projection_space: config.run.filter_space == FilterSpace::Discriminator,
        eval_set: Some(&dataset.test),
        dirs,
        seed,
    })?;

    let student_dir = run_dir.root.join("student");
    save_model(&student_dir, &classifier_meta(&student), &student.state())?;
    report::write_run_metrics(&run_dir.metrics(), &outcome)?;
    report::write_run_report(&run_dir.report(), &config.echo(), &outcome)?;
    plot::emit_run_plots(&run_dir.metrics(), &run_dir.plots()).ok();
    Ok(DistillArtifacts {
        run_dir: run_dir.root,
        student_dir,
        outcome,
    })
}

use crate::plot;

/// One sweep point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub accuracy: f64,
    pub mean_similarity: f64,
    pub run_dir: String,
}

/// Set a named scalar on the config. The name is validated before any run
/// starts.
pub fn apply_sweep_param(config: &mut RunConfig, name: &str, value: f64) -> Result<()> {
    match name {
        "omega" => config.hyperparams.omega = value,
        "alpha" => config.hyperparams.alpha = value,
        "beta" => config.hyperparams.beta = value,
        "alpha_prime" => config.hyperparams.alpha_prime = value,
        "beta_prime" => config.hyperparams.beta_prime = value,
        "eta_kl" => config.hyperparams.eta_kl = value,
        "eta_self" => config.hyperparams.eta_self = value,
        "eta_synth" => config.hyperparams.eta_synth = value,
        "tau" => config.hyperparams.tau = value,
        "tp" => config.hyperparams.tp = value,
        "guidance_scale" => config.hyperparams.guidance_scale = value,
        "diffusion_steps" => config.hyperparams.diffusion_steps = value as usize,
        "augment_factor" => config.hyperparams.augment_factor = value as usize,
        "rounds" => config.schedule.rounds = value as usize,
        "epochs_per_round" => config.schedule.epochs_per_round = value as usize,
        "student_lr" => config.schedule.student_lr = value,
        "generator_lr" => config.schedule.generator_lr = value,
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter `{other}`"
            )))
        }
    }
    config.validate()
}

fn mean_similarity_of(outcome: &RunOutcome) -> f64 {
    if outcome.rounds.is_empty() {
        return f64::NAN;
    }
    outcome.rounds.iter().map(|r| r.mean_similarity).sum::<f64>() / outcome.rounds.len() as f64
}

/// One complete run per value, shared seed; emits a table and charts.
pub fn cmd_sweep(
    config: &RunConfig,
    parameter: &str,
    values: &[f64],
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    // Reject unknown parameters before any run starts.
    apply_sweep_param(&mut config.clone(), parameter, values.first().copied().unwrap_or(0.0))?;
    let sweep_dir = RunDir::create(Path::new(&config.run.out_dir), &format!("sweep-{parameter}"))?;

    let run_one = |value: f64| -> Result<SweepRow> {
        let mut cfg = config.clone();
        apply_sweep_param(&mut cfg, parameter, value)?;
        cfg.run.out_dir = sweep_dir.root.join(format!("value-{value}")).to_string_lossy().into_owned();
        cfg.run.write_caches = false;
        let artifacts = cmd_distill(&cfg)?;
        Ok(SweepRow {
            value,
            accuracy: artifacts
                .outcome
                .final_accuracy
                .ok_or_else(|| Error::invalid("sweep run produced no accuracy"))?,
            mean_similarity: mean_similarity_of(&artifacts.outcome),
            run_dir: artifacts.run_dir.to_string_lossy().into_owned(),
        })
    };

    let mut rows: Vec<SweepRow> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = values
                .iter()
                .map(|&v| scope.spawn(move || run_one(v)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| Error::invalid("sweep worker panicked"))?)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        values.iter().map(|&v| run_one(v)).collect::<Result<Vec<_>>>()?
    };
    rows.sort_by(|a, b| a.value.partial_cmp(&b.value).unwrap());

    std::fs::write(
        sweep_dir.root.join("sweep.json"),
        serde_json::to_vec_pretty(&rows).map_err(|e| Error::invalid(e.to_string()))?,
    )?;
    let mut table = format!("{parameter:>14}  accuracy  mean_similarity\n");
    for r in &rows {
        table.push_str(&format!(
            "{:>14.4}  {:>7.2}%  {:>15.4}\n",
            r.value,
            r.accuracy * 100.0,
            r.mean_similarity
        ));
    }
    std::fs::write(sweep_dir.root.join("sweep.txt"), &table)?;
    plot::emit_sweep_plots(&rows, parameter, &sweep_dir.plots()).ok();
    Ok(rows)
}

/// Images referenced by a cache manifest (augmented- or synthetic-cache
/// round directory).
pub fn manifest_images(round_dir: &Path) -> Result<ImageBatch> {
    let manifest_path = round_dir.join("manifest.json");
    let raw = std::fs::read(&manifest_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", manifest_path.display())))?;
    let value: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| Error::Config(format!("manifest: {e}")))?;

    let mut images = Vec::new();
    let mut labels = Vec::new();
    if let Some(entries) = value.as_array() {
        // Augmented-cache schema: [{file, label, ...}]
        for e in entries {
            let file = e["file"]
                .as_str()
                .ok_or_else(|| Error::Config("manifest entry without file".into()))?;
            let label = e["label"].as_u64().unwrap_or(0) as usize;
            images.push(dfkd_core::imgio::decode_png16(&std::fs::read(round_dir.join(file))?)?);
            labels.push(label);
        }
    } else {
        // Synthetic-cache schema: {files: [...], labels: [...]}
        let files = value["files"]
            .as_array()
            .ok_or_else(|| Error::Config("manifest has neither entries nor files".into()))?;
        let label_list: Vec<usize> = value["labels"]
            .as_array()
            .map(|a| a.iter().map(|v| v.as_u64().unwrap_or(0) as usize).collect())
            .unwrap_or_default();
        for (i, f) in files.iter().enumerate() {
            let file = f
                .as_str()
                .ok_or_else(|| Error::Config("manifest file entry is not a string".into()))?;
            images.push(dfkd_core::imgio::decode_png16(&std::fs::read(round_dir.join(file))?)?);
            labels.push(label_list.get(i).copied().unwrap_or(0));
        }
    }
    if images.is_empty() {
        return Err(Error::Config(format!(
            "manifest {} references no images",
            manifest_path.display()
        )));
    }
    ImageBatch::from_images(images, labels)
}

/// Outputs of `evaluate`.
#[derive(Debug, Serialize)]
pub struct EvaluateOutcome {
    pub accuracy: f64,
    /// (depth label, fid) at the three pooling depths.
    pub fid: Option<Vec<(String, f64)>>,
}

/// Accuracy of a checkpoint on the configured dataset's test split, plus an
/// optional three-depth Fréchet block between two image sets (`fid_of`,
/// defaulting to the test split, against `fid_against`).
pub fn cmd_evaluate(
    checkpoint: &Path,
    config: &RunConfig,
    fid_of: Option<&Path>,
    fid_against: Option<&Path>,
) -> Result<EvaluateOutcome> {
    let model = load_teacher(checkpoint)?;
    let dataset = config.load_dataset()?;
    let accuracy = dfkd_core::eval::accuracy(&model, &dataset.test)?;

    let fid_block = match fid_against {
        None => None,
        Some(against) => {
            let side_a = match fid_of {
                Some(p) => manifest_images(p)?,
                None => dataset.test.clone(),
            };
            let side_b = manifest_images(against)?;
            let mut block = Vec::new();
            for depth in FeatureDepth::ALL {
                let rows_a = feature_rows(&model, &side_a, depth)?;
                let rows_b = feature_rows(&model, &side_b, depth)?;
                let sa = summarize_features(depth, &rows_a)?;
                let sb = summarize_features(depth, &rows_b)?;
                block.push((depth.label().to_string(), fid(&sa, &sb)?));
            }
            Some(block)
        }
    };
    Ok(EvaluateOutcome {
        accuracy,
        fid: fid_block,
    })
}

/// Render charts from a metrics file and/or a sweep table into `out`.
pub fn cmd_plot(
    metrics: Option<&Path>,
    sweep: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if let Some(m) = metrics {
        written.extend(plot::emit_run_plots(m, out)?);
    }
    if let Some(s) = sweep {
        let rows: Vec<SweepRow> = serde_json::from_slice(
            &std::fs::read(s).map_err(|e| Error::Config(format!("cannot read {}: {e}", s.display())))?,
        )
        .map_err(|e| Error::Config(format!("sweep table: {e}")))?;
        written.extend(plot::emit_sweep_plots(&rows, "parameter", out)?);
    }
    if written.is_empty() {
        return Err(Error::Config(
            "plot: pass --metrics <metrics.records> and/or --sweep <sweep.json>".into(),
        ));
    }
    Ok(written)
}
