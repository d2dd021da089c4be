//! `dfkd` — data-free knowledge distillation harness.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 pipeline fault.

use clap::{Args, Parser, Subcommand};
use dfkd_cli::commands;
use dfkd_core::config::RunConfig;
use dfkd_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dfkd", version, about = "Data-free knowledge distillation: synthesize, augment, filter, distill")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads a config.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Cosine-filter threshold override.
    #[arg(long)]
    omega: Option<f64>,
    /// Ablation: none, no-diffusion, no-filter, both.
    #[arg(long)]
    ablate: Option<String>,
    /// Diffusion backend: surrogate or remote.
    #[arg(long)]
    backend: Option<String>,
    /// Remote backend endpoint (http://host:port/path).
    #[arg(long)]
    endpoint: Option<String>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

impl ConfigArgs {
    fn effective(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(omega) = self.omega {
            cfg.hyperparams.omega = omega;
        }
        if let Some(ablate) = &self.ablate {
            cfg.run.ablate = ablate.parse()?;
        }
        if let Some(backend) = &self.backend {
            cfg.backend.kind = match backend.as_str() {
                "surrogate" => dfkd_core::config::BackendKind::Surrogate,
                "remote" => dfkd_core::config::BackendKind::Remote,
                other => {
                    return Err(Error::Config(format!(
                        "unknown backend `{other}` (expected surrogate or remote)"
                    )))
                }
            };
        }
        if let Some(endpoint) = &self.endpoint {
            cfg.backend.endpoint = endpoint.clone();
        }
        if let Some(out) = &self.out {
            cfg.run.out_dir = out.to_string_lossy().into_owned();
        }
        if let Some(teacher) = &self.teacher {
            cfg.run.teacher_dir = teacher.to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher (and the surrogate backend's autoencoder).
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the full distillation pipeline against a trained teacher.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// One full run per value of a config scalar, shared seed.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Config scalar to sweep (e.g. omega, eta_self, augment_factor).
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Run sweep points in parallel threads.
        #[arg(long, default_value_t = false)]
        parallel: bool,
    },
    /// Accuracy of a checkpoint; optional three-depth Fréchet block.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cache round directory (with manifest.json) to compare against.
        #[arg(long)]
        fid_against: Option<PathBuf>,
        /// Left side of the comparison; defaults to the dataset test split.
        #[arg(long)]
        fid_of: Option<PathBuf>,
    },
    /// Render charts from run metrics and sweep tables.
    Plot {
        /// metrics.records file of a run.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// sweep.json of a sweep.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Output directory for SVGs.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainTeacher { cfg } => {
            let config = cfg.effective()?;
            let artifacts = commands::cmd_train_teacher(&config)?;
            println!(
                "teacher accuracy {:.2}%  checkpoint {}",
                artifacts.accuracy * 100.0,
                artifacts.teacher_dir.display()
            );
            println!("surrogate autoencoder {}", artifacts.surrogate_dir.display());
            Ok(())
        }
        Command::Distill { cfg } => {
            let config = cfg.effective()?;
            let artifacts = commands::cmd_distill(&config)?;
            let acc = artifacts
                .outcome
                .final_accuracy
                .map(|a| format!("{:.2}%", a * 100.0))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "student accuracy {acc}  run {}",
                artifacts.run_dir.display()
            );
            Ok(())
        }
        Command::Sweep {
            cfg,
            param,
            values,
            parallel,
        } => {
            let config = cfg.effective()?;
            let rows = commands::cmd_sweep(&config, &param, &values, parallel)?;
            println!("{param:>14}  accuracy  mean_similarity");
            for r in &rows {
                println!(
                    "{:>14.4}  {:>7.2}%  {:>15.4}",
                    r.value,
                    r.accuracy * 100.0,
                    r.mean_similarity
                );
            }
            Ok(())
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            fid_against,
            fid_of,
        } => {
            let config = cfg.effective()?;
            let outcome = commands::cmd_evaluate(
                &checkpoint,
                &config,
                fid_of.as_deref(),
                fid_against.as_deref(),
            )?;
            println!("accuracy {:.4}", outcome.accuracy);
            if let Some(block) = &outcome.fid {
                let header: Vec<String> = block.iter().map(|(d, _)| d.clone()).collect();
                let values: Vec<String> = block.iter().map(|(_, v)| format!("{v:.4}")).collect();
                println!("feature position  {}", header.join("  "));
                println!("fid               {}", values.join("  "));
            }
            Ok(())
        }
        Command::Plot { metrics, sweep, out } => {
            let written = commands::cmd_plot(metrics.as_deref(), sweep.as_deref(), &out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_pipeline_fault() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
