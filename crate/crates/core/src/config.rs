//! Declarative run configuration.
//!
//! A flat, typed TOML file with one section per concern. Unknown keys are
//! hard errors everywhere, so a typo can never silently fall back to a
//! default. CLI flags overlay the file; the effective config is echoed into
//! the run directory and re-executes to identical results under the
//! surrogate backend.

use crate::augment::{RetryPolicy, SurrogateConfig};
use crate::distill::{Ablation, Schedule};
use crate::error::{Error, Result};
use crate::synthesis::HyperParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable overriding `[dataset].root`.
pub const DATA_ROOT_ENV: &str = "DFKD_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// `digits` (procedural) or `cifar10` (binary layout under `root`).
    pub id: String,
    pub root: String,
    /// Split sizes for procedural datasets.
    pub train_size: usize,
    pub test_size: usize,
    /// Dataset seed; independent of the run seed so all runs share a split.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            id: "digits".into(),
            root: String::new(),
            train_size: 8000,
            test_size: 2000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub teacher_arch: String,
    pub student_arch: String,
    pub latent_dim: usize,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            teacher_arch: "cnn16".into(),
            student_arch: "cnn16-half".into(),
            latent_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Surrogate,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Remote endpoint, `http://host:port/path`.
    pub endpoint: String,
    pub retry: RetryPolicy,
    pub surrogate: SurrogateConfig,
    /// Autoencoder pretraining (runs during `train-teacher`).
    pub ae_epochs: usize,
    pub ae_batch: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Surrogate,
            endpoint: String::new(),
            retry: RetryPolicy::default(),
            surrogate: SurrogateConfig::default(),
            ae_epochs: 8,
            ae_batch: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            epochs: 6,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblateFlag {
    /// Full method.
    None,
    /// Skip the augmentation stage entirely (sources only).
    NoDiffusion,
    /// Keep augmentation, disable the similarity filter.
    NoFilter,
    /// Disable both.
    Both,
}

impl AblateFlag {
    pub fn to_ablation(self) -> Ablation {
        match self {
            AblateFlag::None => Ablation {
                diffusion: true,
                filter: true,
            },
            AblateFlag::NoDiffusion => Ablation {
                diffusion: false,
                filter: true,
            },
            AblateFlag::NoFilter => Ablation {
                diffusion: true,
                filter: false,
            },
            AblateFlag::Both => Ablation {
                diffusion: false,
                filter: false,
            },
        }
    }
}

impl std::str::FromStr for AblateFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AblateFlag::None),
            "no-diffusion" => Ok(AblateFlag::NoDiffusion),
            "no-filter" => Ok(AblateFlag::NoFilter),
            "both" => Ok(AblateFlag::Both),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected none, no-diffusion, no-filter, both)"
            ))),
        }
    }
}

/// Which embedding space the similarity filter uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterSpace {
    TeacherEmbedding,
    Discriminator,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
    pub ablate: AblateFlag,
    pub filter_space: FilterSpace,
    /// Teacher checkpoint directory (produced by `train-teacher`).
    pub teacher_dir: String,
    /// Surrogate-backend checkpoint directory; defaults to a `surrogate`
    /// sibling of `teacher_dir`.
    pub surrogate_dir: String,
    /// Write PNG caches of synthetic and augmented images.
    pub write_caches: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 17,
            out_dir: "runs".into(),
            ablate: AblateFlag::None,
            filter_space: FilterSpace::TeacherEmbedding,
            teacher_dir: String::new(),
            surrogate_dir: String::new(),
            write_caches: true,
        }
    }
}

/// The full declarative run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub models: ModelsConfig,
    pub hyperparams: HyperParams,
    pub schedule: Schedule,
    pub backend: BackendConfig,
    pub teacher: TeacherTrainConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        if self.schedule.distill_batch == 0 {
            return Err(Error::Config("schedule.distill_batch must be >= 1".into()));
        }
        if self.schedule.bank_capacity == 0 {
            return Err(Error::Config("schedule.bank_capacity must be >= 1".into()));
        }
        if self.backend.kind == BackendKind::Remote && self.backend.endpoint.is_empty() {
            return Err(Error::Config(
                "backend.kind = \"remote\" requires backend.endpoint".into(),
            ));
        }
        match self.dataset.id.as_str() {
            "digits" | "cifar10" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset id `{other}` (expected digits or cifar10)"
                )))
            }
        }
        Ok(())
    }

    /// Normalized echo of the effective config. Parsing the echo and echoing
    /// again is byte-identical.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// `[dataset].root` with the environment override applied.
    pub fn effective_dataset_root(&self) -> PathBuf {
        match std::env::var(DATA_ROOT_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(&self.dataset.root),
        }
    }

    /// Load the dataset this config names.
    pub fn load_dataset(&self) -> Result<crate::data::Dataset> {
        match self.dataset.id.as_str() {
            "digits" => Ok(crate::data::digits(
                self.dataset.train_size,
                self.dataset.test_size,
                self.dataset.seed,
            )),
            "cifar10" => crate::data::cifar10(&self.effective_dataset_root()),
            other => Err(Error::Config(format!("unknown dataset id `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_echo() {
        let cfg = RunConfig::default();
        let echo1 = cfg.echo();
        let parsed = RunConfig::parse(&echo1).unwrap();
        assert_eq!(cfg, parsed);
        let echo2 = parsed.echo();
        assert_eq!(echo1, echo2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = "[hyperparams]\nalpha = 1.0\nalphaa = 2.0\n";
        let err = RunConfig::parse(bad).unwrap_err();
        assert!(err.to_string().contains("alphaa"), "{err}");
        let bad_section = "[hyperparamz]\nalpha = 1.0\n";
        assert!(RunConfig::parse(bad_section).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::parse("[hyperparams]\nomega = 0.8\n").unwrap();
        assert_eq!(cfg.hyperparams.omega, 0.8);
        assert_eq!(cfg.hyperparams.alpha, 1.0);
        assert_eq!(cfg.schedule.rounds, 10);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[hyperparams]\nomega = 1.5\n").is_err());
        assert!(RunConfig::parse("[hyperparams]\ntau = 0.0\n").is_err());
        assert!(RunConfig::parse("[hyperparams]\nalpha = -0.1\n").is_err());
        assert!(RunConfig::parse("[dataset]\nid = \"imagenet\"\n").is_err());
        assert!(RunConfig::parse("[backend]\nkind = \"remote\"\n").is_err());
    }

    #[test]
    fn ablate_flags_map_to_switches() {
        let cases = [
            ("none", true, true),
            ("no-diffusion", false, true),
            ("no-filter", true, false),
            ("both", false, false),
        ];
        for (s, diffusion, filter) in cases {
            let flag: AblateFlag = s.parse().unwrap();
            let ab = flag.to_ablation();
            assert_eq!(ab.diffusion, diffusion);
            assert_eq!(ab.filter, filter);
        }
        assert!("garbage".parse::<AblateFlag>().is_err());
    }

    #[test]
    fn env_var_overrides_dataset_root() {
        let cfg = RunConfig::parse("[dataset]\nroot = \"from-file\"\n").unwrap();
        // Serialize env mutation: this test owns the variable name.
        std::env::set_var(DATA_ROOT_ENV, "/tmp/override");
        assert_eq!(cfg.effective_dataset_root(), PathBuf::from("/tmp/override"));
        std::env::remove_var(DATA_ROOT_ENV);
        assert_eq!(cfg.effective_dataset_root(), PathBuf::from("from-file"));
    }
}
