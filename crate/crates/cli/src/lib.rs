//! Command implementations behind the `dfkd` binary.
//!
//! Each command takes an effective [`RunConfig`] (file plus CLI overrides),
//! works inside a fresh timestamped run directory, and leaves behind the
//! config echo, metrics, report, and any checkpoints it produced.

pub mod commands;
pub mod plot;

pub use commands::{
    cmd_distill, cmd_evaluate, cmd_plot, cmd_sweep, cmd_train_teacher, load_surrogate,
    load_teacher, manifest_images, DistillArtifacts, EvaluateOutcome, SweepRow, TeacherArtifacts,
};
