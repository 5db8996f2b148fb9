//! Experiment orchestration: TOML configs, the three-stage pipeline
//! (dense multilingual pretraining → mask finding → the configured
//! procedure), per-seed artifacts and reports.
//!
//! Layout of `output_dir`:
//!
//! ```text
//! config.toml            resolved config
//! report.csv             one row per (seed, language): final loss / error
//! report.txt             plain-text summary, embeds the code version
//! seed-<s>/
//!   pretrain/            stage (1): model.pmod, metrics.csv, stage.toml
//!   init/                stage (2): masks/ + manifest.toml, metrics.csv, stage.toml
//!   model.pmod           or model-lang-<z>.pmod for monolingual procedures
//!   masks/               BMSK1 masks + manifest.toml (sha256 per file)
//!   metrics.csv          every evaluation point
//!   events.csv           every mask event
//!   union_ratio.csv      pathway procedures only
//!   FAILED               present only if the seed failed; files are partial
//! ```
//!
//! Stages (1) and (2) carry a `stage.toml` with a fingerprint of their
//! inputs and the hashes of their outputs; a rerun reuses them when both
//! still match.

mod artifacts;
mod config;
mod report;
mod run;

pub use artifacts::{eval_set_hash, sha256_file, ManifestEntry, MaskManifest, StageFile, StageRecord};
pub use config::{ExperimentConfig, InitSection, ModelSection, PretrainSection, Procedure, ScheduleSection};
pub use report::{compare, Comparison, ComparisonEntry, ReportRow, RunReport, SeedDiagnostics, Stat, METRIC_LABEL};
pub use run::{run_experiment, schedule_events};
