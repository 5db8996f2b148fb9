use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, ModelSpec, TrainConfig};
use crate::pathways::{InitSource, PathwayOptions};
use crate::pruners::AdaptiveOptions;
use crate::schedule::{PortionMode, SparsitySchedule};
use crate::taskgen::{SamplingScheme, TaskSuiteSpec};

/// The procedure a run executes after the optional pretraining stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Dense,
    Imp,
    Lth,
    Lap,
    AdaptiveMono,
    FixedPathways,
    DynamicPathways,
}

impl Procedure {
    pub fn name(self) -> &'static str {
        match self {
            Procedure::Dense => "dense",
            Procedure::Imp => "imp",
            Procedure::Lth => "lth",
            Procedure::Lap => "lap",
            Procedure::AdaptiveMono => "adaptive_mono",
            Procedure::FixedPathways => "fixed_pathways",
            Procedure::DynamicPathways => "dynamic_pathways",
        }
    }

    /// One mask and one model per language, each trained on its own data.
    pub fn is_monolingual(self) -> bool {
        matches!(self, Procedure::Imp | Procedure::Lth | Procedure::AdaptiveMono)
    }

    pub fn uses_pathways(self) -> bool {
        matches!(self, Procedure::FixedPathways | Procedure::DynamicPathways)
    }
}

/// Hidden layers of the network; input and output widths come from the
/// task suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub prune_output: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let spec = ModelSpec::default();
        Self {
            hidden: spec.hidden,
            activation: spec.activation,
            prune_output: spec.prune_output,
        }
    }
}

/// Sparsity schedule knobs. The prune interval defaults to a fraction of
/// the run length so the same section works for runs of any size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub target_sparsity: f64,
    /// Prune interval T as a fraction of total steps; ignored when
    /// `prune_interval` is given.
    pub prune_fraction: f64,
    pub prune_interval: Option<u64>,
    pub adapt_interval: u64,
    pub prune_portion: f64,
    pub portion_mode: PortionMode,
    pub adapt_after_target: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            target_sparsity: 0.7,
            prune_fraction: 0.08,
            prune_interval: None,
            adapt_interval: 100,
            prune_portion: 0.2,
            portion_mode: PortionMode::Remaining,
            adapt_after_target: true,
        }
    }
}

impl ScheduleSection {
    /// The schedule for a run of `total_steps` steps from `start` to
    /// `target` sparsity.
    pub fn build(&self, total_steps: u64, start: f64, target: f64, adaptive: bool) -> SparsitySchedule {
        let interval = self
            .prune_interval
            .unwrap_or_else(|| ((total_steps as f64 * self.prune_fraction).round() as u64).max(1));
        SparsitySchedule {
            target_sparsity: target,
            start_sparsity: start,
            prune_interval: interval,
            adapt_interval: self.adapt_interval,
            prune_portion: self.prune_portion,
            total_steps,
            portion_mode: self.portion_mode,
            adaptive,
            adapt_after_target: self.adapt_after_target,
        }
    }
}

/// Dense multilingual training that produces the starting weights of the
/// main procedure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: u64,
    pub peak_lr: Option<f64>,
    pub sampling: Option<SamplingScheme>,
}

/// Where a pathway run gets its starting masks: either computed by a
/// mask-finding stage inside this run, or loaded from a mask directory
/// written by an earlier run (`{seed}` in the path is replaced by the seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub source: InitSource,
    pub sparsity: Option<f64>,
    /// Training steps of the mask-finding stage; defaults to `train.total_steps`.
    pub steps: Option<u64>,
    pub mask_dir: Option<PathBuf>,
}

/// Declarative description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub procedure: Procedure,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub tasks: TaskSuiteSpec,
    #[serde(default)]
    pub model: ModelSection,
    /// `train.seed` is ignored: every run takes its seed from `seeds`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub sampling: SamplingScheme,
    pub pretrain: Option<PretrainSection>,
    pub init: Option<InitSection>,
    #[serde(default)]
    pub adaptive: AdaptiveOptions,
    #[serde(default)]
    pub pathways: PathwayOptions,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    /// Parses a TOML config. Relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<file>", e.to_string().trim()))?;
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path.is_empty() || path == "." { "<file>".to_string() } else { path };
            Error::config(field, e.into_inner().message().trim())
        })?;
        if let Some(base) = base {
            cfg.output_dir = base.join(&cfg.output_dir);
            if let Some(dir) = cfg.init.as_mut().and_then(|i| i.mask_dir.as_mut()) {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("cannot serialise config: {e}")))
    }

    /// Sparsity the pathway masks start from.
    pub fn init_sparsity(&self) -> f64 {
        self.init
            .as_ref()
            .and_then(|i| i.sparsity)
            .unwrap_or(self.schedule.target_sparsity)
    }

    /// Schedule of the main procedure.
    pub fn main_schedule(&self) -> SparsitySchedule {
        let total = self.train.total_steps;
        let target = self.schedule.target_sparsity;
        match self.procedure {
            Procedure::Dense => self.schedule.build(total, 0.0, 0.0, false),
            Procedure::AdaptiveMono => self.schedule.build(total, 0.0, target, true),
            Procedure::DynamicPathways => self.schedule.build(total, self.init_sparsity(), target, true),
            Procedure::FixedPathways => {
                let s = self.init_sparsity();
                self.schedule.build(total, s, s, false)
            }
            _ => self.schedule.build(total, 0.0, target, false),
        }
    }

    /// Schedule of the mask-finding stage of a pathway run.
    pub fn init_schedule(&self) -> Option<SparsitySchedule> {
        let init = self.init.as_ref()?;
        let steps = init.steps.unwrap_or(self.train.total_steps);
        Some(self.schedule.build(steps, 0.0, self.init_sparsity(), false))
    }

    /// Checks every cross-field constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() || self.name.contains(['/', '\\', ',', '\n']) {
            return Err(Error::config("name", "must be non-empty and free of path separators, commas and newlines"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        self.tasks.validate()?;
        self.sampling.validate(self.tasks.num_languages())?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "need at least one hidden layer, all widths positive"));
        }
        let t = &self.train;
        t.validate().map_err(|e| Error::config("train", e.to_string()))?;
        let s = &self.schedule;
        if !(s.target_sparsity.is_finite() && (0.0..1.0).contains(&s.target_sparsity)) {
            return Err(Error::config("schedule.target_sparsity", "must lie in [0, 1)"));
        }
        if !(s.prune_fraction.is_finite() && s.prune_fraction > 0.0 && s.prune_fraction <= 1.0) {
            return Err(Error::config("schedule.prune_fraction", "must lie in (0, 1]"));
        }
        if let Some(p) = &self.pretrain {
            if p.steps == 0 {
                return Err(Error::config("pretrain.steps", "must be positive"));
            }
            if let Some(lr) = p.peak_lr {
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::config("pretrain.peak_lr", "must be positive"));
                }
            }
            if let Some(sampling) = &p.sampling {
                sampling
                    .validate(self.tasks.num_languages())
                    .map_err(|e| Error::config("pretrain.sampling", e.to_string()))?;
            }
        }
        match (&self.init, self.procedure.uses_pathways()) {
            (None, true) => {
                return Err(Error::config("init", format!("{} needs initial masks", self.procedure.name())));
            }
            (Some(_), false) => {
                return Err(Error::config("init", format!("{} does not take initial masks", self.procedure.name())));
            }
            (Some(init), true) => {
                let sp = self.init_sparsity();
                if !(sp.is_finite() && (0.0..1.0).contains(&sp)) {
                    return Err(Error::config("init.sparsity", "must lie in [0, 1)"));
                }
                if self.procedure == Procedure::DynamicPathways && sp > s.target_sparsity {
                    return Err(Error::config(
                        "init.sparsity",
                        format!("{sp} exceeds schedule.target_sparsity {}", s.target_sparsity),
                    ));
                }
                if init.steps == Some(0) {
                    return Err(Error::config("init.steps", "must be positive"));
                }
                if init.mask_dir.is_some() && init.steps.is_some() {
                    return Err(Error::config("init.steps", "meaningless when masks are loaded from init.mask_dir"));
                }
                if init.mask_dir.is_none() {
                    if let Some(sched) = self.init_schedule() {
                        sched.validate().map_err(|e| Error::config("init", e.to_string()))?;
                    }
                }
            }
            (None, false) => {}
        }
        self.main_schedule()
            .validate()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        Ok(())
    }

    /// Task suite of one seed: the data seed is offset by the run seed so
    /// that seeds differ in data as well as in initialisation.
    pub fn tasks_for_seed(&self, seed: u64) -> TaskSuiteSpec {
        TaskSuiteSpec {
            seed: self.tasks.seed.wrapping_add(seed),
            ..self.tasks.clone()
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.tasks.input_dim,
            hidden: self.model.hidden.clone(),
            output_dim: self.tasks.num_classes,
            activation: self.model.activation,
            prune_output: self.model.prune_output,
        }
    }

    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Directory holding every artifact of one seed.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }
}
