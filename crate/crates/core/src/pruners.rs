//! Single-mask pruning procedures: IMP, LTH, LAP and adaptive monolingual
//! pruning, plus plain dense training.
//!
//! All four share one loop: train on monolingual batches, fire schedule
//! events after the step they are due on, evaluate every `T / 2` steps.
//! They differ in how the mask constrains training and how each event
//! re-derives the mask:
//!
//! | procedure | between events | prune event scores | after prune |
//! |-----------|----------------|--------------------|-------------|
//! | IMP / LAP | hard mask      | surviving blocks   | keep θ_T    |
//! | LTH       | hard mask      | surviving blocks   | rewind to θ_0 |
//! | adaptive  | soft (regrowth)| all blocks         | keep θ      |
//!
//! Adaptive runs also re-derive the mask at constant sparsity at every
//! adapt event.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_hard, apply_soft, prune_to_sparsity, score_blocks, similarity, BlockMask};
use crate::net::{MaskPolicy, ModelState, OptimizerState, TrainConfig};
pub use crate::schedule::EventKind;
use crate::schedule::{ScheduleEvent, SparsitySchedule};
use crate::taskgen::{next_batch, LanguageId, LanguageTask, SamplingScheme};
use crate::train::{evaluate, train_step};

/// One evaluation of one language.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub language: LanguageId,
    pub loss: f64,
    pub accuracy: f64,
    /// Sparsity of the mask the language was evaluated through.
    pub sparsity: f64,
    /// Jaccard similarity to the same language's mask at the previous
    /// evaluation point.
    pub similarity_to_prev: Option<f64>,
    pub union_ratio: Option<f64>,
    /// Kept elements of the language's residual mask (pathway runs only).
    pub residual_support: Option<usize>,
}

impl MetricRow {
    pub fn error(&self) -> f64 {
        1.0 - self.accuracy
    }
}

/// A mask change.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEvent {
    pub step: u64,
    pub kind: EventKind,
    pub language: Option<LanguageId>,
    pub mask: BlockMask,
    pub similarity_to_prev: f64,
}

/// Which blocks were eligible when a mask decision was made.
#[derive(Clone, Debug, PartialEq)]
pub enum ScoringScope {
    All,
    Within(BlockMask),
}

impl ScoringScope {
    pub fn support(&self) -> Option<&BlockMask> {
        match self {
            ScoringScope::All => None,
            ScoringScope::Within(m) => Some(m),
        }
    }
}

/// Full record of one mask decision, sufficient to recompute it.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub step: u64,
    pub kind: EventKind,
    pub language: Option<LanguageId>,
    /// Parameters the decision was scored on.
    pub weights_before: ModelState,
    /// Parameters once the event (zeroing, rewinding) has been applied.
    pub weights_after: ModelState,
    pub scope: ScoringScope,
    pub sparsity: f64,
    pub previous: BlockMask,
    pub result: BlockMask,
}

#[derive(Clone, Debug)]
pub struct PruneRunResult {
    pub final_model: ModelState,
    pub initial_mask: BlockMask,
    pub final_mask: BlockMask,
    pub mask_history: Vec<MaskEvent>,
    pub metrics: Vec<MetricRow>,
    pub events: Vec<EventRecord>,
    /// Parameters at every evaluation point.
    pub checkpoints: Vec<(u64, ModelState)>,
}

impl PruneRunResult {
    /// Mean mask similarity across adapt events (mask churn).
    pub fn mean_adapt_similarity(&self) -> Option<f64> {
        mean(
            self.mask_history
                .iter()
                .filter(|e| e.kind == EventKind::Adapt)
                .map(|e| e.similarity_to_prev),
        )
    }

    /// Rows of the last evaluation point.
    pub fn final_metrics(&self) -> Vec<&MetricRow> {
        let last = self.metrics.last().map_or(0, |r| r.step);
        self.metrics.iter().filter(|r| r.step == last).collect()
    }
}

pub(crate) fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Variations of adaptive monolingual pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveOptions {
    /// Train under the hard mask between events; regrowth only happens at
    /// event boundaries.
    pub freeze_between_adapts: bool,
    /// Prune events score every block rather than just the surviving ones.
    pub prune_from_all: bool,
    /// Rewind to θ_0 after each prune event (adaptive LTH).
    pub rewind: bool,
    /// Run the forward pass through `m ⊙ θ` and apply the resulting
    /// gradient to every weight, so masked-out weights regrow without
    /// taking part in the forward pass until an event selects them.
    pub straight_through: bool,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            freeze_between_adapts: false,
            prune_from_all: true,
            rewind: false,
            straight_through: false,
        }
    }
}

#[derive(Clone, Debug)]
enum Masking {
    Fixed { rewind: bool },
    Adaptive(AdaptiveOptions),
}

pub(crate) fn check_run_inputs(
    model0: &ModelState,
    tasks: &[LanguageTask],
    schedule: Option<&SparsitySchedule>,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    for t in tasks {
        if t.input_dim() != model0.input_dim() || t.num_classes != model0.output_dim() {
            return Err(Error::Shape(format!(
                "language {} has {} inputs / {} classes, model is {} -> {}",
                t.id,
                t.input_dim(),
                t.num_classes,
                model0.input_dim(),
                model0.output_dim()
            )));
        }
    }
    if model0.prunable_indices().is_empty() {
        return Err(Error::InvalidArgument("model has no prunable layers".into()));
    }
    if let Some(s) = schedule {
        if s.total_steps != cfg.total_steps {
            return Err(Error::Schedule(format!(
                "schedule covers {} steps but training runs {}",
                s.total_steps, cfg.total_steps
            )));
        }
    }
    Ok(())
}

pub(crate) fn eval_interval(schedule: &SparsitySchedule) -> u64 {
    (schedule.prune_interval / 2).max(1)
}

fn single_mask_run(
    model0: &ModelState,
    tasks: &[LanguageTask],
    scheme: &SamplingScheme,
    schedule: &SparsitySchedule,
    cfg: &TrainConfig,
    masking: Masking,
) -> Result<PruneRunResult> {
    check_run_inputs(model0, tasks, Some(schedule), cfg)?;
    if schedule.start_sparsity != 0.0 {
        return Err(Error::Schedule(
            "single-mask procedures start from a dense model (start sparsity 0)".into(),
        ));
    }
    let schedule = match masking {
        Masking::Fixed { .. } => SparsitySchedule {
            adaptive: false,
            ..schedule.clone()
        },
        Masking::Adaptive(_) => schedule.clone(),
    };
    let events = schedule.events()?;
    let eval_every = eval_interval(&schedule);

    let theta0 = model0.clone();
    let mut model = model0.clone();
    model.set_step(0);
    let initial_mask = BlockMask::dense_for(&model);
    let mut mask = initial_mask.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer);

    let mut out = PruneRunResult {
        final_model: model.clone(),
        initial_mask: initial_mask.clone(),
        final_mask: initial_mask,
        mask_history: Vec::new(),
        metrics: Vec::new(),
        events: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut last_eval_mask = mask.clone();
    let mut record_eval = |step: u64, model: &ModelState, mask: &BlockMask, out: &mut PruneRunResult| -> Result<()> {
        let sim = (step > 0).then(|| similarity(&last_eval_mask, mask)).transpose()?;
        for task in tasks {
            let e = evaluate(model, task, Some(mask))?;
            out.metrics.push(MetricRow {
                step,
                language: task.id,
                loss: e.loss,
                accuracy: e.accuracy,
                sparsity: mask.sparsity(),
                similarity_to_prev: sim,
                union_ratio: None,
                residual_support: None,
            });
        }
        out.checkpoints.push((step, model.clone()));
        last_eval_mask = mask.clone();
        Ok(())
    };
    record_eval(0, &model, &mask, &mut out)?;

    let mut next_event = 0;
    for step in 1..=cfg.total_steps {
        let batch = next_batch(tasks, scheme, cfg.batch_size, &mut rng)?;
        let (policy, fwd, st) = match &masking {
            Masking::Fixed { .. } => (MaskPolicy::Hard(&mask), None, false),
            Masking::Adaptive(o) if o.freeze_between_adapts => (MaskPolicy::Hard(&mask), None, false),
            Masking::Adaptive(o) if o.straight_through => (MaskPolicy::Soft, Some(&mask), true),
            Masking::Adaptive(_) => (MaskPolicy::Soft, None, false),
        };
        train_step(&mut model, &batch, cfg, &mut opt, step - 1, fwd, st, policy)?;

        while next_event < events.len() && events[next_event].step == step {
            let ev = events[next_event];
            next_event += 1;
            let new_mask = handle_event(&mut model, &theta0, &mask, &ev, &masking, &mut out)?;
            let rewound = match &masking {
                Masking::Fixed { rewind } => *rewind,
                Masking::Adaptive(o) => o.rewind,
            };
            if rewound && ev.kind == EventKind::Prune {
                // A rewind restarts training from θ_0, optimiser memory included.
                opt.reset();
            }
            mask = new_mask;
        }
        if step % eval_every == 0 || step == cfg.total_steps {
            record_eval(step, &model, &mask, &mut out)?;
        }
    }
    apply_hard(&mut model, &mask)?;
    out.final_model = model;
    out.final_mask = mask;
    Ok(out)
}

fn handle_event(
    model: &mut ModelState,
    theta0: &ModelState,
    mask: &BlockMask,
    ev: &ScheduleEvent,
    masking: &Masking,
    out: &mut PruneRunResult,
) -> Result<BlockMask> {
    let (scope, rewind, soft) = match (masking, ev.kind) {
        (Masking::Fixed { rewind }, EventKind::Prune) => {
            (ScoringScope::Within(mask.clone()), *rewind, false)
        }
        (Masking::Fixed { .. }, EventKind::Adapt) => return Ok(mask.clone()),
        (Masking::Adaptive(o), EventKind::Prune) => {
            let scope = if o.prune_from_all {
                ScoringScope::All
            } else {
                ScoringScope::Within(mask.clone())
            };
            (scope, o.rewind, true)
        }
        (Masking::Adaptive(_), EventKind::Adapt) => (ScoringScope::All, false, true),
    };
    let before = model.clone();
    let scores = score_blocks(model, scope.support())?;
    let new_mask = prune_to_sparsity(&scores, ev.sparsity)?;
    if rewind {
        model.copy_params_from(theta0)?;
    }
    if soft {
        apply_soft(model, &new_mask)?;
    } else {
        apply_hard(model, &new_mask)?;
    }
    let sim = similarity(mask, &new_mask)?;
    out.mask_history.push(MaskEvent {
        step: ev.step,
        kind: ev.kind,
        language: None,
        mask: new_mask.clone(),
        similarity_to_prev: sim,
    });
    out.events.push(EventRecord {
        step: ev.step,
        kind: ev.kind,
        language: None,
        weights_before: before,
        weights_after: model.clone(),
        scope,
        sparsity: ev.sparsity,
        previous: mask.clone(),
        result: new_mask.clone(),
    });
    Ok(new_mask)
}

/// Iterative magnitude pruning on one language: train under a fixed mask
/// for T steps, prune the weakest surviving blocks, carry the trained
/// weights forward.
pub fn run_imp(
    model0: &ModelState,
    task: &LanguageTask,
    schedule: &SparsitySchedule,
    cfg: &TrainConfig,
) -> Result<PruneRunResult> {
    single_mask_run(
        model0,
        std::slice::from_ref(task),
        &SamplingScheme::Uniform,
        schedule,
        cfg,
        Masking::Fixed { rewind: false },
    )
}

/// IMP with rewinding: after every prune event all parameters return to
/// `model0` (θ_0) before the new mask is applied.
pub fn run_lth(
    model0: &ModelState,
    task: &LanguageTask,
    schedule: &SparsitySchedule,
    cfg: &TrainConfig,
) -> Result<PruneRunResult> {
    single_mask_run(
        model0,
        std::slice::from_ref(task),
        &SamplingScheme::Uniform,
        schedule,
        cfg,
        Masking::Fixed { rewind: true },
    )
}

/// Language-agnostic pruning: IMP driven by monolingual batches drawn
/// across all languages, yielding one shared mask.
pub fn run_lap(
    model0: &ModelState,
    tasks: &[LanguageTask],
    scheme: &SamplingScheme,
    schedule: &SparsitySchedule,
    cfg: &TrainConfig,
) -> Result<PruneRunResult> {
    single_mask_run(model0, tasks, scheme, schedule, cfg, Masking::Fixed { rewind: false })
}

/// Adaptive monolingual pruning. Pruned weights are zeroed but stay
/// trainable; adapt events re-select the mask from all current weights at
/// the current sparsity, prune events raise the sparsity the same way.
pub fn run_adaptive_mono(
    model0: &ModelState,
    task: &LanguageTask,
    schedule: &SparsitySchedule,
    cfg: &TrainConfig,
    opts: &AdaptiveOptions,
) -> Result<PruneRunResult> {
    single_mask_run(
        model0,
        std::slice::from_ref(task),
        &SamplingScheme::Uniform,
        schedule,
        cfg,
        Masking::Adaptive(opts.clone()),
    )
}

/// Result of dense training.
#[derive(Clone, Debug)]
pub struct DenseRunResult {
    pub model: ModelState,
    pub metrics: Vec<MetricRow>,
}

/// Plain dense training on monolingual batches drawn under `scheme`.
/// Evaluates every `eval_every` steps and at the end.
pub fn train_dense(
    model0: &ModelState,
    tasks: &[LanguageTask],
    scheme: &SamplingScheme,
    cfg: &TrainConfig,
    eval_every: u64,
) -> Result<DenseRunResult> {
    check_run_inputs(model0, tasks, None, cfg)?;
    let mut model = model0.clone();
    model.set_step(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut metrics = Vec::new();
    let eval_every = eval_every.max(1);
    for step in 1..=cfg.total_steps {
        let batch = next_batch(tasks, scheme, cfg.batch_size, &mut rng)?;
        train_step(&mut model, &batch, cfg, &mut opt, step - 1, None, false, MaskPolicy::None)?;
        if step % eval_every == 0 || step == cfg.total_steps {
            for task in tasks {
                let e = evaluate(&model, task, None)?;
                metrics.push(MetricRow {
                    step,
                    language: task.id,
                    loss: e.loss,
                    accuracy: e.accuracy,
                    sparsity: 0.0,
                    similarity_to_prev: None,
                    union_ratio: None,
                    residual_support: None,
                });
            }
        }
    }
    Ok(DenseRunResult { model, metrics })
}
