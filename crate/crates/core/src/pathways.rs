//! Language-specific pathways inside one shared parameter store.
//!
//! Every language `z` owns a mask `m_z`. Its residual mask
//! `m_{z,r} = m_z ∪ ¬(∪_{l≠z} m_l)` adds every position no other language
//! claims. Fixed pathways train each monolingual batch through `m_z` only
//! and never change the masks. Dynamic pathways train through `m_{z,r}`,
//! re-select `m_z` inside `m_{z,r}` at adapt events (holding its sparsity),
//! and prune every language in turn at prune events.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{
    apply_hard, apply_soft, diagnostics, prune_to_sparsity, score_blocks, similarity,
    BlockMask, MaskDiagnostics,
};
use crate::net::{MaskPolicy, ModelState, OptimizerState, TrainConfig};
use crate::pruners::{
    check_run_inputs, eval_interval, EventKind, EventRecord, MaskEvent, MetricRow, ScoringScope,
};
use crate::schedule::SparsitySchedule;
use crate::taskgen::{next_batch, LanguageId, LanguageTask, SamplingScheme};
use crate::train::{evaluate, train_step};

/// Per-language masks and their residual masks, kept in sync.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwayRegistry {
    masks: BTreeMap<LanguageId, BlockMask>,
    residuals: BTreeMap<LanguageId, BlockMask>,
    mask_version: u64,
    residual_version: u64,
}

impl PathwayRegistry {
    pub fn new(masks: BTreeMap<LanguageId, BlockMask>) -> Result<Self> {
        let first = masks
            .values()
            .next()
            .ok_or_else(|| Error::InvalidArgument("a registry needs at least one language".into()))?;
        for m in masks.values() {
            first.check_compatible(m)?;
        }
        let mut reg = Self {
            masks,
            residuals: BTreeMap::new(),
            mask_version: 0,
            residual_version: 0,
        };
        reg.refresh();
        Ok(reg)
    }

    pub fn languages(&self) -> Vec<LanguageId> {
        self.masks.keys().copied().collect()
    }

    pub fn masks(&self) -> &BTreeMap<LanguageId, BlockMask> {
        &self.masks
    }

    pub fn mask(&self, z: LanguageId) -> Result<&BlockMask> {
        self.masks.get(&z).ok_or(Error::UnknownLanguage(z))
    }

    /// Cached residual mask of `z`.
    pub fn residual(&self, z: LanguageId) -> Result<&BlockMask> {
        debug_assert!(self.is_fresh());
        self.residuals.get(&z).ok_or(Error::UnknownLanguage(z))
    }

    /// Replaces `m_z` and recomputes every residual mask.
    pub fn set_mask(&mut self, z: LanguageId, mask: BlockMask) -> Result<()> {
        let slot = self.masks.get_mut(&z).ok_or(Error::UnknownLanguage(z))?;
        slot.check_compatible(&mask)?;
        *slot = mask;
        self.mask_version += 1;
        self.refresh();
        Ok(())
    }

    /// True when the residual masks reflect the current language masks.
    pub fn is_fresh(&self) -> bool {
        self.mask_version == self.residual_version
    }

    /// Union of every position claimed by a language other than `z`.
    pub fn claimed_by_others(&self, z: LanguageId) -> Result<BlockMask> {
        let own = self.mask(z)?;
        let mut out = BlockMask::zeros(own.shapes());
        for (l, m) in &self.masks {
            if *l != z {
                out = BlockMask::union(&[&out, m])?;
            }
        }
        Ok(out)
    }

    pub fn union(&self) -> BlockMask {
        let all: Vec<&BlockMask> = self.masks.values().collect();
        BlockMask::union(&all).expect("registry masks share shapes")
    }

    fn refresh(&mut self) {
        let residuals = self
            .masks
            .keys()
            .map(|&z| (z, residual_mask(self, z).expect("language is registered")))
            .collect();
        self.residuals = residuals;
        self.residual_version = self.mask_version;
    }
}

/// `m_z ∪ ¬(∪_{l≠z} m_l)`, computed from the current language masks.
pub fn residual_mask(registry: &PathwayRegistry, z: LanguageId) -> Result<BlockMask> {
    let own = registry.mask(z)?;
    let others = registry.claimed_by_others(z)?;
    BlockMask::union(&[own, &others.complement()])
}

/// Union ratio, pairwise similarity and per-language sparsity.
pub fn pathway_diagnostics(registry: &PathwayRegistry) -> Result<MaskDiagnostics> {
    let masks: Vec<&BlockMask> = registry.masks.values().collect();
    diagnostics(&masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    Lth,
    Imp,
    Lap,
}

/// Starting masks for a pathway run.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwayInit {
    pub source: InitSource,
    pub init_sparsity: f64,
    pub masks: BTreeMap<LanguageId, BlockMask>,
}

impl PathwayInit {
    pub fn new(
        source: InitSource,
        init_sparsity: f64,
        masks: BTreeMap<LanguageId, BlockMask>,
    ) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::InvalidArgument("no initial masks".into()));
        }
        for (z, m) in &masks {
            if !m.at_sparsity(init_sparsity) {
                return Err(Error::InvalidArgument(format!(
                    "mask of language {z} has sparsity {:.4}, expected {init_sparsity}",
                    m.sparsity()
                )));
            }
        }
        Ok(Self {
            source,
            init_sparsity,
            masks,
        })
    }

    /// Gives every language the same mask, as a language-agnostic
    /// initialisation does.
    pub fn replicated(
        source: InitSource,
        init_sparsity: f64,
        mask: &BlockMask,
        languages: impl IntoIterator<Item = LanguageId>,
    ) -> Result<Self> {
        Self::new(
            source,
            init_sparsity,
            languages.into_iter().map(|z| (z, mask.clone())).collect(),
        )
    }
}

/// How a joint prune event walks the languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JointPruneMode {
    /// Ascending language id, residuals refreshed after each language.
    #[default]
    Sequential,
    /// Every language scored against the residuals from before the event.
    Snapshot,
}

/// Which language an adapt event re-selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptTrigger {
    /// The language of the batch that was just trained.
    #[default]
    CurrentBatch,
    /// Languages in ascending order, one per adapt event.
    RoundRobin,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathwayOptions {
    pub joint_prune_mode: JointPruneMode,
    pub adapt_trigger: AdaptTrigger,
    /// Run each batch forward through its own pathway `m_z ⊙ θ` and pass
    /// the gradient straight through to the whole residual support,
    /// instead of running forward through `m_{z,r} ⊙ θ`.
    pub straight_through: bool,
}

#[derive(Clone, Debug)]
pub struct PathwayRunResult {
    /// The shared parameters; zero outside the union of all pathways.
    pub final_model: ModelState,
    pub registry: PathwayRegistry,
    pub initial_masks: BTreeMap<LanguageId, BlockMask>,
    pub mask_history: Vec<MaskEvent>,
    pub metrics: Vec<MetricRow>,
    pub events: Vec<EventRecord>,
    pub union_ratio_trajectory: Vec<(u64, f64)>,
    pub checkpoints: Vec<(u64, ModelState)>,
}

impl PathwayRunResult {
    pub fn final_metrics(&self) -> Vec<&MetricRow> {
        let last = self.metrics.last().map_or(0, |r| r.step);
        self.metrics.iter().filter(|r| r.step == last).collect()
    }

    pub fn final_union_ratio(&self) -> f64 {
        self.union_ratio_trajectory.last().map_or(1.0, |&(_, r)| r)
    }
}

fn check_languages(init: &PathwayInit, tasks: &[LanguageTask]) -> Result<()> {
    let ids: Vec<LanguageId> = tasks.iter().map(|t| t.id).collect();
    let mask_ids: Vec<LanguageId> = init.masks.keys().copied().collect();
    let mut sorted = ids.clone();
    sorted.sort();
    sorted.dedup();
    if sorted != mask_ids || sorted.len() != ids.len() {
        return Err(Error::InvalidArgument(format!(
            "initial masks cover languages {mask_ids:?} but tasks are {ids:?}"
        )));
    }
    Ok(())
}

struct Recorder<'a> {
    tasks: &'a [LanguageTask],
    last_eval: BTreeMap<LanguageId, BlockMask>,
    out: PathwayRunResult,
}

impl Recorder<'_> {
    fn eval(&mut self, step: u64, model: &ModelState, reg: &PathwayRegistry) -> Result<()> {
        let ratio = pathway_diagnostics(reg)?.union_ratio;
        for task in self.tasks {
            let m = reg.mask(task.id)?;
            let e = evaluate(model, task, Some(m))?;
            let sim = match self.last_eval.get(&task.id) {
                Some(prev) if step > 0 => Some(similarity(prev, m)?),
                _ => None,
            };
            self.out.metrics.push(MetricRow {
                step,
                language: task.id,
                loss: e.loss,
                accuracy: e.accuracy,
                sparsity: m.sparsity(),
                similarity_to_prev: sim,
                union_ratio: Some(ratio),
                residual_support: Some(reg.residual(task.id)?.kept_elements()),
            });
            self.last_eval.insert(task.id, m.clone());
        }
        self.out.checkpoints.push((step, model.clone()));
        self.track_union(step, reg)
    }

    fn track_union(&mut self, step: u64, reg: &PathwayRegistry) -> Result<()> {
        if self.out.union_ratio_trajectory.last().is_some_and(|&(s, _)| s == step) {
            self.out.union_ratio_trajectory.pop();
        }
        let ratio = pathway_diagnostics(reg)?.union_ratio;
        self.out.union_ratio_trajectory.push((step, ratio));
        Ok(())
    }
}

fn new_result<'a>(
    model: &ModelState,
    reg: &PathwayRegistry,
    tasks: &'a [LanguageTask],
) -> Recorder<'a> {
    Recorder {
        tasks,
        last_eval: BTreeMap::new(),
        out: PathwayRunResult {
            final_model: model.clone(),
            registry: reg.clone(),
            initial_masks: reg.masks.clone(),
            mask_history: Vec::new(),
            metrics: Vec::new(),
            events: Vec::new(),
            union_ratio_trajectory: Vec::new(),
            checkpoints: Vec::new(),
        },
    }
}

/// Fixed pathways: each monolingual batch trains only the weights under
/// its language's mask; masks never change. Weights outside every mask are
/// zeroed at the start and stay zero.
pub fn run_fixed_pathways(
    model0: &ModelState,
    init: &PathwayInit,
    tasks: &[LanguageTask],
    scheme: &SamplingScheme,
    cfg: &TrainConfig,
    target_sparsity: f64,
) -> Result<PathwayRunResult> {
    check_run_inputs(model0, tasks, None, cfg)?;
    check_languages(init, tasks)?;
    for (z, m) in &init.masks {
        m.check_model(model0)?;
        if !m.at_sparsity(target_sparsity) {
            return Err(Error::InvalidArgument(format!(
                "pathway {z} is at sparsity {:.4}, fixed pathways need the target {target_sparsity}",
                m.sparsity()
            )));
        }
    }
    let reg = PathwayRegistry::new(init.masks.clone())?;
    let mut model = model0.clone();
    model.set_step(0);
    apply_hard(&mut model, &reg.union())?;
    let eval_every = eval_interval(&SparsitySchedule::new(cfg.total_steps, target_sparsity));

    let mut rec = new_result(&model, &reg, tasks);
    rec.eval(0, &model, &reg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer);
    for step in 1..=cfg.total_steps {
        let batch = next_batch(tasks, scheme, cfg.batch_size, &mut rng)?;
        let m = reg.mask(batch.language)?;
        train_step(&mut model, &batch, cfg, &mut opt, step - 1, Some(m), false, MaskPolicy::Hard(m))?;
        if step % eval_every == 0 || step == cfg.total_steps {
            rec.eval(step, &model, &reg)?;
        }
    }
    let mut out = rec.out;
    out.final_model = model;
    out.registry = reg;
    Ok(out)
}

/// Dynamic pathways. See the module docs for the event semantics.
pub fn run_dynamic_pathways(
    model0: &ModelState,
    init: &PathwayInit,
    tasks: &[LanguageTask],
    scheme: &SamplingScheme,
    schedule: &SparsitySchedule,
    cfg: &TrainConfig,
    opts: &PathwayOptions,
) -> Result<PathwayRunResult> {
    check_run_inputs(model0, tasks, Some(schedule), cfg)?;
    check_languages(init, tasks)?;
    if init.init_sparsity > schedule.target_sparsity + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "initial sparsity {} is above the target {}",
            init.init_sparsity, schedule.target_sparsity
        )));
    }
    if (schedule.start_sparsity - init.init_sparsity).abs() > 1e-12 {
        return Err(Error::Schedule(format!(
            "schedule starts at {} but the masks are at {}",
            schedule.start_sparsity, init.init_sparsity
        )));
    }
    for m in init.masks.values() {
        m.check_model(model0)?;
    }
    let events = schedule.events()?;
    let eval_every = eval_interval(schedule);

    let mut reg = PathwayRegistry::new(init.masks.clone())?;
    let languages = reg.languages();
    let mut model = model0.clone();
    model.set_step(0);
    apply_soft(&mut model, &reg.union())?;

    let mut rec = new_result(&model, &reg, tasks);
    rec.eval(0, &model, &reg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut adapt_count = 0usize;
    let mut next_event = 0;
    for step in 1..=cfg.total_steps {
        let batch = next_batch(tasks, scheme, cfg.batch_size, &mut rng)?;
        {
            let residual = reg.residual(batch.language)?;
            let fwd = if opts.straight_through { reg.mask(batch.language)? } else { residual };
            train_step(
                &mut model,
                &batch,
                cfg,
                &mut opt,
                step - 1,
                Some(fwd),
                opts.straight_through,
                MaskPolicy::Hard(residual),
            )?;
        }
        let mut fired = false;
        while next_event < events.len() && events[next_event].step == step {
            let ev = events[next_event];
            next_event += 1;
            fired = true;
            let targets: Vec<LanguageId> = match ev.kind {
                EventKind::Adapt => {
                    let z = match opts.adapt_trigger {
                        AdaptTrigger::CurrentBatch => batch.language,
                        AdaptTrigger::RoundRobin => languages[adapt_count % languages.len()],
                    };
                    adapt_count += 1;
                    vec![z]
                }
                EventKind::Prune => languages.clone(),
            };
            let before = model.clone();
            let snapshot: BTreeMap<LanguageId, BlockMask> = match opts.joint_prune_mode {
                JointPruneMode::Snapshot => targets
                    .iter()
                    .map(|&z| Ok((z, reg.residual(z)?.clone())))
                    .collect::<Result<_>>()?,
                JointPruneMode::Sequential => BTreeMap::new(),
            };
            let mut decisions = Vec::with_capacity(targets.len());
            for &z in &targets {
                let scope = match snapshot.get(&z) {
                    Some(s) => s.clone(),
                    None => reg.residual(z)?.clone(),
                };
                let scores = score_blocks(&model, Some(&scope))?;
                let new_mask = prune_to_sparsity(&scores, ev.sparsity)?;
                let previous = reg.mask(z)?.clone();
                if opts.joint_prune_mode == JointPruneMode::Sequential {
                    reg.set_mask(z, new_mask.clone())?;
                }
                decisions.push((z, scope, previous, new_mask));
            }
            if opts.joint_prune_mode == JointPruneMode::Snapshot {
                for (z, _, _, m) in &decisions {
                    reg.set_mask(*z, m.clone())?;
                }
            }
            // Soft prune: every position no language claims is zeroed,
            // including residual weights regrown since the last event.
            apply_soft(&mut model, &reg.union())?;
            for (z, scope, previous, result) in decisions {
                let sim = similarity(&previous, &result)?;
                rec.out.mask_history.push(MaskEvent {
                    step,
                    kind: ev.kind,
                    language: Some(z),
                    mask: result.clone(),
                    similarity_to_prev: sim,
                });
                rec.out.events.push(EventRecord {
                    step,
                    kind: ev.kind,
                    language: Some(z),
                    weights_before: before.clone(),
                    weights_after: model.clone(),
                    scope: ScoringScope::Within(scope),
                    sparsity: ev.sparsity,
                    previous,
                    result,
                });
            }
        }
        if fired {
            rec.track_union(step, &reg)?;
        }
        if step % eval_every == 0 || step == cfg.total_steps {
            rec.eval(step, &model, &reg)?;
        }
    }
    apply_hard(&mut model, &reg.union())?;
    let mut out = rec.out;
    out.final_model = model;
    out.registry = reg;
    Ok(out)
}
