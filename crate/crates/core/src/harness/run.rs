use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::artifacts::{
    eval_set_hash, fingerprint, flag_failure, write_mask_events_csv, write_masks, write_metrics_csv,
    write_union_ratio_csv, MaskManifest, StageRecord, MANIFEST_FILE,
};
use super::config::{ExperimentConfig, InitSection, PretrainSection, Procedure};
use super::report::{ReportRow, RunReport, SeedDiagnostics};
use crate::checkpoint::{load_model, save_model};
use crate::error::{Error, Result};
use crate::masking::BlockMask;
use crate::net::{ModelSpec, ModelState, TrainConfig};
use crate::pathways::{run_dynamic_pathways, run_fixed_pathways, InitSource, PathwayInit};
use crate::pruners::{
    eval_interval, run_adaptive_mono, run_imp, run_lap, run_lth, train_dense, EventKind, MaskEvent, MetricRow,
    PruneRunResult,
};
use crate::schedule::SparsitySchedule;
use crate::taskgen::{make_tasks, LanguageId, LanguageTask, SamplingScheme, TaskSuiteSpec};
use crate::CODE_VERSION;

/// Mask directory of one seed, with `{seed}` substituted.
fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    PathBuf::from(path.to_string_lossy().replace("{seed}", &seed.to_string()))
}

/// Checks that externally supplied masks exist, are intact and fit the
/// model, before any training starts.
fn preflight(cfg: &ExperimentConfig) -> Result<()> {
    let Some(dir) = cfg.init.as_ref().and_then(|i| i.mask_dir.as_ref()) else {
        return Ok(());
    };
    let shapes = ModelState::init(&cfg.model_spec(), &mut ChaCha8Rng::seed_from_u64(0))?;
    for &seed in &cfg.seeds {
        let dir = seeded_path(dir, seed);
        let bad = |m: String| Error::config("init.mask_dir", format!("{}: {m}", dir.display()));
        let manifest = MaskManifest::load(&dir).map_err(|e| bad(e.to_string()))?;
        let masks = manifest.load_masks(&dir).map_err(|e| bad(e.to_string()))?;
        let want: Vec<LanguageId> = (0..cfg.tasks.num_languages() as u32).map(LanguageId).collect();
        if masks.keys().copied().collect::<Vec<_>>() != want {
            return Err(bad(format!("masks cover languages {:?}, tasks define {want:?}", manifest.languages)));
        }
        for m in masks.values() {
            m.check_model(&shapes).map_err(|e| bad(e.to_string()))?;
            if !m.at_sparsity(cfg.init_sparsity()) {
                return Err(bad(format!(
                    "mask sparsity {:.4} does not match init sparsity {}",
                    m.sparsity(),
                    cfg.init_sparsity()
                )));
            }
        }
    }
    Ok(())
}

/// Runs every seed of `cfg`, writes all artifacts and the report, and
/// returns the report. Seeds run in parallel; each is deterministic.
///
/// A seed that fails leaves a `FAILED` marker in its directory and the
/// whole call returns [`Error::Run`] without writing a report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    preflight(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml_string()?)?;

    let n = cfg.seeds.len();
    let results: Mutex<Vec<Option<Result<SeedOutcome>>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = run_seed(cfg, cfg.seeds[i]);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });

    let mut rows = Vec::new();
    let mut diagnostics = BTreeMap::new();
    let mut failure = None;
    for (i, res) in results.into_inner().unwrap().into_iter().enumerate() {
        let seed = cfg.seeds[i];
        match res.expect("every seed is visited") {
            Ok(out) => {
                rows.extend(out.rows);
                diagnostics.insert(seed, out.diagnostics);
            }
            Err(e) => {
                let message = e.to_string();
                flag_failure(&cfg.seed_dir(seed), &message)?;
                failure.get_or_insert(Error::Run { seed, message });
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let report = RunReport {
        name: cfg.name.clone(),
        procedure: cfg.procedure.name().to_string(),
        code_version: CODE_VERSION.to_string(),
        rows,
        diagnostics,
    };
    report.write_csv(&cfg.output_dir.join("report.csv"))?;
    fs::write(cfg.output_dir.join("report.txt"), report.render())?;
    Ok(report)
}

struct SeedOutcome {
    rows: Vec<ReportRow>,
    diagnostics: SeedDiagnostics,
}

/// Everything the main procedure produced that gets persisted.
struct Produced {
    models: Vec<(Option<LanguageId>, ModelState)>,
    masks: Vec<(Option<LanguageId>, BlockMask)>,
    sparsity: f64,
    metrics: Vec<MetricRow>,
    mask_events: Vec<MaskEvent>,
    union_ratio: Option<Vec<(u64, f64)>>,
}

fn mean_adapt_similarity(events: &[MaskEvent]) -> Option<f64> {
    let sims: Vec<f64> = events
        .iter()
        .filter(|e| e.kind == EventKind::Adapt)
        .map(|e| e.similarity_to_prev)
        .collect();
    (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let dir = cfg.seed_dir(seed);
    fs::create_dir_all(&dir)?;
    let _ = fs::remove_file(dir.join("FAILED"));
    let suite = cfg.tasks_for_seed(seed);
    let tasks = make_tasks(&suite)?;
    let spec = cfg.model_spec();
    let model0 = ModelState::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let train = cfg.train_for_seed(seed);

    let (start, upstream) = match &cfg.pretrain {
        Some(p) => pretrain_stage(cfg, p, seed, &suite, &spec, &tasks, &model0, &dir.join("pretrain"))?,
        None => (model0, String::new()),
    };

    let mut diagnostics = SeedDiagnostics::default();
    let init = match &cfg.init {
        Some(section) => {
            let (init, consumed) = init_stage(cfg, section, seed, &suite, &upstream, &tasks, &start, &dir)?;
            diagnostics.consumed_masks = consumed;
            Some(init)
        }
        None => None,
    };

    let schedule = cfg.main_schedule();
    let produced = run_main(cfg, &start, &tasks, &train, &schedule, init.as_ref())?;

    for (z, model) in &produced.models {
        let file = match z {
            Some(z) => format!("model-lang-{z}.pmod"),
            None => "model.pmod".to_string(),
        };
        save_model(model, dir.join(file))?;
    }
    if !produced.masks.is_empty() {
        let langs: Vec<LanguageId> = tasks.iter().map(|t| t.id).collect();
        let masks: Vec<(Option<LanguageId>, &BlockMask)> = produced.masks.iter().map(|(z, m)| (*z, m)).collect();
        write_masks(&dir.join("masks"), cfg.procedure.name(), produced.sparsity, &langs, &masks)?;
    }
    write_metrics_csv(&dir.join("metrics.csv"), &produced.metrics)?;
    write_mask_events_csv(&dir.join("events.csv"), &produced.mask_events)?;
    if let Some(traj) = &produced.union_ratio {
        write_union_ratio_csv(&dir.join("union_ratio.csv"), traj)?;
        diagnostics.final_union_ratio = traj.last().map(|&(_, u)| u);
    }
    diagnostics.mean_adapt_similarity = mean_adapt_similarity(&produced.mask_events);

    let rows = tasks
        .iter()
        .map(|t| {
            let last = produced
                .metrics
                .iter()
                .filter(|r| r.language == t.id)
                .max_by_key(|r| r.step)
                .ok_or_else(|| Error::InvalidArgument(format!("no evaluation recorded for language {}", t.id)))?;
            Ok(ReportRow {
                run: cfg.name.clone(),
                procedure: cfg.procedure.name().to_string(),
                seed,
                language: t.id,
                loss: last.loss,
                error: last.error(),
                sparsity: last.sparsity,
                eval_sha256: eval_set_hash(t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedOutcome { rows, diagnostics })
}

#[derive(Serialize)]
struct PretrainInputs<'a> {
    seed: u64,
    tasks: &'a TaskSuiteSpec,
    model: &'a ModelSpec,
    train: &'a TrainConfig,
    sampling: &'a SamplingScheme,
}

/// Stage (1): dense multilingual training. Reused when an intact stage
/// with the same inputs already exists.
#[allow(clippy::too_many_arguments)]
fn pretrain_stage(
    cfg: &ExperimentConfig,
    p: &PretrainSection,
    seed: u64,
    suite: &TaskSuiteSpec,
    spec: &ModelSpec,
    tasks: &[LanguageTask],
    model0: &ModelState,
    dir: &Path,
) -> Result<(ModelState, String)> {
    let train = TrainConfig {
        total_steps: p.steps,
        peak_lr: p.peak_lr.unwrap_or(cfg.train.peak_lr),
        seed,
        ..cfg.train.clone()
    };
    let sampling = p.sampling.as_ref().unwrap_or(&cfg.sampling);
    let fp = fingerprint(
        "pretrain",
        &PretrainInputs {
            seed,
            tasks: suite,
            model: spec,
            train: &train,
            sampling,
        },
    )?;
    if StageRecord::reusable(dir, &fp).is_some() {
        return Ok((load_model(dir.join("model.pmod"))?, fp));
    }
    fs::create_dir_all(dir)?;
    let _ = fs::remove_file(dir.join(super::artifacts::STAGE_FILE));
    let eval_every = (p.steps / 10).max(1);
    let dense = train_dense(model0, tasks, sampling, &train, eval_every)?;
    save_model(&dense.model, dir.join("model.pmod"))?;
    write_metrics_csv(&dir.join("metrics.csv"), &dense.metrics)?;
    StageRecord::seal(dir, &fp, &["model.pmod", "metrics.csv"])?;
    Ok((dense.model, fp))
}

#[derive(Serialize)]
struct InitInputs<'a> {
    seed: u64,
    upstream: &'a str,
    tasks: &'a TaskSuiteSpec,
    source: InitSource,
    schedule: &'a SparsitySchedule,
    train: &'a TrainConfig,
    sampling: &'a SamplingScheme,
}

/// Stage (2): the masks a pathway run starts from, either loaded from an
/// earlier run's mask directory or computed here (and cached). Masks are
/// always read back through the manifest, so the run consumes exactly the
/// files on disk. Returns the init plus the consumed (file, sha256) list.
#[allow(clippy::too_many_arguments)]
fn init_stage(
    cfg: &ExperimentConfig,
    section: &InitSection,
    seed: u64,
    suite: &TaskSuiteSpec,
    upstream: &str,
    tasks: &[LanguageTask],
    start: &ModelState,
    seed_dir: &Path,
) -> Result<(PathwayInit, Vec<(String, String)>)> {
    let sparsity = cfg.init_sparsity();
    let mask_dir = match &section.mask_dir {
        Some(d) => seeded_path(d, seed),
        None => {
            let dir = seed_dir.join("init");
            let schedule = cfg.init_schedule().expect("init section present");
            let train = TrainConfig {
                total_steps: schedule.total_steps,
                ..cfg.train_for_seed(seed)
            };
            let fp = fingerprint(
                "init",
                &InitInputs {
                    seed,
                    upstream,
                    tasks: suite,
                    source: section.source,
                    schedule: &schedule,
                    train: &train,
                    sampling: &cfg.sampling,
                },
            )?;
            if StageRecord::reusable(&dir, &fp).is_none() {
                compute_init_masks(section.source, start, tasks, &cfg.sampling, &schedule, &train, &dir, &fp)?;
            }
            dir.join("masks")
        }
    };
    let manifest = MaskManifest::load(&mask_dir)?;
    let masks = manifest.load_masks(&mask_dir)?;
    let consumed = manifest
        .entries
        .iter()
        .map(|e| (mask_dir.join(&e.file).display().to_string(), e.sha256.clone()))
        .collect();
    Ok((PathwayInit::new(section.source, sparsity, masks)?, consumed))
}

#[allow(clippy::too_many_arguments)]
fn compute_init_masks(
    source: InitSource,
    start: &ModelState,
    tasks: &[LanguageTask],
    sampling: &SamplingScheme,
    schedule: &SparsitySchedule,
    train: &TrainConfig,
    dir: &Path,
    fp: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let _ = fs::remove_file(dir.join(super::artifacts::STAGE_FILE));
    let langs: Vec<LanguageId> = tasks.iter().map(|t| t.id).collect();
    let (masks, metrics): (Vec<(Option<LanguageId>, BlockMask)>, Vec<MetricRow>) = match source {
        InitSource::Lap => {
            let r = run_lap(start, tasks, sampling, schedule, train)?;
            (vec![(None, r.final_mask)], r.metrics)
        }
        InitSource::Imp | InitSource::Lth => {
            let mut masks = Vec::new();
            let mut metrics = Vec::new();
            for t in tasks {
                let r = if source == InitSource::Imp {
                    run_imp(start, t, schedule, train)?
                } else {
                    run_lth(start, t, schedule, train)?
                };
                masks.push((Some(t.id), r.final_mask));
                metrics.extend(r.metrics);
            }
            (masks, metrics)
        }
    };
    let name = match source {
        InitSource::Lap => "lap",
        InitSource::Imp => "imp",
        InitSource::Lth => "lth",
    };
    let refs: Vec<(Option<LanguageId>, &BlockMask)> = masks.iter().map(|(z, m)| (*z, m)).collect();
    let manifest = write_masks(&dir.join("masks"), name, schedule.target_sparsity, &langs, &refs)?;
    write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    let mut files: Vec<String> = manifest.entries.iter().map(|e| format!("masks/{}", e.file)).collect();
    files.push(format!("masks/{MANIFEST_FILE}"));
    files.push("metrics.csv".into());
    let files: Vec<&str> = files.iter().map(String::as_str).collect();
    StageRecord::seal(dir, fp, &files)?;
    Ok(())
}

fn from_prune_runs(runs: Vec<(Option<LanguageId>, PruneRunResult)>, sparsity: f64) -> Produced {
    let mut p = Produced {
        models: Vec::new(),
        masks: Vec::new(),
        sparsity,
        metrics: Vec::new(),
        mask_events: Vec::new(),
        union_ratio: None,
    };
    for (z, r) in runs {
        p.models.push((z, r.final_model));
        p.masks.push((z, r.final_mask));
        p.metrics.extend(r.metrics);
        p.mask_events.extend(r.mask_history);
    }
    p
}

/// Stage (3): the configured procedure.
fn run_main(
    cfg: &ExperimentConfig,
    start: &ModelState,
    tasks: &[LanguageTask],
    train: &TrainConfig,
    schedule: &SparsitySchedule,
    init: Option<&PathwayInit>,
) -> Result<Produced> {
    let target = schedule.target_sparsity;
    let per_language = |f: &dyn Fn(&LanguageTask) -> Result<PruneRunResult>| -> Result<Produced> {
        let runs = tasks
            .iter()
            .map(|t| Ok((Some(t.id), f(t)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(from_prune_runs(runs, target))
    };
    let need_init = || init.ok_or_else(|| Error::config("init", "pathway procedures need initial masks"));
    match cfg.procedure {
        Procedure::Dense => {
            let r = train_dense(start, tasks, &cfg.sampling, train, eval_interval(schedule))?;
            Ok(Produced {
                models: vec![(None, r.model)],
                masks: Vec::new(),
                sparsity: 0.0,
                metrics: r.metrics,
                mask_events: Vec::new(),
                union_ratio: None,
            })
        }
        Procedure::Imp => per_language(&|t| run_imp(start, t, schedule, train)),
        Procedure::Lth => per_language(&|t| run_lth(start, t, schedule, train)),
        Procedure::AdaptiveMono => per_language(&|t| run_adaptive_mono(start, t, schedule, train, &cfg.adaptive)),
        Procedure::Lap => {
            let r = run_lap(start, tasks, &cfg.sampling, schedule, train)?;
            Ok(from_prune_runs(vec![(None, r)], target))
        }
        Procedure::FixedPathways | Procedure::DynamicPathways => {
            let init = need_init()?;
            let r = if cfg.procedure == Procedure::FixedPathways {
                run_fixed_pathways(start, init, tasks, &cfg.sampling, train, init.init_sparsity)?
            } else {
                run_dynamic_pathways(start, init, tasks, &cfg.sampling, schedule, train, &cfg.pathways)?
            };
            let sparsity = r
                .registry
                .masks()
                .values()
                .next()
                .map_or(target, |m| m.sparsity());
            Ok(Produced {
                models: vec![(None, r.final_model)],
                masks: r.registry.masks().iter().map(|(z, m)| (Some(*z), m.clone())).collect(),
                sparsity,
                metrics: r.metrics,
                mask_events: r.mask_history,
                union_ratio: Some(r.union_ratio_trajectory),
            })
        }
    }
}

/// The schedule calendar of the main procedure of `cfg`.
pub fn schedule_events(cfg: &ExperimentConfig) -> Result<Vec<crate::schedule::ScheduleEvent>> {
    cfg.main_schedule().events()
}
