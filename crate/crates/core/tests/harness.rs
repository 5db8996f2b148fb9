use std::fs;
use std::path::Path;

use pathprune::harness::{compare, run_experiment, ExperimentConfig, MaskManifest, Procedure, RunReport};
use pathprune::Error;

fn config(dir: &Path, name: &str, procedure: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
name = "{name}"
procedure = "{procedure}"
seeds = [3, 4]
output_dir = "{name}"

[tasks]
ratios = [1.0, 2.0]
base_size = 300
eval_size = 120
input_dim = 8
num_classes = 4

[model]
hidden = [16]

[train]
total_steps = 250
batch_size = 16

{extra}
"#
    );
    ExperimentConfig::from_toml_str(&text, Some(dir)).unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn dense_run_writes_one_model_and_no_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "dense", "dense", "");
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.seeds(), vec![3, 4]);
    assert_eq!(report.rows.len(), 4);
    let seed = cfg.seed_dir(3);
    assert!(seed.join("model.pmod").is_file());
    assert!(!seed.join("masks").exists());
    assert!(seed.join("metrics.csv").is_file());
    let text = fs::read_to_string(cfg.output_dir.join("report.txt")).unwrap();
    assert!(text.contains(pathprune::CODE_VERSION));
    assert!(text.contains("stand-in for WER"));
    let back = RunReport::read_csv(&cfg.output_dir.join("report.csv")).unwrap();
    assert_eq!(back.rows, report.rows);
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(dir.path(), "a", "adaptive_mono", "[schedule]\nadapt_interval = 10\n");
    let mut b = a.clone();
    b.output_dir = dir.path().join("b");
    run_experiment(&a).unwrap();
    run_experiment(&b).unwrap();
    for seed in [3, 4] {
        let (da, db) = (a.seed_dir(seed), b.seed_dir(seed));
        for f in ["metrics.csv", "events.csv", "model-lang-0.pmod", "masks/lang-1.bmsk", "masks/manifest.toml"] {
            assert_eq!(read(da.join(f)), read(db.join(f)), "{f} differs for seed {seed}");
        }
    }
    assert_eq!(read(a.output_dir.join("report.csv")), read(b.output_dir.join("report.csv")));
}

#[test]
fn three_stage_pipeline_consumes_the_emitted_masks_and_reuses_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "pipe",
        "dynamic_pathways",
        "[schedule]\nadapt_interval = 10\n\n[pretrain]\nsteps = 200\n\n[init]\nsource = \"lth\"\nsparsity = 0.5\n",
    );
    assert_eq!(cfg.procedure, Procedure::DynamicPathways);
    let first = run_experiment(&cfg).unwrap();
    for seed in [3, 4] {
        let init = cfg.seed_dir(seed).join("init").join("masks");
        let manifest = MaskManifest::load(&init).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        let emitted: Vec<(String, String)> = manifest
            .entries
            .iter()
            .map(|e| (init.join(&e.file).display().to_string(), e.sha256.clone()))
            .collect();
        assert_eq!(first.diagnostics[&seed].consumed_masks, emitted);
        assert!(first.diagnostics[&seed].final_union_ratio.is_some());
    }

    let stage = cfg.seed_dir(3).join("pretrain").join("stage.toml");
    let before = fs::metadata(&stage).unwrap().modified().unwrap();
    let init_mask = cfg.seed_dir(3).join("init").join("masks").join("lang-0.bmsk");
    let mask_before = fs::metadata(&init_mask).unwrap().modified().unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    let second = run_experiment(&cfg).unwrap();
    assert_eq!(fs::metadata(&stage).unwrap().modified().unwrap(), before);
    assert_eq!(fs::metadata(&init_mask).unwrap().modified().unwrap(), mask_before);
    assert_eq!(first.rows, second.rows);

    // Tampering with a stage output forces that stage to be recomputed.
    fs::write(cfg.seed_dir(3).join("pretrain").join("model.pmod"), b"junk").unwrap();
    let third = run_experiment(&cfg).unwrap();
    assert_ne!(fs::metadata(&stage).unwrap().modified().unwrap(), before);
    assert_eq!(first.rows, third.rows);
}

#[test]
fn pathway_run_can_start_from_another_runs_masks() {
    let dir = tempfile::tempdir().unwrap();
    let lap = config(dir.path(), "lap", "lap", "[schedule]\ntarget_sparsity = 0.5\n");
    run_experiment(&lap).unwrap();
    let fixed = config(
        dir.path(),
        "fixed",
        "fixed_pathways",
        "[init]\nsource = \"lap\"\nsparsity = 0.5\nmask_dir = \"lap/seed-{seed}/masks\"\n",
    );
    let report = run_experiment(&fixed).unwrap();
    for seed in [3, 4] {
        let masks = lap.seed_dir(seed).join("masks");
        let manifest = MaskManifest::load(&masks).unwrap();
        assert_eq!(manifest.entries.len(), 1);
        assert_eq!(report.diagnostics[&seed].consumed_masks[0].1, manifest.entries[0].sha256);
        // Fixed pathways keep the shared mask for every language.
        let out = MaskManifest::load(&fixed.seed_dir(seed).join("masks")).unwrap();
        let loaded = out.load_masks(&fixed.seed_dir(seed).join("masks")).unwrap();
        let shared = manifest.load_masks(&masks).unwrap();
        assert_eq!(loaded, shared);
    }
}

#[test]
fn missing_or_mismatched_masks_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let fixed = config(
        dir.path(),
        "fixed",
        "fixed_pathways",
        "[init]\nsource = \"lap\"\nmask_dir = \"nowhere/{seed}\"\n",
    );
    match run_experiment(&fixed) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "init.mask_dir"),
        other => panic!("expected config error, got {other:?}"),
    }
    let lap = config(dir.path(), "lap", "lap", "[schedule]\ntarget_sparsity = 0.5\n");
    run_experiment(&lap).unwrap();
    let wrong_sparsity = config(
        dir.path(),
        "fixed",
        "fixed_pathways",
        "[init]\nsource = \"lap\"\nsparsity = 0.7\nmask_dir = \"lap/seed-{seed}/masks\"\n",
    );
    assert!(matches!(run_experiment(&wrong_sparsity), Err(Error::Config { .. })));
}

#[test]
fn failed_seed_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "fail", "imp", "");
    fs::create_dir_all(cfg.seed_dir(4).join("metrics.csv")).unwrap();
    match run_experiment(&cfg) {
        Err(Error::Run { seed, .. }) => assert_eq!(seed, 4),
        other => panic!("expected a run failure, got {other:?}"),
    }
    assert!(cfg.seed_dir(4).join("FAILED").is_file());
    assert!(!cfg.seed_dir(3).join("FAILED").exists());
    assert!(!cfg.output_dir.join("report.csv").exists());
}

#[test]
fn comparison_of_runs_on_the_same_data() {
    let dir = tempfile::tempdir().unwrap();
    let imp = run_experiment(&config(dir.path(), "imp", "imp", "")).unwrap();
    let lth = run_experiment(&config(dir.path(), "lth", "lth", "")).unwrap();
    let table = compare(&[imp.clone(), lth.clone()], "imp").unwrap();
    assert_eq!(table.entries[0].average.mean, 0.0);
    let by_hand: f64 = [3u64, 4]
        .iter()
        .map(|&s| {
            let rel: Vec<f64> = (0..2)
                .map(|z| {
                    let pick = |r: &RunReport| {
                        r.rows.iter().find(|x| x.seed == s && x.language.0 == z).unwrap().error
                    };
                    (pick(&lth) - pick(&imp)) / pick(&imp)
                })
                .collect();
            (rel[0] + rel[1]) / 2.0
        })
        .sum::<f64>()
        / 2.0;
    assert!((table.entries[1].average.mean - by_hand).abs() < 1e-12);

    // Different task data makes the eval sets differ.
    let mut other = config(dir.path(), "other", "imp", "");
    other.tasks.seed = 99;
    let other = run_experiment(&other).unwrap();
    assert!(compare(&[imp, other], "imp").is_err());
}
