//! Run directories end to end: artifacts, analysis tables and their
//! consistency checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use metareason_core::analysis::{analyze, AnalysisOptions, ANALYSIS_DIR};
use metareason_core::config::TrainConfig;
use metareason_core::policy::read_checkpoint;
use metareason_core::run::{self, train_run, RunStatus};
use metareason_core::Error;

fn small(extra: &str) -> TrainConfig {
    let base = "feature_dim = 512\ngroup_size = 4\nquestions_per_step = 3\nsteps = 6\n\
                warmstart_episodes = 100\nwarmstart_epochs = 2\neval_every = 3\n\
                eval_tasks = 4\neval_rollouts = 2\npass_k_tasks = 10\n";
    TrainConfig::from_text(&format!("{base}{extra}")).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn run_writes_every_artifact_and_analysis_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = small("checkpoint_every = 2\n");
    let summary = train_run(&config, dir, |_| {}).unwrap();

    let manifest = run::read_manifest(dir).unwrap();
    assert_eq!(manifest.status, RunStatus::Completed);
    assert_eq!(manifest.config_hash, config.hash());
    assert_eq!(manifest.seeds, vec![config.seed]);
    assert!(manifest.finished_at.is_some());
    assert_eq!(fs::read_to_string(dir.join(run::CONFIG)).unwrap(), config.to_text());

    assert_eq!(summary.metrics.len(), 6);
    assert_eq!(summary.evaluations.iter().map(|e| e.step).collect::<Vec<_>>(), vec![0, 3, 6]);
    for step in [0, 3, 6] {
        assert!(run::influence_path(dir, step).exists());
    }
    for step in [0, 2, 4, 6] {
        assert!(run::checkpoint_path(dir, step).exists());
    }
    let last = fs::read(run::checkpoint_path(dir, 6)).unwrap();
    let fin = fs::read(dir.join(run::CHECKPOINT_DIR).join(run::FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last, fin);
    assert_eq!(read_checkpoint(fin.as_slice()).unwrap().policy, summary.policy);

    let a = analyze(dir, AnalysisOptions::default()).unwrap();
    assert_eq!(a.metrics, summary.metrics);
    assert!(a.max_reward_gap <= 1e-12);
    for (r, m) in a.recomputed_reward.iter().zip(&a.metrics) {
        assert!((r - m.mean_reward).abs() <= 1e-12);
    }
    assert_eq!(a.pass_at_k, summary.pass_at_k);
    let whole = a.turn_blocks.last().unwrap();
    assert_eq!(whole.stats.lazy_count + whole.stats.non_lazy_count, 6 * 3 * 4);

    // Every emitted CSV carries the hash column with the manifest's hash.
    let out = dir.join(ANALYSIS_DIR);
    for (name, bytes) in files(&out) {
        let text = String::from_utf8(bytes).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().ends_with(",config_hash"), "{name}");
        assert!(lines.all(|l| l.ends_with(&manifest.config_hash)), "{name}");
    }

    // Rerunning the analysis reproduces the tables byte for byte.
    let first = files(&out);
    analyze(dir, AnalysisOptions::default()).unwrap();
    assert_eq!(files(&out), first);
}

#[test]
fn zero_steps_gives_manifest_and_empty_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = train_run(&small("steps = 0\n"), tmp.path(), |_| {}).unwrap();
    assert!(summary.metrics.is_empty());
    let metrics = fs::read_to_string(tmp.path().join(run::METRICS)).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert_eq!(run::read_manifest(tmp.path()).unwrap().status, RunStatus::Completed);
    let a = analyze(tmp.path(), AnalysisOptions::default()).unwrap();
    assert_eq!(a.turn_blocks.len(), 1);
    assert!(a.first_block().is_none());
}

#[test]
fn run_without_restarts_analyzes_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small("restart_enabled = false\nteacher_restart_rate = 0\n");
    train_run(&config, tmp.path(), |_| {}).unwrap();
    let a = analyze(tmp.path(), AnalysisOptions::default()).unwrap();
    assert!(a.metrics.iter().all(|m| m.restart_rate == 0.0 && m.restart_reward_mean == 0.0));
}

#[test]
fn analysis_names_missing_inputs_and_catches_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    train_run(&small("steps = 2\n"), dir, |_| {}).unwrap();

    let metrics = dir.join(run::METRICS);
    let original = fs::read_to_string(&metrics).unwrap();
    let mut lines: Vec<String> = original.lines().map(str::to_string).collect();
    let mut fields: Vec<String> = lines[1].split(',').map(str::to_string).collect();
    let reward: f64 = fields[1].parse().unwrap();
    fields[1] = (reward + 1e-9).to_string();
    lines[1] = fields.join(",");
    fs::write(&metrics, lines.join("\n") + "\n").unwrap();
    assert!(matches!(analyze(dir, AnalysisOptions::default()), Err(Error::Verification(_))));
    fs::write(&metrics, original).unwrap();

    fs::remove_file(dir.join(run::PASS_AT_K)).unwrap();
    match analyze(dir, AnalysisOptions::default()) {
        Err(e @ Error::MissingInput(_)) => assert!(e.to_string().contains(run::PASS_AT_K)),
        other => panic!("expected a missing-input error, got {other:?}"),
    }
}

#[test]
fn trajectories_disabled_means_analysis_reports_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    train_run(&small("steps = 1\nlog_trajectories = false\n"), tmp.path(), |_| {}).unwrap();
    let err = analyze(tmp.path(), AnalysisOptions::default()).unwrap_err();
    assert!(err.to_string().contains(run::TRAJECTORIES));
}
