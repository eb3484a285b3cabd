//! Training runs on disk.
//!
//! A run directory holds:
//!
//! | file | content |
//! |---|---|
//! | `manifest.json` | [`RunManifest`], written before the warm start and updated at the end |
//! | `config.txt` | canonical resolved configuration (its SHA-256 is the config hash) |
//! | `metrics.csv` | one [`MetricsRow`] per training step |
//! | `eval.csv` | one [`Evaluation`] summary per evaluation |
//! | `influence/step_NNNNNN.csv` | per-step influence records of each evaluation |
//! | `trajectories.jsonl` | every training rollout (see [`crate::trajlog`]) |
//! | `checkpoints/step_NNNNNN.ckpt`, `checkpoints/final.ckpt` | policy checkpoints |
//! | `pass_at_k.csv` | pass@K of the final policy |
//!
//! Every CSV ends with a `config_hash` column. Nothing in the run outputs
//! except the manifest timestamps depends on wall-clock time or thread count.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::env::{generate_corpus, TaskInstance};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::policy::{write_checkpoint, Checkpoint, FeaturizedPolicy};
use crate::trainer::{evaluate, pass_at_k, rollout_seed, EvalRecord, Evaluation, MetricsRow, PassAtK, PolicySolver, Trainer};
use crate::trajlog::{self, LogHeader, TrajectoryRecord};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.txt";
pub const METRICS: &str = "metrics.csv";
pub const EVAL: &str = "eval.csv";
pub const INFLUENCE_DIR: &str = "influence";
pub const TRAJECTORIES: &str = "trajectories.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const PASS_AT_K: &str = "pass_at_k.csv";
pub const HASH_COLUMN: &str = "config_hash";

const MANIFEST_FORMAT: &str = "metareason-run";
const PASS_TASK_STREAM: u64 = 0x706b_7473;
const PASS_SEED_STREAM: u64 = 0x706b_7364;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub run_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Artifact name to path relative to the run directory.
    pub paths: BTreeMap<String, String>,
    /// Package version and on-disk format versions.
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &TrainConfig) -> RunManifest {
        let paths = [
            ("config", CONFIG.to_string()),
            ("metrics", METRICS.to_string()),
            ("eval", EVAL.to_string()),
            ("influence", INFLUENCE_DIR.to_string()),
            ("trajectories", TRAJECTORIES.to_string()),
            ("checkpoints", CHECKPOINT_DIR.to_string()),
            ("final_checkpoint", format!("{CHECKPOINT_DIR}/{FINAL_CHECKPOINT}")),
            ("pass_at_k", PASS_AT_K.to_string()),
        ];
        let versions = [
            ("package", env!("CARGO_PKG_VERSION").to_string()),
            ("manifest", "1".to_string()),
            ("trajectory_log", trajlog::VERSION.to_string()),
            ("checkpoint", "1".to_string()),
            ("metrics_columns", MetricsRow::HEADER.len().to_string()),
        ];
        RunManifest {
            format: MANIFEST_FORMAT.into(),
            run_id: run_id(config),
            config_hash: config.hash(),
            seeds: vec![config.seed],
            status: RunStatus::Running,
            error: None,
            started_at: now(),
            finished_at: None,
            paths: paths.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            versions: versions.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Deterministic run name: variant, seed and a config-hash prefix.
pub fn run_id(config: &TrainConfig) -> String {
    format!("{}-s{}-{}", config.objective.variant, config.seed, &config.hash()[..12])
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

/// Opens `dir/name`, reporting a missing file by path.
pub fn open_input(dir: &Path, name: &str) -> Result<File> {
    let path = dir.join(name);
    File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path),
        _ => Error::Io(e),
    })
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let m: RunManifest = serde_json::from_reader(std::io::BufReader::new(open_input(dir, MANIFEST)?))?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("{} is not a run manifest", dir.join(MANIFEST).display())));
    }
    Ok(m)
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"))
}

pub fn influence_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(INFLUENCE_DIR).join(format!("step_{step:06}.csv"))
}

fn save_checkpoint(path: &Path, policy: &FeaturizedPolicy, seed: u64, step: usize) -> Result<()> {
    let ckpt = Checkpoint {
        policy: policy.clone(),
        seed,
        step,
    };
    write_checkpoint(File::create(path)?, &ckpt)
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header.iter().copied().chain([HASH_COLUMN]))?;
    Ok(w)
}

fn with_hash(mut fields: Vec<String>, hash: &str) -> Vec<String> {
    fields.push(hash.to_string());
    fields
}

pub const INFLUENCE_HEADER: [&str; 10] = [
    "task",
    "trajectory",
    "flat_index",
    "role",
    "delta_ell",
    "group_size",
    "ci",
    "ci_undefined",
    "kl_influence",
    "injected",
];

/// Per-step influence report of one evaluation.
pub fn write_influence_report(path: &Path, records: &[EvalRecord], hash: &str) -> Result<()> {
    let mut w = csv_writer(path, &INFLUENCE_HEADER)?;
    for r in records {
        let s = &r.record;
        w.write_record(with_hash(
            vec![
                r.task.to_string(),
                s.trajectory.to_string(),
                s.flat_index.to_string(),
                s.role.to_string(),
                s.delta_ell.map_or_else(String::new, |d| d.to_string()),
                s.group_size.to_string(),
                s.ci.to_string(),
                s.ci_undefined.to_string(),
                s.kl_influence.to_string(),
                s.injected.to_string(),
            ],
            hash,
        ))?;
    }
    w.flush()?;
    Ok(())
}

pub const PASS_AT_K_HEADER: [&str; 4] = ["k", "solved", "tasks", "rate"];

pub fn write_pass_at_k<W: Write>(out: W, rows: &[PassAtK], hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PASS_AT_K_HEADER.iter().copied().chain([HASH_COLUMN]))?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.solved.to_string(),
            r.tasks.to_string(),
            r.rate.to_string(),
            hash.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed pass@K task set of a configuration and the seed of its attempts.
pub fn pass_at_k_setup(config: &TrainConfig) -> Result<(Vec<TaskInstance>, u64)> {
    let tasks = generate_corpus(
        derive_seed(config.seed, &[PASS_TASK_STREAM]),
        config.difficulty,
        config.modulus,
        config.pass_k_tasks,
    )?;
    Ok((tasks, derive_seed(config.seed, &[PASS_SEED_STREAM])))
}

/// Progress notifications from [`train_run`].
#[derive(Debug)]
pub enum RunEvent<'a> {
    WarmStarted,
    Step(&'a MetricsRow),
    Evaluated(&'a Evaluation),
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: Vec<MetricsRow>,
    /// Evaluation summaries; per-step records live in the influence reports.
    pub evaluations: Vec<Evaluation>,
    pub pass_at_k: Vec<PassAtK>,
    pub policy: FeaturizedPolicy,
}

/// Trains `config` and writes every artifact into `dir` (created if needed,
/// existing files overwritten).
pub fn train_run(config: &TrainConfig, dir: &Path, mut progress: impl FnMut(RunEvent<'_>)) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(dir.join(INFLUENCE_DIR))?;
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    let mut manifest = RunManifest::new(config);
    fs::write(dir.join(CONFIG), config.to_text())?;
    write_manifest(dir, &manifest)?;

    let result = execute(config, dir, &manifest, &mut progress);
    manifest.finished_at = Some(now());
    match result {
        Ok((metrics, evaluations, pass, policy)) => {
            manifest.status = RunStatus::Completed;
            write_manifest(dir, &manifest)?;
            Ok(RunSummary {
                dir: dir.to_path_buf(),
                manifest,
                metrics,
                evaluations,
                pass_at_k: pass,
                policy,
            })
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            write_manifest(dir, &manifest)?;
            Err(e)
        }
    }
}

/// Evaluates, writes the influence report and the `eval.csv` row, and
/// returns the summary without per-step records.
fn evaluate_and_report<W: Write>(
    policy: &FeaturizedPolicy,
    config: &TrainConfig,
    step: usize,
    dir: &Path,
    hash: &str,
    eval_out: &mut csv::Writer<W>,
) -> Result<Evaluation> {
    let mut ev = evaluate(policy, config, step)?;
    write_influence_report(&influence_path(dir, step), &ev.records, hash)?;
    eval_out.write_record(with_hash(ev.record(), hash))?;
    eval_out.flush()?;
    ev.records = Vec::new();
    Ok(ev)
}

type Executed = (Vec<MetricsRow>, Vec<Evaluation>, Vec<PassAtK>, FeaturizedPolicy);

fn execute(
    config: &TrainConfig,
    dir: &Path,
    manifest: &RunManifest,
    progress: &mut impl FnMut(RunEvent<'_>),
) -> Result<Executed> {
    let hash = manifest.config_hash.as_str();
    let mut metrics_out = csv_writer(&dir.join(METRICS), &MetricsRow::HEADER)?;
    metrics_out.flush()?;
    let mut eval_out = csv_writer(&dir.join(EVAL), &Evaluation::HEADER)?;
    let mut traj_out = if config.log_trajectories {
        let mut w = BufWriter::new(File::create(dir.join(TRAJECTORIES))?);
        trajlog::write_header(&mut w, &LogHeader::new(hash))?;
        Some(w)
    } else {
        None
    };

    let mut trainer = Trainer::new(config.clone())?;
    progress(RunEvent::WarmStarted);

    let mut evaluations = Vec::new();
    let checkpoint_due = |step: usize| config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every);

    let ev = evaluate_and_report(trainer.policy(), config, 0, dir, hash, &mut eval_out)?;
    progress(RunEvent::Evaluated(&ev));
    evaluations.push(ev);
    if checkpoint_due(0) {
        save_checkpoint(&checkpoint_path(dir, 0), trainer.policy(), config.seed, 0)?;
    }

    let mut rows = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let outcome = trainer.train_step()?;
        let step = outcome.metrics.step;
        metrics_out.write_record(with_hash(outcome.metrics.record(), hash))?;
        metrics_out.flush()?;
        if let Some(w) = traj_out.as_mut() {
            for (q, group) in outcome.groups.iter().enumerate() {
                for (g, t) in group.trajectories.iter().enumerate() {
                    let rec = TrajectoryRecord::new(&manifest.run_id, step, q, g, rollout_seed(config.seed, step, q, g), t);
                    trajlog::write_record(w, &rec)?;
                }
            }
        }
        progress(RunEvent::Step(&outcome.metrics));
        rows.push(outcome.metrics);

        let done = trainer.step();
        if (config.eval_every > 0 && done % config.eval_every == 0) || done == config.steps {
            let ev = evaluate_and_report(trainer.policy(), config, done, dir, hash, &mut eval_out)?;
            progress(RunEvent::Evaluated(&ev));
            evaluations.push(ev);
        }
        if checkpoint_due(done) {
            save_checkpoint(&checkpoint_path(dir, done), trainer.policy(), config.seed, done)?;
        }
    }
    if let Some(mut w) = traj_out {
        w.flush()?;
    }
    save_checkpoint(
        &dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT),
        trainer.policy(),
        config.seed,
        trainer.step(),
    )?;

    let pass = if config.pass_k_tasks > 0 {
        let (tasks, seed) = pass_at_k_setup(config)?;
        let solver = PolicySolver {
            policy: trainer.policy(),
            episode: config.episode,
        };
        pass_at_k(&solver, &tasks, &config.pass_k, seed)?
    } else {
        Vec::new()
    };
    write_pass_at_k(BufWriter::new(File::create(dir.join(PASS_AT_K))?), &pass, hash)?;
    Ok((rows, evaluations, pass, trainer.policy().clone()))
}
