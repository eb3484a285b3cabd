//! Summary tables computed from a finished run directory.
//!
//! [`analyze`] reads `manifest.json`, `metrics.csv`, `eval.csv`,
//! `trajectories.jsonl` and `pass_at_k.csv` and writes into `analysis/`:
//!
//! - `turn_counts.csv`: lazy vs non-lazy mean turn counts per block of
//!   training steps and over the whole run, recomputed from the raw rollouts;
//! - `influence_curves.csv`: per-role CI and KL influence of every training
//!   step, raw and smoothed by a trailing moving average;
//! - `eval_curves.csv`: reward, laziness and per-role influence on the fixed
//!   evaluation set;
//! - `reward_curve.csv`: logged and recomputed mean training reward, smoothed
//!   reward, and restart statistics;
//! - `pass_at_k.csv`: pass@K of the final policy.
//!
//! Outputs are a pure function of the inputs, so rerunning is byte-identical.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::env::{turn_count_stats, TurnCountStats};
use crate::episode::Trajectory;
use crate::error::{Error, Result};
use crate::run::{self, HASH_COLUMN};
use crate::trainer::{moving_average, Evaluation, MetricsRow, PassAtK};
use crate::trajlog::read_log;

pub const ANALYSIS_DIR: &str = "analysis";
pub const TURN_COUNTS: &str = "turn_counts.csv";
pub const INFLUENCE_CURVES: &str = "influence_curves.csv";
pub const EVAL_CURVES: &str = "eval_curves.csv";
pub const REWARD_CURVE: &str = "reward_curve.csv";

/// Largest tolerated gap between logged and recomputed mean rewards.
pub const REWARD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    /// Moving-average window for the smoothed curves.
    pub window: usize,
    /// Training steps per row of the turn-count table.
    pub block: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { window: 10, block: 20 }
    }
}

/// Lazy/non-lazy turn statistics over training steps `from..to`.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnBlock {
    pub from_step: usize,
    pub to_step: usize,
    pub stats: TurnCountStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub dir: PathBuf,
    pub config_hash: String,
    pub metrics: Vec<MetricsRow>,
    pub evaluations: Vec<Evaluation>,
    /// Mean reward per training step recomputed from the trajectory log.
    pub recomputed_reward: Vec<f64>,
    pub max_reward_gap: f64,
    /// Consecutive blocks, followed by one block spanning the whole run.
    pub turn_blocks: Vec<TurnBlock>,
    pub pass_at_k: Vec<PassAtK>,
}

impl Analysis {
    /// Turn statistics of the first block (the earliest training steps).
    pub fn first_block(&self) -> Option<&TurnBlock> {
        (self.turn_blocks.len() > 1).then(|| &self.turn_blocks[0])
    }
}

fn reader(dir: &Path, name: &str) -> Result<csv::Reader<BufReader<File>>> {
    Ok(csv::Reader::from_reader(BufReader::new(run::open_input(dir, name)?)))
}

/// Reads a CSV whose last column is the config hash, checking header and hash.
fn read_rows(dir: &Path, name: &str, header: &[&str], hash: &str) -> Result<Vec<Vec<String>>> {
    let mut r = reader(dir, name)?;
    let expected: Vec<&str> = header.iter().copied().chain([HASH_COLUMN]).collect();
    if r.headers()?.iter().ne(expected.iter().copied()) {
        return Err(Error::Format(format!("{name}: unexpected header")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if &rec[header.len()] != hash {
            return Err(Error::Verification(format!(
                "{name}: row tagged with config hash {} but the manifest has {hash}",
                &rec[header.len()]
            )));
        }
        rows.push(rec.iter().take(header.len()).map(str::to_string).collect());
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(name: &str, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("{name}: bad value `{field}`")))
}

fn parse_opt(name: &str, field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse(name, field).map(Some)
    }
}

pub fn read_metrics(dir: &Path, hash: &str) -> Result<Vec<MetricsRow>> {
    read_rows(dir, run::METRICS, &MetricsRow::HEADER, hash)?
        .iter()
        .map(|r| MetricsRow::from_record(&r.iter().map(String::as_str).collect::<Vec<_>>()))
        .collect()
}

/// Reads `eval.csv`; per-step records are not part of it and stay empty.
pub fn read_evaluations(dir: &Path, hash: &str) -> Result<Vec<Evaluation>> {
    let n = run::EVAL;
    read_rows(dir, n, &Evaluation::HEADER, hash)?
        .iter()
        .map(|r| {
            Ok(Evaluation {
                step: parse(n, &r[0])?,
                mean_reward: parse(n, &r[1])?,
                mean_turns: parse(n, &r[2])?,
                lazy_fraction: parse(n, &r[3])?,
                lazy_mean_turns: parse_opt(n, &r[4])?,
                non_lazy_mean_turns: parse_opt(n, &r[5])?,
                ci_meta: parse(n, &r[6])?,
                ci_reasoning: parse(n, &r[7])?,
                kl_meta: parse(n, &r[8])?,
                kl_reasoning: parse(n, &r[9])?,
                records: Vec::new(),
            })
        })
        .collect()
}

pub fn read_pass_at_k(dir: &Path, hash: &str) -> Result<Vec<PassAtK>> {
    let n = run::PASS_AT_K;
    read_rows(dir, n, &run::PASS_AT_K_HEADER, hash)?
        .iter()
        .map(|r| {
            Ok(PassAtK {
                k: parse(n, &r[0])?,
                solved: parse(n, &r[1])?,
                tasks: parse(n, &r[2])?,
                rate: parse(n, &r[3])?,
            })
        })
        .collect()
}

/// Training rollouts grouped by training step, in logged order.
pub fn read_trajectories(dir: &Path, hash: &str) -> Result<BTreeMap<usize, Vec<Trajectory>>> {
    let (header, records) = read_log(BufReader::new(run::open_input(dir, run::TRAJECTORIES)?))?;
    if header.config_hash != hash {
        return Err(Error::Verification(format!(
            "{}: written for config hash {}, manifest has {hash}",
            run::TRAJECTORIES,
            header.config_hash
        )));
    }
    let mut by_step: BTreeMap<usize, Vec<Trajectory>> = BTreeMap::new();
    for r in &records {
        by_step.entry(r.train_step).or_default().push(r.to_trajectory()?);
    }
    Ok(by_step)
}

fn stats_of<'a>(trajs: impl Iterator<Item = &'a Trajectory>) -> Result<TurnCountStats> {
    let trajs: Vec<&Trajectory> = trajs.collect();
    if trajs.is_empty() {
        return Ok(TurnCountStats {
            lazy_mean: None,
            non_lazy_mean: None,
            lazy_count: 0,
            non_lazy_count: 0,
        });
    }
    turn_count_stats(trajs)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>, hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header.iter().copied().chain([HASH_COLUMN]))?;
    for mut row in rows {
        row.push(hash.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a run directory, verifies it, and writes the summary tables.
pub fn analyze(dir: &Path, options: AnalysisOptions) -> Result<Analysis> {
    if options.window == 0 || options.block == 0 {
        return Err(Error::Config("analysis window and block must be at least 1".into()));
    }
    let manifest = run::read_manifest(dir)?;
    let hash = manifest.config_hash.clone();
    let metrics = read_metrics(dir, &hash)?;
    let evaluations = read_evaluations(dir, &hash)?;
    let pass = read_pass_at_k(dir, &hash)?;
    let trajectories = read_trajectories(dir, &hash)?;

    // Logged means against a recomputation from the raw rollouts, summed in
    // the logged order.
    let mut recomputed = Vec::with_capacity(metrics.len());
    let mut max_gap = 0.0f64;
    for row in &metrics {
        let trajs = trajectories
            .get(&row.step)
            .ok_or_else(|| Error::Verification(format!("no logged rollouts for training step {}", row.step)))?;
        let mean = trajs.iter().map(|t| t.outcome_reward).sum::<f64>() / trajs.len() as f64;
        max_gap = max_gap.max((mean - row.mean_reward).abs());
        recomputed.push(mean);
    }
    if trajectories.len() != metrics.len() {
        return Err(Error::Verification(format!(
            "{} training steps have logged rollouts but metrics.csv has {} rows",
            trajectories.len(),
            metrics.len()
        )));
    }
    if max_gap > REWARD_TOLERANCE {
        return Err(Error::Verification(format!(
            "mean reward recomputed from rollouts differs from metrics.csv by {max_gap:e}"
        )));
    }
    if pass.iter().any(|a| pass.iter().any(|b| a.k < b.k && a.rate > b.rate)) {
        return Err(Error::Verification("pass@K decreases with K".into()));
    }

    let n = metrics.len();
    let mut blocks = Vec::new();
    let in_range = |from: usize, to: usize| trajectories.range(from..to).flat_map(|(_, v)| v.iter());
    for from in (0..n).step_by(options.block) {
        let to = (from + options.block).min(n);
        blocks.push(TurnBlock {
            from_step: from,
            to_step: to,
            stats: stats_of(in_range(from, to))?,
        });
    }
    blocks.push(TurnBlock {
        from_step: 0,
        to_step: n,
        stats: stats_of(in_range(0, n))?,
    });

    let out = dir.join(ANALYSIS_DIR);
    fs::create_dir_all(&out)?;
    write_csv(
        &out.join(TURN_COUNTS),
        &["from_step", "to_step", "lazy_count", "lazy_mean_turns", "non_lazy_count", "non_lazy_mean_turns"],
        blocks.iter().map(|b| {
            vec![
                b.from_step.to_string(),
                b.to_step.to_string(),
                b.stats.lazy_count.to_string(),
                opt(b.stats.lazy_mean),
                b.stats.non_lazy_count.to_string(),
                opt(b.stats.non_lazy_mean),
            ]
        }),
        &hash,
    )?;

    let series = |f: fn(&MetricsRow) -> f64| moving_average(&metrics.iter().map(f).collect::<Vec<_>>(), options.window);
    let smooth = [
        series(|r| r.ci_meta)?,
        series(|r| r.ci_reasoning)?,
        series(|r| r.kl_meta)?,
        series(|r| r.kl_reasoning)?,
        series(|r| r.mean_reward)?,
    ];
    write_csv(
        &out.join(INFLUENCE_CURVES),
        &[
            "step",
            "ci_meta",
            "ci_reasoning",
            "kl_meta",
            "kl_reasoning",
            "ci_meta_smoothed",
            "ci_reasoning_smoothed",
            "kl_meta_smoothed",
            "kl_reasoning_smoothed",
            "window",
        ],
        metrics.iter().enumerate().map(|(i, r)| {
            vec![
                r.step.to_string(),
                r.ci_meta.to_string(),
                r.ci_reasoning.to_string(),
                r.kl_meta.to_string(),
                r.kl_reasoning.to_string(),
                smooth[0][i].to_string(),
                smooth[1][i].to_string(),
                smooth[2][i].to_string(),
                smooth[3][i].to_string(),
                options.window.to_string(),
            ]
        }),
        &hash,
    )?;
    write_csv(
        &out.join(EVAL_CURVES),
        &[
            "step",
            "mean_reward",
            "mean_turns",
            "lazy_fraction",
            "ci_meta",
            "ci_reasoning",
            "kl_meta",
            "kl_reasoning",
        ],
        evaluations.iter().map(|e| {
            vec![
                e.step.to_string(),
                e.mean_reward.to_string(),
                e.mean_turns.to_string(),
                e.lazy_fraction.to_string(),
                e.ci_meta.to_string(),
                e.ci_reasoning.to_string(),
                e.kl_meta.to_string(),
                e.kl_reasoning.to_string(),
            ]
        }),
        &hash,
    )?;
    write_csv(
        &out.join(REWARD_CURVE),
        &[
            "step",
            "mean_reward",
            "recomputed_mean_reward",
            "mean_reward_smoothed",
            "mean_turns",
            "lazy_fraction",
            "restart_rate",
            "restart_reward_mean",
        ],
        metrics.iter().enumerate().map(|(i, r)| {
            vec![
                r.step.to_string(),
                r.mean_reward.to_string(),
                recomputed[i].to_string(),
                smooth[4][i].to_string(),
                r.mean_turns.to_string(),
                r.lazy_fraction.to_string(),
                r.restart_rate.to_string(),
                r.restart_reward_mean.to_string(),
            ]
        }),
        &hash,
    )?;
    let mut pass_out = BufWriter::new(File::create(out.join(run::PASS_AT_K))?);
    run::write_pass_at_k(&mut pass_out, &pass, &hash)?;

    Ok(Analysis {
        dir: dir.to_path_buf(),
        config_hash: hash,
        metrics,
        evaluations,
        recomputed_reward: recomputed,
        max_reward_gap: max_gap,
        turn_blocks: blocks,
        pass_at_k: pass,
    })
}
