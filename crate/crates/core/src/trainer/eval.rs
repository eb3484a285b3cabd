//! Evaluation: rewards, lazy-turn statistics, per-role influence on a fixed
//! task set, and pass@K.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::env::{generate_corpus, is_lazy, run_episode, turn_count_stats, EpisodeConfig, ScriptBehavior, ScriptedAgent, TaskInstance};
use crate::episode::{Role, Trajectory};
use crate::error::{Error, Result};
use crate::exec;
use crate::hashing::derive_seed;
use crate::influence::{analyze_group, role_means, StepInfluenceRecord};
use crate::policy::FeaturizedPolicy;

use super::{sample_group, MetricsRow};

const EVAL_TASK_STREAM: u64 = 0x6576_616c;
const EVAL_ROLLOUT_STREAM: u64 = 0x6576_726f;
const PASS_STREAM: u64 = 0x7061_7373;

/// Influence record of one evaluation step, tagged with its task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: usize,
    pub record: StepInfluenceRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_turns: f64,
    pub lazy_fraction: f64,
    pub lazy_mean_turns: Option<f64>,
    pub non_lazy_mean_turns: Option<f64>,
    pub ci_meta: f64,
    pub ci_reasoning: f64,
    pub kl_meta: f64,
    pub kl_reasoning: f64,
    pub records: Vec<EvalRecord>,
}

impl Evaluation {
    pub const HEADER: [&'static str; 11] = [
        "step",
        "mean_reward",
        "mean_turns",
        "lazy_fraction",
        "lazy_mean_turns",
        "non_lazy_mean_turns",
        "ci_meta",
        "ci_reasoning",
        "kl_meta",
        "kl_reasoning",
        "episodes",
    ];

    pub fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        vec![
            self.step.to_string(),
            self.mean_reward.to_string(),
            self.mean_turns.to_string(),
            self.lazy_fraction.to_string(),
            opt(self.lazy_mean_turns),
            opt(self.non_lazy_mean_turns),
            self.ci_meta.to_string(),
            self.ci_reasoning.to_string(),
            self.kl_meta.to_string(),
            self.kl_reasoning.to_string(),
            self.records.iter().map(|r| (r.task, r.record.trajectory)).collect::<std::collections::BTreeSet<_>>().len().to_string(),
        ]
    }
}

/// The fixed evaluation tasks of a configuration.
pub fn eval_tasks(config: &TrainConfig) -> Result<Vec<TaskInstance>> {
    generate_corpus(
        derive_seed(config.seed, &[EVAL_TASK_STREAM]),
        config.difficulty,
        config.modulus,
        config.eval_tasks,
    )
}

/// Samples `eval_rollouts` episodes per evaluation task (the same random
/// streams at every step) and measures them under `policy`.
pub fn evaluate(policy: &FeaturizedPolicy, config: &TrainConfig, step: usize) -> Result<Evaluation> {
    let tasks = eval_tasks(config)?;
    let cfg = TrainConfig {
        group_size: config.eval_rollouts,
        ..config.clone()
    };
    let parts = exec::try_map(&tasks, |i, task| {
        let group = sample_group(policy, task, &cfg, &[EVAL_ROLLOUT_STREAM, i as u64])?;
        let inf = analyze_group(policy, &group, cfg.similarity)?;
        Ok((group, inf))
    })?;
    let trajs: Vec<&Trajectory> = parts.iter().flat_map(|(g, _)| g.trajectories.iter()).collect();
    let n = trajs.len() as f64;
    let stats = turn_count_stats(trajs.iter().copied())?;
    let records: Vec<EvalRecord> = parts
        .iter()
        .enumerate()
        .flat_map(|(task, (_, inf))| {
            inf.records
                .iter()
                .flatten()
                .map(move |r| EvalRecord { task, record: r.clone() })
        })
        .collect();
    let (kl_meta, kl_reasoning) = role_means(records.iter().map(|r| &r.record), |r| r.kl_influence);
    let ci = |role: Role| {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.record.role == role && !r.record.ci_undefined)
            .map(|r| r.record.ci)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(Evaluation {
        step,
        mean_reward: trajs.iter().map(|t| t.outcome_reward).sum::<f64>() / n,
        mean_turns: trajs.iter().map(|t| t.num_turns() as f64).sum::<f64>() / n,
        lazy_fraction: trajs.iter().filter(|t| is_lazy(t)).count() as f64 / n,
        lazy_mean_turns: stats.lazy_mean,
        non_lazy_mean_turns: stats.non_lazy_mean,
        ci_meta: ci(Role::Meta),
        ci_reasoning: ci(Role::Reasoning),
        kl_meta,
        kl_reasoning,
        records,
    })
}

/// Something that can attempt a task once.
pub trait Solver: Sync {
    fn attempt(&self, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<bool>;
}

pub struct PolicySolver<'a> {
    pub policy: &'a FeaturizedPolicy,
    pub episode: EpisodeConfig,
}

impl Solver for PolicySolver<'_> {
    fn attempt(&self, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<bool> {
        Ok(run_episode(self.policy, task, &self.episode, rng)?.outcome_reward == 1.0)
    }
}

/// Scripted agent that knows each task's answer and behaves per `behavior`.
pub struct ScriptedSolver {
    pub behavior: ScriptBehavior,
    pub episode: EpisodeConfig,
}

impl Solver for ScriptedSolver {
    fn attempt(&self, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<bool> {
        let agent = ScriptedAgent::new(task.clone(), self.behavior);
        Ok(run_episode(&agent, task, &self.episode, rng)?.outcome_reward == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub k: usize,
    pub solved: usize,
    pub tasks: usize,
    pub rate: f64,
}

/// Fraction of tasks solved by at least one of the first `K` attempts, for
/// each requested `K`. Every task gets `max(K)` attempts from its own
/// stream, so the values share one pool of episodes and are monotone in K.
pub fn pass_at_k<S: Solver>(solver: &S, tasks: &[TaskInstance], ks: &[usize], seed: u64) -> Result<Vec<PassAtK>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Contract("K values must be at least 1".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Contract("pass@K needs at least one task".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty");
    // Index of the first successful attempt per task, if any.
    let first = exec::try_map(tasks, |i, task| {
        for a in 0..max_k {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[PASS_STREAM, i as u64, a as u64]));
            if solver.attempt(task, &mut rng)? {
                return Ok(Some(a));
            }
        }
        Ok(None)
    })?;
    Ok(ks
        .iter()
        .map(|&k| {
            let solved = first.iter().filter(|f| f.is_some_and(|a| a < k)).count();
            PassAtK {
                k,
                solved,
                tasks: tasks.len(),
                rate: solved as f64 / tasks.len() as f64,
            }
        })
        .collect())
}

/// Trailing moving average: entry `i` averages the last `window` values up
/// to `i` (fewer at the start).
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Contract("moving-average window must be at least 1".into()));
    }
    Ok((0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            series[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceCurves {
    pub steps: Vec<usize>,
    pub ci_meta: Vec<f64>,
    pub ci_reasoning: Vec<f64>,
    pub kl_meta: Vec<f64>,
    pub kl_reasoning: Vec<f64>,
}

/// Smoothed per-role influence series from the metrics history.
pub fn influence_curves(rows: &[MetricsRow], window: usize) -> Result<InfluenceCurves> {
    if rows.is_empty() {
        return Err(Error::Contract("influence curves need at least one metrics row".into()));
    }
    let col = |f: fn(&MetricsRow) -> f64| moving_average(&rows.iter().map(f).collect::<Vec<_>>(), window);
    Ok(InfluenceCurves {
        steps: rows.iter().map(|r| r.step).collect(),
        ci_meta: col(|r| r.ci_meta)?,
        ci_reasoning: col(|r| r.ci_reasoning)?,
        kl_meta: col(|r| r.kl_meta)?,
        kl_reasoning: col(|r| r.kl_reasoning)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::tiny_config;
    use crate::trainer::Trainer;

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0], 2).unwrap(), vec![1.0, 1.5, 2.5]);
        assert_eq!(moving_average(&[4.0; 5], 3).unwrap(), vec![4.0; 5]);
        assert_eq!(moving_average(&[1.0, 5.0, 2.0], 1).unwrap(), vec![1.0, 5.0, 2.0]);
        assert!(moving_average(&[1.0], 0).is_err());
    }

    #[test]
    fn certain_solver_passes_everything() {
        let tasks = generate_corpus(1, 3, 5, 20).unwrap();
        let solver = ScriptedSolver { behavior: ScriptBehavior::perfect(), episode: EpisodeConfig::default() };
        for p in pass_at_k(&solver, &tasks, &[1, 2, 4], 0).unwrap() {
            assert_eq!(p.rate, 1.0);
        }
    }

    #[test]
    fn pass_at_one_is_single_attempt_reward() {
        let c = tiny_config();
        let t = Trainer::new(c.clone()).unwrap();
        let tasks = generate_corpus(2, 3, 5, 30).unwrap();
        let solver = PolicySolver { policy: t.policy(), episode: c.episode };
        let p1 = pass_at_k(&solver, &tasks, &[1], 5).unwrap()[0].rate;
        let direct: f64 = tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, &[PASS_STREAM, i as u64, 0]));
                run_episode(t.policy(), task, &c.episode, &mut rng).unwrap().outcome_reward
            })
            .sum::<f64>()
            / 30.0;
        assert_eq!(p1, direct);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let c = tiny_config();
        let t = Trainer::new(c.clone()).unwrap();
        let a = evaluate(t.policy(), &c, 0).unwrap();
        assert_eq!(a, evaluate(t.policy(), &c, 0).unwrap());
        assert!(a.kl_meta >= 0.0 && a.kl_reasoning >= 0.0);
        assert_eq!(a.record().len(), Evaluation::HEADER.len());
    }
}
