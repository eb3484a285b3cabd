//! Training loop: sample rollout groups from a frozen snapshot, compute
//! outcome advantages, causal-influence and restart signals, mix them, and
//! take one gradient-ascent step on the clipped objective.

mod eval;
mod warmstart;

pub use eval::{
    evaluate, influence_curves, moving_average, pass_at_k, EvalRecord, Evaluation, InfluenceCurves, PassAtK,
    PolicySolver, ScriptedSolver, Solver,
};
pub use warmstart::{behavior_clone, teacher_episodes, warm_start};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::env::{generate_task, is_lazy, run_episode, TaskInstance};
use crate::episode::{Role, RolloutGroup};
use crate::error::{Error, Result};
use crate::exec;
use crate::hashing::derive_seed;
use crate::influence::{analyze_group, role_means, GroupInfluence};
use crate::objective::{group_advantage, mix_advantages, surrogate_loss, NormScope, StepAdvantage, StepSignals, Surrogate};
use crate::policy::FeaturizedPolicy;
use crate::vocab::render;

const QUESTION_STREAM: u64 = 0x7175_6573;
const ROLLOUT_STREAM: u64 = 0x726f_6c6c;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_turns: f64,
    pub lazy_fraction: f64,
    pub truncated_fraction: f64,
    pub ci_meta: f64,
    pub ci_reasoning: f64,
    pub kl_meta: f64,
    pub kl_reasoning: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub restart_rate: f64,
    pub restart_reward_mean: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 16] = [
        "step",
        "mean_reward",
        "mean_turns",
        "lazy_fraction",
        "truncated_fraction",
        "ci_meta",
        "ci_reasoning",
        "kl_meta",
        "kl_reasoning",
        "loss",
        "grad_norm",
        "mean_ratio",
        "clip_fraction",
        "mean_kl",
        "restart_rate",
        "restart_reward_mean",
    ];

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string()];
        r.extend(
            [
                self.mean_reward,
                self.mean_turns,
                self.lazy_fraction,
                self.truncated_fraction,
                self.ci_meta,
                self.ci_reasoning,
                self.kl_meta,
                self.kl_reasoning,
                self.loss,
                self.grad_norm,
                self.mean_ratio,
                self.clip_fraction,
                self.mean_kl,
                self.restart_rate,
                self.restart_reward_mean,
            ]
            .iter()
            .map(f64::to_string),
        );
        r
    }

    /// Parses a record produced by [`record`](Self::record).
    pub fn from_record(fields: &[&str]) -> Result<MetricsRow> {
        if fields.len() != Self::HEADER.len() {
            return Err(Error::Format(format!(
                "metrics row has {} fields, expected {}",
                fields.len(),
                Self::HEADER.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad `{}` value `{}`", Self::HEADER[i], fields[i])))
        };
        Ok(MetricsRow {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad step `{}`", fields[0])))?,
            mean_reward: f(1)?,
            mean_turns: f(2)?,
            lazy_fraction: f(3)?,
            truncated_fraction: f(4)?,
            ci_meta: f(5)?,
            ci_reasoning: f(6)?,
            kl_meta: f(7)?,
            kl_reasoning: f(8)?,
            loss: f(9)?,
            grad_norm: f(10)?,
            mean_ratio: f(11)?,
            clip_fraction: f(12)?,
            mean_kl: f(13)?,
            restart_rate: f(14)?,
            restart_reward_mean: f(15)?,
        })
    }
}

/// Everything produced by one training step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub metrics: MetricsRow,
    pub tasks: Vec<TaskInstance>,
    pub groups: Vec<RolloutGroup>,
    pub influence: Vec<GroupInfluence>,
    pub advantages: Vec<Vec<Vec<StepAdvantage>>>,
}

/// Samples `group_size` rollouts of `task` with independent derived seeds.
pub fn sample_group(
    policy: &FeaturizedPolicy,
    task: &TaskInstance,
    config: &TrainConfig,
    seed_path: &[u64],
) -> Result<RolloutGroup> {
    let trajectories = (0..config.group_size)
        .map(|g| {
            let mut path = seed_path.to_vec();
            path.push(g as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &path));
            run_episode(policy, task, &config.episode, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    RolloutGroup::new(trajectories)
}

/// Seed of rollout `g` of question `q` at training step `step`.
pub fn rollout_seed(root: u64, step: usize, q: usize, g: usize) -> u64 {
    derive_seed(root, &[ROLLOUT_STREAM, step as u64, q as u64, g as u64])
}

/// Readable dump of a group for numeric-failure diagnostics.
pub fn describe_group(group: &RolloutGroup) -> String {
    let mut s = format!("question [{}]", render(&group.question));
    for (i, t) in group.trajectories.iter().enumerate() {
        s.push_str(&format!("\n  #{i} reward {}:", t.outcome_reward));
        for step in t.steps() {
            s.push_str(&format!(" {}[{}]", step.role, render(&step.tokens)));
        }
    }
    s
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean of defined causal influence per role.
fn ci_by_role(influence: &[GroupInfluence]) -> (f64, f64) {
    let by = |role: Role| {
        mean(
            influence
                .iter()
                .flat_map(|g| g.records.iter().flatten())
                .filter(|r| r.role == role && !r.ci_undefined)
                .map(|r| r.ci),
        )
    };
    (by(Role::Meta), by(Role::Reasoning))
}

/// Live policy, frozen reference and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    policy: FeaturizedPolicy,
    reference: FeaturizedPolicy,
    step: usize,
}

impl Trainer {
    /// Warm-starts the policy; the reference is the warm-started policy.
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let policy = warm_start(&config)?;
        Trainer::with_policy(config, policy)
    }

    pub fn with_policy(config: TrainConfig, policy: FeaturizedPolicy) -> Result<Trainer> {
        config.validate()?;
        if *policy.spec() != config.featurizer {
            return Err(Error::Config("policy featurizer does not match the configuration".into()));
        }
        Ok(Trainer {
            reference: policy.clone(),
            policy,
            config,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &FeaturizedPolicy {
        &self.policy
    }

    pub fn reference(&self) -> &FeaturizedPolicy {
        &self.reference
    }

    /// Number of completed training steps.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Questions of training step `step`.
    pub fn questions(&self, step: usize) -> Result<Vec<TaskInstance>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[QUESTION_STREAM, step as u64]));
        (0..self.config.questions_per_step)
            .map(|_| generate_task(&mut rng, self.config.difficulty, self.config.modulus))
            .collect()
    }

    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let cfg = &self.config;
        let step = self.step;
        let snapshot = self.policy.clone();
        let tasks = self.questions(step)?;

        // Rollouts and snapshot-side signals, one group per question.
        let sampled = exec::try_map(&tasks, |q, task| {
            let group = sample_group(&snapshot, task, cfg, &[ROLLOUT_STREAM, step as u64, q as u64])?;
            let influence = analyze_group(&snapshot, &group, cfg.similarity)?;
            Ok((group, influence))
        })?;
        let (groups, influence): (Vec<_>, Vec<_>) = sampled.into_iter().unzip();

        let signals = groups
            .iter()
            .zip(&influence)
            .map(|(g, inf)| {
                Ok(StepSignals {
                    outcome: group_advantage(&g.rewards())?,
                    causal: inf.causal_signal(cfg.objective.flip_ci_sign),
                    restart: inf.restart.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (alpha, beta) = (cfg.objective.alpha, cfg.objective.beta_mix);
        let advantages: Vec<Vec<Vec<StepAdvantage>>> = match cfg.objective.scope {
            NormScope::Group => signals
                .iter()
                .map(|s| mix_advantages(s, alpha, beta))
                .collect::<Result<_>>()?,
            NormScope::Batch => {
                let mut all = StepSignals::default();
                for s in &signals {
                    all.outcome.extend_from_slice(&s.outcome);
                    all.causal.extend(s.causal.iter().cloned());
                    all.restart.extend(s.restart.iter().cloned());
                }
                let mut mixed = mix_advantages(&all, alpha, beta)?.into_iter();
                groups.iter().map(|g| mixed.by_ref().take(g.len()).collect()).collect()
            }
        };

        // Objective per group against the snapshot, reduced in question order.
        let live = &self.policy;
        let reference = &self.reference;
        let indices: Vec<usize> = (0..groups.len()).collect();
        let parts = exec::try_map(&indices, |_, &q| {
            surrogate_loss(live, &snapshot, reference, &groups[q], &advantages[q], &cfg.objective)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("{m}; offending group:\n{}", describe_group(&groups[q]))),
                    other => other,
                })
        })?;
        let mut total = Surrogate::zeros(cfg.featurizer.feature_dim);
        let scale = 1.0 / groups.len() as f64;
        for p in &parts {
            total.absorb(p, scale);
        }
        let grad_norm = total.grad.frobenius_norm();
        if !grad_norm.is_finite() || !total.value.is_finite() {
            return Err(Error::Numeric(format!("non-finite batch objective at step {step}")));
        }
        self.policy.weights_mut().add_scaled(&total.grad, cfg.learning_rate);

        let trajs = || groups.iter().flat_map(|g| g.trajectories.iter());
        let n = trajs().count() as f64;
        let records = || influence.iter().flat_map(|g| g.records.iter().flatten());
        let (kl_meta, kl_reasoning) = role_means(records(), |r| r.kl_influence);
        let (ci_meta, ci_reasoning) = ci_by_role(&influence);
        let restart_rewards: Vec<f64> = influence
            .iter()
            .zip(&groups)
            .flat_map(|(inf, g)| {
                g.trajectories
                    .iter()
                    .zip(&inf.restart)
                    .flat_map(|(t, row)| t.restart_turns.iter().map(move |&turn| row[2 * turn - 1]))
            })
            .collect();
        let metrics = MetricsRow {
            step,
            mean_reward: trajs().map(|t| t.outcome_reward).sum::<f64>() / n,
            mean_turns: trajs().map(|t| t.num_turns() as f64).sum::<f64>() / n,
            lazy_fraction: trajs().filter(|t| is_lazy(t)).count() as f64 / n,
            truncated_fraction: trajs().filter(|t| t.truncated).count() as f64 / n,
            ci_meta,
            ci_reasoning,
            kl_meta,
            kl_reasoning,
            loss: total.value,
            grad_norm,
            mean_ratio: total.mean_ratio(),
            clip_fraction: total.clip_fraction(),
            mean_kl: total.mean_kl(),
            restart_rate: trajs().filter(|t| !t.restart_turns.is_empty()).count() as f64 / n,
            restart_reward_mean: mean(restart_rewards.iter().copied()),
        };
        self.step += 1;
        Ok(StepOutcome {
            metrics,
            tasks,
            groups,
            influence,
            advantages,
        })
    }
}
