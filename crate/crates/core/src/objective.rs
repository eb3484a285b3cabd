//! Multi-turn clipped policy-gradient objective with group-relative
//! advantages.
//!
//! The objective is maximised. For trajectory `i` with `T_i` turns and step
//! `s` (meta and reasoning steps alike, each under its own step ratio):
//!
//! ```text
//! J = 1/G sum_i w_i sum_s [ min(r_s A_s, clip(r_s, 1-eps, 1+eps) A_s)
//!                           - beta_kl * mean_j KL(pi(.|c_j) || pi_ref(.|c_j)) ]
//! ```
//!
//! with `w_i = 1/T_i` for [`Variant::Rema`] and `w_i = 1` for
//! [`Variant::DrMamr`]. `r_s` is the mean over the step's tokens of
//! `pi(tok|c) / pi_old(tok|c)`, computed in log space. Steps injected by the
//! environment are not the policy's own actions and are left out.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episode::{step_contexts, ContextView, RolloutGroup, Trajectory};
use crate::error::{Error, Result};
use crate::params::ParamMatrix;
use crate::policy::{accumulate_outer, categorical_kl, log_softmax, FeaturizedPolicy};
use crate::vocab::VOCAB_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Turn-normalised objective: each trajectory's sum over steps is divided by its turn count.
    Rema,
    /// No turn normalisation.
    DrMamr,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Rema => "rema",
            Variant::DrMamr => "dr_mamr",
        }
    }

    /// Weight applied to the step sum of a trajectory with `turns` turns.
    pub fn trajectory_weight(self, turns: usize) -> f64 {
        match self {
            Variant::Rema => 1.0 / turns as f64,
            Variant::DrMamr => 1.0,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "rema" => Ok(Variant::Rema),
            "dr_mamr" => Ok(Variant::DrMamr),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected `rema` or `dr_mamr`)"
            ))),
        }
    }
}

/// Set of steps over which the auxiliary advantage signals are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// The rollouts of one question.
    Group,
    /// Every rollout of the training step.
    Batch,
}

impl NormScope {
    pub fn as_str(self) -> &'static str {
        match self {
            NormScope::Group => "group",
            NormScope::Batch => "batch",
        }
    }
}

impl FromStr for NormScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<NormScope> {
        match s {
            "group" => Ok(NormScope::Group),
            "batch" => Ok(NormScope::Batch),
            other => Err(Error::Config(format!(
                "unknown normalisation scope `{other}` (expected `group` or `batch`)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    /// Weight of the causal-influence signal in the mixed advantage.
    pub alpha: f64,
    /// Weight of the restart signal in the mixed advantage.
    pub beta_mix: f64,
    pub scope: NormScope,
    /// Negate causal influence before mixing.
    pub flip_ci_sign: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            variant: Variant::DrMamr,
            clip_eps: 0.2,
            kl_coeff: 0.001,
            alpha: 0.1,
            beta_mix: 0.1,
            scope: NormScope::Group,
            flip_ci_sign: false,
        }
    }
}

impl ObjectiveConfig {
    /// Plain multi-turn GRPO: turn-normalised, outcome advantage only.
    pub fn rema() -> ObjectiveConfig {
        ObjectiveConfig {
            variant: Variant::Rema,
            alpha: 0.0,
            beta_mix: 0.0,
            ..Default::default()
        }
    }

    pub fn dr_mamr() -> ObjectiveConfig {
        ObjectiveConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip_eps must be in (0, 1), got {}", self.clip_eps)));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(Error::Config(format!("kl_coeff must be finite and >= 0, got {}", self.kl_coeff)));
        }
        if !self.alpha.is_finite() || !self.beta_mix.is_finite() {
            return Err(Error::Config("mixing weights must be finite".into()));
        }
        Ok(())
    }
}

/// `(r - mean) / std` with the population std; all zeros when the rewards
/// do not vary.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "group advantage needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    Ok(standardize(rewards))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores with the population std; all zeros when the std is zero.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let (mean, std) = mean_std(values);
    if std == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Affine rescaling onto `[-1, 1]`; all zeros when max equals min.
pub fn minmax_rescale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0).collect()
}

/// Min-max rescaling followed by standardisation over the defined entries;
/// undefined entries normalise to 0.
pub fn normalize_signal(values: &[Option<f64>]) -> Vec<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let mut normed = standardize(&minmax_rescale(&defined)).into_iter();
    values
        .iter()
        .map(|v| match v {
            Some(_) => normed.next().expect("one value per defined entry"),
            None => 0.0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepAdvantage {
    /// Group-normalised outcome advantage.
    pub outcome: f64,
    /// Normalised causal-influence signal.
    pub causal: f64,
    /// Normalised restart signal.
    pub restart: f64,
    /// `outcome + alpha * causal + beta_mix * restart`.
    pub mixed: f64,
}

/// Per-step signals of the trajectories in one normalisation scope.
#[derive(Debug, Clone, Default)]
pub struct StepSignals {
    /// Outcome advantage of each trajectory.
    pub outcome: Vec<f64>,
    /// `causal[i][s]`: causal influence of step `s + 1` of trajectory `i`,
    /// `None` where undefined.
    pub causal: Vec<Vec<Option<f64>>>,
    /// `restart[i][s]`: restart reward, 0 where no restart was issued.
    pub restart: Vec<Vec<f64>>,
}

/// Mixes the outcome advantage with the normalised auxiliary signals. All
/// entries passed in form one normalisation scope.
pub fn mix_advantages(signals: &StepSignals, alpha: f64, beta_mix: f64) -> Result<Vec<Vec<StepAdvantage>>> {
    let n = signals.outcome.len();
    if signals.causal.len() != n || signals.restart.len() != n {
        return Err(Error::Contract("signals must cover the same trajectories".into()));
    }
    if let Some(i) = (0..n).find(|&i| signals.causal[i].len() != signals.restart[i].len()) {
        return Err(Error::Contract(format!("trajectory {i}: causal and restart signals differ in length")));
    }
    let causal = normalize_signal(&signals.causal.concat());
    let restart_flat: Vec<Option<f64>> = signals.restart.iter().flatten().map(|&r| Some(r)).collect();
    let restart = normalize_signal(&restart_flat);
    let mut offset = 0;
    Ok(signals
        .causal
        .iter()
        .enumerate()
        .map(|(i, steps)| {
            let out = (0..steps.len())
                .map(|s| {
                    let (c, r) = (causal[offset + s], restart[offset + s]);
                    let outcome = signals.outcome[i];
                    StepAdvantage {
                        outcome,
                        causal: c,
                        restart: r,
                        mixed: outcome + alpha * c + beta_mix * r,
                    }
                })
                .collect();
            offset += steps.len();
            out
        })
        .collect())
}

/// Mean per-token probability ratio of step `flat` between `policy` and
/// `old`, on the contexts the step was generated from.
pub fn step_ratio(policy: &FeaturizedPolicy, old: &FeaturizedPolicy, trajectory: &Trajectory, flat: usize) -> Result<f64> {
    let step = trajectory.step(flat)?;
    let ctxs = step_contexts(trajectory, flat, ContextView::GENERATION)?;
    let mut sum = 0.0;
    for (ctx, &tok) in ctxs.iter().zip(&step.tokens) {
        sum += (policy.token_logprob(ctx, tok)? - old.token_logprob(ctx, tok)?).exp();
    }
    Ok(sum / step.tokens.len() as f64)
}

/// Ratio of the reasoning step of `turn`.
pub fn turn_ratio(policy: &FeaturizedPolicy, old: &FeaturizedPolicy, trajectory: &Trajectory, turn: usize) -> Result<f64> {
    trajectory.reasoning(turn)?;
    step_ratio(policy, old, trajectory, 2 * turn)
}

pub fn clip(r: f64, eps: f64) -> f64 {
    r.clamp(1.0 - eps, 1.0 + eps)
}

/// `min(r A, clip(r) A)` and whether the clipped branch is the active one.
pub fn clipped_term(r: f64, a: f64, eps: f64) -> (f64, bool) {
    let unclipped = r * a;
    let clipped = clip(r, eps) * a;
    if unclipped <= clipped {
        (unclipped, false)
    } else {
        (clipped, true)
    }
}

/// Objective value, its gradient and audit statistics for one group.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub value: f64,
    pub grad: ParamMatrix,
    /// Number of steps contributing to the objective.
    pub steps: usize,
    pub ratio_sum: f64,
    pub clipped: usize,
    /// Sum over steps of the per-step mean KL to the reference.
    pub kl_sum: f64,
}

impl Surrogate {
    pub fn zeros(feature_dim: usize) -> Surrogate {
        Surrogate {
            value: 0.0,
            grad: ParamMatrix::zeros(feature_dim, VOCAB_SIZE),
            steps: 0,
            ratio_sum: 0.0,
            clipped: 0,
            kl_sum: 0.0,
        }
    }

    /// Adds `scale` times `other` (value and gradient) and all counts.
    pub fn absorb(&mut self, other: &Surrogate, scale: f64) {
        self.value += scale * other.value;
        self.grad.add_scaled(&other.grad, scale);
        self.steps += other.steps;
        self.ratio_sum += other.ratio_sum;
        self.clipped += other.clipped;
        self.kl_sum += other.kl_sum;
    }

    pub fn mean_ratio(&self) -> f64 {
        ratio_or_zero(self.ratio_sum, self.steps)
    }

    pub fn clip_fraction(&self) -> f64 {
        ratio_or_zero(self.clipped as f64, self.steps)
    }

    pub fn mean_kl(&self) -> f64 {
        ratio_or_zero(self.kl_sum, self.steps)
    }
}

fn ratio_or_zero(x: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        x / n as f64
    }
}

/// Objective and analytic gradient over one rollout group.
/// `advantages[i][s]` is the advantage of step `s + 1` of trajectory `i`.
pub fn surrogate_loss(
    policy: &FeaturizedPolicy,
    old: &FeaturizedPolicy,
    reference: &FeaturizedPolicy,
    group: &RolloutGroup,
    advantages: &[Vec<StepAdvantage>],
    config: &ObjectiveConfig,
) -> Result<Surrogate> {
    config.validate()?;
    if advantages.len() != group.len() {
        return Err(Error::Config(format!(
            "advantages cover {} trajectories, group has {}",
            advantages.len(),
            group.len()
        )));
    }
    let g = group.len() as f64;
    let mut total = Surrogate::zeros(policy.spec().feature_dim);
    for (i, (traj, adv)) in group.trajectories.iter().zip(advantages).enumerate() {
        if adv.len() != traj.num_steps() {
            return Err(Error::Config(format!(
                "trajectory {i}: {} advantages for {} steps",
                adv.len(),
                traj.num_steps()
            )));
        }
        let weight = config.variant.trajectory_weight(traj.num_turns()) / g;
        for (s, a) in adv.iter().enumerate() {
            accumulate_step(policy, old, reference, traj, s + 1, a.mixed, weight, config, &mut total)?;
        }
    }
    if let Some((f, v)) = total.grad.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite objective gradient at feature {f}, token {v}")));
    }
    if !total.value.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective value {}", total.value)));
    }
    Ok(total)
}

/// Adds `weight` times the step's objective term and gradient.
#[allow(clippy::too_many_arguments)]
fn accumulate_step(
    policy: &FeaturizedPolicy,
    old: &FeaturizedPolicy,
    reference: &FeaturizedPolicy,
    traj: &Trajectory,
    flat: usize,
    advantage: f64,
    weight: f64,
    config: &ObjectiveConfig,
    out: &mut Surrogate,
) -> Result<()> {
    let step = traj.step(flat)?;
    if step.injected {
        return Ok(());
    }
    let ctxs = step_contexts(traj, flat, ContextView::GENERATION)?;
    let n = step.tokens.len() as f64;
    let mut per_token = Vec::with_capacity(ctxs.len());
    let mut ratio = 0.0;
    let mut kl = 0.0;
    for (ctx, &tok) in ctxs.iter().zip(&step.tokens) {
        let feats = policy.features(ctx);
        let lp = log_softmax(&policy.logits_for_features(&feats)?);
        let lp_old = old.token_logprob(ctx, tok)?;
        let rho = (lp[tok.index()] - lp_old).exp();
        ratio += rho / n;
        let lq = if config.kl_coeff > 0.0 {
            let lq = reference.log_distribution(ctx)?;
            kl += categorical_kl(&lp, &lq) / n;
            Some(lq)
        } else {
            None
        };
        per_token.push((feats, lp, lq, tok, rho));
    }
    let (term, clipped) = clipped_term(ratio, advantage, config.clip_eps);
    out.value += weight * (term - config.kl_coeff * kl);
    out.steps += 1;
    out.ratio_sum += ratio;
    out.clipped += usize::from(clipped);
    out.kl_sum += kl;

    let mut coeff = vec![0.0; VOCAB_SIZE];
    for (feats, lp, lq, tok, rho) in &per_token {
        coeff.iter_mut().for_each(|c| *c = 0.0);
        if !clipped {
            // d(r A)/dW through d log pi(tok) = onehot(tok) - p.
            let s = weight * advantage * rho / n;
            for (c, l) in coeff.iter_mut().zip(lp) {
                *c -= s * l.exp();
            }
            coeff[tok.index()] += s;
        }
        if let Some(lq) = lq {
            let tok_kl = categorical_kl(lp, lq);
            let s = -weight * config.kl_coeff / n;
            for ((c, a), b) in coeff.iter_mut().zip(lp).zip(lq) {
                *c += s * a.exp() * (a - b - tok_kl);
            }
        }
        accumulate_outer(&mut out.grad, feats, &coeff);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::tests::{d, meta, reason};
    use crate::policy::FeaturizerSpec;
    use crate::vocab::Token;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> FeaturizerSpec {
        FeaturizerSpec {
            feature_dim: 16,
            ..Default::default()
        }
    }

    fn random_policy(rng: &mut ChaCha8Rng, scale: f64) -> FeaturizedPolicy {
        let mut p = FeaturizedPolicy::zeros(small_spec());
        for v in p.weights_mut().data_mut() {
            *v = scale * (rng.gen::<f64>() * 2.0 - 1.0);
        }
        p
    }

    fn perturbed(p: &FeaturizedPolicy, rng: &mut ChaCha8Rng, scale: f64) -> FeaturizedPolicy {
        let mut q = p.clone();
        for v in q.weights_mut().data_mut() {
            *v += scale * (rng.gen::<f64>() * 2.0 - 1.0);
        }
        q
    }

    fn random_step(rng: &mut ChaCha8Rng, role_meta: bool) -> crate::episode::Step {
        let len = rng.gen_range(1..=3);
        let toks: Vec<Token> = (0..len).map(|_| Token(rng.gen_range(0..12))).collect();
        if role_meta {
            meta(&toks)
        } else {
            reason(&toks)
        }
    }

    fn random_group(rng: &mut ChaCha8Rng, g: usize) -> RolloutGroup {
        let q = vec![d(rng.gen_range(0..5)), Token::PLUS, d(rng.gen_range(0..5))];
        let trajs = (0..g)
            .map(|_| {
                let turns = rng.gen_range(1..=3);
                let steps = (0..2 * turns).map(|s| random_step(rng, s % 2 == 0)).collect();
                Trajectory::new(q.clone(), steps, f64::from(rng.gen::<bool>() as u8), vec![]).unwrap()
            })
            .collect();
        RolloutGroup::new(trajs).unwrap()
    }

    fn random_advantages(rng: &mut ChaCha8Rng, group: &RolloutGroup) -> Vec<Vec<StepAdvantage>> {
        group
            .trajectories
            .iter()
            .map(|t| {
                (0..t.num_steps())
                    .map(|_| {
                        let a = rng.gen::<f64>() * 2.0 - 1.0;
                        StepAdvantage { outcome: a, causal: 0.0, restart: 0.0, mixed: a }
                    })
                    .collect()
            })
            .collect()
    }

    fn constant_advantages(group: &RolloutGroup, a: f64) -> Vec<Vec<StepAdvantage>> {
        group
            .trajectories
            .iter()
            .map(|t| vec![StepAdvantage { outcome: a, causal: 0.0, restart: 0.0, mixed: a }; t.num_steps()])
            .collect()
    }

    #[test]
    fn group_advantage_examples() {
        assert_eq!(group_advantage(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![0.0; 4]);
        assert_eq!(group_advantage(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantage(&[1.0, 1.0, 0.0, 0.0]).unwrap(), vec![1.0, 1.0, -1.0, -1.0]);
        assert!(group_advantage(&[1.0]).is_err());
    }

    #[test]
    fn normalisation_example() {
        let z = normalize_signal(&[Some(-2.0), Some(0.0), Some(2.0)]);
        let s = (1.5f64).sqrt();
        assert!((z[0] + s).abs() < 1e-15 && z[1] == 0.0 && (z[2] - s).abs() < 1e-15);
        assert_eq!(normalize_signal(&[Some(0.7); 5]), vec![0.0; 5]);
        assert_eq!(normalize_signal(&[Some(1.0), None, Some(3.0)])[1], 0.0);
    }

    #[test]
    fn zero_weights_reduce_to_outcome() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig = StepSignals {
            outcome: vec![0.3, -1.7, 0.9],
            causal: (0..3).map(|_| (0..4).map(|_| Some(rng.gen::<f64>())).collect()).collect(),
            restart: (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1..=1) as f64).collect()).collect(),
        };
        let mixed = mix_advantages(&sig, 0.0, 0.0).unwrap();
        for (i, row) in mixed.iter().enumerate() {
            for a in row {
                assert_eq!(a.mixed.to_bits(), sig.outcome[i].to_bits());
            }
        }
    }

    #[test]
    fn mixing_is_exact_combination() {
        let sig = StepSignals {
            outcome: vec![1.0, -1.0],
            causal: vec![vec![Some(0.2), None], vec![Some(-0.4), Some(0.1)]],
            restart: vec![vec![0.0, 1.0], vec![0.0, 0.0]],
        };
        for row in mix_advantages(&sig, 0.1, 0.3).unwrap() {
            for a in row {
                assert_eq!(a.mixed, a.outcome + 0.1 * a.causal + 0.3 * a.restart);
            }
        }
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_term(1.5, 1.0, 0.2), (1.2, true));
        assert_eq!(clipped_term(1.5, -1.0, 0.2), (-1.5, false));
        assert_eq!(clipped_term(1.0, 0.7, 0.2), (0.7, false));
    }

    #[test]
    fn two_token_ratio_example() {
        // Old probabilities (0.5, 0.2) and new (0.6, 0.1) for the two tokens.
        let traj = Trajectory::new(vec![d(1)], vec![meta(&[d(0)]), reason(&[d(1), d(2)])], 1.0, vec![]).unwrap();
        let ctxs = step_contexts(&traj, 2, ContextView::GENERATION).unwrap();
        let spec = FeaturizerSpec { feature_dim: 4096, ..Default::default() };
        let feats: Vec<Vec<u32>> = ctxs.iter().map(|c| spec.features(c)).collect();
        let set = |probs: [(Token, f64); 2]| {
            let mut p = FeaturizedPolicy::zeros(spec);
            for (i, (tok, target)) in probs.into_iter().enumerate() {
                // A feature active only at this context carries logit `l` for
                // the token, so that e^l / (e^l + V - 1) = target.
                let f = *feats[i].iter().find(|f| !feats[1 - i].contains(f)).unwrap();
                let l = (target * (VOCAB_SIZE as f64 - 1.0) / (1.0 - target)).ln();
                p.weights_mut().set(f as usize, tok.index(), l);
            }
            p
        };
        let old = set([(d(1), 0.5), (d(2), 0.2)]);
        let new = set([(d(1), 0.6), (d(2), 0.1)]);
        for (ctx, (tok, target)) in ctxs.iter().zip([(d(1), 0.5), (d(2), 0.2)]) {
            assert!((old.token_logprob(ctx, tok).unwrap().exp() - target).abs() < 1e-12);
        }
        let r = turn_ratio(&new, &old, &traj, 1).unwrap();
        assert!((r - 0.85).abs() < 1e-12, "{r}");
    }

    #[test]
    fn identity_policy_loss_is_mean_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_policy(&mut rng, 1.0);
        let group = random_group(&mut rng, 4);
        let adv = random_advantages(&mut rng, &group);
        let cfg = ObjectiveConfig { kl_coeff: 0.0, ..ObjectiveConfig::dr_mamr() };
        let s = surrogate_loss(&p, &p, &p, &group, &adv, &cfg).unwrap();
        let expect: f64 = adv.iter().flatten().map(|a| a.mixed).sum::<f64>() / 4.0;
        assert!((s.value - expect).abs() < 1e-12);
        assert_eq!(s.mean_ratio(), 1.0);
        assert_eq!(s.clip_fraction(), 0.0);
    }

    #[test]
    fn zero_advantage_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_policy(&mut rng, 1.0);
        let old = perturbed(&p, &mut rng, 0.5);
        let group = random_group(&mut rng, 3);
        let cfg = ObjectiveConfig { kl_coeff: 0.0, ..Default::default() };
        let s = surrogate_loss(&p, &old, &p, &group, &constant_advantages(&group, 0.0), &cfg).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.grad.is_zero());
    }

    #[test]
    fn variants_agree_on_single_turn_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_policy(&mut rng, 1.0);
        let old = perturbed(&p, &mut rng, 0.3);
        let reference = perturbed(&p, &mut rng, 0.3);
        let q = vec![d(1)];
        let trajs = (0..4)
            .map(|i| Trajectory::new(q.clone(), vec![random_step(&mut rng, true), random_step(&mut rng, false)], f64::from(i % 2), vec![]).unwrap())
            .collect();
        let group = RolloutGroup::new(trajs).unwrap();
        let adv = random_advantages(&mut rng, &group);
        let a = surrogate_loss(&p, &old, &reference, &group, &adv, &ObjectiveConfig { variant: Variant::Rema, ..Default::default() }).unwrap();
        let b = surrogate_loss(&p, &old, &reference, &group, &adv, &ObjectiveConfig { variant: Variant::DrMamr, ..Default::default() }).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn injected_steps_do_not_contribute() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = random_policy(&mut rng, 1.0);
        let mut m = meta(&[Token::filler(0), Token::END]);
        m.injected = true;
        let traj = Trajectory::new(vec![d(1)], vec![m, reason(&[Token::EMPTY])], 0.0, vec![]).unwrap();
        let other = Trajectory::new(vec![d(1)], vec![meta(&[d(2)]), reason(&[d(2)])], 1.0, vec![]).unwrap();
        let group = RolloutGroup::new(vec![traj, other]).unwrap();
        let s = surrogate_loss(&p, &p, &p, &group, &constant_advantages(&group, 1.0), &ObjectiveConfig::default()).unwrap();
        assert_eq!(s.steps, 3);
    }

    /// Objective value alone, for finite differences.
    fn value_at(w: &ParamMatrix, old: &FeaturizedPolicy, r: &FeaturizedPolicy, g: &RolloutGroup, a: &[Vec<StepAdvantage>], c: &ObjectiveConfig) -> f64 {
        let p = FeaturizedPolicy::from_weights(*old.spec(), w.clone()).unwrap();
        surrogate_loss(&p, old, r, g, a, c).unwrap().value
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradient_matches_finite_differences(seed in any::<u64>(), rema in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_policy(&mut rng, 0.5);
            let old = perturbed(&p, &mut rng, 0.1);
            let reference = perturbed(&p, &mut rng, 0.5);
            let group = random_group(&mut rng, 3);
            let adv = random_advantages(&mut rng, &group);
            let cfg = ObjectiveConfig {
                variant: if rema { Variant::Rema } else { Variant::DrMamr },
                kl_coeff: 0.05,
                ..Default::default()
            };
            let s = surrogate_loss(&p, &old, &reference, &group, &adv, &cfg).unwrap();
            let h = 1e-5;
            let mut num = ParamMatrix::zeros(p.weights().rows(), p.weights().cols());
            for k in 0..p.weights().data().len() {
                let mut w = p.weights().clone();
                w.data_mut()[k] += h;
                let up = value_at(&w, &old, &reference, &group, &adv, &cfg);
                w.data_mut()[k] -= 2.0 * h;
                let down = value_at(&w, &old, &reference, &group, &adv, &cfg);
                num.data_mut()[k] = (up - down) / (2.0 * h);
            }
            let mut diff = s.grad.clone();
            diff.add_scaled(&num, -1.0);
            let denom = s.grad.frobenius_norm().max(num.frobenius_norm()).max(1e-8);
            prop_assert!(diff.frobenius_norm() / denom < 1e-4, "rel err {}", diff.frobenius_norm() / denom);
        }

        #[test]
        fn clipped_term_is_bounded(r in 0.0f64..5.0, a in -3.0f64..3.0, eps in 0.01f64..0.99) {
            let (t, clipped) = clipped_term(r, a, eps);
            if clipped {
                prop_assert!(t.abs() <= (1.0 + eps) * a.abs() + 1e-15);
            }
            prop_assert!(t <= r * a && t <= clip(r, eps) * a);
        }

        #[test]
        fn mixing_is_permutation_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 2..8), shift in 1usize..7) {
            let n = vals.len();
            let sig = |v: &[f64]| StepSignals {
                outcome: vec![0.0; n],
                causal: v.iter().map(|&x| vec![Some(x)]).collect(),
                restart: v.iter().map(|&x| vec![x.signum()]).collect(),
            };
            let rotated: Vec<f64> = (0..n).map(|i| vals[(i + shift) % n]).collect();
            let a = mix_advantages(&sig(&vals), 0.1, 0.1).unwrap();
            let b = mix_advantages(&sig(&rotated), 0.1, 0.1).unwrap();
            for i in 0..n {
                prop_assert!((a[(i + shift) % n][0].mixed - b[i][0].mixed).abs() < 1e-12);
            }
        }

        #[test]
        fn ratio_is_one_at_old_policy(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_policy(&mut rng, 3.0);
            let group = random_group(&mut rng, 2);
            for t in &group.trajectories {
                for turn in 1..=t.num_turns() {
                    prop_assert_eq!(turn_ratio(&p, &p, t, turn).unwrap(), 1.0);
                }
            }
        }
    }
}
