//! Numerical check of the turn-normalisation bias.
//!
//! For turn `t` of a trajectory with `T` turns, the turn contribution is
//! `Z_t = (1/|y_t|) sum_j r_t A grad log pi(y_{t,j} | c_j)` and its weight in a
//! turn-normalised objective is `g_t = Z_t / T`. For two continuations of one
//! prefix with equal reward, a short one (`T_S`) and a long one (`T_L`),
//! `|g_t(S)| / |g_t(L)| = (T_L / T_S) / kappa` with `kappa = |Z_t(L)| / |Z_t(S)|`,
//! so the short continuation dominates whenever `kappa < T_L / T_S`.
//!
//! `r_t` is the turn-level ratio applied to every token, as in the statement
//! of the contribution; at `theta = theta_old` it coincides with the exact
//! gradient of the per-turn surrogate.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{step_contexts, ContextView, Role, Step, Trajectory};
use crate::error::{Error, Result};
use crate::objective::turn_ratio;
use crate::params::ParamMatrix;
use crate::policy::{FeaturizedPolicy, FeaturizerSpec};
use crate::vocab::{Token, VOCAB_SIZE};

/// `Z_t` for the reasoning step of `turn` with a common advantage.
pub fn turn_contribution(
    policy: &FeaturizedPolicy,
    snapshot: &FeaturizedPolicy,
    trajectory: &Trajectory,
    turn: usize,
    advantage: f64,
) -> Result<ParamMatrix> {
    let r = turn_ratio(policy, snapshot, trajectory, turn)?;
    let flat = 2 * turn;
    let step = trajectory.step(flat)?;
    let ctxs = step_contexts(trajectory, flat, ContextView::GENERATION)?;
    let scale = r * advantage / step.tokens.len() as f64;
    let mut z = ParamMatrix::zeros(policy.spec().feature_dim, VOCAB_SIZE);
    for (ctx, &tok) in ctxs.iter().zip(&step.tokens) {
        policy.accumulate_grad_logprob(ctx, tok, scale, &mut z)?;
    }
    Ok(z)
}

/// `g_t = Z_t / T`.
pub fn gradient_contribution(z: &ParamMatrix, turns: usize) -> Result<ParamMatrix> {
    if turns == 0 {
        return Err(Error::Contract("turn count must be at least 1".into()));
    }
    let t = turns as f64;
    let mut g = z.clone();
    g.data_mut().iter_mut().for_each(|v| *v /= t);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub t_short: usize,
    pub t_long: usize,
    /// `|Z_t(L)| / |Z_t(S)|`; undefined when `Z_t(S) = 0`.
    pub kappa: Option<f64>,
    /// `|g_t(S)| / |g_t(L)|` from the scaled matrices.
    pub measured_ratio: Option<f64>,
    /// `(T_L / T_S) / kappa`.
    pub predicted_ratio: Option<f64>,
    pub relative_error: Option<f64>,
    pub identity_holds: bool,
    /// `kappa < T_L / T_S`.
    pub premise: bool,
    /// Premise implies `measured_ratio > 1`.
    pub inequality_holds: bool,
}

/// Compares the contributions of a short and a long continuation.
pub fn compare_contributions(
    z_short: &ParamMatrix,
    z_long: &ParamMatrix,
    t_short: usize,
    t_long: usize,
    tolerance: f64,
) -> Result<BiasReport> {
    if t_long <= t_short {
        return Err(Error::Contract(format!("long horizon {t_long} must exceed short horizon {t_short}")));
    }
    let zs = z_short.frobenius_norm();
    let zl = z_long.frobenius_norm();
    let gs = gradient_contribution(z_short, t_short)?.frobenius_norm();
    let gl = gradient_contribution(z_long, t_long)?.frobenius_norm();
    let horizon = t_long as f64 / t_short as f64;
    let kappa = (zs > 0.0).then(|| zl / zs);
    let measured = (gl > 0.0).then(|| gs / gl);
    let predicted = kappa.filter(|&k| k > 0.0).map(|k| horizon / k);
    let relative_error = match (measured, predicted) {
        (Some(m), Some(p)) => Some((m - p).abs() / p.abs()),
        _ => None,
    };
    let premise = kappa.is_some_and(|k| k < horizon);
    Ok(BiasReport {
        t_short,
        t_long,
        kappa,
        measured_ratio: measured,
        predicted_ratio: predicted,
        relative_error,
        identity_holds: relative_error.is_some_and(|e| e <= tolerance),
        premise,
        inequality_holds: !premise || measured.is_some_and(|m| m > 1.0),
    })
}

/// Two continuations of a shared prefix with equal reward.
#[derive(Debug, Clone)]
pub struct BiasProbe {
    pub short: Trajectory,
    pub long: Trajectory,
    /// Number of turns the two trajectories share.
    pub prefix_turns: usize,
    pub turn: usize,
    /// Advantage assigned to every token of both trajectories.
    pub advantage: f64,
}

impl BiasProbe {
    pub fn new(short: Trajectory, long: Trajectory, prefix_turns: usize, turn: usize, advantage: f64) -> Result<BiasProbe> {
        let (ts, tl) = (short.num_turns(), long.num_turns());
        if tl <= ts {
            return Err(Error::Contract(format!("long continuation has {tl} turns, short has {ts}")));
        }
        if short.outcome_reward != long.outcome_reward {
            return Err(Error::Contract("continuations must have equal reward".into()));
        }
        if short.question != long.question || short.steps()[..2 * prefix_turns] != long.steps()[..2 * prefix_turns] {
            return Err(Error::Contract(format!("continuations do not share a {prefix_turns}-turn prefix")));
        }
        if turn == 0 || turn > ts {
            return Err(Error::Range { index: turn, min: 1, max: ts });
        }
        Ok(BiasProbe {
            short,
            long,
            prefix_turns,
            turn,
            advantage,
        })
    }
}

/// Evaluates both contributions of `probe` and compares them.
pub fn verify_bias(
    policy: &FeaturizedPolicy,
    snapshot: &FeaturizedPolicy,
    probe: &BiasProbe,
    tolerance: f64,
) -> Result<BiasReport> {
    let zs = turn_contribution(policy, snapshot, &probe.short, probe.turn, probe.advantage)?;
    let zl = turn_contribution(policy, snapshot, &probe.long, probe.turn, probe.advantage)?;
    compare_contributions(&zs, &zl, probe.short.num_turns(), probe.long.num_turns(), tolerance)
}

fn random_digit<R: Rng + ?Sized>(rng: &mut R) -> Token {
    Token::digit(rng.gen_range(0..5))
}

fn instruction_turn<R: Rng + ?Sized>(rng: &mut R) -> [Step; 2] {
    let op = if rng.gen() { Token::PLUS } else { Token::TIMES };
    let reasoning_len = rng.gen_range(1..=3);
    let mut y: Vec<Token> = (0..reasoning_len - 1).map(|_| Token(rng.gen_range(10..12))).collect();
    y.push(random_digit(rng));
    [Step::new(Role::Meta, vec![op, random_digit(rng)]), Step::new(Role::Reasoning, y)]
}

fn finishing_turn(answer: Token) -> [Step; 2] {
    [
        Step::new(Role::Meta, vec![Token::FINISH, Token::END]),
        Step::new(Role::Reasoning, vec![answer]),
    ]
}

/// Scripted probe: a random shared prefix, then a short and a long
/// continuation that both end with the same answer.
pub fn random_probe<R: Rng + ?Sized>(rng: &mut R) -> Result<BiasProbe> {
    let t_short = rng.gen_range(2..=4);
    let t_long = rng.gen_range(t_short + 1..=t_short + 4);
    let prefix_turns = rng.gen_range(0..t_short);
    let turn = rng.gen_range(prefix_turns + 1..=t_short);
    let question = vec![random_digit(rng), Token::PLUS, random_digit(rng), Token::TIMES, random_digit(rng)];
    let answer = random_digit(rng);
    let prefix: Vec<Step> = (0..prefix_turns).flat_map(|_| instruction_turn(rng)).collect();
    let mut build = |turns: usize| {
        let mut steps = prefix.clone();
        steps.extend((prefix_turns..turns - 1).flat_map(|_| instruction_turn(rng)));
        steps.extend(finishing_turn(answer));
        Trajectory::new(question.clone(), steps, 1.0, vec![])
    };
    let short = build(t_short)?;
    let long = build(t_long)?;
    let advantage = rng.gen_range(0.2..2.0) * if rng.gen() { 1.0 } else { -1.0 };
    BiasProbe::new(short, long, prefix_turns, turn, advantage)
}

/// A live policy and a nearby snapshot with random weights.
pub fn random_policies<R: Rng + ?Sized>(rng: &mut R, spec: FeaturizerSpec) -> Result<(FeaturizedPolicy, FeaturizedPolicy)> {
    let mut snapshot = FeaturizedPolicy::zeros(spec);
    for v in snapshot.weights_mut().data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut live = snapshot.clone();
    for v in live.weights_mut().data_mut() {
        *v += rng.gen_range(-0.1..0.1);
    }
    Ok((live, snapshot))
}

/// Runs `count` independent random probes derived from `seed`.
pub fn run_probes(count: usize, seed: u64, spec: FeaturizerSpec, tolerance: f64) -> Result<Vec<BiasReport>> {
    use rand::SeedableRng;
    crate::exec::try_map_range(count, |i| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::hashing::derive_seed(seed, &[i as u64]));
        let (live, snapshot) = random_policies(&mut rng, spec)?;
        let probe = random_probe(&mut rng)?;
        verify_bias(&live, &snapshot, &probe, tolerance)
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

/// CSV report, one row per probe.
pub fn write_report<W: Write>(out: W, reports: &[BiasReport], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "probe",
        "t_short",
        "t_long",
        "kappa",
        "measured_ratio",
        "predicted_ratio",
        "relative_error",
        "identity_holds",
        "premise",
        "inequality_holds",
        "config_hash",
    ])?;
    for (i, r) in reports.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.t_short.to_string(),
            r.t_long.to_string(),
            opt(r.kappa),
            opt(r.measured_ratio),
            opt(r.predicted_ratio),
            opt(r.relative_error),
            r.identity_holds.to_string(),
            r.premise.to_string(),
            r.inequality_holds.to_string(),
            config_hash.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::tests::{d, meta, reason};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> FeaturizerSpec {
        FeaturizerSpec { feature_dim: 32, ..Default::default() }
    }

    #[test]
    fn zero_advantage_gives_zero_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (live, snap) = random_policies(&mut rng, spec()).unwrap();
        let p = random_probe(&mut rng).unwrap();
        assert!(turn_contribution(&live, &snap, &p.short, p.turn, 0.0).unwrap().is_zero());
    }

    #[test]
    fn single_token_at_old_policy_is_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, _) = random_policies(&mut rng, spec()).unwrap();
        let tr = Trajectory::new(vec![d(1)], vec![meta(&[d(2)]), reason(&[d(3)])], 1.0, vec![]).unwrap();
        let z = turn_contribution(&p, &p, &tr, 1, 1.0).unwrap();
        assert_eq!(z, p.grad_logprob(&tr, 2, 0).unwrap());
    }

    #[test]
    fn contribution_matches_finite_differences_at_old_policy() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, snap) = random_policies(&mut rng, spec()).unwrap();
            let probe = random_probe(&mut rng).unwrap();
            let a = probe.advantage;
            let z = turn_contribution(&snap, &snap, &probe.long, probe.turn, a).unwrap();
            let h = 1e-5;
            let f = |w: &ParamMatrix| {
                let p = FeaturizedPolicy::from_weights(spec(), w.clone()).unwrap();
                a * turn_ratio(&p, &snap, &probe.long, probe.turn).unwrap()
            };
            let mut max_err: f64 = 0.0;
            for k in 0..z.data().len() {
                let mut w = snap.weights().clone();
                w.data_mut()[k] += h;
                let up = f(&w);
                w.data_mut()[k] -= 2.0 * h;
                let down = f(&w);
                max_err = max_err.max(((up - down) / (2.0 * h) - z.data()[k]).abs());
            }
            assert!(max_err / z.max_abs() < 1e-6, "seed {seed}: {max_err}");
        }
    }

    #[test]
    fn g_scales_with_horizon() {
        let mut z = ParamMatrix::zeros(2, 2);
        z.set(0, 1, 3.0);
        z.set(1, 0, -4.0);
        assert_eq!(gradient_contribution(&z, 1).unwrap(), z);
        let g2 = gradient_contribution(&z, 2).unwrap();
        assert_eq!(g2.frobenius_norm(), z.frobenius_norm() / 2.0);
        assert_eq!(gradient_contribution(&z, 4).unwrap().frobenius_norm() * 2.0, g2.frobenius_norm());
        assert!(gradient_contribution(&z, 0).is_err());
    }

    #[test]
    fn substitution_examples() {
        let mut z = ParamMatrix::zeros(1, 2);
        z.set(0, 0, 1.0);
        let r = compare_contributions(&z, &z, 1, 2, 1e-12).unwrap();
        assert_eq!((r.kappa, r.measured_ratio), (Some(1.0), Some(2.0)));
        assert!(r.premise && r.inequality_holds && r.identity_holds);
        let z2 = z.scaled(2.0);
        let b = compare_contributions(&z, &z2, 2, 4, 1e-12).unwrap();
        assert_eq!((b.kappa, b.measured_ratio), (Some(2.0), Some(1.0)));
        assert!(!b.premise && b.inequality_holds);
        let zero = ParamMatrix::zeros(1, 2);
        let u = compare_contributions(&zero, &z, 1, 2, 1e-9).unwrap();
        assert_eq!(u.kappa, None);
        assert!(!u.identity_holds);
    }

    #[test]
    fn random_probes_satisfy_identity() {
        let reports = run_probes(50, 7, spec(), 1e-9).unwrap();
        assert!(reports.iter().all(|r| r.identity_holds && r.inequality_holds));
        assert!(reports.iter().any(|r| r.kappa.unwrap() != 1.0));
        assert_eq!(reports, run_probes(50, 7, spec(), 1e-9).unwrap());
    }

    #[test]
    fn probe_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_probe(&mut rng).unwrap();
        assert!(BiasProbe::new(p.long.clone(), p.short.clone(), 0, 1, 1.0).is_err());
        assert!(BiasProbe::new(p.short.clone(), p.long.clone(), p.prefix_turns, 0, 1.0).is_err());
    }
}
