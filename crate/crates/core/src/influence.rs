//! Step-level influence signals computed by removing steps from the context.
//!
//! * `delta_ell(t)`: change in log-probability of step `t + 1` when step `t`
//!   is removed from its context (`log p_masked - log p_full`). Negative
//!   values mean the step helped produce its successor.
//! * causal influence: the mean `delta_ell` over a group of similar steps of
//!   the same role across a rollout group.
//! * `kl_influence(t)`: summed KL between the successor's next-token
//!   distributions with and without step `t`; a diagnostic only.
//! * restart signals: how removing the reasoning history before a restart
//!   changes the confidence in the final step, signed by correctness.
//!
//! Everything here is evaluated under a frozen snapshot of the policy.

use serde::{Deserialize, Serialize};

use crate::episode::{step_contexts, ContextView, MaskedHistory, Role, RolloutGroup, Step, Trajectory};
use crate::error::{Error, Result};
use crate::hashing::hash_words;
use crate::policy::{categorical_kl, FeaturizedPolicy};
use crate::vocab::Token;

/// Default cosine threshold for grouping similar steps.
pub const DEFAULT_SIMILARITY: f64 = 0.9;

fn successor_check(trajectory: &Trajectory, flat: usize) -> Result<()> {
    let last = trajectory.num_steps();
    if flat == 0 || flat >= last {
        return Err(Error::Range {
            index: flat,
            min: 1,
            max: last.saturating_sub(1),
        });
    }
    Ok(())
}

/// `(delta_ell, kl_influence)` of step `flat` in one pass over its successor.
pub fn probe_step(snapshot: &FeaturizedPolicy, trajectory: &Trajectory, flat: usize) -> Result<(f64, f64)> {
    successor_check(trajectory, flat)?;
    masked_effect(snapshot, trajectory, &MaskedHistory::single(flat), flat + 1)
}

/// Effect on step `target` of additionally removing `mask` from its
/// generation contexts: `(log p_masked - log p_full, summed KL(p_full || p_masked))`.
pub fn masked_effect(
    snapshot: &FeaturizedPolicy,
    trajectory: &Trajectory,
    mask: &MaskedHistory,
    target: usize,
) -> Result<(f64, f64)> {
    if let Some(m) = mask.indices().find(|&m| m >= target) {
        return Err(Error::Contract(format!("masked step {m} does not precede step {target}")));
    }
    let full = step_contexts(trajectory, target, ContextView::GENERATION)?;
    let masked = step_contexts(trajectory, target, ContextView::Generation { extra: Some(mask) })?;
    let tokens = &trajectory.step(target)?.tokens;
    let (mut lp_full, mut lp_masked, mut kl) = (0.0, 0.0, 0.0);
    for ((cf, cm), tok) in full.iter().zip(&masked).zip(tokens) {
        if cf == cm {
            continue;
        }
        let pf = snapshot.log_distribution(cf)?;
        let pm = snapshot.log_distribution(cm)?;
        lp_full += pf[tok.index()];
        lp_masked += pm[tok.index()];
        kl += categorical_kl(&pf, &pm);
    }
    Ok((lp_masked - lp_full, kl))
}

/// One-step causal influence of step `flat`; needs a successor.
pub fn delta_ell(snapshot: &FeaturizedPolicy, trajectory: &Trajectory, flat: usize) -> Result<f64> {
    Ok(probe_step(snapshot, trajectory, flat)?.0)
}

/// Sum over the successor's positions of `KL(p_full || p_masked)`.
pub fn kl_influence(snapshot: &FeaturizedPolicy, trajectory: &Trajectory, flat: usize) -> Result<f64> {
    Ok(probe_step(snapshot, trajectory, flat)?.1)
}

/// `log pi(s_2T | reasoning before turn masked) - log pi(s_2T | full history)`
/// for a restart issued at `turn`.
pub fn restart_delta(snapshot: &FeaturizedPolicy, trajectory: &Trajectory, turn: usize) -> Result<f64> {
    if !trajectory.restart_turns.contains(&turn) {
        return Err(Error::Contract(format!("turn {turn} did not issue a restart")));
    }
    let last = trajectory.num_steps();
    let mask = MaskedHistory::reasoning_before_turn(turn);
    if mask.is_empty() {
        return Ok(0.0);
    }
    let full = snapshot.logprob_of_step(trajectory, last, None)?;
    let masked = snapshot.logprob_of_step(trajectory, last, Some(&mask))?;
    Ok(masked - full)
}

/// `+1` for a correct outcome, `-1` otherwise.
pub fn outcome_sign(outcome_reward: f64) -> i8 {
    if outcome_reward > 0.0 {
        1
    } else {
        -1
    }
}

/// Restart reward: rewards a restart that raises confidence in a correct
/// answer or lowers it in a wrong one.
pub fn restart_reward(delta: f64, z: i8) -> Result<i8> {
    if z != 1 && z != -1 {
        return Err(Error::Contract(format!("outcome sign must be +1 or -1, got {z}")));
    }
    Ok(if delta > 0.0 {
        z
    } else if delta < 0.0 {
        -z
    } else {
        0
    })
}

/// L2-normalised hashed bigram counts of a step, with begin/end markers.
/// Stored as `(bucket, weight)` pairs sorted by bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEmbedding {
    entries: Vec<(u64, f64)>,
}

const BOUNDARY: u64 = u16::MAX as u64 + 1;
/// Bucket reserved for steps consisting of the `EMPTY` marker.
const EMPTY_BUCKET: u64 = u64::MAX;

impl StepEmbedding {
    pub fn of_tokens(tokens: &[Token]) -> StepEmbedding {
        if tokens == [Token::EMPTY] {
            return StepEmbedding {
                entries: vec![(EMPTY_BUCKET, 1.0)],
            };
        }
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOUNDARY);
        ids.extend(tokens.iter().map(|t| t.0 as u64));
        ids.push(BOUNDARY + 1);
        let mut keys: Vec<u64> = ids
            .windows(2)
            .map(|w| hash_words(&[w[0], w[1]]) % (EMPTY_BUCKET - 1))
            .collect();
        keys.sort_unstable();
        let mut entries: Vec<(u64, f64)> = Vec::with_capacity(keys.len());
        for k in keys {
            match entries.last_mut() {
                Some((last, c)) if *last == k => *c += 1.0,
                _ => entries.push((k, 1.0)),
            }
        }
        let norm = entries.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
        entries.iter_mut().for_each(|(_, c)| *c /= norm);
        StepEmbedding { entries }
    }

    pub fn of_step(step: &Step) -> StepEmbedding {
        StepEmbedding::of_tokens(&step.tokens)
    }

    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, c)| c * c).sum::<f64>().sqrt()
    }

    /// Dot product of two unit vectors.
    pub fn cosine(&self, other: &StepEmbedding) -> f64 {
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        dot
    }
}

/// For each anchor, indices of all same-role items whose embedding has
/// cosine similarity at least `threshold` with it (the anchor included),
/// in ascending order.
pub fn group_steps(items: &[(Role, StepEmbedding)], threshold: f64) -> Result<Vec<Vec<usize>>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("similarity threshold must be in (0, 1], got {threshold}")));
    }
    Ok(items
        .iter()
        .enumerate()
        .map(|(a, (role, emb))| {
            items
                .iter()
                .enumerate()
                .filter(|(b, (r, e))| *b == a || (r == role && emb.cosine(e) >= threshold))
                .map(|(b, _)| b)
                .collect()
        })
        .collect())
}

/// Mean of the defined `delta_ell` values of `members`, summed in the given
/// order; `None` when no member has one.
pub fn causal_influence(members: &[usize], deltas: &[Option<f64>]) -> Option<f64> {
    let (sum, n) = members
        .iter()
        .filter_map(|&m| deltas[m])
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfluenceRecord {
    pub trajectory: usize,
    pub flat_index: usize,
    pub role: Role,
    /// Undefined for the final step.
    pub delta_ell: Option<f64>,
    pub group_size: usize,
    /// Reported as 0 where undefined.
    pub ci: f64,
    /// Whether `ci` had no defined group member to average over.
    pub ci_undefined: bool,
    pub kl_influence: f64,
    pub injected: bool,
}

/// Influence signals of every step of one rollout group.
#[derive(Debug, Clone)]
pub struct GroupInfluence {
    /// `records[i][s]` describes step `s + 1` of trajectory `i`.
    pub records: Vec<Vec<StepInfluenceRecord>>,
    /// `restart[i][s]`: restart reward of step `s + 1`, 0 where none.
    pub restart: Vec<Vec<f64>>,
    /// Restart deltas in (trajectory, turn) order.
    pub restart_deltas: Vec<(usize, usize, f64)>,
}

impl GroupInfluence {
    /// Causal influence per step, `None` where it is undefined.
    pub fn causal_signal(&self, flip_sign: bool) -> Vec<Vec<Option<f64>>> {
        let sign = if flip_sign { -1.0 } else { 1.0 };
        self.records
            .iter()
            .map(|steps| {
                steps
                    .iter()
                    .map(|r| (!r.ci_undefined && r.delta_ell.is_some()).then_some(sign * r.ci))
                    .collect()
            })
            .collect()
    }
}

/// Computes `delta_ell`, causal influence, KL influence and restart rewards
/// for every step of `group`.
pub fn analyze_group(snapshot: &FeaturizedPolicy, group: &RolloutGroup, threshold: f64) -> Result<GroupInfluence> {
    let mut keys = Vec::new();
    let mut items = Vec::new();
    let mut deltas = Vec::new();
    let mut kls = Vec::new();
    for (i, traj) in group.trajectories.iter().enumerate() {
        for step in traj.steps() {
            let flat = step.flat_index;
            let (d, kl) = if flat < traj.num_steps() {
                let (d, kl) = probe_step(snapshot, traj, flat)?;
                (Some(d), kl)
            } else {
                (None, 0.0)
            };
            keys.push((i, flat));
            items.push((step.role, StepEmbedding::of_step(step)));
            deltas.push(d);
            kls.push(kl);
        }
    }
    let groups = group_steps(&items, threshold)?;
    let mut records: Vec<Vec<StepInfluenceRecord>> = group
        .trajectories
        .iter()
        .map(|t| Vec::with_capacity(t.num_steps()))
        .collect();
    for (k, &(i, flat)) in keys.iter().enumerate() {
        let step = group.trajectories[i].step(flat)?;
        let ci = if deltas[k].is_some() {
            causal_influence(&groups[k], &deltas)
        } else {
            None
        };
        records[i].push(StepInfluenceRecord {
            trajectory: i,
            flat_index: flat,
            role: step.role,
            delta_ell: deltas[k],
            group_size: groups[k].len(),
            ci: ci.unwrap_or(0.0),
            ci_undefined: ci.is_none(),
            kl_influence: kls[k],
            injected: step.injected,
        });
    }
    let mut restart = Vec::with_capacity(group.len());
    let mut restart_deltas = Vec::new();
    for (i, traj) in group.trajectories.iter().enumerate() {
        let mut row = vec![0.0; traj.num_steps()];
        let z = outcome_sign(traj.outcome_reward);
        for &turn in &traj.restart_turns {
            let d = restart_delta(snapshot, traj, turn)?;
            row[2 * turn - 1] = f64::from(restart_reward(d, z)?);
            restart_deltas.push((i, turn, d));
        }
        restart.push(row);
    }
    Ok(GroupInfluence {
        records,
        restart,
        restart_deltas,
    })
}

/// Per-role mean of a step statistic over all steps of that role; 0 for a
/// role with no steps.
pub fn role_means<'a, I, F>(records: I, stat: F) -> (f64, f64)
where
    I: IntoIterator<Item = &'a StepInfluenceRecord>,
    F: Fn(&StepInfluenceRecord) -> f64,
{
    let mut acc = [(0.0, 0usize); 2];
    for r in records {
        let slot = &mut acc[usize::from(r.role == Role::Reasoning)];
        slot.0 += stat(r);
        slot.1 += 1;
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(acc[0]), mean(acc[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::tests::{d, meta, reason};
    use crate::policy::FeaturizerSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(seed: u64) -> FeaturizedPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FeaturizedPolicy::zeros(FeaturizerSpec { feature_dim: 64, ..Default::default() });
        for v in p.weights_mut().data_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        p
    }

    fn long_trajectory() -> Trajectory {
        // Eight single-token steps after a one-token question: step 1 lies
        // outside the 8-token window of step 8's context.
        let steps = (0..8)
            .map(|i| if i % 2 == 0 { meta(&[d(i as u8)]) } else { reason(&[d(i as u8)]) })
            .collect();
        Trajectory::new(vec![d(9)], steps, 1.0, vec![]).unwrap()
    }

    #[test]
    fn duplicate_step_has_no_influence() {
        // Periodic history: removing one copy leaves the window unchanged.
        let p = random_policy(5);
        let steps = (0..10).map(|i| if i % 2 == 0 { meta(&[d(3)]) } else { reason(&[d(3)]) }).collect();
        let tr = Trajectory::new(vec![d(3)], steps, 1.0, vec![]).unwrap();
        assert_eq!(delta_ell(&p, &tr, 9).unwrap(), 0.0);
    }

    #[test]
    fn window_external_step_has_no_influence() {
        let p = random_policy(1);
        let mut steps: Vec<Step> = long_trajectory().steps().to_vec();
        // Lengthen the steps so step 1 falls out of step 10's window.
        steps.push(meta(&[d(1), d(2)]));
        steps.push(reason(&[d(3), d(4)]));
        let tr = Trajectory::new(vec![d(9)], steps, 1.0, vec![]).unwrap();
        let m = MaskedHistory::single(1);
        assert_eq!(masked_effect(&p, &tr, &m, 10).unwrap(), (0.0, 0.0));
        let (d, kl) = masked_effect(&p, &tr, &MaskedHistory::single(9), 10).unwrap();
        assert_ne!(d, 0.0);
        assert!(kl > 0.0);
        assert_eq!(d, delta_ell(&p, &tr, 9).unwrap());
        assert!(masked_effect(&p, &tr, &MaskedHistory::single(10), 10).is_err());
    }

    #[test]
    fn final_step_has_no_successor() {
        let p = random_policy(2);
        let tr = long_trajectory();
        assert!(matches!(delta_ell(&p, &tr, 8), Err(Error::Range { .. })));
    }

    #[test]
    fn zero_policy_has_zero_kl() {
        let p = FeaturizedPolicy::zeros(FeaturizerSpec::default());
        let tr = long_trajectory();
        for f in 1..8 {
            assert_eq!(kl_influence(&p, &tr, f).unwrap(), 0.0);
            assert_eq!(delta_ell(&p, &tr, f).unwrap(), 0.0);
        }
    }

    #[test]
    fn restart_reward_table() {
        assert_eq!(restart_reward(0.3, 1).unwrap(), 1);
        assert_eq!(restart_reward(-0.3, 1).unwrap(), -1);
        assert_eq!(restart_reward(0.3, -1).unwrap(), -1);
        assert_eq!(restart_reward(-0.3, -1).unwrap(), 1);
        assert_eq!(restart_reward(0.0, 1).unwrap(), 0);
        assert_eq!(restart_reward(0.0, -1).unwrap(), 0);
        assert!(restart_reward(0.1, 0).is_err());
    }

    #[test]
    fn restart_at_first_turn_is_neutral() {
        let p = random_policy(3);
        let tr = Trajectory::new(
            vec![d(1)],
            vec![meta(&[d(1)]), reason(&[Token::RESTART, d(2)]), meta(&[Token::FINISH, Token::END]), reason(&[d(2)])],
            1.0,
            vec![1],
        )
        .unwrap();
        assert_eq!(restart_delta(&p, &tr, 1).unwrap(), 0.0);
        assert!(matches!(restart_delta(&p, &tr, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn embedding_examples() {
        let a = StepEmbedding::of_tokens(&[d(1), d(2)]);
        assert!((a.norm() - 1.0).abs() < 1e-15);
        assert!((a.cosine(&StepEmbedding::of_tokens(&[d(1), d(2)])) - 1.0).abs() < 1e-15);
        let empty = StepEmbedding::of_tokens(&[Token::EMPTY]);
        assert_eq!(empty.norm(), 1.0);
        assert_eq!(a.cosine(&empty), 0.0);
        // [1 2] has bigrams {B1, 12, 2E}; [1 2 3] has {B1, 12, 23, 3E}.
        let b = StepEmbedding::of_tokens(&[d(1), d(2), d(3)]);
        let expect = 2.0 / (3f64.sqrt() * 2.0);
        assert!((a.cosine(&b) - expect).abs() < 1e-12);
        assert_eq!(StepEmbedding::of_tokens(&[d(4), d(5)]).cosine(&a), 0.0);
    }

    #[test]
    fn grouping_respects_role_and_threshold() {
        let e = |t: &[Token]| StepEmbedding::of_tokens(t);
        let items = vec![
            (Role::Meta, e(&[d(1), d(2)])),
            (Role::Reasoning, e(&[d(1), d(2)])),
            (Role::Meta, e(&[d(1), d(2)])),
            (Role::Meta, e(&[d(1), d(2), d(3)])),
        ];
        let g = group_steps(&items, 0.9).unwrap();
        assert_eq!(g[0], vec![0, 2]);
        assert_eq!(g[1], vec![1]);
        assert_eq!(g[3], vec![3]);
        let loose = group_steps(&items, 0.5).unwrap();
        assert_eq!(loose[3], vec![0, 2, 3]);
        assert!(group_steps(&items, 0.0).is_err());
    }

    #[test]
    fn ci_is_group_mean() {
        let deltas = [Some(0.2), Some(0.4), None];
        assert_eq!(causal_influence(&[0], &deltas), Some(0.2));
        assert!((causal_influence(&[0, 1, 2], &deltas).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(causal_influence(&[2], &deltas), None);
    }

    #[test]
    fn analyze_marks_final_steps() {
        let p = random_policy(4);
        let g = RolloutGroup::new(vec![long_trajectory(), long_trajectory()]).unwrap();
        let inf = analyze_group(&p, &g, DEFAULT_SIMILARITY).unwrap();
        for row in &inf.records {
            let last = row.last().unwrap();
            assert_eq!(last.delta_ell, None);
            assert_eq!(last.ci, 0.0);
            assert_eq!(last.kl_influence, 0.0);
            // Identical trajectories: every anchor's group has both copies.
            assert!(row.iter().all(|r| r.group_size >= 2));
            for r in &row[..row.len() - 1] {
                assert_eq!(r.ci, r.delta_ell.unwrap());
            }
        }
        assert!(inf.causal_signal(false)[0][7].is_none());
    }

    proptest! {
        #[test]
        fn restart_reward_is_antisymmetric(delta in -10.0f64..10.0) {
            prop_assume!(delta != 0.0);
            prop_assert_eq!(restart_reward(delta, 1).unwrap(), -restart_reward(delta, -1).unwrap());
        }

        #[test]
        fn kl_influence_nonnegative(seed in any::<u64>(), flat in 1usize..8) {
            let p = random_policy(seed);
            prop_assert!(kl_influence(&p, &long_trajectory(), flat).unwrap() >= 0.0);
        }

        #[test]
        fn embeddings_are_unit(tokens in proptest::collection::vec(0u16..24, 1..6)) {
            let toks: Vec<Token> = tokens.into_iter().map(Token).collect();
            let e = StepEmbedding::of_tokens(&toks);
            prop_assert!((e.norm() - 1.0).abs() < 1e-12);
            prop_assert!((e.cosine(&e) - 1.0).abs() < 1e-12);
        }
    }
}
