//! Questions, steps, trajectories, rollout groups and history masking.
//!
//! Steps are addressed by their 1-based flat index in the sequence
//! `s_1 .. s_2T`, where odd indices are meta steps and even indices are
//! reasoning steps. Turn `t` consists of `s_{2t-1}` and `s_{2t}`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Meta,
    Reasoning,
}

impl Role {
    /// Role that owns flat index `flat` (1-based).
    pub fn of_flat(flat: usize) -> Role {
        if flat % 2 == 1 {
            Role::Meta
        } else {
            Role::Reasoning
        }
    }

    pub fn flag(self) -> Token {
        match self {
            Role::Meta => Token::META_FLAG,
            Role::Reasoning => Token::REASON_FLAG,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Meta => "meta",
            Role::Reasoning => "reasoning",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub role: Role,
    pub tokens: Vec<Token>,
    /// Log-probability of each token under the policy that generated it.
    pub logprobs: Vec<f64>,
    /// 1-based turn index, assigned by [`flatten`].
    pub turn: usize,
    /// 1-based position in the flattened sequence, assigned by [`flatten`].
    pub flat_index: usize,
    /// Sampling stopped at the role's token budget instead of a terminator.
    pub truncated: bool,
    /// Inserted by the environment (distractor instruction), not chosen by an agent.
    pub injected: bool,
}

impl Step {
    /// A step with unrecorded (zero) log-probabilities.
    pub fn new(role: Role, tokens: Vec<Token>) -> Step {
        let logprobs = vec![0.0; tokens.len()];
        Step::with_logprobs(role, tokens, logprobs)
    }

    pub fn with_logprobs(role: Role, tokens: Vec<Token>, logprobs: Vec<f64>) -> Step {
        Step {
            role,
            tokens,
            logprobs,
            turn: 0,
            flat_index: 0,
            truncated: false,
            injected: false,
        }
    }

    pub fn is_empty_marker(&self) -> bool {
        self.tokens == [Token::EMPTY]
    }

    pub fn starts_with_restart(&self) -> bool {
        self.tokens.first() == Some(&Token::RESTART)
    }
}

/// Assigns flat and turn indices to steps given in generation order.
///
/// The sequence must alternate meta/reasoning starting with meta and end
/// with a reasoning step.
pub fn flatten(steps: Vec<Step>) -> Result<Vec<Step>> {
    let mut out = Vec::with_capacity(steps.len());
    for (i, mut step) in steps.into_iter().enumerate() {
        let flat = i + 1;
        let expected = Role::of_flat(flat);
        if step.role != expected {
            return Err(Error::Structure {
                index: flat,
                expected,
                found: step.role,
            });
        }
        if step.tokens.is_empty() {
            return Err(Error::Contract(format!("step {flat} has no tokens")));
        }
        if step.logprobs.len() != step.tokens.len() {
            return Err(Error::Contract(format!(
                "step {flat}: {} log-probs for {} tokens",
                step.logprobs.len(),
                step.tokens.len()
            )));
        }
        step.flat_index = flat;
        step.turn = flat.div_ceil(2);
        out.push(step);
    }
    if out.is_empty() || out.len() % 2 == 1 {
        return Err(Error::Contract(format!(
            "a trajectory needs a positive even number of steps, got {}",
            out.len()
        )));
    }
    Ok(out)
}

/// Inverse of [`flatten`]: pairs steps into `(meta, reasoning)` turns.
pub fn unflatten(steps: &[Step]) -> Result<Vec<(Step, Step)>> {
    let flat = flatten(steps.to_vec())?;
    Ok(flat
        .chunks_exact(2)
        .map(|pair| (pair[0].clone(), pair[1].clone()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub question: Vec<Token>,
    steps: Vec<Step>,
    /// Verifier outcome in {0, 1}.
    pub outcome_reward: f64,
    /// Turns whose reasoning step begins with `RESTART`, ascending.
    pub restart_turns: Vec<usize>,
    /// The episode hit the turn limit without the meta agent finishing.
    pub truncated: bool,
}

impl Trajectory {
    pub fn new(
        question: Vec<Token>,
        steps: Vec<Step>,
        outcome_reward: f64,
        restart_turns: Vec<usize>,
    ) -> Result<Trajectory> {
        let steps = flatten(steps)?;
        if question.iter().any(|t| t.is_role_flag()) {
            return Err(Error::Contract("question contains a role flag token".into()));
        }
        if outcome_reward != 0.0 && outcome_reward != 1.0 {
            return Err(Error::Contract(format!(
                "outcome reward must be 0 or 1, got {outcome_reward}"
            )));
        }
        let turns = steps.len() / 2;
        let mut restart_turns = restart_turns;
        restart_turns.sort_unstable();
        restart_turns.dedup();
        for &t in &restart_turns {
            if t == 0 || t > turns {
                return Err(Error::Range {
                    index: t,
                    min: 1,
                    max: turns,
                });
            }
            if !steps[2 * t - 1].starts_with_restart() {
                return Err(Error::Contract(format!(
                    "turn {t} is listed as a restart but its reasoning step does not begin with RESTART"
                )));
            }
        }
        Ok(Trajectory {
            question,
            steps,
            outcome_reward,
            restart_turns,
            truncated: false,
        })
    }

    /// Flattened steps `s_1 .. s_2T`.
    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn num_turns(&self) -> usize {
        self.steps.len() / 2
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, flat: usize) -> Result<&Step> {
        if flat == 0 || flat > self.steps.len() {
            return Err(Error::Range {
                index: flat,
                min: 1,
                max: self.steps.len(),
            });
        }
        Ok(&self.steps[flat - 1])
    }

    pub fn meta(&self, turn: usize) -> Result<&Step> {
        self.step(2 * turn - 1)
    }

    pub fn reasoning(&self, turn: usize) -> Result<&Step> {
        self.step(2 * turn)
    }

    pub fn final_step(&self) -> &Step {
        self.steps.last().expect("trajectory has at least one turn")
    }

    /// Replaces the stored per-token log-probabilities.
    pub fn set_logprobs(&mut self, flat: usize, logprobs: Vec<f64>) -> Result<()> {
        let step = self.step(flat)?;
        if logprobs.len() != step.tokens.len() {
            return Err(Error::Contract("log-prob count does not match tokens".into()));
        }
        self.steps[flat - 1].logprobs = logprobs;
        Ok(())
    }

    /// Latest restart turn in effect for token `pos` of the reasoning step
    /// of `turn`. The `RESTART` token itself is produced from the unmasked
    /// history; masking applies from the following token on.
    fn active_restart(&self, turn: usize, pos: usize) -> Option<usize> {
        self.restart_turns
            .iter()
            .rev()
            .copied()
            .find(|&r| r < turn || (r == turn && pos >= 1))
    }

    /// History mask under which token `pos` of step `flat` was generated.
    pub fn generation_mask(&self, flat: usize, pos: usize) -> MaskedHistory {
        if Role::of_flat(flat) == Role::Meta {
            return MaskedHistory::empty();
        }
        match self.active_restart(flat / 2, pos) {
            Some(r) => MaskedHistory::reasoning_before_turn(r),
            None => MaskedHistory::empty(),
        }
    }
}

/// A set of flat step indices removed from the history.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskedHistory {
    masked: BTreeSet<usize>,
}

impl MaskedHistory {
    pub fn empty() -> MaskedHistory {
        MaskedHistory::default()
    }

    /// Validates indices against `base` (each must be in `1..=2T`).
    pub fn new(base: &Trajectory, indices: impl IntoIterator<Item = usize>) -> Result<MaskedHistory> {
        let max = base.num_steps();
        let mut masked = BTreeSet::new();
        for i in indices {
            if i == 0 || i > max {
                return Err(Error::Range { index: i, min: 1, max });
            }
            masked.insert(i);
        }
        Ok(MaskedHistory { masked })
    }

    pub fn single(flat: usize) -> MaskedHistory {
        MaskedHistory {
            masked: BTreeSet::from([flat]),
        }
    }

    /// All reasoning outputs strictly before turn `turn`: even indices `< 2*turn`.
    pub fn reasoning_before_turn(turn: usize) -> MaskedHistory {
        MaskedHistory {
            masked: (1..turn).map(|t| 2 * t).collect(),
        }
    }

    pub fn union(&self, other: &MaskedHistory) -> MaskedHistory {
        MaskedHistory {
            masked: self.masked.union(&other.masked).copied().collect(),
        }
    }

    pub fn contains(&self, flat: usize) -> bool {
        self.masked.contains(&flat)
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked.iter().copied()
    }
}

/// Context preceding step `upto_flat + 1`: question, the role flag of the
/// agent acting next, then every unmasked step with flat index `<= upto_flat`.
pub fn build_context(
    trajectory: &Trajectory,
    upto_flat: usize,
    mask: Option<&MaskedHistory>,
) -> Result<Vec<Token>> {
    if upto_flat > trajectory.num_steps() {
        return Err(Error::Range {
            index: upto_flat,
            min: 0,
            max: trajectory.num_steps(),
        });
    }
    Ok(assemble_context(
        &trajectory.question,
        &trajectory.steps()[..upto_flat],
        Role::of_flat(upto_flat + 1),
        mask,
    ))
}

/// Context assembly shared by complete and in-progress trajectories.
/// `steps[i]` is taken to have flat index `i + 1`.
pub(crate) fn assemble_context(
    question: &[Token],
    steps: &[Step],
    next_role: Role,
    mask: Option<&MaskedHistory>,
) -> Vec<Token> {
    let mut ctx = Vec::with_capacity(question.len() + 1 + 4 * steps.len());
    ctx.extend_from_slice(question);
    ctx.push(next_role.flag());
    for (i, step) in steps.iter().enumerate() {
        if mask.is_some_and(|m| m.contains(i + 1)) {
            continue;
        }
        ctx.extend_from_slice(&step.tokens);
    }
    ctx
}

/// How the per-token contexts of a step are assembled.
#[derive(Debug, Clone, Copy)]
pub enum ContextView<'a> {
    /// The contexts seen at generation time (restart-aware), with `extra`
    /// steps additionally removed.
    Generation { extra: Option<&'a MaskedHistory> },
    /// One mask applied to every token of the step.
    Fixed(Option<&'a MaskedHistory>),
}

impl ContextView<'_> {
    pub const GENERATION: ContextView<'static> = ContextView::Generation { extra: None };
}

/// Context for every token position of step `flat`: history context
/// followed by the step's own earlier tokens.
pub fn step_contexts(
    trajectory: &Trajectory,
    flat: usize,
    view: ContextView<'_>,
) -> Result<Vec<Vec<Token>>> {
    let step = trajectory.step(flat)?;
    let mut out = Vec::with_capacity(step.tokens.len());
    let mut cached: Option<(MaskedHistory, Vec<Token>)> = None;
    for pos in 0..step.tokens.len() {
        let mask = match view {
            ContextView::Fixed(m) => m.cloned().unwrap_or_default(),
            ContextView::Generation { extra } => {
                let g = trajectory.generation_mask(flat, pos);
                match extra {
                    Some(e) => g.union(e),
                    None => g,
                }
            }
        };
        let base = match &cached {
            Some((m, ctx)) if *m == mask => ctx.clone(),
            _ => {
                let ctx = build_context(trajectory, flat - 1, Some(&mask))?;
                cached = Some((mask, ctx.clone()));
                ctx
            }
        };
        let mut ctx = base;
        ctx.extend_from_slice(&step.tokens[..pos]);
        out.push(ctx);
    }
    Ok(out)
}

/// The `G` trajectories sampled for one question.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub question: Vec<Token>,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<RolloutGroup> {
        if trajectories.len() < 2 {
            return Err(Error::Contract(format!(
                "a rollout group needs at least 2 trajectories, got {}",
                trajectories.len()
            )));
        }
        let question = trajectories[0].question.clone();
        if let Some(i) = trajectories.iter().position(|t| t.question != question) {
            return Err(Error::Contract(format!(
                "trajectory {i} does not share the group's question"
            )));
        }
        Ok(RolloutGroup {
            question,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.outcome_reward).collect()
    }
}
