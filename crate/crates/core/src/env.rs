//! Synthetic verifiable arithmetic environment.
//!
//! A task is a left-folded chain `((a1 o1 a2) o2 a3) ... mod m` presented as
//! the token sequence `a1 o1 a2 o2 ... ak`. The meta agent speaks first in
//! every turn; the episode ends after the reasoning step that follows a
//! meta step containing `FINISH`, or at the turn limit. The answer is the
//! digit that closes the final reasoning step.
//!
//! A reasoning step that begins with `RESTART` discards the agent's own
//! earlier reasoning: from the token after `RESTART` on, and in every later
//! turn, reasoning contexts omit all reasoning steps of earlier turns while
//! keeping every meta step. Meta contexts are never masked.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{assemble_context, MaskedHistory, Role, Step, Trajectory};
use crate::error::{Error, Result};
use crate::policy::FeaturizedPolicy;
use crate::vocab::{Token, NUM_DIGITS, NUM_FILLERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Mul,
}

impl Op {
    pub fn apply(self, a: u8, b: u8, modulus: u8) -> u8 {
        let (a, b, m) = (a as u32, b as u32, modulus as u32);
        (match self {
            Op::Add => (a + b) % m,
            Op::Mul => (a * b) % m,
        }) as u8
    }

    pub fn token(self) -> Token {
        match self {
            Op::Add => Token::PLUS,
            Op::Mul => Token::TIMES,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Mul => "*",
        }
    }

    pub fn parse(s: &str) -> Option<Op> {
        match s {
            "+" => Some(Op::Add),
            "*" => Some(Op::Mul),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub operands: Vec<u8>,
    pub ops: Vec<Op>,
    pub modulus: u8,
    pub ground_truth: u8,
}

impl TaskInstance {
    pub fn new(operands: Vec<u8>, ops: Vec<Op>, modulus: u8) -> Result<TaskInstance> {
        if operands.len() < 2 {
            return Err(Error::Config(format!(
                "difficulty must be at least 2, got {}",
                operands.len()
            )));
        }
        if ops.len() + 1 != operands.len() {
            return Err(Error::Config("need exactly one operator between operands".into()));
        }
        if !(2..=NUM_DIGITS as u8).contains(&modulus) {
            return Err(Error::Config(format!("modulus must be in 2..=10, got {modulus}")));
        }
        if let Some(a) = operands.iter().find(|&&a| a >= modulus) {
            return Err(Error::Config(format!("operand {a} is not below modulus {modulus}")));
        }
        let ground_truth = fold(&operands, &ops, modulus);
        Ok(TaskInstance {
            operands,
            ops,
            modulus,
            ground_truth,
        })
    }

    pub fn difficulty(&self) -> usize {
        self.operands.len()
    }

    /// `a1 o1 a2 ... ak` as tokens.
    pub fn question(&self) -> Vec<Token> {
        let mut q = Vec::with_capacity(2 * self.operands.len() - 1);
        q.push(Token::digit(self.operands[0]));
        for (op, &a) in self.ops.iter().zip(&self.operands[1..]) {
            q.push(op.token());
            q.push(Token::digit(a));
        }
        q
    }

    /// Running values after each operation; the last one is the answer.
    pub fn partial_results(&self) -> Vec<u8> {
        let mut acc = self.operands[0];
        self.ops
            .iter()
            .zip(&self.operands[1..])
            .map(|(op, &a)| {
                acc = op.apply(acc, a, self.modulus);
                acc
            })
            .collect()
    }
}

fn fold(operands: &[u8], ops: &[Op], modulus: u8) -> u8 {
    ops.iter()
        .zip(&operands[1..])
        .fold(operands[0] % modulus, |acc, (op, &a)| op.apply(acc, a, modulus))
}

pub fn generate_task<R: Rng + ?Sized>(rng: &mut R, difficulty: usize, modulus: u8) -> Result<TaskInstance> {
    if difficulty < 2 {
        return Err(Error::Config(format!("difficulty must be at least 2, got {difficulty}")));
    }
    if !(2..=NUM_DIGITS as u8).contains(&modulus) {
        return Err(Error::Config(format!("modulus must be in 2..=10, got {modulus}")));
    }
    let operands = (0..difficulty).map(|_| rng.gen_range(0..modulus)).collect();
    let ops = (1..difficulty)
        .map(|_| if rng.gen::<bool>() { Op::Add } else { Op::Mul })
        .collect();
    TaskInstance::new(operands, ops, modulus)
}

/// Tasks drawn sequentially from one seeded stream.
pub fn generate_corpus(seed: u64, difficulty: usize, modulus: u8, size: usize) -> Result<Vec<TaskInstance>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..size).map(|_| generate_task(&mut rng, difficulty, modulus)).collect()
}

const CORPUS_HEADER: [&str; 4] = ["operands", "operators", "modulus", "ground_truth"];

/// Task corpus: CSV with header `operands,operators,modulus,ground_truth,config_hash`;
/// operands and operators are space-separated, e.g. `3 4 2,+ *,5,4,<hash>`.
/// `hash` identifies the generation settings.
pub fn write_corpus<W: Write>(out: W, tasks: &[TaskInstance], hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CORPUS_HEADER.iter().copied().chain(["config_hash"]))?;
    for t in tasks {
        let operands = t.operands.iter().map(u8::to_string).collect::<Vec<_>>().join(" ");
        let ops = t.ops.iter().map(|o| o.symbol()).collect::<Vec<_>>().join(" ");
        w.write_record([
            operands,
            ops,
            t.modulus.to_string(),
            t.ground_truth.to_string(),
            hash.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a corpus; the trailing `config_hash` column is optional.
pub fn read_corpus<R: Read>(input: R) -> Result<Vec<TaskInstance>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?;
    let hashed = header.len() == CORPUS_HEADER.len() + 1 && &header[CORPUS_HEADER.len()] == "config_hash";
    if header.iter().take(CORPUS_HEADER.len()).ne(CORPUS_HEADER) || !(hashed || header.len() == CORPUS_HEADER.len()) {
        return Err(Error::Format("unexpected task corpus header".into()));
    }
    let bad = |line: usize, what: &str| Error::Format(format!("corpus row {line}: bad {what}"));
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let operands = rec[0]
            .split(' ')
            .map(|s| s.parse::<u8>().map_err(|_| bad(i + 1, "operand")))
            .collect::<Result<Vec<_>>>()?;
        let ops = rec[1]
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| Op::parse(s).ok_or_else(|| bad(i + 1, "operator")))
            .collect::<Result<Vec<_>>>()?;
        let modulus = rec[2].parse::<u8>().map_err(|_| bad(i + 1, "modulus"))?;
        let truth = rec[3].parse::<u8>().map_err(|_| bad(i + 1, "ground truth"))?;
        let task = TaskInstance::new(operands, ops, modulus)?;
        if task.ground_truth != truth {
            return Err(Error::Format(format!(
                "corpus row {}: recorded ground truth {truth} disagrees with {}",
                i + 1,
                task.ground_truth
            )));
        }
        out.push(task);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    pub meta_max_tokens: usize,
    pub reasoning_max_tokens: usize,
    pub restart_enabled: bool,
    /// Probability per turn that the meta step is replaced by an injected
    /// distractor instruction `F_i END`.
    pub noise_rate: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            max_turns: 6,
            meta_max_tokens: 4,
            reasoning_max_tokens: 4,
            restart_enabled: true,
            noise_rate: 0.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_turns < 2 {
            return Err(Error::Config("max_turns must be at least 2".into()));
        }
        if self.meta_max_tokens == 0 || self.reasoning_max_tokens == 0 {
            return Err(Error::Config("per-role max_tokens must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config("noise_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn max_tokens(&self, role: Role) -> usize {
        match role {
            Role::Meta => self.meta_max_tokens,
            Role::Reasoning => self.reasoning_max_tokens,
        }
    }
}

/// The state an agent sees while an episode is being generated.
pub struct PartialEpisode<'a> {
    question: &'a [Token],
    steps: &'a [Step],
    restart_turns: &'a [usize],
    restart_enabled: bool,
}

impl<'a> PartialEpisode<'a> {
    pub fn question(&self) -> &[Token] {
        self.question
    }

    /// Steps generated so far, in flat order.
    pub fn steps(&self) -> &[Step] {
        self.steps
    }

    /// Turn of the step about to be generated.
    pub fn turn(&self) -> usize {
        self.steps.len() / 2 + 1
    }

    /// Context for the next token of the acting agent, given the tokens it
    /// has already emitted in this step.
    pub fn context(&self, role: Role, prefix: &[Token]) -> Vec<Token> {
        let mask = match role {
            Role::Meta => None,
            Role::Reasoning => {
                let current = self.restart_enabled && prefix.first() == Some(&Token::RESTART);
                let turn = if current {
                    Some(self.turn())
                } else {
                    self.restart_turns.last().copied()
                };
                turn.map(MaskedHistory::reasoning_before_turn)
            }
        };
        let mut ctx = assemble_context(self.question, self.steps, role, mask.as_ref());
        ctx.extend_from_slice(prefix);
        ctx
    }
}

/// Anything that can act in an episode.
pub trait Agent {
    fn act<R: Rng + ?Sized>(
        &self,
        episode: &PartialEpisode<'_>,
        role: Role,
        max_tokens: usize,
        rng: &mut R,
    ) -> Result<Step>;

    /// Log-probability of `token` at `context`, used to score injected steps.
    fn token_logprob(&self, context: &[Token], token: Token) -> Result<f64>;
}

impl Agent for FeaturizedPolicy {
    fn act<R: Rng + ?Sized>(
        &self,
        episode: &PartialEpisode<'_>,
        role: Role,
        max_tokens: usize,
        rng: &mut R,
    ) -> Result<Step> {
        self.sample_step_with(role, max_tokens, rng, |prefix| episode.context(role, prefix))
    }

    fn token_logprob(&self, context: &[Token], token: Token) -> Result<f64> {
        FeaturizedPolicy::token_logprob(self, context, token)
    }
}

/// Runs one episode and verifies its final answer.
pub fn run_episode<A, R>(agent: &A, task: &TaskInstance, config: &EpisodeConfig, rng: &mut R) -> Result<Trajectory>
where
    A: Agent + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let question = task.question();
    let mut steps: Vec<Step> = Vec::with_capacity(2 * config.max_turns);
    let mut restart_turns = Vec::new();
    let mut finished = false;
    for turn in 1..=config.max_turns {
        let view = PartialEpisode {
            question: &question,
            steps: &steps,
            restart_turns: &restart_turns,
            restart_enabled: config.restart_enabled,
        };
        let meta = if config.noise_rate > 0.0 && rng.gen::<f64>() < config.noise_rate {
            let tokens = vec![Token::filler(rng.gen_range(0..NUM_FILLERS)), Token::END];
            let mut logprobs = Vec::with_capacity(2);
            for pos in 0..tokens.len() {
                let ctx = view.context(Role::Meta, &tokens[..pos]);
                logprobs.push(agent.token_logprob(&ctx, tokens[pos])?);
            }
            let mut s = Step::with_logprobs(Role::Meta, tokens, logprobs);
            s.injected = true;
            s
        } else {
            agent.act(&view, Role::Meta, config.meta_max_tokens, rng)?
        };
        let finish = meta.tokens.contains(&Token::FINISH);
        steps.push(meta);

        let view = PartialEpisode {
            question: &question,
            steps: &steps,
            restart_turns: &restart_turns,
            restart_enabled: config.restart_enabled,
        };
        let reasoning = agent.act(&view, Role::Reasoning, config.reasoning_max_tokens, rng)?;
        if config.restart_enabled && reasoning.starts_with_restart() {
            restart_turns.push(turn);
        }
        steps.push(reasoning);
        if finish {
            finished = true;
            break;
        }
    }
    let answer = answer_token(steps.last().expect("at least one turn"));
    let reward = answer.map_or(0, |a| verify(a, task));
    let mut trajectory = Trajectory::new(question, steps, reward as f64, restart_turns)?;
    trajectory.truncated = !finished;
    Ok(trajectory)
}

/// The digit closing a step, if any.
pub fn answer_token(step: &Step) -> Option<Token> {
    step.tokens.last().copied().filter(|t| t.as_digit().is_some())
}

/// 1 iff `answer` is the digit equal to the ground truth.
pub fn verify(answer: Token, task: &TaskInstance) -> u8 {
    u8::from(answer.as_digit() == Some(task.ground_truth))
}

/// A trajectory is lazy when some reasoning step is `EMPTY` or repeats the
/// preceding meta step verbatim.
pub fn is_lazy(trajectory: &Trajectory) -> bool {
    trajectory.steps().chunks_exact(2).any(|turn| {
        let (meta, reasoning) = (&turn[0], &turn[1]);
        reasoning.is_empty_marker() || reasoning.tokens == meta.tokens
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnCountStats {
    /// Mean turn count of lazy trajectories; `None` when there are none.
    pub lazy_mean: Option<f64>,
    pub non_lazy_mean: Option<f64>,
    pub lazy_count: usize,
    pub non_lazy_count: usize,
}

pub fn turn_count_stats<'a, I>(trajectories: I) -> Result<TurnCountStats>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    let (mut ls, mut lc, mut ns, mut nc) = (0usize, 0usize, 0usize, 0usize);
    for t in trajectories {
        if is_lazy(t) {
            ls += t.num_turns();
            lc += 1;
        } else {
            ns += t.num_turns();
            nc += 1;
        }
    }
    if lc + nc == 0 {
        return Err(Error::Contract("turn statistics need at least one trajectory".into()));
    }
    let mean = |s: usize, c: usize| (c > 0).then(|| s as f64 / c as f64);
    Ok(TurnCountStats {
        lazy_mean: mean(ls, lc),
        non_lazy_mean: mean(ns, nc),
        lazy_count: lc,
        non_lazy_count: nc,
    })
}

/// Stochastic scripted behaviour for a task-aware agent.
///
/// The collaborative protocol for a chain of `k` operands is: the meta agent
/// issues `o_t a_{t+1}` for `t = 1..k-1` and the reasoning agent answers
/// with the running value; then the meta agent says `FINISH END` and the
/// reasoning agent repeats its last value. The shortcut protocol is the meta
/// agent answering `FINISH d` at once, which the reasoning agent copies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptBehavior {
    /// Probability that the meta agent takes the shortcut in turn 1.
    pub shortcut_rate: f64,
    /// Probability that a shortcut answer is correct.
    pub shortcut_accuracy: f64,
    /// Probability that an intermediate reasoning value is correct.
    pub step_accuracy: f64,
    /// Probability that the reasoning agent answers an instruction with `EMPTY`;
    /// the meta agent then takes over with a shortcut answer.
    pub empty_rate: f64,
    /// Probability that an intermediate reasoning step (turn >= 2) opens with `RESTART`.
    pub restart_rate: f64,
}

impl ScriptBehavior {
    /// Always follows the collaborative protocol without mistakes.
    pub fn perfect() -> ScriptBehavior {
        ScriptBehavior {
            shortcut_rate: 0.0,
            shortcut_accuracy: 1.0,
            step_accuracy: 1.0,
            empty_rate: 0.0,
            restart_rate: 0.0,
        }
    }
}

/// Task-aware agent following [`ScriptBehavior`]. Its log-probabilities are
/// undefined and recorded as zero.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    pub task: TaskInstance,
    pub behavior: ScriptBehavior,
}

impl ScriptedAgent {
    pub fn new(task: TaskInstance, behavior: ScriptBehavior) -> ScriptedAgent {
        ScriptedAgent { task, behavior }
    }

    fn guess<R: Rng + ?Sized>(&self, accuracy: f64, correct: u8, rng: &mut R) -> u8 {
        if rng.gen::<f64>() < accuracy {
            correct
        } else {
            rng.gen_range(0..self.task.modulus)
        }
    }
}

impl Agent for ScriptedAgent {
    fn act<R: Rng + ?Sized>(
        &self,
        episode: &PartialEpisode<'_>,
        role: Role,
        _max_tokens: usize,
        rng: &mut R,
    ) -> Result<Step> {
        let b = &self.behavior;
        let steps = episode.steps();
        let turn = episode.turn();
        let tokens = match role {
            Role::Meta => {
                let prev_empty = steps.last().is_some_and(Step::is_empty_marker);
                let instructions = self.task.ops.len();
                if prev_empty || (turn == 1 && rng.gen::<f64>() < b.shortcut_rate) {
                    let d = self.guess(b.shortcut_accuracy, self.task.ground_truth, rng);
                    vec![Token::FINISH, Token::digit(d)]
                } else if turn > instructions {
                    vec![Token::FINISH, Token::END]
                } else {
                    vec![
                        self.task.ops[turn - 1].token(),
                        Token::digit(self.task.operands[turn]),
                    ]
                }
            }
            Role::Reasoning => {
                let meta = steps.last().expect("meta acts first").tokens.clone();
                let last_value = steps
                    .iter()
                    .rev()
                    .filter(|s| s.role == Role::Reasoning)
                    .find_map(|s| answer_token(s).and_then(Token::as_digit));
                if meta.first() == Some(&Token::FINISH) {
                    if meta.get(1) == Some(&Token::END) {
                        let v = last_value.unwrap_or_else(|| rng.gen_range(0..self.task.modulus));
                        vec![Token::digit(v)]
                    } else {
                        meta
                    }
                } else if rng.gen::<f64>() < b.empty_rate {
                    vec![Token::EMPTY]
                } else {
                    let index = turn - 1;
                    let prev = last_value.unwrap_or(self.task.operands[0]);
                    let correct = self.task.ops[index.min(self.task.ops.len() - 1)].apply(
                        prev,
                        self.task.operands[(index + 1).min(self.task.operands.len() - 1)],
                        self.task.modulus,
                    );
                    let v = self.guess(b.step_accuracy, correct, rng);
                    if turn >= 2 && rng.gen::<f64>() < b.restart_rate {
                        vec![Token::RESTART, Token::digit(v)]
                    } else {
                        vec![Token::digit(v)]
                    }
                }
            }
        };
        Ok(Step::new(role, tokens))
    }

    fn token_logprob(&self, _context: &[Token], _token: Token) -> Result<f64> {
        Ok(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::tests::{d, meta, reason};
    use crate::episode::{step_contexts, ContextView};
    use crate::policy::FeaturizerSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    #[test]
    fn ground_truth_examples() {
        let t = TaskInstance::new(vec![3, 4, 2], vec![Op::Add, Op::Mul], 5).unwrap();
        assert_eq!(t.ground_truth, 4);
        let z = TaskInstance::new(vec![0, 0], vec![Op::Add], 7).unwrap();
        assert_eq!(z.ground_truth, 0);
        assert_eq!(
            t.question(),
            vec![d(3), Token::PLUS, d(4), Token::TIMES, d(2)]
        );
        assert_eq!(t.partial_results(), vec![2, 4]);
    }

    #[test]
    fn generated_truth_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let t = generate_task(&mut rng, 3, 7).unwrap();
            assert!(t.ground_truth < 7);
            assert_eq!(t.difficulty(), 3);
        }
        assert!(generate_task(&mut rng, 1, 5).is_err());
        assert!(generate_task(&mut rng, 2, 1).is_err());
    }

    #[test]
    fn verify_examples() {
        let t = TaskInstance::new(vec![3, 4, 2], vec![Op::Add, Op::Mul], 5).unwrap();
        assert_eq!(verify(d(4), &t), 1);
        assert_eq!(verify(d(3), &t), 0);
        assert_eq!(verify(Token::EMPTY, &t), 0);
    }

    #[test]
    fn corpus_round_trip() {
        let tasks = generate_corpus(3, 3, 5, 20).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &tasks, "h").unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("operands,operators,modulus,ground_truth,config_hash\n"));
        assert_eq!(read_corpus(buf.as_slice()).unwrap(), tasks);
        let plain = "operands,operators,modulus,ground_truth\n3 4 2,+ *,5,4\n";
        assert_eq!(read_corpus(plain.as_bytes()).unwrap()[0].ground_truth, 4);
    }

    #[test]
    fn corpus_rejects_wrong_truth() {
        let text = "operands,operators,modulus,ground_truth\n3 4 2,+ *,5,1\n";
        assert!(read_corpus(text.as_bytes()).is_err());
    }

    #[test]
    fn scripted_chain_walkthrough() {
        // (3 + 4) * 2 mod 5: m1 = [+ 4], y1 = [2], m2 = [* 2], y2 = [4],
        // m3 = [FINISH END], y3 = [4].
        let task = TaskInstance::new(vec![3, 4, 2], vec![Op::Add, Op::Mul], 5).unwrap();
        let agent = ScriptedAgent::new(task.clone(), ScriptBehavior::perfect());
        let tr = run_episode(&agent, &task, &EpisodeConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let got: Vec<Vec<Token>> = tr.steps().iter().map(|s| s.tokens.clone()).collect();
        assert_eq!(
            got,
            vec![
                vec![Token::PLUS, d(4)],
                vec![d(2)],
                vec![Token::TIMES, d(2)],
                vec![d(4)],
                vec![Token::FINISH, Token::END],
                vec![d(4)],
            ]
        );
        assert_eq!(tr.outcome_reward, 1.0);
        assert_eq!(tr.num_turns(), task.difficulty());
        assert!(!tr.truncated);
        assert!(!is_lazy(&tr));
    }

    struct EmptyReasoner;

    impl Agent for EmptyReasoner {
        fn act<R: Rng + ?Sized>(&self, ep: &PartialEpisode<'_>, role: Role, _: usize, _: &mut R) -> Result<Step> {
            Ok(match role {
                Role::Meta if ep.turn() == 2 => Step::new(role, vec![Token::FINISH, Token::END]),
                Role::Meta => Step::new(role, vec![Token::PLUS, d(1)]),
                Role::Reasoning => Step::new(role, vec![Token::EMPTY]),
            })
        }

        fn token_logprob(&self, _: &[Token], _: Token) -> Result<f64> {
            Ok(0.0)
        }
    }

    #[test]
    fn empty_final_answer_scores_zero() {
        let task = TaskInstance::new(vec![0, 0], vec![Op::Add], 5).unwrap();
        let tr = run_episode(&EmptyReasoner, &task, &EpisodeConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.num_turns(), 2);
        assert_eq!(tr.outcome_reward, 0.0);
        assert!(is_lazy(&tr));
    }

    /// Emits a scripted three-turn episode with RESTART at turn 2 and
    /// records the reasoning contexts it is shown.
    struct Recorder {
        seen: RefCell<Vec<(usize, Vec<Token>)>>,
    }

    impl Agent for Recorder {
        fn act<R: Rng + ?Sized>(&self, ep: &PartialEpisode<'_>, role: Role, _: usize, _: &mut R) -> Result<Step> {
            let t = ep.turn();
            let tokens = match (role, t) {
                (Role::Meta, 3) => vec![Token::FINISH, Token::END],
                (Role::Meta, _) => vec![Token::PLUS, d(t as u8)],
                (Role::Reasoning, 2) => vec![Token::RESTART, d(7)],
                (Role::Reasoning, _) => vec![d(t as u8 + 4)],
            };
            if role == Role::Reasoning {
                for pos in 0..tokens.len() {
                    self.seen.borrow_mut().push((t, ep.context(role, &tokens[..pos])));
                }
            }
            Ok(Step::new(role, tokens))
        }

        fn token_logprob(&self, _: &[Token], _: Token) -> Result<f64> {
            Ok(0.0)
        }
    }

    #[test]
    fn restart_masks_prior_reasoning() {
        let task = TaskInstance::new(vec![1, 2], vec![Op::Add], 10).unwrap();
        let rec = Recorder { seen: RefCell::new(Vec::new()) };
        let tr = run_episode(&rec, &task, &EpisodeConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.restart_turns, vec![2]);
        assert_eq!(tr.num_turns(), 3);
        let q = vec![d(1), Token::PLUS, d(2), Token::REASON_FLAG];
        let cat = |parts: &[&[Token]]| -> Vec<Token> {
            let mut v = q.clone();
            for p in parts {
                v.extend_from_slice(p);
            }
            v
        };
        let (m1, y1, m2, m3) = (
            [Token::PLUS, d(1)],
            [d(5)],
            [Token::PLUS, d(2)],
            [Token::FINISH, Token::END],
        );
        let seen = rec.seen.borrow();
        // Turn 1: full history.
        assert_eq!(seen[0], (1, cat(&[&m1])));
        // Turn 2: the RESTART token is chosen with y1 still visible ...
        assert_eq!(seen[1], (2, cat(&[&m1, &y1, &m2])));
        // ... and the rest of the step no longer sees y1.
        assert_eq!(seen[2], (2, cat(&[&m1, &m2, &[Token::RESTART]])));
        // Turn 3 keeps y2 (not before the restart turn) but not y1.
        assert_eq!(seen[3], (3, cat(&[&m1, &m2, &[Token::RESTART, d(7)], &m3])));
        // The trajectory reconstructs the same generation contexts.
        let ctxs = step_contexts(&tr, 4, ContextView::GENERATION).unwrap();
        assert_eq!(ctxs[1], seen[2].1);
        let ctxs = step_contexts(&tr, 6, ContextView::GENERATION).unwrap();
        assert_eq!(ctxs[0], seen[3].1);
    }

    #[test]
    fn double_restart_equals_latest() {
        let tr = Trajectory::new(
            vec![d(1)],
            vec![
                meta(&[d(1)]),
                reason(&[d(2)]),
                meta(&[d(3)]),
                reason(&[Token::RESTART, d(4)]),
                meta(&[d(5)]),
                reason(&[Token::RESTART, d(6)]),
                meta(&[Token::FINISH, Token::END]),
                reason(&[d(6)]),
            ],
            0.0,
            vec![2, 3],
        )
        .unwrap();
        let single = Trajectory::new(
            tr.question.clone(),
            tr.steps().to_vec(),
            0.0,
            vec![3],
        )
        .unwrap();
        assert_eq!(
            step_contexts(&tr, 8, ContextView::GENERATION).unwrap(),
            step_contexts(&single, 8, ContextView::GENERATION).unwrap()
        );
    }

    #[test]
    fn stored_logprobs_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = FeaturizerSpec { feature_dim: 64, ..Default::default() };
        let mut p = FeaturizedPolicy::zeros(spec);
        for v in p.weights_mut().data_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        // Bias towards RESTART and terminators so restarts occur.
        p.weights_mut().set(0, Token::RESTART.index(), 1.5);
        let cfg = EpisodeConfig { noise_rate: 0.2, ..Default::default() };
        let mut restarts = 0;
        for i in 0..200 {
            let task = generate_task(&mut rng, 3, 5).unwrap();
            let tr = run_episode(&p, &task, &cfg, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
            restarts += tr.restart_turns.len();
            for s in tr.steps() {
                let re = p
                    .step_token_logprobs(&tr, s.flat_index, ContextView::GENERATION)
                    .unwrap();
                assert_eq!(re, s.logprobs, "step {} of episode {i}", s.flat_index);
            }
        }
        assert!(restarts > 0);
    }

    #[test]
    fn turn_stats_examples() {
        let lazy = Trajectory::new(
            vec![d(1)],
            vec![meta(&[Token::FINISH, d(2)]), reason(&[Token::FINISH, d(2)]), meta(&[d(1)]), reason(&[d(1)])],
            0.0,
            vec![],
        )
        .unwrap();
        let busy = Trajectory::new(
            vec![d(1)],
            [meta(&[Token::PLUS, d(1)]), reason(&[d(2)])].iter().cycle().take(8).cloned().collect(),
            0.0,
            vec![],
        )
        .unwrap();
        let s = turn_count_stats([&lazy, &busy]).unwrap();
        assert_eq!(s.lazy_mean, Some(2.0));
        assert_eq!(s.non_lazy_mean, Some(4.0));
        let only_lazy = turn_count_stats([&lazy]).unwrap();
        assert_eq!(only_lazy.non_lazy_mean, None);
        assert_eq!(only_lazy.lazy_count, 1);
        assert!(turn_count_stats(std::iter::empty::<&Trajectory>()).is_err());
    }

    #[test]
    fn teacher_shortcut_is_lazy_and_short() {
        let task = TaskInstance::new(vec![3, 4, 2], vec![Op::Add, Op::Mul], 5).unwrap();
        let b = ScriptBehavior { shortcut_rate: 1.0, ..ScriptBehavior::perfect() };
        let agent = ScriptedAgent::new(task.clone(), b);
        let tr = run_episode(&agent, &task, &EpisodeConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.num_turns(), 1);
        assert!(is_lazy(&tr));
        assert_eq!(tr.outcome_reward, 1.0);
    }

    #[test]
    fn truncation_at_turn_limit() {
        let task = TaskInstance::new(vec![1, 2, 3, 4, 0, 1, 2, 3], vec![Op::Add; 7], 5).unwrap();
        let agent = ScriptedAgent::new(task.clone(), ScriptBehavior::perfect());
        let cfg = EpisodeConfig { max_turns: 3, ..Default::default() };
        let tr = run_episode(&agent, &task, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.num_turns(), 3);
        assert!(tr.truncated);
    }
}
