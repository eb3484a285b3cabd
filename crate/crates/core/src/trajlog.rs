//! Line-delimited trajectory log.
//!
//! The first line is a [`LogHeader`] carrying the vocabulary; every further
//! line is one [`TrajectoryRecord`] serialized as a JSON object with fields in
//! declaration order:
//!
//! ```text
//! {"format":"metareason-trajectories","version":1,"config_hash":"…","vocabulary":["0",…,"F5"]}
//! {"run_id":"…","train_step":0,"question_index":3,"rollout":1,"seed":…,
//!  "question":[3,10,4,11,2],
//!  "steps":[{"role":"meta","tokens":[10,4],"logprobs":[-0.7,-1.2],"truncated":false,"injected":false},…],
//!  "reward":1.0,"restart_turns":[],"truncated":false}
//! ```
//!
//! Token ids index the header vocabulary. Log-probabilities are written in
//! shortest round-trip form, so decoding and re-encoding a line reproduces it
//! byte for byte.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::episode::{Role, Step, Trajectory};
use crate::error::{Error, Result};
use crate::vocab::{vocabulary, Token};

pub const FORMAT: &str = "metareason-trajectories";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub vocabulary: Vec<String>,
}

impl LogHeader {
    pub fn new(config_hash: &str) -> LogHeader {
        LogHeader {
            format: FORMAT.into(),
            version: VERSION,
            config_hash: config_hash.into(),
            vocabulary: vocabulary().iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub role: Role,
    pub tokens: Vec<u16>,
    pub logprobs: Vec<f64>,
    pub truncated: bool,
    pub injected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub train_step: usize,
    pub question_index: usize,
    pub rollout: usize,
    /// Seed of the random stream that generated the rollout.
    pub seed: u64,
    pub question: Vec<u16>,
    pub steps: Vec<StepRecord>,
    pub reward: f64,
    pub restart_turns: Vec<usize>,
    pub truncated: bool,
}

fn ids(tokens: &[Token]) -> Vec<u16> {
    tokens.iter().map(|t| t.0).collect()
}

fn tokens(ids: &[u16]) -> Result<Vec<Token>> {
    ids.iter()
        .map(|&i| Token::from_index(i as usize).ok_or_else(|| Error::Format(format!("token id {i} outside the vocabulary"))))
        .collect()
}

impl TrajectoryRecord {
    pub fn new(
        run_id: &str,
        train_step: usize,
        question_index: usize,
        rollout: usize,
        seed: u64,
        trajectory: &Trajectory,
    ) -> TrajectoryRecord {
        TrajectoryRecord {
            run_id: run_id.into(),
            train_step,
            question_index,
            rollout,
            seed,
            question: ids(&trajectory.question),
            steps: trajectory
                .steps()
                .iter()
                .map(|s| StepRecord {
                    role: s.role,
                    tokens: ids(&s.tokens),
                    logprobs: s.logprobs.clone(),
                    truncated: s.truncated,
                    injected: s.injected,
                })
                .collect(),
            reward: trajectory.outcome_reward,
            restart_turns: trajectory.restart_turns.clone(),
            truncated: trajectory.truncated,
        }
    }

    /// Rebuilds the trajectory, re-checking every structural invariant.
    pub fn to_trajectory(&self) -> Result<Trajectory> {
        let steps = self
            .steps
            .iter()
            .map(|s| {
                let mut step = Step::with_logprobs(s.role, tokens(&s.tokens)?, s.logprobs.clone());
                step.truncated = s.truncated;
                step.injected = s.injected;
                Ok(step)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut t = Trajectory::new(tokens(&self.question)?, steps, self.reward, self.restart_turns.clone())?;
        t.truncated = self.truncated;
        Ok(t)
    }

    pub fn encode(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn decode(line: &str) -> Result<TrajectoryRecord> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Writes the header line.
pub fn write_header<W: Write>(out: &mut W, header: &LogHeader) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(header)?)?;
    Ok(())
}

pub fn write_record<W: Write>(out: &mut W, record: &TrajectoryRecord) -> Result<()> {
    writeln!(out, "{}", record.encode()?)?;
    Ok(())
}

/// Reads a whole log, rejecting files written with a different vocabulary.
pub fn read_log<R: Read>(input: R) -> Result<(LogHeader, Vec<TrajectoryRecord>)> {
    let mut lines = BufReader::new(input).lines();
    let first = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format("empty trajectory log".into()))?;
    let header: LogHeader = serde_json::from_str(&first)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported trajectory log {} v{}",
            header.format, header.version
        )));
    }
    if header.vocabulary.iter().map(String::as_str).ne(vocabulary().iter().copied()) {
        return Err(Error::Format("trajectory log vocabulary differs from this build".into()));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        records.push(
            TrajectoryRecord::decode(&line).map_err(|e| Error::Format(format!("trajectory log line {}: {e}", i + 2)))?,
        );
    }
    Ok((header, records))
}
