//! Resolved run configuration and its flat `key = value` text form.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every key has a default, so an empty file is a valid
//! configuration. The configuration hash is the SHA-256 of the canonical
//! rendering produced by [`TrainConfig::to_text`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EpisodeConfig, ScriptBehavior};
use crate::error::{Error, Result};
use crate::objective::{ObjectiveConfig, Variant};
use crate::policy::FeaturizerSpec;

/// Behaviour-cloning warm start that produces the initial (and reference)
/// policy from a scripted teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartConfig {
    pub teacher: ScriptBehavior,
    pub episodes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            // A weak collaborator with a reliable one-shot answer: the
            // starting point where the shortcut competes with collaboration.
            teacher: ScriptBehavior {
                shortcut_rate: 0.5,
                shortcut_accuracy: 1.0,
                step_accuracy: 0.3,
                empty_rate: 0.1,
                restart_rate: 0.1,
            },
            episodes: 2000,
            epochs: 4,
            learning_rate: 0.3,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// Cosine threshold for grouping similar steps.
    pub similarity: f64,
    /// Rollouts per question. Full-scale setups sample 128.
    pub group_size: usize,
    /// Questions per training step. Full-scale setups use batches of 128.
    pub questions_per_step: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub difficulty: usize,
    pub modulus: u8,
    pub episode: EpisodeConfig,
    pub featurizer: FeaturizerSpec,
    pub warm_start: WarmStartConfig,
    /// Evaluate every this many steps (0: only before and after training).
    pub eval_every: usize,
    pub eval_tasks: usize,
    pub eval_rollouts: usize,
    pub pass_k: Vec<usize>,
    pub pass_k_tasks: usize,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    pub log_trajectories: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            objective: ObjectiveConfig::default(),
            similarity: 0.9,
            group_size: 8,
            questions_per_step: 16,
            steps: 300,
            learning_rate: 0.5,
            difficulty: 3,
            modulus: 5,
            episode: EpisodeConfig::default(),
            featurizer: FeaturizerSpec::default(),
            warm_start: WarmStartConfig::default(),
            eval_every: 50,
            eval_tasks: 64,
            eval_rollouts: 8,
            pass_k: vec![1, 2, 4, 8],
            pass_k_tasks: 200,
            checkpoint_every: 0,
            log_trajectories: true,
        }
    }
}

/// Lowercase hex SHA-256 of `text`.
pub fn text_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Every configuration key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "variant",
    "clip_eps",
    "kl_coeff",
    "alpha",
    "beta_mix",
    "norm_scope",
    "flip_ci_sign",
    "similarity",
    "group_size",
    "questions_per_step",
    "steps",
    "learning_rate",
    "difficulty",
    "modulus",
    "max_turns",
    "meta_max_tokens",
    "reasoning_max_tokens",
    "restart_enabled",
    "noise_rate",
    "window",
    "max_ngram",
    "feature_dim",
    "role_conditioned",
    "teacher_shortcut_rate",
    "teacher_shortcut_accuracy",
    "teacher_step_accuracy",
    "teacher_empty_rate",
    "teacher_restart_rate",
    "warmstart_episodes",
    "warmstart_epochs",
    "warmstart_learning_rate",
    "warmstart_batch_size",
    "eval_every",
    "eval_tasks",
    "eval_rollouts",
    "pass_k",
    "pass_k_tasks",
    "checkpoint_every",
    "log_trajectories",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Desk-scale defaults for the turn-normalised baseline: outcome
    /// advantage only.
    pub fn rema() -> TrainConfig {
        TrainConfig {
            objective: ObjectiveConfig::rema(),
            ..Default::default()
        }
    }

    pub fn dr_mamr() -> TrainConfig {
        TrainConfig {
            objective: ObjectiveConfig::dr_mamr(),
            ..Default::default()
        }
    }

    /// Switches the variant together with its mixing-weight preset.
    pub fn with_variant(mut self, variant: Variant) -> TrainConfig {
        let preset = match variant {
            Variant::Rema => ObjectiveConfig::rema(),
            Variant::DrMamr => ObjectiveConfig::dr_mamr(),
        };
        self.objective.variant = variant;
        self.objective.alpha = preset.alpha;
        self.objective.beta_mix = preset.beta_mix;
        self
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let o = &mut self.objective;
        let e = &mut self.episode;
        let f = &mut self.featurizer;
        let w = &mut self.warm_start;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "variant" => o.variant = v.parse()?,
            "clip_eps" => o.clip_eps = parse(key, v)?,
            "kl_coeff" => o.kl_coeff = parse(key, v)?,
            "alpha" => o.alpha = parse(key, v)?,
            "beta_mix" => o.beta_mix = parse(key, v)?,
            "norm_scope" => o.scope = v.parse()?,
            "flip_ci_sign" => o.flip_ci_sign = parse_bool(key, v)?,
            "similarity" => self.similarity = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "questions_per_step" => self.questions_per_step = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "difficulty" => self.difficulty = parse(key, v)?,
            "modulus" => self.modulus = parse(key, v)?,
            "max_turns" => e.max_turns = parse(key, v)?,
            "meta_max_tokens" => e.meta_max_tokens = parse(key, v)?,
            "reasoning_max_tokens" => e.reasoning_max_tokens = parse(key, v)?,
            "restart_enabled" => e.restart_enabled = parse_bool(key, v)?,
            "noise_rate" => e.noise_rate = parse(key, v)?,
            "window" => f.window = parse(key, v)?,
            "max_ngram" => f.max_ngram = parse(key, v)?,
            "feature_dim" => f.feature_dim = parse(key, v)?,
            "role_conditioned" => f.role_conditioned = parse_bool(key, v)?,
            "teacher_shortcut_rate" => w.teacher.shortcut_rate = parse(key, v)?,
            "teacher_shortcut_accuracy" => w.teacher.shortcut_accuracy = parse(key, v)?,
            "teacher_step_accuracy" => w.teacher.step_accuracy = parse(key, v)?,
            "teacher_empty_rate" => w.teacher.empty_rate = parse(key, v)?,
            "teacher_restart_rate" => w.teacher.restart_rate = parse(key, v)?,
            "warmstart_episodes" => w.episodes = parse(key, v)?,
            "warmstart_epochs" => w.epochs = parse(key, v)?,
            "warmstart_learning_rate" => w.learning_rate = parse(key, v)?,
            "warmstart_batch_size" => w.batch_size = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_tasks" => self.eval_tasks = parse(key, v)?,
            "eval_rollouts" => self.eval_rollouts = parse(key, v)?,
            "pass_k" => {
                self.pass_k = v
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "pass_k_tasks" => self.pass_k_tasks = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "log_trajectories" => self.log_trajectories = parse_bool(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let o = &self.objective;
        let e = &self.episode;
        let f = &self.featurizer;
        let w = &self.warm_start;
        Some(match key {
            "seed" => self.seed.to_string(),
            "variant" => o.variant.to_string(),
            "clip_eps" => o.clip_eps.to_string(),
            "kl_coeff" => o.kl_coeff.to_string(),
            "alpha" => o.alpha.to_string(),
            "beta_mix" => o.beta_mix.to_string(),
            "norm_scope" => o.scope.as_str().to_string(),
            "flip_ci_sign" => o.flip_ci_sign.to_string(),
            "similarity" => self.similarity.to_string(),
            "group_size" => self.group_size.to_string(),
            "questions_per_step" => self.questions_per_step.to_string(),
            "steps" => self.steps.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "difficulty" => self.difficulty.to_string(),
            "modulus" => self.modulus.to_string(),
            "max_turns" => e.max_turns.to_string(),
            "meta_max_tokens" => e.meta_max_tokens.to_string(),
            "reasoning_max_tokens" => e.reasoning_max_tokens.to_string(),
            "restart_enabled" => e.restart_enabled.to_string(),
            "noise_rate" => e.noise_rate.to_string(),
            "window" => f.window.to_string(),
            "max_ngram" => f.max_ngram.to_string(),
            "feature_dim" => f.feature_dim.to_string(),
            "role_conditioned" => f.role_conditioned.to_string(),
            "teacher_shortcut_rate" => w.teacher.shortcut_rate.to_string(),
            "teacher_shortcut_accuracy" => w.teacher.shortcut_accuracy.to_string(),
            "teacher_step_accuracy" => w.teacher.step_accuracy.to_string(),
            "teacher_empty_rate" => w.teacher.empty_rate.to_string(),
            "teacher_restart_rate" => w.teacher.restart_rate.to_string(),
            "warmstart_episodes" => w.episodes.to_string(),
            "warmstart_epochs" => w.epochs.to_string(),
            "warmstart_learning_rate" => w.learning_rate.to_string(),
            "warmstart_batch_size" => w.batch_size.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_tasks" => self.eval_tasks.to_string(),
            "eval_rollouts" => self.eval_rollouts.to_string(),
            "pass_k" => self.pass_k.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "pass_k_tasks" => self.pass_k_tasks.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log_trajectories" => self.log_trajectories.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines into ordered entries.
    pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Resolves entries over the defaults. The last `variant` entry selects
    /// the variant and its mixing-weight preset first; every other entry is
    /// then applied in order, so explicit `alpha`/`beta_mix` values win.
    pub fn from_entries(entries: &[(String, String)]) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if let Some((_, v)) = entries.iter().rev().find(|(k, _)| k == "variant") {
            c = c.with_variant(v.parse()?);
        }
        for (k, v) in entries {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_text(text: &str) -> Result<TrainConfig> {
        TrainConfig::from_entries(&TrainConfig::parse_entries(text)?)
    }

    /// Canonical rendering: every key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("every listed key renders"));
        }
        s
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        text_hash(&self.to_text())
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.episode.validate()?;
        self.featurizer.validate()?;
        let b = &self.warm_start.teacher;
        for (name, p) in [
            ("teacher_shortcut_rate", b.shortcut_rate),
            ("teacher_shortcut_accuracy", b.shortcut_accuracy),
            ("teacher_step_accuracy", b.step_accuracy),
            ("teacher_empty_rate", b.empty_rate),
            ("teacher_restart_rate", b.restart_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size must be at least 2, got {}", self.group_size)));
        }
        if self.questions_per_step == 0 {
            return Err(Error::Config("questions_per_step must be positive".into()));
        }
        // Zero is accepted: it turns a run into a frozen-policy evaluation.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.similarity > 0.0 && self.similarity <= 1.0) {
            return Err(Error::Config(format!("similarity must be in (0, 1], got {}", self.similarity)));
        }
        if self.difficulty < 2 || !(2..=10).contains(&self.modulus) {
            return Err(Error::Config("difficulty must be >= 2 and modulus in 2..=10".into()));
        }
        if self.warm_start.batch_size == 0 || !(self.warm_start.learning_rate >= 0.0) {
            return Err(Error::Config("warm start needs a positive batch size and a nonnegative rate".into()));
        }
        if self.eval_tasks == 0 || self.eval_rollouts < 2 {
            return Err(Error::Config("evaluation needs at least one task and two rollouts".into()));
        }
        if self.pass_k.is_empty() || self.pass_k.contains(&0) {
            return Err(Error::Config("pass_k values must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = TrainConfig::rema();
        c.set("pass_k", "1, 3").unwrap();
        c.set("noise_rate", "0.25").unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn every_key_is_settable_and_rendered() {
        let base = TrainConfig::default();
        for k in KEYS {
            let mut c = base.clone();
            c.set(k, &base.get(k).unwrap()).unwrap();
            assert_eq!(c, base, "{k}");
        }
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = TrainConfig::from_text("bogus = 1").unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("group_size"));
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::from_text("# note\n\nsteps = 7\nvariant = rema\n").unwrap();
        assert_eq!((c.steps, c.objective.variant), (7, Variant::Rema));
        assert!(TrainConfig::from_text("variant = ppo").is_err());
        assert!(TrainConfig::from_text("steps").is_err());
        assert!(TrainConfig::from_text("group_size = 1").is_err());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn variant_presets() {
        let r = TrainConfig::default().with_variant(Variant::Rema);
        assert_eq!((r.objective.alpha, r.objective.beta_mix), (0.0, 0.0));
        let d = r.with_variant(Variant::DrMamr);
        assert_eq!((d.objective.alpha, d.objective.beta_mix), (0.1, 0.1));
        let t = TrainConfig::from_text("alpha = 0.3\nvariant = rema").unwrap();
        assert_eq!((t.objective.variant, t.objective.alpha, t.objective.beta_mix), (Variant::Rema, 0.3, 0.0));
    }
}
