//! Featurized autoregressive categorical policy.
//!
//! `pi(. | c) = softmax(W^T phi(c))` where `phi` is the hashed n-gram
//! featurizer and `W` has shape `(feature_dim, vocab_size)`. Both agents
//! share `W`; the role flag in the context distinguishes them.

mod checkpoint;
mod featurizer;

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use featurizer::{FeaturizerSpec, BIAS_FEATURE};

use crate::episode::{step_contexts, ContextView, MaskedHistory, Role, Step, Trajectory};
use crate::error::{Error, Result};
use crate::params::ParamMatrix;
use crate::vocab::{Token, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedPolicy {
    spec: FeaturizerSpec,
    weights: ParamMatrix,
}

impl FeaturizedPolicy {
    pub fn zeros(spec: FeaturizerSpec) -> FeaturizedPolicy {
        FeaturizedPolicy {
            spec,
            weights: ParamMatrix::zeros(spec.feature_dim, VOCAB_SIZE),
        }
    }

    pub fn from_weights(spec: FeaturizerSpec, weights: ParamMatrix) -> Result<FeaturizedPolicy> {
        spec.validate()?;
        if weights.shape() != (spec.feature_dim, VOCAB_SIZE) {
            return Err(Error::Contract(format!(
                "weights have shape {:?}, expected ({}, {VOCAB_SIZE})",
                weights.shape(),
                spec.feature_dim
            )));
        }
        if let Some((r, _)) = weights.first_non_finite() {
            return Err(Error::NonFinite { feature: r });
        }
        Ok(FeaturizedPolicy { spec, weights })
    }

    pub fn spec(&self) -> &FeaturizerSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn weights(&self) -> &ParamMatrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ParamMatrix {
        &mut self.weights
    }

    pub fn features(&self, context: &[Token]) -> Vec<u32> {
        self.spec.features(context)
    }

    pub fn logits_for_features(&self, features: &[u32]) -> Result<Vec<f64>> {
        let mut logits = vec![0.0; VOCAB_SIZE];
        for &f in features {
            for (l, w) in logits.iter_mut().zip(self.weights.row(f as usize)) {
                *l += w;
            }
        }
        if logits.iter().any(|l| !l.is_finite()) {
            let feature = features
                .iter()
                .copied()
                .find(|&f| self.weights.row(f as usize).iter().any(|w| !w.is_finite()))
                .unwrap_or(features[0]);
            return Err(Error::NonFinite {
                feature: feature as usize,
            });
        }
        Ok(logits)
    }

    pub fn logits(&self, context: &[Token]) -> Result<Vec<f64>> {
        self.logits_for_features(&self.features(context))
    }

    /// Softmax of the logits at `context`.
    pub fn next_token_distribution(&self, context: &[Token]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(context)?))
    }

    pub fn log_distribution(&self, context: &[Token]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(context)?))
    }

    pub fn token_logprob(&self, context: &[Token], token: Token) -> Result<f64> {
        Ok(self.log_distribution(context)?[token.index()])
    }

    /// Sum of token log-probs of step `flat` with one mask applied to the
    /// whole step.
    pub fn logprob_of_step(
        &self,
        trajectory: &Trajectory,
        flat: usize,
        mask: Option<&MaskedHistory>,
    ) -> Result<f64> {
        self.step_logprob(trajectory, flat, ContextView::Fixed(mask))
    }

    pub fn step_logprob(&self, trajectory: &Trajectory, flat: usize, view: ContextView<'_>) -> Result<f64> {
        Ok(self.step_token_logprobs(trajectory, flat, view)?.iter().sum())
    }

    pub fn step_token_logprobs(
        &self,
        trajectory: &Trajectory,
        flat: usize,
        view: ContextView<'_>,
    ) -> Result<Vec<f64>> {
        let step = trajectory.step(flat)?;
        let ctxs = step_contexts(trajectory, flat, view)?;
        ctxs.iter()
            .zip(&step.tokens)
            .map(|(c, &t)| self.token_logprob(c, t))
            .collect()
    }

    /// `d log pi(token | context) / dW` accumulated into `grad` with weight `scale`:
    /// row `f` of every active feature receives `scale * (onehot(token) - p)`.
    pub fn accumulate_grad_logprob(
        &self,
        context: &[Token],
        token: Token,
        scale: f64,
        grad: &mut ParamMatrix,
    ) -> Result<()> {
        let feats = self.features(context);
        let p = softmax(&self.logits_for_features(&feats)?);
        let mut coeff: Vec<f64> = p.iter().map(|pi| -scale * pi).collect();
        coeff[token.index()] += scale;
        accumulate_outer(grad, &feats, &coeff);
        Ok(())
    }

    /// Gradient of the log-prob of token `pos` of step `flat` (generation
    /// contexts) with respect to `W`.
    pub fn grad_logprob(&self, trajectory: &Trajectory, flat: usize, pos: usize) -> Result<ParamMatrix> {
        let step = trajectory.step(flat)?;
        if pos >= step.tokens.len() {
            return Err(Error::Range {
                index: pos,
                min: 0,
                max: step.tokens.len() - 1,
            });
        }
        let ctxs = step_contexts(trajectory, flat, ContextView::GENERATION)?;
        let mut g = ParamMatrix::zeros(self.spec.feature_dim, VOCAB_SIZE);
        self.accumulate_grad_logprob(&ctxs[pos], step.tokens[pos], 1.0, &mut g)?;
        Ok(g)
    }

    /// Exact `KL(self || reference)` over the full vocabulary at `context`.
    pub fn kl_to_reference(&self, reference: &FeaturizedPolicy, context: &[Token]) -> Result<f64> {
        let lp = self.log_distribution(context)?;
        let lq = reference.log_distribution(context)?;
        Ok(categorical_kl(&lp, &lq))
    }

    /// Adds `scale * dKL(self || reference)/dW` at `context` into `grad`.
    pub fn accumulate_grad_kl(
        &self,
        reference: &FeaturizedPolicy,
        context: &[Token],
        scale: f64,
        grad: &mut ParamMatrix,
    ) -> Result<f64> {
        let feats = self.features(context);
        let lp = log_softmax(&self.logits_for_features(&feats)?);
        let lq = reference.log_distribution(context)?;
        let kl = categorical_kl(&lp, &lq);
        let coeff: Vec<f64> = lp
            .iter()
            .zip(&lq)
            .map(|(a, b)| scale * a.exp() * (a - b - kl))
            .collect();
        accumulate_outer(grad, &feats, &coeff);
        Ok(kl)
    }

    pub fn sample_token<R: Rng + ?Sized>(&self, context: &[Token], rng: &mut R) -> Result<(Token, f64)> {
        let lp = self.log_distribution(context)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = VOCAB_SIZE - 1;
        for (i, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                chosen = i;
                break;
            }
        }
        // Rounding can leave `u` above the final cumulative sum; fall back
        // to the last token that has positive mass.
        if u >= acc {
            chosen = lp.iter().rposition(|l| l.exp() > 0.0).unwrap_or(chosen);
        }
        Ok((Token(chosen as u16), lp[chosen]))
    }

    /// Samples one step at temperature 1 until a terminator or `max_tokens`.
    pub fn sample_step<R: Rng + ?Sized>(
        &self,
        context: &[Token],
        role: Role,
        max_tokens: usize,
        rng: &mut R,
    ) -> Result<Step> {
        self.sample_step_with(role, max_tokens, rng, |prefix| {
            let mut c = context.to_vec();
            c.extend_from_slice(prefix);
            c
        })
    }

    /// Like [`sample_step`](Self::sample_step) but asks `context_for` for the
    /// full context given the tokens emitted so far in this step.
    pub fn sample_step_with<R, F>(
        &self,
        role: Role,
        max_tokens: usize,
        rng: &mut R,
        mut context_for: F,
    ) -> Result<Step>
    where
        R: Rng + ?Sized,
        F: FnMut(&[Token]) -> Vec<Token>,
    {
        if max_tokens == 0 {
            return Err(Error::Contract("max_tokens must be at least 1".into()));
        }
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut terminated = false;
        while tokens.len() < max_tokens {
            let ctx = context_for(&tokens);
            let (tok, lp) = self.sample_token(&ctx, rng)?;
            tokens.push(tok);
            logprobs.push(lp);
            if tok.is_terminator() {
                terminated = true;
                break;
            }
        }
        let mut step = Step::with_logprobs(role, tokens, logprobs);
        step.truncated = !terminated;
        Ok(step)
    }
}

/// `grad[f, :] += coeff` for every active feature `f`.
pub(crate) fn accumulate_outer(grad: &mut ParamMatrix, features: &[u32], coeff: &[f64]) {
    for &f in features {
        for (g, c) in grad.row_mut(f as usize).iter_mut().zip(coeff) {
            *g += c;
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lz).collect()
}

/// `KL(p || q)` from log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p
        .iter()
        .zip(log_q)
        .map(|(a, b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum();
    kl.max(0.0)
}

/// Immutable copy of a policy taken at rollout time.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    policy: Arc<FeaturizedPolicy>,
    step: usize,
}

impl PolicySnapshot {
    pub fn take(policy: &FeaturizedPolicy, step: usize) -> PolicySnapshot {
        PolicySnapshot {
            policy: Arc::new(policy.clone()),
            step,
        }
    }

    /// Training step that produced this snapshot.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn policy(&self) -> &FeaturizedPolicy {
        &self.policy
    }
}

impl Deref for PolicySnapshot {
    type Target = FeaturizedPolicy;

    fn deref(&self) -> &FeaturizedPolicy {
        &self.policy
    }
}
