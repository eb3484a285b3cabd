//! Behaviour cloning of a scripted teacher, used to produce the initial
//! policy that reinforcement learning starts from.
//!
//! Optimised with Adagrad on the summed token log-likelihood of each
//! mini-batch: hashed n-gram rows are sparse and individually rare, and
//! per-coordinate step sizes let them converge in a few epochs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::env::{generate_task, run_episode, ScriptedAgent};
use crate::episode::{step_contexts, ContextView, Trajectory};
use crate::error::{Error, Result};
use crate::exec;
use crate::hashing::derive_seed;
use crate::params::ParamMatrix;
use crate::policy::FeaturizedPolicy;
use crate::vocab::VOCAB_SIZE;

const TEACHER_STREAM: u64 = 0x7465_6163;
const SHUFFLE_STREAM: u64 = 0x7368_7566;
/// Episodes per gradient chunk; fixed so results do not depend on threads.
const CHUNK: usize = 4;

/// Teacher episodes on freshly drawn tasks.
pub fn teacher_episodes(config: &TrainConfig) -> Result<Vec<Trajectory>> {
    let ws = &config.warm_start;
    exec::try_map_range(ws.episodes, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TEACHER_STREAM, i as u64]));
        let task = generate_task(&mut rng, config.difficulty, config.modulus)?;
        let agent = ScriptedAgent::new(task.clone(), ws.teacher);
        run_episode(&agent, &task, &config.episode, &mut rng)
    })
}

/// Sum of token log-likelihood gradients over the policy's own tokens, and
/// the number of tokens.
fn likelihood_grad(policy: &FeaturizedPolicy, episodes: &[&Trajectory]) -> Result<(ParamMatrix, usize, f64)> {
    let mut g = ParamMatrix::zeros(policy.spec().feature_dim, VOCAB_SIZE);
    let (mut count, mut ll) = (0, 0.0);
    for t in episodes {
        for step in t.steps().iter().filter(|s| !s.injected) {
            let ctxs = step_contexts(t, step.flat_index, ContextView::GENERATION)?;
            for (ctx, &tok) in ctxs.iter().zip(&step.tokens) {
                ll += policy.token_logprob(ctx, tok)?;
                policy.accumulate_grad_logprob(ctx, tok, 1.0, &mut g)?;
                count += 1;
            }
        }
    }
    Ok((g, count, ll))
}

/// Mini-batch Adagrad ascent on the token log-likelihood of `episodes`.
/// Returns the mean token log-likelihood seen during the last epoch.
pub fn behavior_clone(policy: &mut FeaturizedPolicy, episodes: &[Trajectory], config: &TrainConfig) -> Result<f64> {
    let ws = &config.warm_start;
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut accum = ParamMatrix::zeros(policy.spec().feature_dim, VOCAB_SIZE);
    let mut last = 0.0;
    for epoch in 0..ws.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        order.shuffle(&mut rng);
        let (mut ll_sum, mut tokens) = (0.0, 0usize);
        for batch in order.chunks(ws.batch_size) {
            let chunks: Vec<Vec<&Trajectory>> = batch
                .chunks(CHUNK)
                .map(|c| c.iter().map(|&i| &episodes[i]).collect())
                .collect();
            let parts = exec::try_map(&chunks, |_, c| likelihood_grad(policy, c))?;
            let mut grad = ParamMatrix::zeros(policy.spec().feature_dim, VOCAB_SIZE);
            let mut n = 0;
            for (g, c, ll) in &parts {
                grad.add_scaled(g, 1.0);
                n += c;
                ll_sum += ll;
            }
            tokens += n;
            for ((w, a), g) in policy
                .weights_mut()
                .data_mut()
                .iter_mut()
                .zip(accum.data_mut())
                .zip(grad.data())
            {
                if *g != 0.0 {
                    *a += g * g;
                    *w += ws.learning_rate * g / a.sqrt();
                }
            }
            if let Some((f, v)) = policy.weights().first_non_finite() {
                return Err(Error::Numeric(format!(
                    "warm start diverged at epoch {epoch} (feature {f}, token {v})"
                )));
            }
        }
        last = if tokens > 0 { ll_sum / tokens as f64 } else { 0.0 };
    }
    Ok(last)
}

/// Initial policy: behaviour clone of the configured teacher.
pub fn warm_start(config: &TrainConfig) -> Result<FeaturizedPolicy> {
    let mut policy = FeaturizedPolicy::zeros(config.featurizer);
    if config.warm_start.episodes == 0 || config.warm_start.epochs == 0 {
        return Ok(policy);
    }
    let episodes = teacher_episodes(config)?;
    behavior_clone(&mut policy, &episodes, config)?;
    Ok(policy)
}
