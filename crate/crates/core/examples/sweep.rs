//! Trains both objective variants over several seeds and prints the
//! quantities compared by the training-dynamics checks.
//!
//! Usage: `cargo run --release --example sweep -- [seeds] [steps] [key=value ...]`

use std::time::Instant;

use metareason_core::config::TrainConfig;
use metareason_core::env::is_lazy;
use metareason_core::objective::Variant;
use metareason_core::trainer::{evaluate, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(Ok(5), |s| s.parse())?;
    let steps: usize = args.get(1).map_or(Ok(300), |s| s.parse())?;
    let overrides: Vec<(String, String)> = args
        .iter()
        .skip(2)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let first: u64 = std::env::var("SWEEP_FIRST_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    for seed in first..first + seeds {
        for variant in [Variant::Rema, Variant::DrMamr] {
            let started = Instant::now();
            let mut entries = vec![("variant".to_string(), variant.to_string())];
            entries.extend(overrides.iter().cloned());
            entries.push(("seed".into(), seed.to_string()));
            entries.push(("steps".into(), steps.to_string()));
            let config = TrainConfig::from_entries(&entries)?;
            let mut trainer = Trainer::new(config.clone())?;
            let e0 = evaluate(trainer.policy(), &config, 0)?;
            let (mut lazy_turns, mut lazy_n, mut busy_turns, mut busy_n) = (0usize, 0usize, 0usize, 0usize);
            let mut rewards = Vec::new();
            let mut lazy_frac = Vec::new();
            for s in 0..steps {
                let out = trainer.train_step()?;
                if s < 20 {
                    for t in out.groups.iter().flat_map(|g| g.trajectories.iter()) {
                        if is_lazy(t) {
                            lazy_turns += t.num_turns();
                            lazy_n += 1;
                        } else {
                            busy_turns += t.num_turns();
                            busy_n += 1;
                        }
                    }
                }
                rewards.push(out.metrics.mean_reward);
                lazy_frac.push(out.metrics.lazy_fraction);
            }
            let e1 = evaluate(trainer.policy(), &config, steps)?;
            let tail = |v: &[f64]| v[v.len().saturating_sub(10)..].iter().sum::<f64>() / v.len().clamp(1, 10) as f64;
            println!(
                "seed {seed} {:<7} lazyT {:.2} busyT {:.2} | train reward first {:.3} last10 {:.3} lazy {:.2}->{:.2} | eval reward {:.3}->{:.3} lazy {:.2}->{:.2} turns {:.2}->{:.2} klR {:.4}->{:.4} klM {:.4}->{:.4} | {:.1}s",
                variant.as_str(),
                lazy_turns as f64 / lazy_n.max(1) as f64,
                busy_turns as f64 / busy_n.max(1) as f64,
                rewards.first().copied().unwrap_or(0.0),
                tail(&rewards),
                lazy_frac.first().copied().unwrap_or(0.0),
                tail(&lazy_frac),
                e0.mean_reward,
                e1.mean_reward,
                e0.lazy_fraction,
                e1.lazy_fraction,
                e0.mean_turns,
                e1.mean_turns,
                e0.kl_reasoning,
                e1.kl_reasoning,
                e0.kl_meta,
                e1.kl_meta,
                started.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
