//! `metareason` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification failure,
//! 3 numeric failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Arg, ArgMatches, Args, FromArgMatches, Parser, Subcommand};

use metareason_core::analysis::{analyze, AnalysisOptions, ANALYSIS_DIR};
use metareason_core::config::{text_hash, TrainConfig, KEYS};
use metareason_core::env::{generate_corpus, read_corpus, write_corpus, EpisodeConfig, ScriptBehavior, TaskInstance};
use metareason_core::policy::{read_checkpoint, FeaturizerSpec};
use metareason_core::run::{self, train_run, RunEvent};
use metareason_core::theorem::{run_probes, write_report};
use metareason_core::trainer::{pass_at_k, PassAtK, PolicySolver, ScriptedSolver};
use metareason_core::Error;

/// Environment variable naming the default output root.
const OUTPUT_ROOT_VAR: &str = "METAREASON_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFICATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "metareason", version, about = "Train and audit multi-turn meta/reasoning agents on synthetic arithmetic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy and write a run directory.
    Train(TrainArgs),
    /// Check the per-turn gradient identity on random probes.
    VerifyTheorem(VerifyArgs),
    /// Summarise a run directory into CSV tables.
    Analyze(AnalyzeArgs),
    /// Generate a task corpus.
    GenTasks(GenTasksArgs),
    /// Measure pass@K of a checkpoint or a scripted agent.
    PassAtK(PassAtKArgs),
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Flat `key = value` configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory [default: $METAREASON_OUTPUT_ROOT/<run id>, root defaults to `runs`].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing run in the output directory.
    #[arg(long)]
    force: bool,
    /// Print nothing but the run directory.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    overrides: Overrides,
}

/// One `--<key> <value>` flag per configuration key.
#[derive(Debug, Default, Clone)]
struct Overrides(Vec<(String, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Overrides(
            KEYS.iter()
                .filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Overrides::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        KEYS.iter().fold(cmd.next_help_heading("Configuration overrides"), |cmd, &key| {
            cmd.arg(Arg::new(key).long(key).value_name("VALUE").help(format!("Set `{key}`")))
        })
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Overrides::augment_args(cmd)
    }
}

#[derive(Debug, clap::Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative tolerance of the identity check.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    /// Hashed feature dimension of the random probe policies.
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// Report path [default: $METAREASON_OUTPUT_ROOT/theorem-s<seed>-n<probes>.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct AnalyzeArgs {
    /// Run directory written by `train`.
    run_dir: PathBuf,
    /// Moving-average window of the smoothed curves.
    #[arg(long, default_value_t = 10)]
    window: usize,
    /// Training steps per row of the turn-count table.
    #[arg(long, default_value_t = 20)]
    block: usize,
}

#[derive(Debug, clap::Args)]
struct TaskSource {
    /// Task corpus CSV; without it tasks are generated.
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    #[arg(long, default_value_t = 3)]
    difficulty: usize,
    #[arg(long, default_value_t = 5)]
    modulus: u8,
}

impl TaskSource {
    fn describe(&self) -> anyhow::Result<String> {
        Ok(match &self.tasks {
            Some(p) => format!("tasks={}", text_hash(&read_text(p)?)),
            None => format!(
                "count={} task_seed={} difficulty={} modulus={}",
                self.count, self.task_seed, self.difficulty, self.modulus
            ),
        })
    }

    fn load(&self) -> anyhow::Result<Vec<TaskInstance>> {
        Ok(match &self.tasks {
            Some(p) => read_corpus(open(p)?).with_context(|| format!("reading task corpus {}", p.display()))?,
            None => generate_corpus(self.task_seed, self.difficulty, self.modulus, self.count)?,
        })
    }
}

#[derive(Debug, clap::Args)]
struct GenTasksArgs {
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    difficulty: usize,
    #[arg(long, default_value_t = 5)]
    modulus: u8,
    /// Output CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct PassAtKArgs {
    /// Policy checkpoint; without it a scripted agent attempts the tasks.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    source: TaskSource,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    k: Vec<usize>,
    /// Seed of the attempt streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scripted agent: probability of answering in one turn.
    #[arg(long, default_value_t = 0.0)]
    shortcut_rate: f64,
    /// Scripted agent: probability that a one-turn answer is right.
    #[arg(long, default_value_t = 1.0)]
    shortcut_accuracy: f64,
    /// Scripted agent: probability that an intermediate value is right.
    #[arg(long, default_value_t = 1.0)]
    step_accuracy: f64,
    /// Output CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn open(path: &Path) -> anyhow::Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

/// Output file, or stdout when no path is given.
fn sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn resolve_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut entries = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
            TrainConfig::parse_entries(&text).with_context(|| format!("in config file {}", path.display()))?
        }
        None => Vec::new(),
    };
    entries.extend(args.overrides.0.iter().cloned());
    Ok(TrainConfig::from_entries(&entries)?)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<u8> {
    let config = resolve_config(&args)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| output_root().join(run::run_id(&config)));
    if dir.join(run::MANIFEST).exists() && !args.force {
        bail!("{} already holds a run; pass --force to overwrite it", dir.display());
    }
    let quiet = args.quiet;
    let total = config.steps;
    let summary = train_run(&config, &dir, |event| {
        if quiet {
            return;
        }
        match event {
            RunEvent::WarmStarted => eprintln!("warm start done"),
            RunEvent::Step(m) if (m.step + 1) % 10 == 0 || m.step + 1 == total => eprintln!(
                "step {:>4}/{total}  reward {:.3}  turns {:.2}  lazy {:.2}  loss {:+.4}",
                m.step + 1,
                m.mean_reward,
                m.mean_turns,
                m.lazy_fraction,
                m.loss
            ),
            RunEvent::Step(_) => {}
            RunEvent::Evaluated(e) => eprintln!(
                "eval @ {:>4}  reward {:.3}  turns {:.2}  lazy {:.2}  kl meta {:.4}  kl reasoning {:.4}",
                e.step, e.mean_reward, e.mean_turns, e.lazy_fraction, e.kl_meta, e.kl_reasoning
            ),
        }
    })
    .with_context(|| format!("training run in {}", dir.display()))?;
    if !quiet {
        for p in &summary.pass_at_k {
            eprintln!("pass@{}: {:.3} ({}/{})", p.k, p.rate, p.solved, p.tasks);
        }
    }
    println!("{}", dir.display());
    Ok(0)
}

fn cmd_verify_theorem(args: VerifyArgs) -> anyhow::Result<u8> {
    if args.probes == 0 {
        bail!("--probes must be at least 1");
    }
    if !(args.tolerance >= 0.0) {
        bail!("--tolerance must be nonnegative");
    }
    let spec = FeaturizerSpec {
        feature_dim: args.feature_dim,
        ..FeaturizerSpec::default()
    };
    spec.validate()?;
    let reports = run_probes(args.probes, args.seed, spec, args.tolerance)?;
    let hash = text_hash(&format!(
        "verify-theorem probes={} seed={} tolerance={:e} feature_dim={} window={} max_ngram={} role_conditioned={}",
        args.probes, args.seed, args.tolerance, spec.feature_dim, spec.window, spec.max_ngram, spec.role_conditioned
    ));
    let out = args
        .out
        .unwrap_or_else(|| output_root().join(format!("theorem-s{}-n{}.csv", args.seed, args.probes)));
    let mut w = create(&out)?;
    write_report(&mut w, &reports, &hash)?;
    w.flush()?;

    let identity_failures = reports.iter().filter(|r| !r.identity_holds).count();
    let inequality_failures = reports.iter().filter(|r| r.premise && !r.inequality_holds).count();
    let max_err = reports.iter().filter_map(|r| r.relative_error).fold(0.0, f64::max);
    println!(
        "{} probes: identity failures {identity_failures}, max relative error {max_err:e}, \
         premise held in {}, inequality failures {inequality_failures}; report {}",
        reports.len(),
        reports.iter().filter(|r| r.premise).count(),
        out.display()
    );
    Ok(if identity_failures + inequality_failures > 0 {
        EXIT_VERIFICATION
    } else {
        0
    })
}

fn cmd_analyze(args: AnalyzeArgs) -> anyhow::Result<u8> {
    let a = analyze(
        &args.run_dir,
        AnalysisOptions {
            window: args.window,
            block: args.block,
        },
    )?;
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    println!("{} training steps, max reward recomputation gap {:e}", a.metrics.len(), a.max_reward_gap);
    println!("steps        lazy n  lazy T  busy n  busy T");
    for b in &a.turn_blocks {
        println!(
            "{:>4}..{:<4}  {:>6}  {:>6}  {:>6}  {:>6}",
            b.from_step,
            b.to_step,
            b.stats.lazy_count,
            opt(b.stats.lazy_mean),
            b.stats.non_lazy_count,
            opt(b.stats.non_lazy_mean)
        );
    }
    for p in &a.pass_at_k {
        println!("pass@{}: {:.3}", p.k, p.rate);
    }
    println!("tables in {}", args.run_dir.join(ANALYSIS_DIR).display());
    Ok(0)
}

fn cmd_gen_tasks(args: GenTasksArgs) -> anyhow::Result<u8> {
    let tasks = generate_corpus(args.seed, args.difficulty, args.modulus, args.count)?;
    let hash = text_hash(&format!(
        "gen-tasks count={} seed={} difficulty={} modulus={}",
        args.count, args.seed, args.difficulty, args.modulus
    ));
    let mut out = sink(args.out.as_deref())?;
    write_corpus(&mut out, &tasks, &hash)?;
    out.flush()?;
    Ok(0)
}

fn cmd_pass_at_k(args: PassAtKArgs) -> anyhow::Result<u8> {
    if args.k.is_empty() || args.k.contains(&0) {
        bail!("--k values must be at least 1");
    }
    let tasks = args.source.load()?;
    if tasks.is_empty() {
        bail!("no tasks to attempt");
    }
    let episode = EpisodeConfig::default();
    let (rows, solver_desc): (Vec<PassAtK>, String) = match &args.checkpoint {
        Some(path) => {
            let ckpt = read_checkpoint(open(path)?).with_context(|| format!("reading checkpoint {}", path.display()))?;
            let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
            let solver = PolicySolver {
                policy: &ckpt.policy,
                episode,
            };
            (
                pass_at_k(&solver, &tasks, &args.k, args.seed)?,
                format!("checkpoint={}", text_hash(&String::from_utf8_lossy(&bytes))),
            )
        }
        None => {
            let behavior = ScriptBehavior {
                shortcut_rate: args.shortcut_rate,
                shortcut_accuracy: args.shortcut_accuracy,
                step_accuracy: args.step_accuracy,
                empty_rate: 0.0,
                restart_rate: 0.0,
            };
            for (name, p) in [
                ("shortcut-rate", behavior.shortcut_rate),
                ("shortcut-accuracy", behavior.shortcut_accuracy),
                ("step-accuracy", behavior.step_accuracy),
            ] {
                if !(0.0..=1.0).contains(&p) {
                    bail!("--{name} must be a probability, got {p}");
                }
            }
            let solver = ScriptedSolver { behavior, episode };
            (
                pass_at_k(&solver, &tasks, &args.k, args.seed)?,
                format!(
                    "scripted shortcut_rate={} shortcut_accuracy={} step_accuracy={}",
                    behavior.shortcut_rate, behavior.shortcut_accuracy, behavior.step_accuracy
                ),
            )
        }
    };
    let ks: Vec<String> = args.k.iter().map(usize::to_string).collect();
    let hash = text_hash(&format!(
        "pass-at-k {solver_desc} {} k={} seed={}",
        args.source.describe()?,
        ks.join(","),
        args.seed
    ));
    let mut out = sink(args.out.as_deref())?;
    run::write_pass_at_k(&mut out, &rows, &hash)?;
    out.flush()?;
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Numeric(_) | Error::NonFinite { .. }) => EXIT_NUMERIC,
        Some(Error::Verification(_)) => EXIT_VERIFICATION,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::VerifyTheorem(a) => cmd_verify_theorem(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::GenTasks(a) => cmd_gen_tasks(a),
        Command::PassAtK(a) => cmd_pass_at_k(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn numeric_errors_map_to_their_exit_code() {
        let e = anyhow!(Error::Numeric("nan".into())).context("training");
        assert_eq!(exit_code(&e), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow!(Error::Verification("x".into()))), EXIT_VERIFICATION);
        assert_eq!(exit_code(&anyhow!("plain")), EXIT_USAGE);
    }

    #[test]
    fn every_config_key_is_a_flag() {
        let cli = Cli::try_parse_from(["metareason", "train", "--variant", "rema", "--seed", "4", "--pass_k", "1,2"]).unwrap();
        let Command::Train(args) = cli.command else { panic!("expected train") };
        let c = resolve_config(&args).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.pass_k, vec![1, 2]);
        assert_eq!(c.objective.alpha, 0.0);
    }
}
