//! `specdec` command-line driver.
//!
//! Every subcommand accepts `--config run.json`; flags override fields of the
//! file. Set `SPECDEC_THREADS` to fix the worker thread count. Outputs do not
//! depend on it.

mod commands;
mod config;
mod prompts;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{PromptFormat, RunConfig};

pub type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "specdec", version, about = "Speculative decoding with adaptive candidate lengths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an add-α k-gram model to a corpus and write it as JSON.
    FitLm(FitLmArgs),
    /// Generate acceptance-prediction training data (JSON lines).
    GenData(GenDataArgs),
    /// Train an acceptance-prediction head on a dataset.
    TrainHead(TrainHeadArgs),
    /// Benchmark a list of policies.
    Bench(BenchArgs),
    /// Cross the K, h, w_rej and depth grids.
    Sweep(SweepArgs),
    /// Exact unbiasedness, threshold and Bellman checks on small instances.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct FitLmArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = PromptFormat::Bytes)]
    format: PromptFormat,
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long, default_value_t = 0.01)]
    smoothing: f64,
    /// Token mode only; defaults to one past the largest id seen.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Token mode only.
    #[arg(long)]
    eos: Option<u32>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a draft model: the fitted model mixed with uniform noise
    /// and re-tempered.
    #[arg(long)]
    draft_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    draft_mix: f64,
    #[arg(long, default_value_t = 1.3)]
    draft_temperature: f64,
}

/// Fields shared by the subcommands that read a [`RunConfig`].
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    draft: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, value_enum)]
    prompt_format: Option<PromptFormat>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    k_cap: Option<usize>,
    #[arg(long)]
    t_draft: Option<f64>,
    #[arg(long)]
    t_target: Option<f64>,
}

impl Overrides {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = &self.$field { cfg.$field = v.clone().into(); } )* };
        }
        set!(target, draft, prompts, prompt_len, generations);
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.prompt_format {
            cfg.prompt_format = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = self.k_cap {
            cfg.k_cap = v;
        }
        if let Some(v) = self.t_draft {
            cfg.t_draft = v;
        }
        if let Some(v) = self.t_target {
            cfg.t_target = v;
        }
        cfg.check_paths()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Overrides,
    /// Percentage of positions taken from the target response.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainHeadArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    w_rej: Option<f64>,
    /// Hidden layers.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Overrides,
    /// Policy spec, e.g. `fixed:4` or `adaptive:h=0.5:head=head.json`.
    /// Repeatable; replaces the config's list.
    #[arg(long)]
    policy: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// JSON summary path; defaults to the CSV path with a `.json` extension.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    instances: Option<u64>,
    /// CSV of every audited state of the threshold check.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("SPECDEC_THREADS") {
        let n: usize = v.parse().map_err(|_| format!("SPECDEC_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::FitLm(a) => commands::fit_lm(&a),
        Command::GenData(a) => {
            let mut cfg = a.common.resolve()?;
            if let Some(r) = a.r {
                cfg.r_percent = r;
            }
            commands::gen_data(&cfg, &a.out)
        }
        Command::TrainHead(a) => {
            let mut cfg = RunConfig::load(a.config.as_deref())?;
            if let Some(d) = &a.data {
                cfg.data = Some(d.clone());
            }
            if let Some(w) = a.w_rej {
                cfg.train.weights.w_rej = w;
            }
            let t = &mut cfg.train;
            t.depth = a.depth.unwrap_or(t.depth);
            t.width = a.width.unwrap_or(t.width);
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.step_size = a.step_size.unwrap_or(t.step_size);
            t.seed = a.seed.unwrap_or(t.seed);
            cfg.check_paths()?;
            commands::train_head(&cfg, &a.out)
        }
        Command::Bench(a) => {
            let mut cfg = a.common.resolve()?;
            if !a.policy.is_empty() {
                cfg.policies = a.policy.clone();
            }
            let summary = a.summary.unwrap_or_else(|| a.out.with_extension("json"));
            commands::bench(&cfg, &a.out, &summary)
        }
        Command::Sweep(a) => {
            let mut cfg = a.common.resolve()?;
            if a.head.is_some() {
                cfg.head = a.head.clone();
            }
            if a.data.is_some() {
                cfg.data = a.data.clone();
            }
            cfg.check_paths()?;
            let summary = a.summary.unwrap_or_else(|| a.out.with_extension("json"));
            commands::sweep(&cfg, &a.out, &summary)
        }
        Command::OracleCheck(a) => {
            let mut cfg = RunConfig::load(a.config.as_deref())?;
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            cfg.oracle_instances = a.instances.unwrap_or(cfg.oracle_instances);
            commands::oracle_check(&cfg, a.out.as_deref(), a.summary.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
