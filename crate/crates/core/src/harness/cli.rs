use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;

use super::config::ExperimentConfig;
use super::pipeline;
use super::report::summary;

#[derive(Parser, Debug)]
#[command(name = "bidlab", version, about = "Graph-embedded, diffusion-planned auto-bidding lab", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct StageArgs {
    /// Experiment TOML file.
    #[arg(long)]
    pub config: PathBuf,
    /// Base seed; defaults to `seeds.base` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory holding data, checkpoints and reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// Training episodes; defaults to `train.episodes` from the config.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate training and held-out datasets.
    GenData(GenDataArgs),
    /// Train the graph encoder with the inverse-dynamics head.
    TrainGraph(StageArgs),
    /// Train the latent diffusion model on encoder embeddings.
    TrainLdm(StageArgs),
    /// Fit the value head and run rejection-sampling rounds.
    Align(StageArgs),
    /// Score held-out forecasts.
    EvalForecast(StageArgs),
    /// Compare the planner against the uniform baseline.
    EvalKpi(StageArgs),
    /// Per-agent bid recovery on held-out episodes.
    EvalBidAccuracy(StageArgs),
}

fn run(cmd: &Command) -> Result<String> {
    let args = match cmd {
        Command::GenData(a) => &a.stage,
        Command::TrainGraph(a)
        | Command::TrainLdm(a)
        | Command::Align(a)
        | Command::EvalForecast(a)
        | Command::EvalKpi(a)
        | Command::EvalBidAccuracy(a) => a,
    };
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Command::GenData(GenDataArgs { episodes: Some(n), .. }) = cmd {
        cfg.train.episodes = *n;
    }
    let seed = args.seed.unwrap_or(cfg.seeds.base);
    let out = &args.out;
    Ok(match cmd {
        Command::GenData(_) => {
            let (train, held) = pipeline::gen_data(&cfg, seed, out)?;
            format!("wrote {} training and {} held-out episodes", train.count, held.count)
        }
        Command::TrainGraph(_) => {
            pipeline::train_graph(&cfg, seed, out)?;
            format!("wrote {}", out.join(pipeline::GRAPH_CKPT).display())
        }
        Command::TrainLdm(_) => {
            pipeline::train_ldm(&cfg, seed, out)?;
            format!("wrote {}", out.join(pipeline::LDM_CKPT).display())
        }
        Command::Align(_) => {
            let o = pipeline::align(&cfg, seed, out)?;
            let scores: Vec<String> = o.fresh_scores.iter().map(|s| format!("{s:.4}")).collect();
            format!("mean sample score per round: {}", scores.join(" -> "))
        }
        Command::EvalForecast(_) => summary(&pipeline::eval_forecast(&cfg, seed, out)?),
        Command::EvalKpi(_) => summary(&pipeline::eval_kpi(&cfg, seed, out)?),
        Command::EvalBidAccuracy(_) => summary(&pipeline::eval_bid_accuracy(&cfg, seed, out)?),
    })
}

/// Parse `argv` and run one stage. Returns the process exit code: 0 on
/// success, 1 on failure, 2 on usage errors.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
