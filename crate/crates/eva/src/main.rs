use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use eva::config::ExperimentConfig;
use eva::harness::{
    run_anneal, run_lambda_sweep, run_single_episode_eval, run_trace_ablation, run_training,
    LAMBDA_SWEEP,
};

#[derive(Parser)]
#[command(
    name = "eva",
    about = "Train and evaluate an ephemerally value-adjusted agent"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Named experiment preset to start from.
    #[arg(long, default_value = "gridworld-1coin")]
    preset: String,
    /// Config file of `key = value` overrides applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and save metrics plus a final checkpoint.
    Train(CommonArgs),
    /// Evaluate a trained checkpoint over fresh episodes for each lambda.
    EvalEpisode {
        /// Checkpoint produced by `train`.
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train each trace computation with shared seeds and compare.
    AblateTrace(CommonArgs),
    /// Train across the lambda grid with shared seeds.
    SweepLambda(CommonArgs),
    /// Resume a checkpoint and decay lambda to zero while training continues.
    Anneal {
        /// Checkpoint produced by `train`.
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::preset(&args.preset)
        .with_context(|| format!("unknown preset {:?}", args.preset))?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let name = format!(
                "train-{}-lambda{}",
                cfg.agent.trace_mode.name(),
                cfg.agent.lambda
            );
            let artifacts = run_training(&cfg, args.seed, true, &name)?;
            println!("metrics:    {}", artifacts.metrics_path.display());
            println!("checkpoint: {}", artifacts.checkpoint_path.display());
            match artifacts.final_mean_return {
                Some(ret) => println!("final mean return (trailing 100 episodes): {ret:.4}"),
                None => println!("final mean return: no completed episodes"),
            }
        }
        Command::EvalEpisode { checkpoint, common } => {
            let cfg = load_config(&common)?;
            let summary = run_single_episode_eval(
                &checkpoint,
                &LAMBDA_SWEEP,
                cfg.eval_episodes,
                common.seed.wrapping_add(1_000_000),
            )?;
            print!("{summary}");
        }
        Command::AblateTrace(args) => {
            let cfg = load_config(&args)?;
            let outcomes = run_trace_ablation(&cfg, args.seed)?;
            for outcome in &outcomes {
                let label = outcome.mode.name();
                match outcome.mean_final_return() {
                    Some(ret) => println!("{label}: mean final return {ret:.4}"),
                    None => match outcome.runs.iter().find_map(|r| r.diverged_at) {
                        Some(step) => {
                            println!("{label}: diverged (first abort at env step {step})");
                        }
                        None => println!("{label}: no completed episodes"),
                    },
                }
                for run in &outcome.runs {
                    println!("  seed {}: {}", run.seed, run.metrics_path.display());
                }
            }
        }
        Command::SweepLambda(args) => {
            let cfg = load_config(&args)?;
            let outcomes = run_lambda_sweep(&cfg, args.seed)?;
            for (lambda, runs) in &outcomes {
                let finished: Vec<f64> = runs.iter().filter_map(|r| r.final_mean_return).collect();
                let diverged = runs.iter().filter(|r| r.diverged_at.is_some()).count();
                if finished.len() == runs.len() {
                    let mean = finished.iter().sum::<f64>() / finished.len() as f64;
                    println!("lambda {lambda}: mean final return {mean:.4}");
                } else if diverged > 0 {
                    println!(
                        "lambda {lambda}: {diverged} of {} seeds diverged",
                        runs.len()
                    );
                } else {
                    println!("lambda {lambda}: no completed episodes");
                }
                for run in runs {
                    println!("  seed {}: {}", run.seed, run.metrics_path.display());
                }
            }
        }
        Command::Anneal { checkpoint, common } => {
            let cfg = load_config(&common)?;
            let Some(horizon) = cfg.agent.anneal_horizon else {
                bail!("config must set \"lambda anneal horizon\" for the anneal command");
            };
            let out_dir = PathBuf::from(&cfg.out_dir);
            let report = run_anneal(&checkpoint, horizon, &out_dir, &cfg.preset)?;
            match report.pre_anneal_mean {
                Some(ret) => println!("mean return before anneal: {ret:.4}"),
                None => println!("mean return before anneal: no completed episodes"),
            }
            match report.post_anneal_mean {
                Some(ret) => println!("mean return after anneal:  {ret:.4}"),
                None => println!("mean return after anneal:  no completed episodes"),
            }
            println!("metrics:    {}", report.metrics_path.display());
            println!("checkpoint: {}", report.checkpoint_path.display());
        }
    }
    Ok(())
}
