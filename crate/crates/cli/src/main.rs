use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mec_cli::{
    cmd_eval, cmd_simulate, cmd_sweep, cmd_trace, cmd_train, episode_seeds, load_checkpoint, load_config, split_list,
    Axis, CliError, Result, SweepModels,
};
use mec_rl::marl::TrainConfig;

/// Disaster-area mobile edge computing simulator and multi-agent trainer.
///
/// Log verbosity follows MECSIM_LOG (error, warn, info, debug, trace).
#[derive(Debug, Parser)]
#[command(name = "mecsim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a baseline (or a checkpoint) for several episodes.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "random")]
        policy: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shared recurrent actor and centralized critic.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "train-config")]
        train_config: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the step budget.
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy decentralized evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross product of axis values and policies on shared seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// battery, genprob or cpufreq.
        #[arg(long)]
        axis: String,
        /// Comma-separated; numbers for battery (J) and genprob, dvfs/fixed-max for cpufreq.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "random,oed,omd")]
        policies: String,
        /// One checkpoint for all values, or one per value (comma-separated).
        #[arg(long)]
        checkpoint: Option<String>,
        /// Used to train rmappo when no checkpoint is given.
        #[arg(long = "train-config")]
        train_config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump one episode task by task, with battery segments.
    Trace {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "random")]
        policy: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate {
            config,
            policy,
            checkpoint,
            episodes,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ck = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let s = cmd_simulate(&cfg, &policy, ck.as_ref(), episodes, seed, &out)?;
            println!("{} episodes, mean cost {}", s.episodes, s.mean_cost);
        }
        Cmd::Train {
            config,
            train_config,
            seed,
            steps,
            checkpoint,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut tc = match train_config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                tc.seed = s;
            }
            if let Some(n) = steps {
                tc.step_max = n;
            }
            let resume = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let ck = cmd_train(&cfg, &tc, resume, &out)?;
            println!("{} steps, {} curve points", ck.total_steps, ck.curve.len());
        }
        Cmd::Eval {
            config,
            checkpoint,
            episodes,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ck = load_checkpoint(&checkpoint)?;
            let r = cmd_eval(&cfg, &ck, episodes, seed, &out)?;
            println!("{} episodes, mean cost {}", r.metrics.episodes, r.metrics.mean_cost);
        }
        Cmd::Sweep {
            config,
            axis,
            values,
            policies,
            checkpoint,
            train_config,
            episodes,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let axis = Axis::parse(&axis)?;
            let checkpoints = checkpoint
                .map(|list| split_list(&list).iter().map(|p| load_checkpoint(p.as_ref())).collect())
                .transpose()?
                .unwrap_or_default();
            let train = train_config.map(TrainConfig::load).transpose()?;
            let models = SweepModels { checkpoints, train };
            let rows = cmd_sweep(
                &cfg,
                axis,
                &split_list(&values),
                &split_list(&policies),
                &episode_seeds(seed, episodes),
                &models,
                &out,
            )?;
            println!("{} rows", rows.len());
        }
        Cmd::Trace {
            config,
            policy,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ck = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let rows = cmd_trace(&cfg, &policy, ck.as_ref(), seed, &out)?;
            println!("{} devices traced", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MECSIM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error: {}", CliError::Validation(line.to_string()));
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
