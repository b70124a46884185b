use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facenas::pipeline::read_predictions;
use facenas::{RunConfig, SearchOptions, Session, UsageError};

/// Two-stage reinforcement-learning architecture search for multi-stream
/// regressors over facial-behaviour time series.
///
/// Exit status: 0 on success, 1 when a stage fails, 2 on a usage error.
/// The FACENAS_WORKERS environment variable overrides the worker count.
#[derive(Parser)]
#[command(name = "facenas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchFlags {
    /// Continue from the trial log in the run directory.
    #[arg(long, conflicts_with = "fresh")]
    resume: bool,
    /// Discard any existing trial log.
    #[arg(long)]
    fresh: bool,
    /// Stop after this many controller updates (for staged runs).
    #[arg(long, value_name = "STEPS")]
    stop_after: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as CSV into <run>/data.
    GenData(Common),
    /// Preprocess and encode every clip; cache the result.
    Encode(Common),
    /// Run the warm-up search of every stream.
    Warmup {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: SearchFlags,
    },
    /// Run warm-up and joint search.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: SearchFlags,
    },
    /// Retrain the leading architectures and evaluate them on the test split.
    Finalize(Common),
    /// Print RMSE and MAE of a clip_id,predicted,actual CSV.
    Evaluate {
        /// Predictions file.
        predictions: PathBuf,
    },
    /// Write CSV tables and SVG plots for a run.
    Report(Common),
}

fn session(c: &Common) -> anyhow::Result<Session> {
    let (mut cfg, base) = RunConfig::load(&c.config).map_err(|e| UsageError(format!("{e:#}")))?;
    if let Some(o) = &c.out {
        cfg.out_dir = std::env::current_dir()?.join(o);
    }
    Ok(Session::new(cfg, &base))
}

fn options(f: &SearchFlags) -> SearchOptions {
    SearchOptions {
        resume: f.resume,
        fresh: f.fresh,
        stop_after_steps: f.stop_after,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (dir, n) = session(&c)?.gen_data()?;
            println!("wrote {n} clips to {}", dir.display());
        }
        Command::Encode(c) => {
            let s = session(&c)?.encode()?;
            println!("encoded {} clips, {} rejections", s.clips, s.rejected.len());
            for r in &s.rejected {
                println!("  rejected {} {}: {}", r.clip_id, r.attribute, r.reason);
            }
        }
        Command::Warmup { common, flags } => {
            let reduced = session(&common)?.warmup(options(&flags))?;
            for r in &reduced {
                println!("{}: {} architectures kept", r.space.stream_id, r.size().unwrap_or(0));
            }
        }
        Command::Search { common, flags } => {
            let s = session(&common)?;
            let state = s.search(options(&flags))?;
            if !state.complete {
                println!(
                    "stopped early at {} step {}; continue with --resume",
                    state.stage, state.timestep
                );
            }
            println!("{} trials", state.trials);
            for (i, e) in state.leaderboard.iter().enumerate() {
                println!("{:>3}  {:.4}  x{}  {}", i + 1, e.mean_e_val, e.count, e.key);
            }
        }
        Command::Finalize(c) => {
            let rep = session(&c)?.finalize()?;
            for f in &rep.finalists {
                let mark = if f.best { "*" } else { " " };
                println!("{mark} RMSE={:.4} MAE={:.4}  {}", f.rmse, f.mae, f.canonical_key);
            }
        }
        Command::Evaluate { predictions } => {
            let set = read_predictions(&predictions)?;
            println!("RMSE={:.4} MAE={:.4}", set.rmse()?, set.mae()?);
        }
        Command::Report(c) => {
            for p in session(&c)?.report()? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors by itself
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
