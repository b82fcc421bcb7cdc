use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evrecon_core::pipeline::{cmd_eval, cmd_optimize, cmd_simulate, cmd_sync, SyncMode};
use evrecon_core::{Config, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "evrecon", version, about = "Event-augmented global optimization of poses and depth")]
struct Cli {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Seed for simulation and initial-state noise.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "EVRECON_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene into a dataset.
    Simulate {
        /// Scene description (JSON).
        scene: PathBuf,
    },
    /// Align raw image, depth, pose and event streams.
    Sync {
        /// Sync manifest (JSON).
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Day)]
        mode: Mode,
    },
    /// Run the global optimization on a dataset manifest.
    Optimize {
        /// Dataset manifest (JSON).
        manifest: PathBuf,
    },
    /// Compare predicted depth and trajectory against ground truth.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        /// Skip the median scale alignment of depth.
        #[arg(long)]
        no_scale_align: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Day,
    Night,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Simulate { scene } => {
            let n = cmd_simulate(scene, &cfg, &cli.out, cli.seed)?;
            println!("wrote {n} frames to {}", cli.out.display());
        }
        Command::Sync { manifest, mode } => {
            let mode = match mode {
                Mode::Day => SyncMode::Day,
                Mode::Night => SyncMode::Night,
            };
            let s = cmd_sync(manifest, mode, &cfg, &cli.out)?;
            println!(
                "{} tuples, {} skipped, {} unfilled pixels",
                s.tuples, s.skipped, s.unfilled_pixels
            );
        }
        Command::Optimize { manifest } => {
            let s = cmd_optimize(manifest, &cfg, &cli.out, cli.seed.unwrap_or(0))?;
            println!(
                "{} iterations, total {:e} -> {:e}",
                s.iterations, s.initial_total, s.final_total
            );
        }
        Command::Eval {
            pred,
            gt,
            no_scale_align,
        } => {
            let r = cmd_eval(pred, gt, &cli.out, !no_scale_align)?;
            let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
            println!(
                "abs_rel {} delta_125 {} rmse_log {} ate {} rpe_trans {} rpe_rot {}",
                show(r.abs_rel),
                show(r.delta_125),
                show(r.rmse_log),
                show(r.ate),
                show(r.rpe_trans),
                show(r.rpe_rot)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
