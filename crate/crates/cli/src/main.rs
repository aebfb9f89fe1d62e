//! `rigidflow` command line: synthesize, solve, evaluate and curate frames.

mod commands;
mod scene;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rigidflow::config::{RunConfig, ENV_PREFIX};

use commands::{Failure, Outcome};
use scene::SceneFile;

#[derive(Parser, Debug)]
#[command(name = "rigidflow", version, about = "Per-instance rigid motion and scene flow from stereo, flow and instance cues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated frame ids; defaults to every `instance/<id>.png`.
    #[arg(long, global = true)]
    frames: Option<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Keep processing after a frame fails and exit 0.
    #[arg(long, global = true)]
    keep_going: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic frames with ground truth.
    Synth {
        /// Scene file; the default street scene when omitted.
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate per-instance motions and compose scene flow.
    Solve {
        /// Frame directory (image_2, image_3, disp_0, disp_1, flow, instance, calib).
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score estimated scene flow and motions against ground truth.
    Eval {
        /// Directory written by `solve`.
        est: PathBuf,
        /// Ground-truth directory.
        #[arg(long)]
        gt: PathBuf,
        /// Report directory; defaults to the estimate directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit per-instance rigid motions to ground truth and repair boundaries.
    Curate {
        /// Ground-truth directory.
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Solve { common, .. }
            | Command::Eval { common, .. }
            | Command::Curate { common, .. } => common,
        }
    }
}

/// Defaults, then the config file, then `RIGIDFLOW_*` variables, then flags.
fn load_config(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    if common.keep_going {
        cfg.keep_going = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome<()> {
    let common = cli.command.common();
    let cfg = load_config(common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Failure {
            code: 1,
            message: format!("thread pool: {e}"),
        })?;
    let frames = common.frames.as_deref();
    pool.install(|| match &cli.command {
        Command::Synth { scene, out, .. } => {
            let scene = match scene {
                Some(path) => SceneFile::from_file(path)?,
                None => SceneFile::default(),
            };
            commands::synth(&cfg, &scene, out, frames)
        }
        Command::Solve { data, out, .. } => commands::solve(&cfg, data, out, frames),
        Command::Eval { est, gt, out, .. } => {
            let summary = commands::eval(&cfg, est, gt, out.as_ref().unwrap_or(est), frames)?;
            print!("{summary}");
            Ok(())
        }
        Command::Curate { gt, out, .. } => {
            let summary = commands::curate(&cfg, gt, out, frames)?;
            print!("{summary}");
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    log::debug!("environment overrides use the {ENV_PREFIX} prefix");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
