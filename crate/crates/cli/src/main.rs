mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;

/// Learn rigid parts and pose variation from corresponded meshes.
#[derive(Debug, Parser)]
#[command(name = "pose-mfa", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of coarse parts before refinement.
    #[arg(long, global = true)]
    m_init: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Three boxes joined by two hinges, five poses.
    Chain,
    /// Two boxes and one hinge, posed at 0 and `--angle` degrees.
    Hinge,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic articulated sequence with known parts.
    Generate {
        #[arg(long, value_enum, default_value = "chain")]
        preset: Preset,
        /// Hinge angle in degrees (hinge preset only).
        #[arg(long, default_value_t = 90.0)]
        angle: f64,
        /// Standard deviation of the vertex noise.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Fit a model to a mesh sequence (OBJ files or one directory of them).
    Train {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write every training shape colored by part.
    Segment {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Rebuild the training shapes from the rigid parts alone.
    Reconstruct {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Blend two training poses.
    Interpolate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Source and target shape, 1-based, e.g. `1,4`.
        #[arg(long, value_parser = parse_pair)]
        shapes: (usize, usize),
        /// Blend weight in [0, 1]; repeat for several outputs.
        #[arg(long = "t")]
        t: Vec<f64>,
    },
    /// Print a JSON summary of a model.
    Report {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two indices `i,j`, got `{s}`"))?;
    let parse = |x: &str| -> Result<usize, String> {
        let v: usize = x.trim().parse().map_err(|_| format!("`{x}` is not a shape index"))?;
        if v == 0 {
            return Err("shape indices start at 1".into());
        }
        Ok(v)
    };
    Ok((parse(a)?, parse(b)?))
}

fn effective_config(args: &GlobalArgs) -> anyhow::Result<Config> {
    let mut config = Config::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(m) = args.m_init {
        config.m_init = m;
    }
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = effective_config(&cli.global)?;
    match cli.command {
        Command::Generate { preset, angle, noise } => {
            commands::generate(&config, preset_spec(preset, angle), noise, cli.global.seed)
        }
        Command::Train { inputs } => commands::train(&config, &inputs),
        Command::Segment { model } => commands::segment(&config, model.as_deref()),
        Command::Reconstruct { model } => commands::reconstruct(&config, model.as_deref()),
        Command::Interpolate { model, shapes, t } => {
            commands::interpolate(&config, model.as_deref(), shapes, &t)
        }
        Command::Report { model } => commands::report(&config, model.as_deref()),
    }
}

fn preset_spec(preset: Preset, angle: f64) -> pose_mfa::synthetic::ChainSpec {
    use pose_mfa::synthetic::ChainSpec;
    match preset {
        Preset::Chain => ChainSpec::three_part_chain(),
        Preset::Hinge => ChainSpec::single_hinge(angle.to_radians()),
    }
}

/// 3 for numerical failures inside the fit, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<pose_mfa::Error>())
        .any(pose_mfa::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
