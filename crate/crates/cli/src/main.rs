use std::path::PathBuf;
use std::process::ExitCode;

use cape_cli::{commands, ExperimentConfig};
use cape_core::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cape",
    version,
    about = "Parameter-conditioned neural PDE surrogates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (dataset directory for `generate`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the PDEB1 dataset files and a manifest.
    Generate(Common),
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Validate the config and print parameter counts only.
        #[arg(long)]
        dry_run: bool,
        /// Continue from an NNCK1 checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep branch drops and training modes.
    Ablate(Common),
    /// Write mask-gated depthwise kernels as CSV.
    DumpKernels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PDE parameter value the masks are computed for.
        #[arg(long)]
        param: f64,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &c.out {
        // the dataset stays where the config put it
        cfg.run.data_dir = Some(cfg.data_dir());
        cfg.run.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let mut cfg = load(&c)?;
            let dir = match &c.out {
                Some(out) => out.clone(),
                None => cfg.data_dir(),
            };
            cfg.run.data_dir = Some(dir.clone());
            let files = commands::generate(&cfg, &dir)?;
            println!("wrote {} files to {}", files.len(), dir.display());
        }
        Command::Train {
            common,
            dry_run,
            resume,
        } => {
            let cfg = load(&common)?;
            if dry_run {
                print!("{}", commands::dry_run(&cfg)?);
                return Ok(());
            }
            let rep = commands::train(&cfg, &cfg.run.output_dir, resume.as_deref())?;
            for r in &rep.rows {
                println!(
                    "{} {} seen={} nrmse={:.4} ± {:.4}",
                    r.kind.name(),
                    r.param,
                    r.seen,
                    r.nrmse_mean,
                    r.nrmse_std
                );
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let rep = commands::eval(&cfg, &checkpoint, &cfg.run.output_dir)?;
            for r in &rep.rows {
                println!("{} seen={} nrmse={:.4}", r.param, r.seen, r.nrmse_mean);
            }
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            for r in commands::ablate(&cfg, &cfg.run.output_dir)? {
                println!(
                    "{:<16} {:<16} {:.4} {}",
                    r.variant,
                    format!("{:?}", r.mode),
                    r.seen,
                    commands::format_delta(r.delta)
                );
            }
        }
        Command::DumpKernels {
            common,
            checkpoint,
            param,
        } => {
            let cfg = load(&common)?;
            let path = cfg.run.output_dir.join(format!("kernels_{param}.csv"));
            commands::dump_kernels(&cfg, &checkpoint, param, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cape_cli::exit_code(&e) as u8)
        }
    }
}
