use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lkdn::commands::{self, Objective};
use lkdn::error::{CliError, Result};
use lkdn_core::LkdnConfig;

#[derive(Parser)]
#[command(name = "lkdn", version, about = "Large-kernel distillation super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config, optionally resuming a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Y-channel PSNR/SSIM over every PNG in a directory.
    Eval {
        /// Checkpoint to evaluate; omit together with --bicubic for the baseline.
        #[arg(long, required_unless_present = "bicubic")]
        ckpt: Option<PathBuf>,
        /// Evaluate plain bicubic upscaling instead of a model.
        #[arg(long, conflicts_with = "ckpt")]
        bicubic: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scale: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Super-resolve one PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Collapse re-parameterizable branches into single convolutions.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Parameter and Multi-Add counts at 1280x720 output.
    Count {
        #[arg(long, required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Count a named preset (lkdn, lkdn-s, tiny) instead of a config file.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long, default_value_t = 4, requires = "preset")]
        scale: usize,
    },
    /// Write bicubic LR images named `<stem>x<scale>.png`.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        scale: usize,
    },
    /// Per-step loss of Adan and Adam on a fixed objective, as CSV.
    Optbench {
        /// quadratic | tiny-sr
        #[arg(long)]
        objective: String,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let trainer = commands::train(&config, resume.as_deref())?;
            log::info!("finished at step {}", trainer.step);
        }
        Command::Eval {
            ckpt,
            bicubic: _,
            data,
            scale,
            csv,
        } => {
            let table = commands::eval(ckpt.as_deref(), &data, scale, csv.as_deref())?;
            println!("{table}");
        }
        Command::Infer { ckpt, input, output } => commands::infer(&ckpt, &input, &output)?,
        Command::Fuse { input, output } => {
            let report = commands::fuse(&input, &output)?;
            println!("{report}");
        }
        Command::Count { config, preset, scale } => {
            let cfg = match (config, preset) {
                (Some(path), _) => lkdn::config::load_model_config(&path)?,
                (None, Some(name)) => LkdnConfig::preset(&name, scale)?,
                (None, None) => return Err(CliError::usage("pass --config or --preset")),
            };
            print!("{}", commands::format_count(&commands::count(&cfg)?));
        }
        Command::Degrade { input, output, scale } => {
            let n = commands::degrade(&input, &output, scale)?;
            log::info!("wrote {n} images to {}", output.display());
        }
        Command::Optbench { objective, steps, out } => {
            let objective: Objective = objective.parse()?;
            commands::emit(&commands::optbench(objective, steps)?, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
