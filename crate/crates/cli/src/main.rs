use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use districtgan::config::ExperimentConfig;
use districtgan::evaluation::Method;
use districtgan::models::Arch;
use districtgan::pipeline::{self, TrainTarget};
use districtgan::training::Resume;

/// District-specific CT-to-PET translation: phantoms, training, inference
/// and evaluation.
#[derive(Parser)]
#[command(name = "districtgan", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.seed=42`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Proposed,
    Competitor,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset and its manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert raw NIfTI studies listed in a JSON-lines file into a dataset.
    Preprocess {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model (head, trunk, arms, legs, whole_body) or all five.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long)]
        models: PathBuf,
        /// Discard existing checkpoints instead of resuming from them.
        #[arg(long)]
        restart: bool,
        /// Train the selected models concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Synthesize PET for every test patient.
    Translate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Defaults to the configured architecture.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write NIfTI copies of the outputs.
        #[arg(long)]
        nifti: bool,
    },
    /// Score prediction directories and write report tables.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = || ExperimentConfig::load(cli.config.as_deref(), &cli.overrides);
    match cli.command {
        Command::Phantom { out } => {
            let s = pipeline::cmd_phantom(&cfg()?, &out)?;
            println!("manifest: {}", s.manifest.display());
            println!("train {} / val {} / test {}", s.counts[0], s.counts[1], s.counts[2]);
        }
        Command::Preprocess { raw, out } => {
            let s = pipeline::cmd_preprocess(&raw, &out)?;
            println!("manifest: {}", s.manifest.display());
            println!("train {} / val {} / test {}", s.counts[0], s.counts[1], s.counts[2]);
        }
        Command::Train {
            manifest,
            scope,
            models,
            restart,
            parallel,
        } => {
            let target: TrainTarget = scope.parse()?;
            let resume = if restart { Resume::Restart } else { Resume::Continue };
            for m in pipeline::cmd_train(&cfg()?, &manifest, target, &models, resume, parallel)? {
                let best = m.best_val_mae.map_or("-".to_string(), |v| format!("{v:.5}"));
                println!(
                    "{}: epoch {}, best validation MAE {best}, checksum {:016x}, {}",
                    m.scope,
                    m.epoch,
                    m.checksum,
                    m.dir.display()
                );
            }
        }
        Command::Translate {
            manifest,
            models,
            method,
            arch,
            out,
            nifti,
        } => {
            let arch: Arch = match arch {
                Some(a) => a.parse()?,
                None => cfg()?.model.arch,
            };
            let method = match method {
                MethodArg::Proposed => Method::Proposed,
                MethodArg::Competitor => Method::Competitor,
            };
            let meta = pipeline::cmd_translate(&manifest, &models, method, arch, &out, nifti)?;
            println!("{} volumes written to {}", meta.patients.len(), out.display());
        }
        Command::Evaluate { manifest, preds, out } => {
            pipeline::cmd_evaluate(&manifest, &preds, &out)?;
            let text = std::fs::read_to_string(out.join("report.txt"))
                .with_context(|| format!("reading report in {}", out.display()))?;
            print!("{text}");
        }
        Command::ShowConfig => print!("{}", cfg()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<districtgan::Error>()
                .map_or("cli", |d| d.kind());
            eprintln!("error[{kind}]: {e:#}");
            ExitCode::FAILURE
        }
    }
}
