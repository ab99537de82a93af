//! `sunfs`: run one stage of the few-shot pipeline per invocation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sunfs::meta_tune::HeadKind;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "sunfs", version, about = "Dense-supervision few-shot training pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true, env = "SUN_CONFIG")]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set sun.lambda=0.25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Metabaseline,
    Feat,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy dataset next to `data.manifest`.
    GenerateData,
    /// Train the teacher with global supervision.
    PretrainTeacher,
    /// Train a student with global and dense patch supervision.
    MetaTrain {
        /// Teacher checkpoint (default: <output_dir>/teacher.ckpt).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train the global-supervision-only control.
    BaselineTrain,
    /// Episodic fine-tuning of a trained backbone.
    MetaTune {
        #[arg(long, value_enum)]
        head: Option<Head>,
        /// Starting checkpoint (default: <output_dir>/student.ckpt).
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// N-way K-shot evaluation; writes a JSON report.
    Evaluate {
        /// Checkpoint path, or `random` for a freshly initialized backbone.
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        /// Split to evaluate on (default: the novel split).
        #[arg(long)]
        split: Option<String>,
    },
    /// Write (source, teacher view, student view) image triplets.
    DumpAug {
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Write pseudo-label maps and patch argmax heatmaps.
    DumpLabels {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Write global features as CSV for offline projection.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 20)]
        n_per_class: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenerateData => commands::generate_data(&cfg),
        Command::PretrainTeacher => commands::pretrain(&cfg),
        Command::MetaTrain { teacher } => commands::sun_train(&cfg, teacher.as_deref()),
        Command::BaselineTrain => commands::baseline(&cfg),
        Command::MetaTune { head, checkpoint } => {
            let head = head.map(|h| match h {
                Head::Metabaseline => HeadKind::Metabaseline,
                Head::Feat => HeadKind::Feat,
            });
            commands::tune(&cfg, head, checkpoint.as_deref())
        }
        Command::Evaluate { checkpoint, way, shot, split } => {
            let path = commands::run_evaluate(&cfg, &checkpoint, way, shot, split.as_deref())?;
            println!("{}", path.display());
            Ok(())
        }
        Command::DumpAug { n } => commands::dump_aug(&cfg, n),
        Command::DumpLabels { checkpoint, n } => commands::dump_labels(&cfg, checkpoint.as_deref(), n),
        Command::ExportEmbeddings { checkpoint, split, n_per_class } => {
            let path = commands::export_embeddings(&cfg, &checkpoint, split.as_deref(), n_per_class)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
