//! Thin CLI over `haaf::commands`. The library (and its examples/) is the
//! primary interface; this binary exists for batch runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use haaf::commands::{
    self, AblateCommandConfig, CliError, EvalCommandConfig, ExportAttentionCommandConfig,
    GenCommandConfig, TrainCommandConfig,
};
use haaf::models::ModelVariant;

#[derive(Parser)]
#[command(name = "haaf", version, about = "Multimodal MIL experiments", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's model variant.
    #[arg(long)]
    variant: Option<ModelVariant>,
    /// Override the config's fold / rotation index.
    #[arg(long)]
    fold: Option<usize>,
}

impl Common {
    fn out_dir(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))
    }

    fn load<T: serde::de::DeserializeOwned + Default>(&self) -> Result<T, CliError> {
        match &self.config {
            Some(path) => commands::load_config(path),
            None => Ok(T::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic condition-dependent dataset.
    Gen(Common),
    /// Train one fold or full 5-fold cross-validation.
    Train(Common),
    /// Evaluate a checkpoint on a fold split.
    Eval(Common),
    /// Train static / classifier-only / full variants and tabulate them.
    Ablate(Common),
    /// Write per-instance attention for a checkpoint.
    ExportAttention(Common),
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen(common) => {
            let mut cfg: GenCommandConfig = common.load()?;
            if let Some(seed) = common.seed {
                cfg.generator.seed = seed;
            }
            let out = common.out_dir("gen");
            let summary = commands::cmd_gen(&cfg, &out)?;
            println!(
                "wrote {} bags ({} positive / {} negative) to {}",
                summary.n_bags,
                summary.positives,
                summary.n_bags - summary.positives,
                summary.data_file.display()
            );
        }
        Command::Train(common) => {
            let mut cfg: TrainCommandConfig = common.load()?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            if let Some(v) = common.variant {
                cfg.train.variant = v;
            }
            if common.fold.is_some() {
                cfg.fold = common.fold;
            }
            let out = common.out_dir("train");
            let report = commands::cmd_train(&cfg, &out)?;
            println!(
                "variant {}: mean F1 {:.4}, mean AUC {}",
                cfg.train.variant,
                report.mean_f1,
                report
                    .mean_auc
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "undefined".into())
            );
        }
        Command::Eval(common) => {
            let mut cfg: EvalCommandConfig = common.load()?;
            if let Some(v) = common.variant {
                cfg.variant = v;
            }
            if let Some(fold) = common.fold {
                cfg.fold = fold;
            }
            let out = common.out_dir("eval");
            let output = commands::cmd_eval(&cfg, &out)?;
            println!(
                "fold {} ({:?}): BCE {:.4}, F1 {:.4}, AUC {}",
                output.fold,
                output.split,
                output.mean_bce,
                output.f1,
                output.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "undefined".into())
            );
        }
        Command::Ablate(common) => {
            let mut cfg: AblateCommandConfig = common.load()?;
            if let Some(seed) = common.seed {
                cfg.seeds = (0..cfg.seeds.len() as u64).map(|i| seed + i).collect();
            }
            let out = common.out_dir("ablate");
            let table = commands::cmd_ablate(&cfg, &out)?;
            for row in &table.summary {
                println!(
                    "{:<22} F1 {:.4} +/- {:.4}   AUC {:.4} +/- {:.4}   ({} seeds)",
                    row.variant.to_string(),
                    row.mean_f1,
                    row.std_f1,
                    row.mean_auc,
                    row.std_auc,
                    row.n_seeds
                );
            }
        }
        Command::ExportAttention(common) => {
            let mut cfg: ExportAttentionCommandConfig = common.load()?;
            if let Some(v) = common.variant {
                cfg.variant = v;
            }
            if let Some(fold) = common.fold {
                cfg.fold = fold;
            }
            let out = common.out_dir("export-attention");
            let path = commands::cmd_export_attention(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
