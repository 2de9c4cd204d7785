//! Batch commands behind the `haaf` binary: dataset generation, training,
//! evaluation, the three-variant ablation, and attention export. Every
//! command writes its resolved config next to its outputs and keeps
//! timestamps confined to `run_info.json`, so reruns with the same config
//! and seed are byte-identical elsewhere.

mod config;

pub use config::{
    AblateCommandConfig, EvalCommandConfig, ExportAttentionCommandConfig, GenCommandConfig,
    Split, TrainCommandConfig,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::data::{
    generate_bags, make_folds, read_bags, write_bags, DataError, DatasetManifest, N_FOLDS,
};
use crate::metrics::{mean_std, EvalReport, FoldReport};
use crate::models::{infer_variant, MilModel, ModelError, ModelVariant};
use crate::nn::{ModelParams, NnError};
use crate::parallel::{derive_seed, parallel_map};
use crate::train::{
    evaluate_bags, run_cross_validation, run_rotation, select_bags, FoldOutcome, TabularStats,
    TrainError, TrainResult,
};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {source}")]
    Config {
        path: String,
        source: serde_json::Error,
    },
    #[error("checkpoint {path} does not fit variant {requested}{inferred}: {source}")]
    CheckpointMismatch {
        path: String,
        requested: ModelVariant,
        inferred: String,
        source: NnError,
    },
    #[error("variant {0} exports no attention")]
    NoAttention(ModelVariant),
    #[error("fold {fold} out of range (0..{})", N_FOLDS)]
    BadFold { fold: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|source| CliError::Config { path: path.display().to_string(), source })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// The one place timestamps are allowed.
fn write_run_info(out: &Path, command: &str) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct RunInfo<'a> {
        command: &'a str,
        unix_time: u64,
    }
    let unix_time = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(&RunInfo { command, unix_time }, &out.join("run_info.json"))
}

fn fmt_opt(v: Option<Real>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ----- gen -----

#[derive(Debug, Serialize)]
pub struct GenSummary {
    pub n_bags: usize,
    pub positives: usize,
    pub data_file: PathBuf,
    pub manifest_file: PathBuf,
}

pub fn cmd_gen(cfg: &GenCommandConfig, out: &Path) -> Result<GenSummary, CliError> {
    fs::create_dir_all(out)?;
    let bags = generate_bags(&cfg.generator)?;
    let folds = make_folds(&bags, cfg.folds_seed.unwrap_or(cfg.generator.seed))?;
    let manifest = DatasetManifest {
        data_file: "bags.jsonl".into(),
        bag_ids: bags.iter().map(|b| b.bag_id.clone()).collect(),
        folds,
        generator: cfg.generator.clone(),
    };
    let data_file = out.join("bags.jsonl");
    let manifest_file = out.join("manifest.json");
    write_bags(&bags, &data_file)?;
    write_json(&manifest, &manifest_file)?;
    write_json(cfg, &out.join("config.json"))?;
    write_run_info(out, "gen")?;
    Ok(GenSummary {
        n_bags: bags.len(),
        positives: bags.iter().filter(|b| b.label == 1).count(),
        data_file,
        manifest_file,
    })
}

// ----- shared data loading -----

pub fn load_dataset(data_dir: &Path) -> Result<(DatasetManifest, Vec<crate::models::Bag>), CliError> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(data_dir.join("manifest.json"))?)?;
    let bags = read_bags(&data_dir.join(&manifest.data_file))?;
    Ok((manifest, bags))
}

// ----- train -----

#[derive(Debug, Serialize)]
struct FoldSummary {
    rotation: usize,
    best_epoch: usize,
    best_val_loss: Real,
    best_val_auc: Option<Real>,
    epochs_run: usize,
}

fn write_train_log(result: &TrainResult, path: &Path) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_loss,val_auc")?;
    for r in &result.log {
        writeln!(f, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, fmt_opt(r.val_auc))?;
    }
    Ok(())
}

fn write_fold_outputs(out: &Path, outcome: &FoldOutcome) -> Result<(), CliError> {
    let dir = out.join(format!("fold_{}", outcome.rotation));
    fs::create_dir_all(&dir)?;
    write_train_log(&outcome.train_result, &dir.join("train_log.csv"))?;
    outcome.train_result.best_params.save(&dir.join("best.ckpt"))?;
    let summary = FoldSummary {
        rotation: outcome.rotation,
        best_epoch: outcome.train_result.best_epoch,
        best_val_loss: outcome.train_result.best_val_loss,
        best_val_auc: outcome.train_result.best_val_auc,
        epochs_run: outcome.train_result.log.len(),
    };
    write_json(&summary, &dir.join("summary.json"))?;
    Ok(())
}

fn write_scores_csv(folds: &[FoldReport], path: &Path) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "bag_id,fold,label,logit,probability")?;
    for fold in folds {
        for s in &fold.scores {
            writeln!(f, "{},{},{},{},{}", s.bag_id, fold.fold, s.label, s.logit, s.probability)?;
        }
    }
    Ok(())
}

fn write_metrics_csv(report: &EvalReport, path: &Path) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "fold,f1,auc,tp,fp,tn,fn")?;
    for fold in &report.folds {
        let c = fold.confusion;
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            fold.fold,
            fold.f1,
            fmt_opt(fold.auc),
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        )?;
    }
    writeln!(f, "mean,{},{},,,,", report.mean_f1, fmt_opt(report.mean_auc))?;
    Ok(())
}

pub fn cmd_train(cfg: &TrainCommandConfig, out: &Path) -> Result<EvalReport, CliError> {
    fs::create_dir_all(out)?;
    let (manifest, bags) = load_dataset(&cfg.data_dir)?;

    let report = match cfg.fold {
        Some(fold) => {
            if fold >= N_FOLDS {
                return Err(CliError::BadFold { fold });
            }
            let outcome = run_rotation(&bags, &manifest, fold, &cfg.model, &cfg.train)?;
            write_fold_outputs(out, &outcome)?;
            EvalReport::from_folds(vec![outcome.report])
        }
        None => {
            let (report, outcomes) =
                run_cross_validation(&bags, &manifest, &cfg.model, &cfg.train)?;
            for outcome in &outcomes {
                write_fold_outputs(out, outcome)?;
            }
            report
        }
    };

    write_scores_csv(&report.folds, &out.join("per_bag_scores.csv"))?;
    write_metrics_csv(&report, &out.join("metrics.csv"))?;
    write_json(&report, &out.join("eval_report.json"))?;
    write_json(cfg, &out.join("config.json"))?;
    write_run_info(out, "train")?;
    Ok(report)
}

// ----- eval -----

fn load_model_for(
    checkpoint: &Path,
    variant: ModelVariant,
    model_cfg: &crate::models::ModelConfig,
) -> Result<MilModel, CliError> {
    let params = ModelParams::load(checkpoint)?;
    let mut model = MilModel::new(model_cfg, variant, 0)?;
    model.load_state(&params).map_err(|source| {
        let inferred = match infer_variant(&params) {
            Some(v) => format!(" (checkpoint looks like {v})"),
            None => String::new(),
        };
        CliError::CheckpointMismatch {
            path: checkpoint.display().to_string(),
            requested: variant,
            inferred,
            source,
        }
    })?;
    Ok(model)
}

/// Bags of the requested split, tabular-normalized with this rotation's
/// training-fold statistics (matching what training saw).
fn split_bags(
    manifest: &DatasetManifest,
    bags: &[crate::models::Bag],
    fold: usize,
    split: Split,
    normalize: bool,
) -> Result<Vec<crate::models::Bag>, CliError> {
    if fold >= N_FOLDS {
        return Err(CliError::BadFold { fold });
    }
    let rotation = manifest.rotation(fold);
    let train = select_bags(bags, &rotation.train)?;
    let chosen = match split {
        Split::Train => train.clone(),
        Split::Val => select_bags(bags, &rotation.val)?,
        Split::Test => select_bags(bags, &rotation.test)?,
    };
    Ok(if normalize { TabularStats::fit(&train).apply_all(&chosen) } else { chosen })
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub fold: usize,
    pub split: Split,
    pub mean_bce: Real,
    pub f1: Real,
    pub auc: Option<Real>,
    pub auc_error: Option<String>,
    pub confusion: crate::metrics::Confusion,
}

pub fn cmd_eval(cfg: &EvalCommandConfig, out: &Path) -> Result<EvalOutput, CliError> {
    fs::create_dir_all(out)?;
    let (manifest, bags) = load_dataset(&cfg.data_dir)?;
    let model = load_model_for(&cfg.checkpoint, cfg.variant, &cfg.model)?;
    let chosen = split_bags(&manifest, &bags, cfg.fold, cfg.split, cfg.normalize_tabular)?;
    let (mean_bce, scores) = evaluate_bags(&model, &chosen)?;
    let fold_report = FoldReport::from_scores(cfg.fold, scores, 0.5);
    if let Some(err) = &fold_report.auc_error {
        eprintln!("warning: AUC undefined on this split: {err}");
    }

    let output = EvalOutput {
        fold: cfg.fold,
        split: cfg.split,
        mean_bce,
        f1: fold_report.f1,
        auc: fold_report.auc,
        auc_error: fold_report.auc_error.clone(),
        confusion: fold_report.confusion,
    };
    let report = EvalReport::from_folds(vec![fold_report]);
    write_scores_csv(&report.folds, &out.join("per_bag_scores.csv"))?;
    write_metrics_csv(&report, &out.join("metrics.csv"))?;
    write_json(&output, &out.join("metrics.json"))?;
    write_json(cfg, &out.join("config.json"))?;
    write_run_info(out, "eval")?;
    Ok(output)
}

// ----- ablate -----

pub const ABLATION_VARIANTS: [ModelVariant; 3] = [
    ModelVariant::FeatureTransformer,
    ModelVariant::HyperAdagNoTctp,
    ModelVariant::HyperAdag,
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: ModelVariant,
    pub seed: u64,
    pub f1: Real,
    pub auc: Real,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSummaryRow {
    pub variant: ModelVariant,
    pub n_seeds: usize,
    pub mean_f1: Real,
    pub std_f1: Real,
    pub mean_auc: Real,
    pub std_auc: Real,
}

#[derive(Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummaryRow>,
}

impl AblationTable {
    pub fn mean_auc(&self, variant: ModelVariant) -> Real {
        self.summary
            .iter()
            .find(|r| r.variant == variant)
            .map(|r| r.mean_auc)
            .unwrap_or(Real::NAN)
    }
}

/// Trains the three ablation variants on identical folds and seeds. By
/// default each seed trains one rotation (rotation = seed index % 5, so the
/// five default seeds cover all five test folds); `full_cv` runs all five
/// rotations per seed instead and reports the seed's fold mean.
pub fn cmd_ablate(cfg: &AblateCommandConfig, out: &Path) -> Result<AblationTable, CliError> {
    fs::create_dir_all(out)?;
    let (manifest, bags) = load_dataset(&cfg.data_dir)?;

    let mut jobs = Vec::new();
    for &variant in &ABLATION_VARIANTS {
        for (i, &seed) in cfg.seeds.iter().enumerate() {
            jobs.push((variant, i, seed));
        }
    }
    let results: Vec<Result<AblationRow, CliError>> = parallel_map(jobs, |(variant, i, seed)| {
        let mut train_cfg = cfg.train.clone();
        train_cfg.variant = variant;
        train_cfg.seed = derive_seed(seed, 0xab1a7e);
        if cfg.full_cv {
            let (report, _) = run_cross_validation(&bags, &manifest, &cfg.model, &train_cfg)?;
            let aucs: Option<Vec<Real>> = report.folds.iter().map(|f| f.auc).collect();
            let auc = aucs.map(|a| a.iter().sum::<Real>() / a.len() as Real).unwrap_or(0.5);
            Ok(AblationRow { variant, seed, f1: report.mean_f1, auc })
        } else {
            let outcome = run_rotation(&bags, &manifest, i % N_FOLDS, &cfg.model, &train_cfg)?;
            Ok(AblationRow {
                variant,
                seed,
                f1: outcome.report.f1,
                auc: outcome.report.auc.unwrap_or(0.5),
            })
        }
    });
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }

    let summary = ABLATION_VARIANTS
        .iter()
        .map(|&variant| {
            let f1s: Vec<Real> =
                rows.iter().filter(|r| r.variant == variant).map(|r| r.f1).collect();
            let aucs: Vec<Real> =
                rows.iter().filter(|r| r.variant == variant).map(|r| r.auc).collect();
            let (mean_f1, std_f1) = mean_std(&f1s);
            let (mean_auc, std_auc) = mean_std(&aucs);
            AblationSummaryRow {
                variant,
                n_seeds: f1s.len(),
                mean_f1,
                std_f1,
                mean_auc,
                std_auc,
            }
        })
        .collect();

    let table = AblationTable { rows, summary };

    let mut f = fs::File::create(out.join("ablation.csv"))?;
    writeln!(f, "variant,seed,f1,auc")?;
    for r in &table.rows {
        writeln!(f, "{},{},{},{}", r.variant, r.seed, r.f1, r.auc)?;
    }
    let mut f = fs::File::create(out.join("ablation_summary.csv"))?;
    writeln!(f, "variant,n_seeds,mean_f1,std_f1,mean_auc,std_auc")?;
    for r in &table.summary {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.variant, r.n_seeds, r.mean_f1, r.std_f1, r.mean_auc, r.std_auc
        )?;
    }
    write_json(&table, &out.join("ablation.json"))?;
    write_json(cfg, &out.join("config.json"))?;
    write_run_info(out, "ablate")?;
    Ok(table)
}

// ----- export-attention -----

pub fn cmd_export_attention(
    cfg: &ExportAttentionCommandConfig,
    out: &Path,
) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out)?;
    let (manifest, bags) = load_dataset(&cfg.data_dir)?;
    let model = load_model_for(&cfg.checkpoint, cfg.variant, &cfg.model)?;
    let chosen = split_bags(&manifest, &bags, cfg.fold, cfg.split, cfg.normalize_tabular)?;

    let path = out.join("attention.csv");
    let mut f = fs::File::create(&path)?;
    writeln!(
        f,
        "bag_id,instance_index,attention,logit,probability,label,tctp_v_norm,tctp_w_norm,tctp_b"
    )?;
    for bag in &chosen {
        let pred = model.predict(bag)?;
        let attention = pred.attention.ok_or(CliError::NoAttention(cfg.variant))?;
        let (vn, wn, b) = match pred.tctp_norms {
            Some(n) => (n.v_norm.to_string(), n.w_norm.to_string(), n.b.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        for (j, a) in attention.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                bag.bag_id, j, a, pred.logit, pred.probability, bag.label, vn, wn, b
            )?;
        }
    }
    write_json(cfg, &out.join("config.json"))?;
    write_run_info(out, "export-attention")?;
    Ok(path)
}

