//! Training loop: seeded shuffling, per-bag graphs with gradient
//! accumulation over a batch, one Adam step per batch, early stopping on a
//! validation metric, and 5-fold cross-validation on top.

mod adam;

pub use adam::AdamState;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DatasetManifest, N_FOLDS};
use crate::metrics::{auc_score, BagScore, EvalReport, FoldReport, MetricsError};
use crate::models::{Bag, MilModel, ModelConfig, ModelError, ModelVariant};
use crate::nn::{zero_grads, ModelParams, NnError, TapeBinding};
use crate::parallel::{derive_seed, parallel_map};
use crate::tensor::{Graph, Real};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (bag {bag_id})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        bag_id: String,
    },
    #[error("non-finite validation loss at epoch {epoch}")]
    NonFiniteValLoss { epoch: usize },
    #[error("early stopping on validation AUC, but AUC is undefined at epoch {epoch}: {source}")]
    StopMetricUnavailable {
        epoch: usize,
        source: MetricsError,
    },
    #[error("training set is empty")]
    EmptyTrain,
    #[error("validation set is empty")]
    EmptyVal,
    #[error("manifest references bag {0} that is not in the data file")]
    MissingBag(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    #[default]
    ValLoss,
    ValAuc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Synthetic-task default. The clinical protocol value 3e-6 pairs with a
    /// pretrained encoder; training from scratch needs a larger step.
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub variant: ModelVariant,
    pub stop_metric: StopMetric,
    /// z-score tabular vectors with training-fold statistics.
    pub normalize_tabular: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            patience: 50,
            max_epochs: 500,
            seed: 0,
            variant: ModelVariant::HyperAdag,
            stop_metric: StopMetric::ValLoss,
            normalize_tabular: true,
        }
    }
}

/// Per-feature z-scoring statistics fitted on a training fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularStats {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl TabularStats {
    pub fn fit(bags: &[Bag]) -> Self {
        let k = bags.first().map(|b| b.tabular.len()).unwrap_or(0);
        let n = bags.len().max(1) as Real;
        let mut mean = vec![0.0 as Real; k];
        for bag in bags {
            for (m, v) in mean.iter_mut().zip(&bag.tabular.values) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut std = vec![0.0 as Real; k];
        for bag in bags {
            for ((s, v), m) in std.iter_mut().zip(&bag.tabular.values).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt().max(1e-6);
        }
        // Categorical 0/1 columns pass through untouched.
        for dim in 0..k {
            if bags.iter().all(|b| {
                let v = b.tabular.values[dim];
                v == 0.0 || v == 1.0
            }) {
                mean[dim] = 0.0;
                std[dim] = 1.0;
            }
        }
        TabularStats { mean, std }
    }

    pub fn apply(&self, bag: &Bag) -> Bag {
        let mut out = bag.clone();
        for (i, v) in out.tabular.values.iter_mut().enumerate() {
            *v = (*v - self.mean[i]) / self.std[i];
        }
        out.tabular.normalized = true;
        out
    }

    pub fn apply_all(&self, bags: &[Bag]) -> Vec<Bag> {
        bags.iter().map(|b| self.apply(b)).collect()
    }
}

/// Early-stopping bookkeeping: stop once `patience` epochs pass without a
/// strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    higher_is_better: bool,
    best: Option<Real>,
    best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        EarlyStopper { patience, higher_is_better, best: None, best_epoch: 0 }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Epochs are 1-based.
    pub fn observe(&mut self, epoch: usize, value: Real) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some(best) => {
                if self.higher_is_better {
                    value > best
                } else {
                    value < best
                }
            }
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            return StopDecision::Improved;
        }
        if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Wait
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Real,
    pub val_loss: Real,
    pub val_auc: Option<Real>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: Real,
    pub best_val_auc: Option<Real>,
    pub log: Vec<EpochRecord>,
    pub tabular_stats: Option<TabularStats>,
    pub variant: ModelVariant,
}

/// Numerically stable BCE of a logit against a binary label.
pub fn bce_value(logit: Real, label: u8) -> Real {
    logit.max(0.0) - logit * label as Real + (-logit.abs()).exp().ln_1p()
}

/// Forward-only evaluation: mean BCE plus per-bag scores.
pub fn evaluate_bags(model: &MilModel, bags: &[Bag]) -> Result<(Real, Vec<BagScore>), TrainError> {
    let mut scores = Vec::with_capacity(bags.len());
    let mut loss_sum = 0.0 as Real;
    for bag in bags {
        let pred = model.predict(bag)?;
        loss_sum += bce_value(pred.logit, bag.label);
        scores.push(BagScore {
            bag_id: bag.bag_id.clone(),
            label: bag.label,
            logit: pred.logit,
            probability: pred.probability,
        });
    }
    Ok((loss_sum / bags.len().max(1) as Real, scores))
}

/// Trains one fold: seeded epoch shuffles, per-bag graphs accumulating into
/// a batch gradient, one Adam step per batch, early stopping on the
/// configured validation metric. Keeps the best checkpoint in memory.
pub fn train_fold(
    train: &[Bag],
    val: &[Bag],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if val.is_empty() {
        return Err(TrainError::EmptyVal);
    }

    let stats = cfg.normalize_tabular.then(|| TabularStats::fit(train));
    let (train, val) = match &stats {
        Some(s) => (s.apply_all(train), s.apply_all(val)),
        None => (train.to_vec(), val.to_vec()),
    };

    let mut model = MilModel::new(model_cfg, cfg.variant, cfg.seed)?;
    let mut adam = AdamState::new();
    // Stream 1 keeps epoch shuffles decorrelated from model init, which
    // uses its own rng seeded with the same value.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut stopper = EarlyStopper::new(cfg.patience, cfg.stop_metric == StopMetric::ValAuc);
    let mut best_params = model.state();
    let mut best_val_loss = Real::INFINITY;
    let mut best_val_auc = None;
    let mut log = Vec::new();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0 as Real;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            zero_grads(&mut model);
            let scale = 1.0 / batch.len() as Real;
            for &bag_idx in batch {
                let bag = &train[bag_idx];
                let mut g = Graph::new();
                let mut bind = TapeBinding::new();
                let (_, loss, scaled) = model.forward_loss(&mut g, &mut bind, bag, scale)?;
                let loss_value = g.value(loss)[0];
                if !loss_value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        bag_id: bag.bag_id.clone(),
                    });
                }
                epoch_loss += loss_value;
                g.backward(scaled).map_err(ModelError::from)?;
                bind.accumulate_grads(&g, &mut model);
            }
            adam.step(&mut model, cfg.lr as Real)?;
        }
        let train_loss = epoch_loss / train.len() as Real;

        let (val_loss, val_scores) = evaluate_bags(&model, &val)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteValLoss { epoch });
        }
        let labels: Vec<u8> = val_scores.iter().map(|s| s.label).collect();
        let probs: Vec<Real> = val_scores.iter().map(|s| s.probability).collect();
        let val_auc = auc_score(&labels, &probs).ok();

        log.push(EpochRecord { epoch, train_loss, val_loss, val_auc });

        let metric = match cfg.stop_metric {
            StopMetric::ValLoss => val_loss,
            StopMetric::ValAuc => val_auc.ok_or_else(|| TrainError::StopMetricUnavailable {
                epoch,
                source: MetricsError::OneClass,
            })?,
        };
        match stopper.observe(epoch, metric) {
            StopDecision::Improved => {
                best_params = model.state();
                best_val_loss = val_loss;
                best_val_auc = val_auc;
            }
            StopDecision::Wait => {}
            StopDecision::Stop => break,
        }
    }

    Ok(TrainResult {
        best_params,
        best_epoch: stopper.best_epoch(),
        best_val_loss,
        best_val_auc,
        log,
        tabular_stats: stats,
        variant: cfg.variant,
    })
}

/// One cross-validation rotation evaluated on its test fold.
#[derive(Debug)]
pub struct FoldOutcome {
    pub rotation: usize,
    pub train_result: TrainResult,
    pub report: FoldReport,
}

pub fn select_bags<'a>(
    bags: &'a [Bag],
    ids: &[String],
) -> Result<Vec<Bag>, TrainError> {
    let by_id: std::collections::HashMap<&str, &'a Bag> =
        bags.iter().map(|b| (b.bag_id.as_str(), b)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|&b| b.clone())
                .ok_or_else(|| TrainError::MissingBag(id.clone()))
        })
        .collect()
}

/// Runs one rotation end to end: train on 3 folds, early-stop on 1, score
/// the held-out test fold with the best checkpoint.
pub fn run_rotation(
    bags: &[Bag],
    manifest: &DatasetManifest,
    rotation: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldOutcome, TrainError> {
    let split = manifest.rotation(rotation);
    let train = select_bags(bags, &split.train)?;
    let val = select_bags(bags, &split.val)?;
    let test = select_bags(bags, &split.test)?;

    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = derive_seed(cfg.seed, rotation as u64);
    let result = train_fold(&train, &val, model_cfg, &fold_cfg)?;

    let mut model = MilModel::new(model_cfg, cfg.variant, fold_cfg.seed)?;
    model.load_state(&result.best_params)?;
    let test = match &result.tabular_stats {
        Some(s) => s.apply_all(&test),
        None => test,
    };
    let (_, scores) = evaluate_bags(&model, &test)?;
    let report = FoldReport::from_scores(rotation, scores, 0.5);
    Ok(FoldOutcome { rotation, train_result: result, report })
}

/// Full 5-fold cross-validation; rotations run in parallel up to the
/// `HAAF_THREADS` cap.
pub fn run_cross_validation(
    bags: &[Bag],
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(EvalReport, Vec<FoldOutcome>), TrainError> {
    let outcomes: Vec<Result<FoldOutcome, TrainError>> = parallel_map(
        (0..N_FOLDS).collect::<Vec<_>>(),
        |r| run_rotation(bags, manifest, r, model_cfg, cfg),
    );
    let mut folds = Vec::with_capacity(N_FOLDS);
    for outcome in outcomes {
        folds.push(outcome?);
    }
    let report = EvalReport::from_folds(folds.iter().map(|f| f.report.clone()).collect());
    Ok((report, folds))
}
