//! Training harness: mini-batch Adam on MSE with early stopping, five-member
//! ensembles with rotating validation slices, and k-fold cross-validation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentationSpec};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, mean_report, MetricsReport};
use crate::ingest::{average_tr_ratio, make_cv_splits, DatasetSplit, LabeledExample};
use crate::models::{image_pixels, Model, ModelSpec, Predictor};
use crate::nn::{mse_loss, Adam, AdamConfig, Tensor};
use crate::preprocess::{preprocess_pipeline, FilterConfig};
use crate::psr::{segment_image, PsrConfig};
use crate::synth::mix_seed;

pub const ENSEMBLE_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    pub ensemble: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            augmentation: AugmentationSpec::default(),
            ensemble: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.augmentation.validate()
    }
}

/// One network input and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub pixels: Vec<f32>,
    pub label: f64,
}

/// Preprocesses an annotated example, recomputes its label on the filtered
/// signal and renders its PSR image.
pub fn prepare_sample(ex: &LabeledExample, filter: &FilterConfig, psr: &PsrConfig) -> Result<Sample> {
    let pre = preprocess_pipeline(&ex.segment, &ex.annotations, filter)?;
    let label = average_tr_ratio(&pre.segment, &pre.annotations)?;
    let (img, _) = segment_image(&pre.segment, psr)?;
    Ok(Sample {
        id: ex.id.clone(),
        pixels: image_pixels(&img),
        label,
    })
}

/// [`prepare_sample`] over a dataset; examples that fail are dropped with a
/// logged reason.
pub fn prepare_samples(examples: &[LabeledExample], filter: &FilterConfig, psr: &PsrConfig) -> Vec<Sample> {
    examples
        .iter()
        .filter_map(|ex| match prepare_sample(ex, filter, psr) {
            Ok(s) => Some(s),
            Err(e) => {
                warn!("excluding {}: {e}", ex.id);
                None
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn batch_tensor(samples: &[&Sample], grid_n: usize, aug: &AugmentationSpec, key: [u64; 3]) -> (Tensor<f32>, Vec<f32>) {
    let mut data = Vec::with_capacity(samples.len() * grid_n * grid_n);
    for (item, s) in samples.iter().enumerate() {
        if aug.is_identity() {
            data.extend_from_slice(&s.pixels);
        } else {
            data.extend(augment(&s.pixels, grid_n, aug, [key[0], key[1], key[2], item as u64]));
        }
    }
    let labels = samples.iter().map(|s| s.label as f32).collect();
    (Tensor::new(vec![samples.len(), 1, grid_n, grid_n], data), labels)
}

/// Mini-batch ranges over `n` items; a trailing batch of one is merged into
/// its predecessor so batch statistics stay defined.
fn batch_ranges(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size).map(|lo| (lo, (lo + size).min(n))).collect();
    if out.len() > 1 && out.last().map(|&(lo, hi)| hi - lo) == Some(1) {
        let (_, hi) = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").1 = hi;
    }
    out
}

fn mse_of(model: &Model, samples: &[Sample]) -> Result<f64> {
    let pixels: Vec<Vec<f32>> = samples.iter().map(|s| s.pixels.clone()).collect();
    let pred = model.predict_pixels(&pixels)?;
    Ok(pred
        .iter()
        .zip(samples)
        .map(|(p, s)| (p - s.label) * (p - s.label))
        .sum::<f64>()
        / samples.len() as f64)
}

/// Trains one network and returns the snapshot with the lowest validation
/// MSE.
pub fn train_model(spec: ModelSpec, train: &[Sample], validation: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 || validation.is_empty() {
        return Err(Error::Config(format!(
            "need at least 2 training and 1 validation examples, got {} and {}",
            train.len(),
            validation.len()
        )));
    }
    let g = spec.grid_n;
    if let Some(bad) = train.iter().chain(validation).find(|s| s.pixels.len() != g * g) {
        return Err(Error::Config(format!("sample {} does not match a {g}x{g} model", bad.id)));
    }
    let mut model = Model::new(spec, mix_seed(cfg.seed, 1))?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, (lo, hi)) in batch_ranges(order.len(), cfg.batch_size).into_iter().enumerate() {
            let batch: Vec<&Sample> = order[lo..hi].iter().map(|&i| &train[i]).collect();
            let key = [cfg.seed, epoch as u64, bi as u64];
            let (x, y) = batch_tensor(&batch, g, &cfg.augmentation, key);
            let fault = |message: String| Error::TrainingFault { epoch, batch: bi, message };
            model.net.zero_grad();
            let pred = model.net.forward_train(&x).map_err(|e| fault(e.to_string()))?;
            let (loss, grad) = mse_loss(&pred, &y);
            if !loss.is_finite() {
                return Err(fault(format!("loss is {loss}")));
            }
            let dx = model.net.backward(&grad);
            if !dx.all_finite() {
                return Err(fault("non-finite gradient".into()));
            }
            adam.step(&mut model.net);
            total += loss as f64 * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = mse_of(&model, validation)?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingFault {
                epoch,
                batch: 0,
                message: format!("validation loss is {val_loss}"),
            });
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        info!(
            "{} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ({:.1}s)",
            spec.name(),
            entry.elapsed_s
        );
        log.push(entry);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_loss,
    })
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub predictor: Predictor,
    pub members: Vec<TrainOutcome>,
}

/// Trains five members; member `k` validates on the `k`-th fifth of `pool`
/// and trains on the rest plus `bolster`.
pub fn train_ensemble(spec: ModelSpec, pool: &[Sample], bolster: &[Sample], cfg: &TrainConfig) -> Result<EnsembleOutcome> {
    if pool.len() < ENSEMBLE_SIZE {
        return Err(Error::Config(format!(
            "ensemble needs at least {ENSEMBLE_SIZE} pool examples, got {}",
            pool.len()
        )));
    }
    let n = pool.len();
    let mut members = Vec::with_capacity(ENSEMBLE_SIZE);
    for k in 0..ENSEMBLE_SIZE {
        let (lo, hi) = (k * n / ENSEMBLE_SIZE, (k + 1) * n / ENSEMBLE_SIZE);
        let validation = &pool[lo..hi];
        let mut train: Vec<Sample> = pool[..lo].iter().chain(&pool[hi..]).cloned().collect();
        train.extend_from_slice(bolster);
        let member_cfg = TrainConfig {
            seed: mix_seed(cfg.seed, 100 + k as u64),
            ..cfg.clone()
        };
        info!("{} Ensemble: member {}/{ENSEMBLE_SIZE}", spec.name(), k + 1);
        members.push(train_model(spec, &train, validation, &member_cfg)?);
    }
    let predictor = Predictor::Ensemble(members.iter().map(|m| m.model.clone()).collect());
    Ok(EnsembleOutcome { predictor, members })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub name: String,
    pub folds: Vec<FoldResult>,
    pub mean: MetricsReport,
    /// Training log per fold (first member's log for ensembles).
    pub logs: Vec<Vec<EpochLog>>,
}

/// Trains and tests one model (or ensemble) per fold.
pub fn run_cross_validation(
    spec: ModelSpec,
    primary: &[Sample],
    bolster: &[Sample],
    folds: usize,
    cfg: &TrainConfig,
) -> Result<CvResult> {
    cfg.validate()?;
    let splits = make_cv_splits(primary, &[], folds, cfg.seed)?;
    let mut results = Vec::with_capacity(folds);
    let mut logs = Vec::with_capacity(folds);
    let mut name = spec.name();
    for split in &splits {
        let fold_cfg = TrainConfig {
            seed: mix_seed(cfg.seed, 10_000 + split.fold_index as u64),
            ..cfg.clone()
        };
        info!("{}: fold {}/{folds}", spec.name(), split.fold_index + 1);
        let (predictor, log) = train_split(spec, split, bolster, &fold_cfg)?;
        name = predictor.name();
        let pixels: Vec<Vec<f32>> = split.test.iter().map(|s| s.pixels.clone()).collect();
        let pred = predictor.predict_pixels(&pixels)?;
        let labels: Vec<f64> = split.test.iter().map(|s| s.label).collect();
        let metrics = compute_metrics(&labels, &pred)?;
        info!("{name} fold {}: MAE {:.4} MSE {:.5}", split.fold_index + 1, metrics.mae, metrics.mse);
        results.push(FoldResult {
            fold: split.fold_index,
            metrics,
        });
        logs.push(log);
    }
    let mean = mean_report(&results.iter().map(|r| r.metrics).collect::<Vec<_>>()).expect("at least two folds");
    Ok(CvResult {
        name,
        folds: results,
        mean,
        logs,
    })
}

/// Trains on one split: a single model validating on `split.validation`, or
/// an ensemble over the pooled training and validation data.
fn train_split(
    spec: ModelSpec,
    split: &DatasetSplit<Sample>,
    bolster: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Predictor, Vec<EpochLog>)> {
    if cfg.ensemble {
        let mut pool = split.train.clone();
        pool.extend(split.validation.iter().cloned());
        let out = train_ensemble(spec, &pool, bolster, cfg)?;
        let log = out.members[0].log.clone();
        Ok((out.predictor, log))
    } else {
        let mut train = split.train.clone();
        train.extend_from_slice(bolster);
        let out = train_model(spec, &train, &split.validation, cfg)?;
        Ok((Predictor::Single(out.model), out.log))
    }
}

#[derive(Debug, Clone)]
pub struct FinalOutcome {
    pub predictor: Predictor,
    pub log: Vec<EpochLog>,
    /// Metrics on the held-out test block.
    pub test: MetricsReport,
}

/// Trains one deliverable model on the first cross-validation split: the
/// first of `folds` blocks is held out for testing.
pub fn train_final(
    spec: ModelSpec,
    primary: &[Sample],
    bolster: &[Sample],
    folds: usize,
    cfg: &TrainConfig,
) -> Result<FinalOutcome> {
    cfg.validate()?;
    let split = make_cv_splits(primary, &[], folds, cfg.seed)?.swap_remove(0);
    let (predictor, log) = train_split(spec, &split, bolster, cfg)?;
    let pixels: Vec<Vec<f32>> = split.test.iter().map(|s| s.pixels.clone()).collect();
    let labels: Vec<f64> = split.test.iter().map(|s| s.label).collect();
    let test = compute_metrics(&labels, &predictor.predict_pixels(&pixels)?)?;
    Ok(FinalOutcome { predictor, log, test })
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "elapsed_s"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.to_string(),
            format!("{:.3}", e.elapsed_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Results table: one row per fold plus a `mean` row.
pub fn write_results_csv(out: impl Write, results: &[CvResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "fold", "mse", "rmse", "mae", "std", "n"])?;
    for r in results {
        let rows = r
            .folds
            .iter()
            .map(|f| ((f.fold + 1).to_string(), f.metrics))
            .chain(std::iter::once(("mean".to_string(), r.mean)));
        for (fold, m) in rows {
            w.write_record([
                r.name.clone(),
                fold,
                m.mse.to_string(),
                m.rmse.to_string(),
                m.mae.to_string(),
                m.std_of_errors.to_string(),
                m.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
