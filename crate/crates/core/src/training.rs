//! Early-stopped fine-tuning with per-epoch accuracy and timing capture.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_pipeline, resize, AugmentationConfig, Mode};
use crate::dataset::{ImageRecord, SplitAssignment};
use crate::error::{Error, Result};
use crate::model::{checkpoint, images_to_batch, ClassifierModel};
use crate::pixels::{load_image, PixelTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    MomentumSgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "momentum-sgd" | "sgd" => Ok(Self::MomentumSgd),
            other => Err(Error::arg(format!("unknown optimizer '{other}' (expected adam or momentum-sgd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub max_epochs: usize,
    pub early_stopping_patience: usize,
    pub early_stopping_min_delta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Only read by momentum SGD.
    pub momentum: f64,
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            early_stopping_patience: 5,
            early_stopping_min_delta: 0.001,
            batch_size: 32,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            freeze_backbone: false,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.early_stopping_patience == 0 || self.batch_size == 0 {
            return Err(Error::arg("max_epochs, early_stopping_patience and batch_size must all be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.early_stopping_min_delta >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("early_stopping_min_delta must be >= 0 and momentum in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch_index: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingResult {
    pub first_epoch_accuracy: f64,
    /// Best evaluation accuracy, i.e. that of the restored weights.
    pub final_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub total_seconds: f64,
    pub seconds_per_epoch: f64,
    pub per_epoch: Vec<EpochMetrics>,
    pub best_checkpoint_path: Option<PathBuf>,
}

/// True when each of the last `patience` accuracies fails to beat the best
/// accuracy before them by more than `min_delta`.
pub fn should_stop(history: &[f64], patience: usize, min_delta: f64) -> bool {
    let patience = patience.max(1);
    if history.len() < patience + 1 {
        return false;
    }
    let (prior, window) = history.split_at(history.len() - patience);
    let best = prior.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    window.iter().all(|a| *a <= best + min_delta)
}

/// Fraction of positions where prediction and label agree.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::arg(format!(
            "need equal, non-empty prediction and label lists, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|i| i as usize).collect())
}

fn labels_for(records: &[ImageRecord], classes: &[String]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    records
        .iter()
        .map(|r| {
            index.get(r.class_id.as_str()).copied().ok_or_else(|| {
                Error::data(format!("class '{}' of {} is not among the model's classes", r.class_id, r.path.display()))
            })
        })
        .collect()
}

/// Decoded images resized to the model input size, kept in memory when
/// they fit within a budget and re-read from disk otherwise.
struct ImageSource<'a> {
    records: &'a [ImageRecord],
    size: usize,
    cached: Option<Vec<PixelTensor>>,
}

const CACHE_BUDGET_BYTES: usize = 1 << 30;

impl<'a> ImageSource<'a> {
    fn new(records: &'a [ImageRecord], size: usize) -> Result<Self> {
        let bytes = records.len() * size * size * 3 * std::mem::size_of::<f32>();
        let mut src = Self {
            records,
            size,
            cached: None,
        };
        if bytes <= CACHE_BUDGET_BYTES {
            src.cached = Some((0..records.len()).map(|i| src.read(i)).collect::<Result<_>>()?);
        }
        Ok(src)
    }

    fn read(&self, i: usize) -> Result<PixelTensor> {
        resize(&load_image(&self.records[i].path)?, self.size)
    }

    fn get(&self, i: usize) -> Result<PixelTensor> {
        match &self.cached {
            Some(c) => Ok(c[i].clone()),
            None => self.read(i),
        }
    }
}

const EVAL_BATCH: usize = 32;

fn predict(model: &ClassifierModel, source: &ImageSource, aug: &AugmentationConfig) -> Result<Vec<usize>> {
    let mut pipeline = build_pipeline(aug, Mode::Eval)?;
    let mut out = Vec::with_capacity(source.records.len());
    let idx: Vec<usize> = (0..source.records.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let imgs = chunk
            .iter()
            .map(|i| pipeline.apply(&source.get(*i)?))
            .collect::<Result<Vec<_>>>()?;
        let logits = model.forward_logits(&images_to_batch(&imgs, model.device())?)?;
        out.extend(argmax_rows(&logits)?);
    }
    Ok(out)
}

fn with_eval_mode<T>(model: &mut ClassifierModel, f: impl FnOnce(&ClassifierModel) -> Result<T>) -> Result<T> {
    let prev = model.mode();
    model.set_mode(Mode::Eval);
    let out = f(model);
    model.set_mode(prev);
    out
}

/// Top-1 accuracy of `model` over `records` through the eval pipeline.
/// `classes` gives the model's output order.
pub fn evaluate_accuracy(
    model: &mut ClassifierModel,
    records: &[ImageRecord],
    classes: &[String],
    aug: &AugmentationConfig,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty record list"));
    }
    let labels = labels_for(records, classes)?;
    let source = ImageSource::new(records, aug.target_size)?;
    let preds = with_eval_mode(model, |m| predict(m, &source, aug))?;
    top1_accuracy(&preds, &labels)
}

struct MomentumSgd {
    vars: Vec<Var>,
    velocity: Vec<Tensor>,
    lr: f64,
    momentum: f64,
}

impl MomentumSgd {
    fn new(vars: Vec<Var>, lr: f64, momentum: f64) -> Result<Self> {
        let velocity = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<_>>()?;
        Ok(Self {
            vars,
            velocity,
            lr,
            momentum,
        })
    }

    fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            if let Some(g) = grads.get(var) {
                *vel = ((&*vel * self.momentum)? + g)?;
                var.set(&var.sub(&(&*vel * self.lr)?)?)?;
            }
        }
        Ok(())
    }
}

enum Opt {
    Adam(AdamW),
    Sgd(MomentumSgd),
}

impl Opt {
    fn new(cfg: &TrainingConfig, vars: Vec<Var>) -> Result<Self> {
        Ok(match cfg.optimizer {
            OptimizerKind::Adam => Opt::Adam(AdamW::new(
                vars,
                ParamsAdamW {
                    lr: cfg.learning_rate,
                    weight_decay: 0.0,
                    ..ParamsAdamW::default()
                },
            )?),
            OptimizerKind::MomentumSgd => Opt::Sgd(MomentumSgd::new(vars, cfg.learning_rate, cfg.momentum)?),
        })
    }

    fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        match self {
            Opt::Adam(a) => Ok(a.backward_step(loss)?),
            Opt::Sgd(s) => s.backward_step(loss),
        }
    }
}

fn check_split(split: &SplitAssignment, classes: &[String], model: &ClassifierModel) -> Result<()> {
    let overlap = split.overlap();
    if let Some(first) = overlap.first() {
        return Err(Error::Leakage {
            count: overlap.len(),
            example: first.clone(),
        });
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::data(format!(
            "split has {} train and {} test images; both sides must be non-empty",
            split.train.len(),
            split.test.len()
        )));
    }
    if classes.len() != model.num_classes() {
        return Err(Error::data(format!(
            "corpus has {} classes but the model head outputs {}",
            classes.len(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Fine-tunes `model` on `split.train`, evaluating on `split.test` after
/// every epoch. The best-scoring weights are restored before returning and,
/// when `run_dir` is given, written there as a checkpoint.
pub fn train(
    model: &mut ClassifierModel,
    split: &SplitAssignment,
    classes: &[String],
    aug: &AugmentationConfig,
    cfg: &TrainingConfig,
    run_dir: Option<&Path>,
) -> Result<TrainingResult> {
    cfg.validate()?;
    aug.validate()?;
    check_split(split, classes, model)?;
    let train_labels = labels_for(&split.train, classes)?;
    let test_labels = labels_for(&split.test, classes)?;

    let train_src = ImageSource::new(&split.train, aug.target_size)?;
    let test_src = ImageSource::new(&split.test, aug.target_size)?;
    let mut pipeline = build_pipeline(aug, Mode::Train)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Opt::new(cfg, model.trainable_vars(cfg.freeze_backbone))?;
    let ckpt_path = run_dir.map(checkpoint::checkpoint_file);

    let mut per_epoch: Vec<EpochMetrics> = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        model.set_mode(Mode::Train);
        pipeline.reseed(aug.seed ^ cfg.seed.rotate_left(17) ^ epoch as u64);
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut order_rng);

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let imgs = chunk
                .iter()
                .map(|i| pipeline.apply(&train_src.get(*i)?))
                .collect::<Result<Vec<_>>>()?;
            let batch = images_to_batch(&imgs, model.device())?;
            let labels: Vec<u32> = chunk.iter().map(|i| train_labels[*i] as u32).collect();
            let labels = Tensor::new(labels.as_slice(), model.device())?;
            let logits = model.forward_logits(&batch)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &labels)?;
            opt.backward_step(&loss)?;
            loss_sum += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
            seen += chunk.len();
        }

        let preds = with_eval_mode(model, |m| predict(m, &test_src, aug))?;
        let acc = top1_accuracy(&preds, &test_labels)?;
        let m = EpochMetrics {
            epoch_index: epoch,
            train_loss: loss_sum / seen as f64,
            eval_accuracy: acc,
            wall_seconds: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, accuracy {:.4}, {:.1}s",
            m.train_loss,
            m.eval_accuracy,
            m.wall_seconds
        );
        per_epoch.push(m);
        history.push(acc);

        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, model.snapshot()?));
        }
        if should_stop(&history, cfg.early_stopping_patience, cfg.early_stopping_min_delta) {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let (final_accuracy, best_epoch, weights) = best.expect("at least one epoch ran");
    model.restore(&weights)?;
    model.set_mode(Mode::Eval);
    if let Some(path) = &ckpt_path {
        checkpoint::save_checkpoint(model, classes, Some(cfg), Some(aug), path)?;
    }

    let total_seconds: f64 = per_epoch.iter().map(|e| e.wall_seconds).sum();
    let result = TrainingResult {
        first_epoch_accuracy: per_epoch[0].eval_accuracy,
        final_accuracy,
        best_epoch,
        epochs_run: per_epoch.len(),
        stopped_early,
        total_seconds,
        seconds_per_epoch: total_seconds / per_epoch.len() as f64,
        per_epoch,
        best_checkpoint_path: ckpt_path,
    };
    if let Some(dir) = run_dir {
        write_metrics_csv(&result, &dir.join("metrics.csv"))?;
        let json = serde_json::to_string_pretty(&result).expect("result serializes");
        let path = dir.join("training_result.json");
        std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(result)
}

/// Per-epoch log with columns `epoch,train_loss,eval_accuracy,wall_seconds`.
pub fn write_metrics_csv(result: &TrainingResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "train_loss", "eval_accuracy", "wall_seconds"]).map_err(io)?;
    for e in &result.per_epoch {
        w.write_record([
            e.epoch_index.to_string(),
            e.train_loss.to_string(),
            e.eval_accuracy.to_string(),
            e.wall_seconds.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub epochs: usize,
    pub total_seconds: f64,
    pub seconds_per_epoch: f64,
    pub machine: String,
}

impl fmt::Display for TimingRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} epochs, {:.1} min total, {:.2} min/epoch on {}",
            self.epochs,
            self.total_seconds / 60.0,
            self.seconds_per_epoch / 60.0,
            self.machine
        )
    }
}

pub fn timing_report(result: &TrainingResult) -> TimingRow {
    TimingRow {
        epochs: result.epochs_run,
        total_seconds: result.total_seconds,
        seconds_per_epoch: result.total_seconds / result.epochs_run.max(1) as f64,
        machine: machine_descriptor(),
    }
}

/// CPU model, logical core count and OS, as far as they can be read.
pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}, {cores} logical cores, {}, cpu backend", std::env::consts::OS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopping_rule() {
        assert!(!should_stop(&[0.5, 0.6, 0.7], 2, 0.001));
        assert!(should_stop(&[0.9, 0.9, 0.9], 2, 0.001));
        assert!(!should_stop(&[0.9, 0.9], 2, 0.001));
        assert!(!should_stop(&[0.9, 0.9, 0.9025], 2, 0.001));
        assert!(should_stop(&[0.9, 0.95, 0.9, 0.9505], 2, 0.001));
    }

    #[test]
    fn accuracy_arithmetic() {
        let labels: Vec<usize> = (0..10).collect();
        let mut preds = labels.clone();
        assert_eq!(top1_accuracy(&preds, &labels).unwrap(), 1.0);
        preds[0] = 9;
        preds[4] = 0;
        preds[7] = 1;
        assert!((top1_accuracy(&preds, &labels).unwrap() - 0.7).abs() < 1e-12);
        assert!(top1_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig { max_epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!("momentum-sgd".parse::<OptimizerKind>().unwrap(), OptimizerKind::MomentumSgd);
    }

    #[test]
    fn timing_is_consistent() {
        let per_epoch: Vec<EpochMetrics> = (1..=3)
            .map(|i| EpochMetrics {
                epoch_index: i,
                train_loss: 1.0,
                eval_accuracy: 0.5,
                wall_seconds: 140.0 + i as f64,
            })
            .collect();
        let r = TrainingResult {
            first_epoch_accuracy: 0.5,
            final_accuracy: 0.5,
            best_epoch: 1,
            epochs_run: 3,
            stopped_early: false,
            total_seconds: 426.0,
            seconds_per_epoch: 142.0,
            per_epoch,
            best_checkpoint_path: None,
        };
        let row = timing_report(&r);
        assert!((row.seconds_per_epoch * 3.0 - row.total_seconds).abs() / row.total_seconds < 0.01);
        assert!(!row.machine.is_empty());
    }
}
