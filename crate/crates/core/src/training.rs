//! Cross-entropy training with Adam, evaluation and multi-seed repeats.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Normalizer, TimeSeriesDataset};
use crate::engine::{AdamState, Graph, Scalar};
use crate::error::{Error, Result};
use crate::model::{count_macs, FormerTime, ModelConfig};

fn default_lr() -> f64 {
    1e-3
}

fn default_batch_size() -> usize {
    16
}

fn default_max_epochs() -> usize {
    50
}

fn default_eval_every() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub normalize: bool,
    /// Stop after this many evaluations without a new best accuracy.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Stop as soon as the best test accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            eval_every: default_eval_every(),
            seeds: default_seeds(),
            normalize: false,
            patience: None,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it freezes the model, which is handy for baselines
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size and eval_every must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Present on evaluation epochs.
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub final_accuracy: f64,
    /// Forward MACs for one sample.
    pub macs: u64,
    pub parameters: usize,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.train_loss).collect()
    }
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64
}

/// Predicted class per sample; ties go to the lowest index.
pub fn predict<T: Scalar>(model: &FormerTime<T>, ds: &TimeSeriesDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    for idx in batch_indices(ds.len(), 64, false, 0)? {
        let (x, _) = ds.batch::<T>(&idx)?;
        let logits = model.forward(&x)?;
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate<T: Scalar>(model: &FormerTime<T>, ds: &TimeSeriesDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let pred = predict(model, ds)?;
    let hits = pred.iter().zip(ds.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Runs one optimization epoch and returns the sample-weighted mean loss.
pub fn train_epoch<T: Scalar>(
    model: &mut FormerTime<T>,
    adam: &mut AdamState<T>,
    train: &TimeSeriesDataset,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for idx in batch_indices(train.len(), batch_size, true, shuffle_seed)? {
        let (x, y) = train.batch::<T>(&idx)?;
        let mut graph = Graph::new();
        let input = model.input(&mut graph, &x)?;
        let logits = model.logits_var(&mut graph, input, None)?;
        let loss = graph.cross_entropy(logits, &y)?;
        total += graph.value(loss).data()[0].as_f64() * idx.len() as f64;
        graph.backward(loss)?;
        graph.accumulate_param_grads(&mut model.params);
        adam.step(&mut model.params);
    }
    Ok(total / train.len() as f64)
}

/// Trains a fresh model built with `seed` and reports per-epoch progress
/// through `on_epoch`.
pub fn train_with<T: Scalar>(
    model_cfg: &ModelConfig,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainReport, FormerTime<T>)> {
    cfg.validate()?;
    train.check_compatible(test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::data("train and test splits must be non-empty"));
    }
    if train.channels() != model_cfg.input_channels || train.num_classes() != model_cfg.num_classes {
        return Err(Error::data(format!(
            "data has {} channels and {} classes, model expects {} and {}",
            train.channels(),
            train.num_classes(),
            model_cfg.input_channels,
            model_cfg.num_classes
        )));
    }
    let start = Instant::now();
    let (train, test) = if cfg.normalize {
        let norm = Normalizer::fit(train)?;
        (norm.apply(train)?, norm.apply(test)?)
    } else {
        (train.clone(), test.clone())
    };

    let mut mcfg = model_cfg.clone();
    mcfg.seed = seed;
    let mut model = FormerTime::<T>::build(&mcfg)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut history = Vec::new();
    let (mut best, mut best_epoch, mut last_acc) = (f64::NEG_INFINITY, 0, None);
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let loss = train_epoch(&mut model, &mut adam, &train, cfg.batch_size, shuffle_seed(seed, epoch))?;
        let eval_now = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
        let acc = if eval_now { Some(evaluate(&model, &test)?) } else { None };
        let record = EpochRecord {
            epoch,
            train_loss: loss,
            test_accuracy: acc,
        };
        on_epoch(&record);
        history.push(record);
        if let Some(a) = acc {
            last_acc = Some(a);
            if a > best {
                best = a;
                best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
            let reached = cfg.target_accuracy.is_some_and(|t| best >= t);
            let stale = cfg.patience.is_some_and(|p| since_best >= p);
            if reached || stale {
                break;
            }
        }
    }
    let final_accuracy = match last_acc {
        Some(a) => a,
        None => evaluate(&model, &test)?,
    };
    if history.is_empty() {
        best = final_accuracy;
    }
    let report = TrainReport {
        seed,
        history,
        best_accuracy: best,
        best_epoch,
        final_accuracy,
        macs: count_macs(&mcfg, train.length(), train.channels())?.total(),
        parameters: model.num_parameters(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, model))
}

pub fn train<T: Scalar>(
    model_cfg: &ModelConfig,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    train_with::<T>(model_cfg, train, test, cfg, seed, |_| {}).map(|(r, _)| r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub seeds: Vec<u64>,
    pub best_accuracies: Vec<f64>,
    pub final_accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub mean_final: f64,
}

impl RepeatSummary {
    pub fn from_reports(reports: &[TrainReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::config("no runs to summarize"));
        }
        let best: Vec<f64> = reports.iter().map(|r| r.best_accuracy).collect();
        let finals: Vec<f64> = reports.iter().map(|r| r.final_accuracy).collect();
        let n = best.len() as f64;
        let mean = best.iter().sum::<f64>() / n;
        let std = (best.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            seeds: reports.iter().map(|r| r.seed).collect(),
            mean,
            std,
            mean_final: finals.iter().sum::<f64>() / n,
            best_accuracies: best,
            final_accuracies: finals,
        })
    }
}

/// One independent build and training per seed in `cfg.seeds`.
pub fn run_repeats<T: Scalar>(
    model_cfg: &ModelConfig,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    cfg: &TrainConfig,
) -> Result<(RepeatSummary, Vec<TrainReport>)> {
    cfg.validate()?;
    let reports = cfg
        .seeds
        .iter()
        .map(|&s| self::train::<T>(model_cfg, train, test, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((RepeatSummary::from_reports(&reports)?, reports))
}
