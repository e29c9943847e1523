//! Supervised training of the encoder.

mod adam;
mod gradcheck;

pub use adam::Adam;
pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport};

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MtsDataset, Normalizer, SliceBatch, SplitRange};
use crate::encoder::{save_checkpoint, Checkpoint, Encoder, KeyTap};
use crate::error::{Error, Result};
use crate::graph::DependencyGraph;
use crate::metrics::evaluate;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MaskedMae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Time slices per step; every slice contributes one window per node.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Raw label value excluded from the loss and metrics.
    pub mask_null_value: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
    /// Use every k-th validation slice; 1 uses all.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 16,
            max_epochs: 100,
            patience: 15,
            seed: 42,
            loss: LossKind::MaskedMae,
            mask_null_value: 0.0,
            clip_norm: None,
            val_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.val_stride == 0 {
            return Err(Error::Config("batch_size and val_stride must be at least 1".into()));
        }
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {} must be positive", c)));
            }
        }
        Ok(())
    }
}

/// Masked mean absolute error recorded on the graph.
///
/// `target` is in the prediction's (normalized) space; the mask comes from the
/// raw labels. With every entry masked the loss is a constant zero.
pub fn masked_mae_loss(g: &mut Graph, pred: Var, target: &[f64], raw: &[f64], null_value: f64) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if g.value(pred).numel() != target.len() || target.len() != raw.len() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs {} targets and {} raw labels",
            shape,
            target.len(),
            raw.len()
        )));
    }
    let mask: Vec<f64> = raw.iter().map(|&y| if y == null_value { 0.0 } else { 1.0 }).collect();
    let count = mask.iter().sum::<f64>();
    if count == 0.0 {
        log::warn!("every label is masked; loss is zero");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let t = g.constant(Tensor::new(shape.clone(), target.to_vec())?);
    let m = g.constant(Tensor::new(shape, mask)?);
    let e = g.sub(pred, t)?;
    let e = g.abs(e);
    let e = g.mul(e, m)?;
    let s = g.sum(e);
    Ok(g.scale(s, 1.0 / count))
}

/// Plain-value form of [`masked_mae_loss`] where predictions and labels share a space.
pub fn masked_mae(pred: &[f64], labels: &[f64], null_value: f64) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} labels", pred.len(), labels.len())));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, y) in pred.iter().zip(labels) {
        if *y != null_value {
            sum += (p - y).abs();
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("every label is masked; loss is zero");
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub trace: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    /// Mean wall time of one training pass over the data, validation excluded.
    pub mean_train_seconds: f64,
}

/// Where [`fit`] writes its artifacts.
#[derive(Clone, Copy, Debug, Default)]
pub struct FitOutputs<'a> {
    /// Append-only per-epoch CSV.
    pub trace: Option<&'a Path>,
    /// Best checkpoint so far, rewritten atomically on every improvement.
    pub checkpoint: Option<&'a Path>,
}

/// Everything a training run reads.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    /// Raw-space panel; windows are normalized on the fly.
    pub raw: &'a MtsDataset,
    pub normalizer: &'a Normalizer,
    pub train: SplitRange,
    pub val: SplitRange,
    pub graph: Option<&'a DependencyGraph>,
}

const TRACE_HEADER: &str = "epoch,train_loss,val_mae,val_rmse,val_mape,seconds";

fn append_trace(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(
        f,
        "{},{},{},{},{},{:.3}",
        rec.epoch, rec.train_loss, rec.val_mae, rec.val_rmse, rec.val_mape, rec.seconds
    )
    .map_err(|e| Error::io(path, e))
}

/// Validation metrics in raw units.
pub fn validate_split(
    encoder: &Encoder,
    data: &TrainData<'_>,
    split: SplitRange,
    stride: usize,
    batch_slices: usize,
    null_value: f64,
) -> Result<crate::metrics::EvalReport> {
    let steps: Vec<usize> = encoder.config.window().end_steps(split).step_by(stride.max(1)).collect();
    if steps.is_empty() {
        return Err(Error::Config(format!(
            "split of {} steps holds no window of length {}",
            split.len,
            encoder.config.history + encoder.config.horizon
        )));
    }
    let enc = encoder.encode_slices(data.raw, data.normalizer, &steps, data.graph, KeyTap::FusionOutput, batch_slices)?;
    let c = encoder.config.channels;
    let raw_pred: Vec<f64> = enc
        .predictions
        .iter()
        .enumerate()
        .map(|(i, &v)| data.normalizer.inverse_value(v, i % c))
        .collect();
    evaluate(&raw_pred, &enc.raw_targets, encoder.config.horizon, c, null_value)
}

/// One optimization step on a batch; returns the loss before the update.
pub fn train_step(
    encoder: &mut Encoder,
    adam: &mut Adam,
    batch: &SliceBatch,
    graph: Option<&DependencyGraph>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = encoder.params.bind(&mut g, true);
    let x = g.constant(batch.inputs.clone());
    let out = encoder.forward(&mut g, &bound, x, graph, Some(rng))?;
    let loss = masked_mae_loss(&mut g, out.prediction, &batch.targets, &batch.raw_targets, cfg.mask_null_value)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {}", value)));
    }
    g.backward(loss)?;
    let mut grads = bound.grads(&g);
    drop(bound);
    if let Some(max) = cfg.clip_norm {
        clip_global_norm(&mut grads, max);
    }
    adam.step(&mut encoder.params, &grads, cfg.lr)?;
    Ok(value)
}

/// Scales all gradients so their joint L2 norm is at most `max`.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Trains `encoder` in place and leaves it holding the best-validation parameters.
///
/// On divergence the best parameters are restored (and remain on disk when a
/// checkpoint path was given) before the numeric error is returned.
pub fn fit(encoder: &mut Encoder, data: &TrainData<'_>, cfg: &TrainConfig, outputs: FitOutputs<'_>) -> Result<FitReport> {
    cfg.validate()?;
    if let Some(path) = outputs.trace {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", TRACE_HEADER).map_err(|e| Error::io(path, e))?;
    }
    let save = |enc: &Encoder| -> Result<()> {
        match outputs.checkpoint {
            Some(path) => save_checkpoint(
                &Checkpoint {
                    encoder: enc.clone(),
                    normalizer: data.normalizer.clone(),
                },
                path,
            ),
            None => Ok(()),
        }
    };
    let mut report = FitReport {
        trace: Vec::new(),
        best_epoch: 0,
        best_val_mae: f64::INFINITY,
        mean_train_seconds: 0.0,
    };
    save(encoder)?;
    if cfg.max_epochs == 0 {
        return Ok(report);
    }
    let spec = encoder.config.window();
    let mut steps: Vec<usize> = spec.end_steps(data.train).collect();
    if steps.is_empty() {
        return Err(Error::Config(format!(
            "training split of {} steps holds no window of length {}",
            data.train.len,
            spec.history + spec.horizon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&encoder.params);
    let mut best = encoder.params.clone();
    let mut since_best = 0;
    let mut train_seconds = 0.0;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        steps.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in steps.chunks(cfg.batch_size) {
            let batch = SliceBatch::gather(data.raw, data.normalizer, &spec, chunk)?;
            match train_step(encoder, &mut adam, &batch, data.graph, cfg, &mut rng) {
                Ok(l) => total += l,
                Err(e @ Error::Numeric(_)) => {
                    log::error!("epoch {}: {}; restoring the best parameters", epoch, e);
                    encoder.params = best;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            batches += 1;
        }
        train_seconds += started.elapsed().as_secs_f64();
        let val = validate_split(encoder, data, data.val, cfg.val_stride, cfg.batch_size, cfg.mask_null_value)?;
        let m = val
            .average
            .ok_or_else(|| Error::Degenerate("every validation label is masked".into()))?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_mae: m.mae,
            val_rmse: m.rmse,
            val_mape: m.mape,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} train_loss {:.5} val_mae {:.5} ({:.1}s)",
            epoch,
            rec.train_loss,
            rec.val_mae,
            rec.seconds
        );
        if let Some(path) = outputs.trace {
            append_trace(path, &rec)?;
        }
        report.trace.push(rec);
        if m.mae < report.best_val_mae {
            report.best_val_mae = m.mae;
            report.best_epoch = epoch;
            best = encoder.params.clone();
            since_best = 0;
            save(encoder)?;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("no validation improvement for {} epochs; stopping", since_best);
                break;
            }
        }
    }
    report.mean_train_seconds = train_seconds / report.trace.len() as f64;
    encoder.params = best;
    Ok(report)
}
