//! SGD with momentum and decoupled-from-BN weight decay, a step schedule,
//! cross-entropy training and multi-clip evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Model;
use crate::error::{Result, TamError};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::synth::Dataset;
use crate::tape::{Mode, Tape};
use crate::tensor::{DType, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Fractions of `epochs` at which the rate is divided by 10.
    pub lr_milestones: Vec<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            lr_milestones: vec![0.5, 0.75, 0.9],
            batch_size: 16,
            seed: 0,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TamError::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(TamError::config("momentum must be in [0, 1) and weight_decay non-negative"));
        }
        if self.batch_size == 0 {
            return Err(TamError::config("batch_size must be positive"));
        }
        let mut prev = 0.0;
        for &m in &self.lr_milestones {
            if !(m > prev && m < 1.0) {
                return Err(TamError::config(format!(
                    "lr_milestones must be strictly increasing in (0, 1), got {:?}",
                    self.lr_milestones
                )));
            }
            prev = m;
        }
        Ok(())
    }

    /// Epoch indices at which the rate drops.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.lr_milestones
            .iter()
            .map(|m| (m * self.epochs as f64).ceil() as usize)
            .collect()
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr0;
        for e in self.milestone_epochs() {
            if epoch >= e {
                lr *= 0.1;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClipSampling {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFusion {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub num_clips: usize,
    pub clip_sampling: ClipSampling,
    pub score_fusion: ScoreFusion,
    /// Clips per forward pass.
    pub batch_size: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            num_clips: 1,
            clip_sampling: ClipSampling::Uniform,
            score_fusion: ScoreFusion::Mean,
            batch_size: 50,
        }
    }
}

impl EvalProtocol {
    /// Start frames of `num_clips` windows of `window` frames spread evenly
    /// over a video of `length` frames.
    pub fn offsets(&self, length: usize, window: usize) -> Result<Vec<usize>> {
        if self.num_clips == 0 {
            return Err(TamError::config("num_clips must be at least 1"));
        }
        if window > length {
            return Err(TamError::config(format!("clip of {window} frames exceeds video length {length}")));
        }
        let span = length - window;
        if self.num_clips > span + 1 {
            return Err(TamError::config(format!(
                "{} clips requested but only {} distinct {window}-frame windows exist",
                self.num_clips,
                span + 1
            )));
        }
        if self.num_clips == 1 {
            return Ok(vec![span / 2]);
        }
        Ok((0..self.num_clips).map(|i| i * span / (self.num_clips - 1)).collect())
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Sgd<F> {
    velocity: BTreeMap<String, Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new() -> Self {
        Self {
            velocity: BTreeMap::new(),
        }
    }

    /// `v = momentum * v + g + wd * w; w -= lr * v`, with decay only on
    /// weights. Running statistics are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, cfg: &TrainConfig, lr: f64) -> Result<()> {
        for (name, e) in store.iter() {
            if e.trainable() && !e.grad.all_finite() {
                return Err(TamError::NanGradient { name: name.to_string() });
            }
        }
        let (m, wd, lr) = (F::cst(cfg.momentum), F::cst(cfg.weight_decay), F::cst(lr));
        for (name, e) in store.iter_mut() {
            if !e.trainable() {
                continue;
            }
            let decay = if e.decays() { wd } else { F::zero() };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); e.value.numel()]);
            let g = e.grad.data();
            let w = e.value.data_mut();
            for i in 0..w.len() {
                v[i] = m * v[i] + g[i] + decay * w[i];
                w[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_top1\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_top1));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub history: Vec<EpochRecord>,
    /// Parameters of the epoch with the highest validation top-1 (the
    /// initial weights when no epoch ran).
    pub best: ParamStore<F>,
    pub best_epoch: Option<usize>,
}

/// Rank of `label` among `scores` (0 = best); ties favour lower indices.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < label))
        .count()
}

/// Accuracy of fused scores, one `(num_classes)` row per video.
pub fn topk_metrics(scores: &[Vec<f64>], labels: &[usize]) -> Metrics {
    let n = labels.len().max(1) as f64;
    let (mut t1, mut t5) = (0usize, 0usize);
    for (row, &y) in scores.iter().zip(labels) {
        let r = rank_of(row, y);
        t1 += (r < 1) as usize;
        t5 += (r < 5) as usize;
    }
    Metrics {
        top1: t1 as f64 / n,
        top5: t5 as f64 / n,
    }
}

/// Mean eval-mode logits over several views of the same videos, each view
/// a `(N, C, T, H, W)` batch.
pub fn fused_logits<F: Real>(model: &Model<F>, views: &[Tensor<F>]) -> Result<Vec<Vec<f64>>> {
    let first = views.first().ok_or_else(|| TamError::config("no views to evaluate"))?;
    let n = first.dim(0);
    let k = model.config.num_classes;
    let mut acc = vec![vec![0.0; k]; n];
    for v in views {
        let logits = model.predict(v, Mode::Eval)?;
        if logits.shape() != [n, k] {
            return Err(TamError::shape("fused_logits", format!("{:?} vs ({n}, {k})", logits.shape())));
        }
        for (row, l) in acc.iter_mut().zip(logits.data().chunks(k)) {
            for (a, &b) in row.iter_mut().zip(l) {
                *a += b.as_f64();
            }
        }
    }
    let inv = 1.0 / views.len() as f64;
    acc.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok(acc)
}

/// Video-level top-1/top-5 with temporal multi-clip score averaging.
pub fn evaluate<F: Real>(model: &Model<F>, data: &Dataset, protocol: &EvalProtocol) -> Result<Metrics> {
    if data.is_empty() {
        return Err(TamError::config("empty evaluation set"));
    }
    let length = data.samples[0].clip.dim(2);
    let offsets = protocol.offsets(length, model.config.frames)?;
    let bs = protocol.batch_size.max(1);
    let mut scores = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(bs) {
        let mut views = Vec::with_capacity(offsets.len());
        let mut ys = Vec::new();
        for &o in &offsets {
            let (x, y) = data.batch::<F>(chunk, o, model.config.frames)?;
            views.push(x);
            ys = y;
        }
        scores.extend(fused_logits(model, &views)?);
        labels.extend(ys);
    }
    Ok(topk_metrics(&scores, &labels))
}

/// One optimisation step on a batch; returns the batch loss.
pub fn train_step<F: Real>(
    model: &mut Model<F>,
    sgd: &mut Sgd<F>,
    cfg: &TrainConfig,
    lr: f64,
    x: Tensor<F>,
    labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let loss = {
        let mut ctx = Ctx::new(&mut tape, &model.params, Mode::Train);
        let logits = model.forward(&mut ctx, xv)?;
        ctx.tape.cross_entropy(logits, labels)?
    };
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    model.params.zero_grads();
    tape.accumulate_into(&mut model.params)?;
    tape.commit_state(&mut model.params)?;
    sgd.step(&mut model.params, cfg, lr)?;
    Ok(value.as_f64())
}

/// Trains for `cfg.epochs` epochs, evaluating on `val` after each and
/// keeping the best parameters. `on_epoch` sees every record as it lands.
pub fn train_loop<F: Real>(
    model: &mut Model<F>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    protocol: &EvalProtocol,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TamError::config("empty training set"));
    }
    let frames = model.config.frames;
    let length = train.samples[0].clip.dim(2);
    let offset = (length.saturating_sub(frames)) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.params.clone();
    let mut best_epoch = None;
    let mut best_top1 = f64::NEG_INFINITY;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch::<F>(chunk, offset, frames)?;
            let loss = match train_step(model, &mut sgd, cfg, lr, x, &y) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(TamError::Diverged { epoch, step, loss: l }),
                Err(TamError::NonFinite { .. }) => {
                    return Err(TamError::Diverged { epoch, step, loss: f64::NAN });
                }
                Err(e) => return Err(e),
            };
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_top1 = evaluate(model, val, protocol)?.top1;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: total / seen as f64,
            val_top1,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} val top1 {:.4}",
            rec.train_loss,
            rec.val_top1
        );
        on_epoch(&rec);
        if val_top1 > best_top1 {
            best_top1 = val_top1;
            best = model.params.clone();
            best_epoch = Some(epoch);
        }
        history.push(rec);
    }
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn schedule_steps_by_tenths() {
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.milestone_epochs(), vec![10, 15, 18]);
        assert_eq!(cfg.lr_at(9), 0.01);
        assert_eq!(cfg.lr_at(10), 0.01 * 0.1);
        assert_eq!(cfg.lr_at(19), 0.01 * 0.1 * 0.1 * 0.1);
    }

    #[test]
    fn plain_step_without_momentum_or_decay() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_fn(&[2], |i| i as f64), ParamKind::Weight).unwrap();
        s.accumulate_grad("w", &Tensor::from_fn(&[2], |_| 1.0)).unwrap();
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        Sgd::new().step(&mut s, &cfg, 0.5).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn offsets_spread_and_bound() {
        let p = EvalProtocol {
            num_clips: 3,
            ..EvalProtocol::default()
        };
        assert_eq!(p.offsets(12, 8).unwrap(), vec![0, 2, 4]);
        assert!(p.offsets(9, 8).is_err());
    }
}
