//! Mini-batch training with MAE loss, global-norm clipping and Adam.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ForecastModel;
use crate::preprocess::{SplitDataset, WindowedDataset};
use crate::tensor::{clip_global_norm, AdamState, Graph, Mode, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm ceiling; `inf` disables clipping.
    pub clip_norm: f64,
    pub dropout: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            epochs: 50,
            clip_norm: 1.0,
            dropout: 0.2,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::usage("batch_size and epochs must be ≥ 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::usage(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::usage("clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of per-batch scaled-space MAE.
    pub train_mae: f64,
    /// Scaled-space MAE over the held-out windows in Eval mode.
    pub test_mae: Option<f64>,
    /// Pre-clip global gradient norm, averaged over batches.
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub batches: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `epoch,train_mae,test_mae,grad_norm_mean,seconds`. With `timing` off
    /// the seconds column is left empty so reruns compare byte for byte.
    pub fn write_csv<W: Write>(&self, w: W, timing: bool) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["epoch", "train_mae", "test_mae", "grad_norm_mean", "seconds"])?;
        for e in &self.epochs {
            wtr.write_record([
                e.epoch.to_string(),
                e.train_mae.to_string(),
                e.test_mae.map(|v| v.to_string()).unwrap_or_default(),
                e.grad_norm_mean.to_string(),
                if timing { format!("{:.3}", e.seconds) } else { String::new() },
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Mean absolute error over every entry; the subgradient at a tie is 0.
pub fn mae_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim("mae_loss", g.shape(pred), g.shape(target)));
    }
    let diff = g.sub(pred, target)?;
    let a = g.abs(diff);
    Ok(g.mean(a))
}

fn batch_tensors(data: &WindowedDataset, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let sub = data.select(idx);
    Ok((
        Tensor::new(vec![idx.len(), data.input_len], sub.inputs)?,
        Tensor::new(vec![idx.len(), data.horizon], sub.targets)?,
    ))
}

/// One pass over `data` in (optionally shuffled) mini-batches; the last
/// batch may be short. `epoch` only labels diagnostics.
pub fn train_epoch(
    model: &mut ForecastModel,
    data: &WindowedDataset,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    if data.horizon != model.horizon() {
        return Err(Error::dim("train_epoch", &[data.horizon], &[model.horizon()]));
    }
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();
    if cfg.shuffle {
        order.shuffle(rng);
    }
    let (mut loss_sum, mut norm_sum, mut norm_max) = (0.0, 0.0, 0.0f64);
    let mut batches = 0;
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let (x, y) = batch_tensors(data, idx)?;
        let mut g = Graph::with_seed(Mode::Train, rng.random());
        let vars = model.params.bind(&mut g);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let pred = model.forward(&mut g, &vars, xv)?;
        let loss = mae_loss(&mut g, pred, yv)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite { epoch, batch: b });
        }
        g.backward(loss)?;
        model.params.zero_grads();
        model.params.absorb_grads(&g, &vars);
        drop(g);
        for p in model.params.as_mut_slice() {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.numel()]);
            }
        }
        let norm = clip_global_norm(model.params.as_mut_slice(), cfg.clip_norm)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite { epoch, batch: b });
        }
        adam.step(model.params.as_mut_slice())?;
        model.params.zero_grads();
        loss_sum += lv;
        norm_sum += norm;
        norm_max = norm_max.max(norm);
        batches += 1;
    }
    Ok(EpochStats {
        epoch,
        train_mae: loss_sum / batches as f64,
        test_mae: None,
        grad_norm_mean: norm_sum / batches as f64,
        grad_norm_max: norm_max,
        batches,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Eval-mode forecasts for every window, in window order, flattened
/// `len × horizon`.
pub fn predict(model: &ForecastModel, data: &WindowedDataset, batch_size: usize) -> Result<Vec<f64>> {
    model.predict(&data.inputs, data.input_len, batch_size)
}

fn eval_mae(model: &ForecastModel, data: &WindowedDataset, batch_size: usize) -> Result<f64> {
    let pred = predict(model, data, batch_size)?;
    let sum: f64 = pred.iter().zip(&data.targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Runs exactly `cfg.epochs` epochs and returns the final weights.
pub fn fit(model: ForecastModel, split: &SplitDataset, cfg: &TrainConfig) -> Result<(ForecastModel, TrainLog)> {
    fit_with(model, split, cfg, |_| {})
}

/// As [`fit`], reporting each finished epoch to `observer` as it completes
/// so a caller keeps the log up to the last good epoch if training aborts.
pub fn fit_with(
    mut model: ForecastModel,
    split: &SplitDataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochStats),
) -> Result<(ForecastModel, TrainLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params.as_mut_slice(), cfg.lr);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let mut stats = train_epoch(&mut model, &split.train, cfg, &mut adam, &mut rng, epoch)?;
        if !split.test.is_empty() {
            let t = Instant::now();
            stats.test_mae = Some(eval_mae(&model, &split.test, cfg.batch_size)?);
            stats.seconds += t.elapsed().as_secs_f64();
        }
        observer(&stats);
        log.epochs.push(stats);
    }
    Ok((model, log))
}
