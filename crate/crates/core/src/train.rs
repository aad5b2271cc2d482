//! Two-stage training: SGD on the mean-squared error for the deterministic
//! network, then Adam on the heteroscedastic loss for the Bayesian one.
//!
//! Every epoch writes `epoch_<n>.ckpt` and a row of `history.csv` into the
//! output directory. When the run ends, the epoch minimizing the selection
//! metric is copied byte for byte to `selected.ckpt`. Shuffles and dropout
//! noise are drawn from streams keyed by `(seed, stage, epoch, step)`, so a
//! run resumed from any checkpoint continues bit for bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, TrainState};
use crate::error::{Error, Result};
use crate::layers::{MaskMode, NormMode};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{label, stream};
use crate::unet::{loss_heteroscedastic, loss_mse, UNet};

pub const HISTORY_FILE: &str = "history.csv";
pub const SELECTED_FILE: &str = "selected.ckpt";
pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,combined";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Deterministic,
    Bayesian,
}

impl Stage {
    fn id(self) -> u64 {
        match self {
            Stage::Deterministic => 0,
            Stage::Bayesian => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Deterministic => "deterministic",
            Stage::Bayesian => "bayesian",
        }
    }
}

/// Losses after one epoch (epochs count from 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// `val_weight·val + train_weight·train`, minimized to pick the kept epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionMetric {
    pub val_weight: f64,
    pub train_weight: f64,
}

impl Default for SelectionMetric {
    fn default() -> Self {
        SelectionMetric { val_weight: 0.8, train_weight: 0.2 }
    }
}

impl SelectionMetric {
    pub fn combined(&self, r: &EpochRecord) -> f64 {
        self.val_weight * r.val_loss + self.train_weight * r.train_loss
    }

    /// Epoch number of the minimum; the earliest wins ties.
    pub fn select(&self, history: &[EpochRecord]) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for r in history {
            let c = self.combined(r);
            if best.is_none_or(|(b, _)| c < b) {
                best = Some((c, r.epoch));
            }
        }
        best.map(|(_, e)| e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Epoch budget.
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Prior length scale of the dropout regularizer (Bayesian stage).
    pub length_scale: f64,
    pub selection: SelectionMetric,
    /// Stop after this many epochs without a new best combined metric.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn deterministic(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Deterministic,
            epochs: 200,
            batch_size: 10,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            length_scale: 1e-4,
            selection: SelectionMetric::default(),
            patience: 25,
            seed,
        }
    }

    pub fn bayesian(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Bayesian,
            batch_size: 7,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-5,
            ..TrainConfig::deterministic(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument("epochs, batch size and patience must be positive".into()));
        }
        if !(self.length_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("length scale must be positive, got {}", self.length_scale)));
        }
        Ok(())
    }
}

/// One training pair: normalized observation `(1, C, N)` and target `(1, 1, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub selected_epoch: usize,
    /// The network restored from `selected.ckpt`.
    pub selected: UNet,
    pub stopped_early: bool,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.ckpt"))
}

/// Trains `model` from scratch (or from its transferred initialization).
pub fn train(model: &mut UNet, data: &TrainData, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params().values())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    write_history(out_dir, &[], &cfg.selection)?;
    run(model, opt, Vec::new(), data, cfg, out_dir)
}

/// Continues a run from one of its per-epoch checkpoints. The optimizer and
/// history come from the checkpoint; the budget and selection settings from
/// `cfg`, whose stage and seed must match the saved run.
pub fn resume(ckpt: &Path, data: &TrainData, cfg: &TrainConfig, out_dir: &Path) -> Result<(UNet, TrainOutcome)> {
    cfg.validate()?;
    let saved = Checkpoint::load(ckpt)?;
    let mut model = saved.to_model()?;
    let state =
        saved.training.ok_or_else(|| Error::InvalidArgument(format!("{} holds no training state", ckpt.display())))?;
    if state.stage != cfg.stage || state.master_seed != cfg.seed {
        return Err(Error::InvalidArgument(format!(
            "checkpoint belongs to the {} stage with seed {}, not {} with seed {}",
            state.stage.name(),
            state.master_seed,
            cfg.stage.name(),
            cfg.seed
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    write_history(out_dir, &state.history, &cfg.selection)?;
    let outcome = run(&mut model, state.optimizer, state.history, data, cfg, out_dir)?;
    Ok((model, outcome))
}

fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let [_, c, n] = samples[0].x.shape();
    let mut x = Vec::with_capacity(samples.len() * c * n);
    let mut y = Vec::with_capacity(samples.len() * n);
    for s in samples {
        if s.x.shape() != [1, c, n] || s.y.shape() != [1, 1, n] {
            return Err(Error::shape("training batch", "samples differ in shape"));
        }
        x.extend_from_slice(s.x.data());
        y.extend_from_slice(s.y.data());
    }
    Ok((Tensor::new([samples.len(), c, n], x)?, Tensor::new([samples.len(), 1, n], y)?))
}

/// Stage loss on a bound network.
fn loss(
    model: &UNet,
    tape: &mut Tape,
    vars: &[Var],
    x: Tensor,
    y: Tensor,
    norm: NormMode,
    mask: &mut MaskMode,
    cfg: &TrainConfig,
    n_data: usize,
) -> Result<(Var, Vec<crate::autodiff::BatchStats>)> {
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let out = model.forward(tape, vars, xv, norm, mask)?;
    let l = match (cfg.stage, out.log_var) {
        (Stage::Deterministic, _) => loss_mse(tape, out.mean, yv)?,
        (Stage::Bayesian, Some(s)) => {
            let kl = model.kl_term(tape, vars, cfg.length_scale, n_data)?;
            loss_heteroscedastic(tape, out.mean, s, yv, kl)?
        }
        (Stage::Bayesian, None) => unreachable!("stage checked against the model"),
    };
    Ok((l, out.bn_stats))
}

fn run(
    model: &mut UNet,
    mut opt: Optimizer,
    mut history: Vec<EpochRecord>,
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::InvalidArgument("training needs non-empty train and validation splits".into()));
    }
    if model.config().bayesian != (cfg.stage == Stage::Bayesian) {
        return Err(Error::InvalidArgument(format!("{} stage given a mismatched network", cfg.stage.name())));
    }
    let n_train = data.train.len();
    let stage = cfg.stage.id();
    let mut stopped_early = false;
    let mut epoch = history.last().map_or(0, |r| r.epoch);
    while epoch < cfg.epochs {
        if since_best(&history, &cfg.selection) >= cfg.patience {
            stopped_early = true;
            break;
        }
        epoch += 1;
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut stream(cfg.seed, &[label::SHUFFLE, stage, epoch as u64]));

        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (x, y) = batch(&samples)?;
            let mut noise = stream(cfg.seed, &[label::DROPOUT, stage, epoch as u64, step as u64]);
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape);
            let (l, stats) =
                loss(model, &mut tape, &vars, x, y, NormMode::Train, &mut MaskMode::Sample(&mut noise), cfg, n_train)?;
            let value = tape.value(l).item()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { value, epoch, step });
            }
            tape.backward(l)?;
            let grads = model.params().grads(&tape, &vars);
            opt.step(model.params_mut().values_mut(), &grads)?;
            model.update_running_stats(&stats)?;
            model.clamp_dropout();
            total += value * chunk.len() as f64;
        }
        let train_loss = total / n_train as f64;
        let val_loss = validation_loss(model, &data.validation, cfg, epoch, n_train)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { value: val_loss, epoch, step: 0 });
        }
        let record = EpochRecord { epoch, train_loss, val_loss };
        history.push(record);

        let state = TrainState {
            stage: cfg.stage,
            epoch,
            master_seed: cfg.seed,
            history: history.clone(),
            optimizer: opt.clone(),
        };
        Checkpoint::capture(model, Some(state)).save(&checkpoint_path(out_dir, epoch))?;
        append_history(out_dir, &record, &cfg.selection)?;
    }

    let selected_epoch = cfg.selection.select(&history).expect("at least one epoch ran");
    let src = checkpoint_path(out_dir, selected_epoch);
    let dst = out_dir.join(SELECTED_FILE);
    fs::copy(&src, &dst).map_err(|e| Error::io(format!("copying {} to {}", src.display(), dst.display()), e))?;
    let selected = Checkpoint::load(&dst)?.to_model()?;
    Ok(TrainOutcome { history, selected_epoch, selected, stopped_early })
}

/// Epochs since the best combined metric so far (0 when history is empty).
fn since_best(history: &[EpochRecord], metric: &SelectionMetric) -> usize {
    match (metric.select(history), history.last()) {
        (Some(best), Some(last)) => last.epoch - best,
        _ => 0,
    }
}

/// Stage loss over the validation split with batch norm in inference mode.
/// Dropout stays stochastic, with noise keyed by the epoch.
fn validation_loss(model: &UNet, samples: &[Sample], cfg: &TrainConfig, epoch: usize, n_data: usize) -> Result<f64> {
    let mut noise = stream(cfg.seed, &[label::VALIDATION, cfg.stage.id(), epoch as u64]);
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = batch(&refs)?;
        let mut tape = Tape::new();
        let vars = model.params().bind_frozen(&mut tape);
        let (l, _) =
            loss(model, &mut tape, &vars, x, y, NormMode::Eval, &mut MaskMode::Sample(&mut noise), cfg, n_data)?;
        total += tape.value(l).item()? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn history_row(r: &EpochRecord, metric: &SelectionMetric) -> String {
    // `{:?}` prints the shortest string that parses back to the same f64
    format!("{},{:?},{:?},{:?}\n", r.epoch, r.train_loss, r.val_loss, metric.combined(r))
}

fn write_history(dir: &Path, history: &[EpochRecord], metric: &SelectionMetric) -> Result<()> {
    let mut text = format!("{HISTORY_HEADER}\n");
    for r in history {
        text.push_str(&history_row(r, metric));
    }
    let path = dir.join(HISTORY_FILE);
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn append_history(dir: &Path, r: &EpochRecord, metric: &SelectionMetric) -> Result<()> {
    let path = dir.join(HISTORY_FILE);
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    f.write_all(history_row(r, metric).as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses a `history.csv` written by [`train`].
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
        kind: "history",
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let bad = |detail: String| Error::Format { kind: "history", path: path.to_path_buf(), detail };
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != HISTORY_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| row.get(i).ok_or_else(|| bad("short row".into()));
        out.push(EpochRecord {
            epoch: field(0)?.parse().map_err(|_| bad("bad epoch".into()))?,
            train_loss: field(1)?.parse().map_err(|_| bad("bad train loss".into()))?,
            val_loss: field(2)?.parse().map_err(|_| bad("bad validation loss".into()))?,
        });
    }
    Ok(out)
}
