//! Mini-batch MLE training with Adam and global-norm clipping.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::pad_batch;
use crate::corpus::{CorpusSplit, ExamplePair, PAD};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Mode, ModelGraph, ParamSet};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Progress is logged every this many optimizer steps; 0 disables it.
    pub log_every: usize,
    /// Observer receives `save_due = true` every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(1.0),
            batch_size: 16,
            epochs: 10,
            seed: 0,
            log_every: 0,
            checkpoint_every: None,
            patience: None,
        }
    }
}

pub(crate) const TRAIN_KEYS: [&str; 11] = [
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "clip_norm",
    "batch_size",
    "epochs",
    "seed",
    "log_every",
    "checkpoint_every",
    "patience",
];

fn opt_to_string<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "off".to_owned(), |x| x.to_string())
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "off" | "none" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        &TRAIN_KEYS
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm must be > 0, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) || self.patience == Some(0) {
            return Err(Error::Config("checkpoint_every and patience must be at least 1".into()));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "clip_norm" => opt_to_string(self.clip_norm),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => opt_to_string(self.checkpoint_every),
            "patience" => opt_to_string(self.patience),
            _ => return None,
        })
    }

    /// Optional fields accept `off`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_opt(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_opt(key, value)?,
            "patience" => self.patience = parse_opt(key, value)?,
            _ => return Err(Error::Config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: ParamSet = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (name, p) in params.iter() {
        let ok = |set: &ParamSet| set.get(name).is_some_and(|t| t.shape() == p.shape());
        if !ok(grads) || !ok(&state.m) || !ok(&state.v) {
            return Err(Error::Contract(format!("gradient or moment for {name} is missing or misshapen")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *x -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &ParamSet) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global L2 norm is at most
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ParamSet, clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "epoch,step,split,loss,ppl";

impl TrainingLog {
    fn push(&mut self, epoch: usize, step: u64, split: Split, loss: f64) {
        self.rows.push(LogRow {
            epoch,
            step,
            split,
            loss,
            perplexity: loss.exp(),
        });
    }

    pub fn losses(&self, split: Split) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }

    /// Floats use 17 significant digits so values round-trip exactly.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.16e},{:.16e}\n",
                r.epoch, r.step, r.split, r.loss, r.perplexity
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == LOG_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header {LOG_HEADER:?}"),
                })
            }
        }
        let mut log = TrainingLog::default();
        for (i, line) in lines {
            let err = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_owned(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err("expected 5 fields"));
            }
            let split = match f[2] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return Err(err("split must be train or val")),
            };
            log.rows.push(LogRow {
                epoch: f[0].parse().map_err(|_| err("bad epoch"))?,
                step: f[1].parse().map_err(|_| err("bad step"))?,
                split,
                loss: f[3].parse().map_err(|_| err("bad loss"))?,
                perplexity: f[4].parse().map_err(|_| err("bad ppl"))?,
            });
        }
        Ok(log)
    }
}

/// Sum of per-token NLL and the number of supervised tokens over `pairs`,
/// evaluated in eval mode in chunks of `batch_size`.
pub fn nll_sum(ckpt: &Checkpoint, pairs: &[ExamplePair], batch_size: usize) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut tokens = 0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let b = pad_batch(chunk, PAD)?;
        let mut mg = ModelGraph::new(ckpt, Mode::Eval);
        let loss = mg.batch_loss(&b)?;
        let n = b.supervised_tokens();
        total += mg.graph().value(loss).item()? * n as f64;
        tokens += n;
    }
    Ok((total, tokens))
}

/// State handed to the observer after each epoch.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub checkpoint: &'a Checkpoint,
    pub save_due: bool,
}

fn check_pairs(ckpt: &Checkpoint, pairs: &[ExamplePair]) -> Result<()> {
    let config = ckpt.config();
    for p in pairs {
        p.validate(Some(config.vocab_size))?;
        let len = p.source.len().max(p.target.len() - 1);
        if len > config.max_len {
            return Err(Error::Length { len, max: config.max_len });
        }
    }
    Ok(())
}

/// Everything [`train`] checks before the first step.
pub fn validate_inputs(init: &Checkpoint, data: &CorpusSplit<ExamplePair>, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    check_pairs(init, &data.train)?;
    check_pairs(init, &data.validation)
}

pub fn train(init: Checkpoint, data: &CorpusSplit<ExamplePair>, config: &TrainConfig) -> Result<(Checkpoint, TrainingLog)> {
    train_with_observer(init, data, config, |_| Ok(()))
}

/// Runs `config.epochs` epochs over `data.train`, validating on
/// `data.validation` after each one.
pub fn train_with_observer<F>(
    init: Checkpoint,
    data: &CorpusSplit<ExamplePair>,
    config: &TrainConfig,
    mut observer: F,
) -> Result<(Checkpoint, TrainingLog)>
where
    F: FnMut(&EpochReport<'_>) -> Result<()>,
{
    validate_inputs(&init, data, config)?;
    let mut ckpt = init;
    let mut log = TrainingLog::default();
    let mut adam = AdamState::new(ckpt.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0u64;
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ epoch as u64));
        let mut sum = 0.0;
        let mut tokens = 0;
        for idx in order.chunks(config.batch_size) {
            let pairs: Vec<ExamplePair> = idx.iter().map(|&i| data.train[i].clone()).collect();
            let b = pad_batch(&pairs, PAD)?;
            let mut mg = ModelGraph::new(&ckpt, Mode::Train(&mut dropout_rng));
            let loss = mg.batch_loss(&b)?;
            let value = mg.graph().value(loss).item()?;
            mg.graph_mut().backward(loss)?;
            let mut grads = mg.param_grads();
            drop(mg);
            if let Some(c) = config.clip_norm {
                clip_gradients(&mut grads, c);
            }
            adam_step(ckpt.params_mut(), &grads, &mut adam, config)?;
            step += 1;
            let n = b.supervised_tokens();
            sum += value * n as f64;
            tokens += n;
            if config.log_every > 0 && step.is_multiple_of(config.log_every as u64) {
                log::info!("epoch {epoch} step {step} loss {value:.4}");
            }
        }
        if ckpt.params().values().any(|t| !t.is_finite()) {
            return Err(Error::Contract(format!("parameters became non-finite in epoch {epoch}")));
        }
        let train_loss = sum / tokens as f64;
        log.push(epoch, step, Split::Train, train_loss);
        let val_loss = if data.validation.is_empty() {
            None
        } else {
            let (s, n) = nll_sum(&ckpt, &data.validation, config.batch_size)?;
            let v = s / n as f64;
            log.push(epoch, step, Split::Val, v);
            Some(v)
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4}{}",
            val_loss.map(|v| format!(" val {v:.4}")).unwrap_or_default()
        );
        observer(&EpochReport {
            epoch,
            step,
            train_loss,
            val_loss,
            checkpoint: &ckpt,
            save_due: config.checkpoint_every.is_some_and(|k| epoch % k == 0),
        })?;
        if let (Some(patience), Some(v)) = (config.patience, val_loss) {
            if v < best_val {
                best_val = v;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log::info!("no validation improvement for {patience} epochs, stopping");
                    break;
                }
            }
        }
    }
    Ok((ckpt, log))
}
