//! Optimizer, training loop and checkpoints.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codes::DatasetSplit;
use crate::diffusion::{prior_kl, sample_forward_steps, Tokens};
use crate::error::{Error, Result};
use crate::nn::{init_params, loss_and_grad_at, loss_at, DenoiserConfig, DenoiserParams};
use crate::rng::{substream, tag};
use crate::schedule::{Schedule, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            lr_decay: 0.99,
            batch_size: 64,
            epochs: 100,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.batch_size > 0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}

/// AdamW constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled decay.
pub fn optimizer_step(
    params: &mut DenoiserParams,
    grads: &DenoiserParams,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let c1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let c2 = 1.0 - hyper.beta2.powi(state.step as i32);
    let values = params.values_mut();
    for i in 0..n {
        let g = grads.values()[i];
        let m = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = (m / c1) / ((v / c2).sqrt() + hyper.eps) + hyper.weight_decay * values[i];
        values[i] -= hyper.lr * update;
    }
    Ok(())
}

/// `learning_rate * lr_decay^epoch`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    config.learning_rate * config.lr_decay.powi(epoch as i32)
}

/// Rescale `grad` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut DenoiserParams, max_norm: f64) -> f64 {
    let norm = grad.l2_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.values_mut().iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Trained model plus everything needed to resume or sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DenoiserConfig,
    pub train: TrainConfig,
    /// Present when the schedule was built from a named family.
    pub schedule_config: Option<ScheduleConfig>,
    pub schedule: Schedule,
    pub params: DenoiserParams,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean training loss per epoch.
    pub train_history: Vec<f64>,
    /// Validation negative bound per epoch.
    pub valid_history: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"EHD3";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: DenoiserConfig,
    train: TrainConfig,
    schedule_config: Option<ScheduleConfig>,
    retention: Vec<f64>,
    n_params: usize,
    step: u64,
    epoch: usize,
    train_history: Vec<f64>,
    valid_history: Vec<f64>,
}

/// JSON with object keys sorted and no insignificant whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// SHA-256 hex digest of [`canonical_json`].
pub fn json_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_json(value)?.as_bytes())))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            net: self.net.clone(),
            train: self.train.clone(),
            schedule_config: self.schedule_config,
            retention: self.schedule.retentions().to_vec(),
            n_params: self.params.len(),
            step: self.optimizer.step,
            epoch: self.epoch,
            train_history: self.train_history.clone(),
            valid_history: self.valid_history.clone(),
        };
        let json = canonical_json(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 24 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        for tensor in [self.params.values(), &self.optimizer.m, &self.optimizer.v] {
            for v in tensor {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing EHD3 magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let params = DenoiserParams::zeros(&header.net)?;
        let n = params.len();
        if n != header.n_params {
            return Err(Error::Checkpoint(format!(
                "header declares {} parameters, config implies {n}",
                header.n_params
            )));
        }
        let body = &bytes[16 + len..];
        if body.len() != 3 * n * 8 {
            return Err(Error::Checkpoint(format!(
                "tensor block is {} bytes, expected {}",
                body.len(),
                3 * n * 8
            )));
        }
        let read = |k: usize| -> Vec<f64> {
            body[k * n * 8..(k + 1) * n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        let params = DenoiserParams::from_values(&header.net, read(0))?;
        if !params.is_finite() {
            return Err(bad("non-finite parameters"));
        }
        Ok(Checkpoint {
            net: header.net,
            train: header.train,
            schedule_config: header.schedule_config,
            schedule: Schedule::from_retention(header.retention)?,
            params,
            optimizer: AdamState {
                m: read(1),
                v: read(2),
                step: header.step,
            },
            epoch: header.epoch,
            train_history: header.train_history,
            valid_history: header.valid_history,
        })
    }

    /// Atomic write.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Per-record forward-noise draw: a uniform step then the corruption.
fn corrupt_record<R: Rng>(x0: &Tokens, schedule: &Schedule, rng: &mut R, t: Option<usize>) -> Result<(usize, Tokens)> {
    let t = t.unwrap_or_else(|| rng.gen_range(1..=schedule.steps()));
    let xt = sample_forward_steps(x0, &[t], schedule, rng)?;
    Ok((t, xt))
}

fn stack(records: &[Tokens]) -> Result<Tokens> {
    let first = &records[0];
    let cats = records.iter().flat_map(|r| r.cats().iter().copied()).collect();
    Tokens::new(records.len(), first.n_tokens(), first.categories(), cats)
}

/// Stratified estimate of the full negative bound: record `i` is scored at
/// step `(i mod T) + 1` with noise keyed on `(seed, i)`, so every step
/// bucket is covered and the estimate is a fixed function of the params.
pub fn validation_bound(params: &DenoiserParams, data: &Tokens, schedule: &Schedule, seed: u64) -> Result<f64> {
    if data.n_records() == 0 {
        return Err(Error::EmptyDataset);
    }
    const CHUNK: usize = 256;
    let steps = schedule.steps();
    let mut total = 0.0;
    let all: Vec<usize> = (0..data.n_records()).collect();
    for chunk in all.chunks(CHUNK) {
        let x0 = data.select_records(chunk);
        let mut ts = Vec::with_capacity(chunk.len());
        let mut xs = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let mut rng = substream(seed, &[tag::VALID_NOISE, i as u64]);
            let (t, xt) = corrupt_record(&data.select_records(&[i]), schedule, &mut rng, Some(i % steps + 1))?;
            ts.push(t);
            xs.push(xt);
        }
        // loss_at averages over the chunk and multiplies by T
        total += loss_at(params, &x0, &ts, &stack(&xs)?, schedule)? * chunk.len() as f64;
    }
    Ok(total / data.n_records() as f64 + prior_kl(data, schedule))
}

/// Train from scratch. `on_epoch` sees the checkpoint after every epoch and
/// whether it holds the best validation bound so far.
pub fn train_with<F>(
    data: &DatasetSplit,
    schedule: &Schedule,
    schedule_config: Option<ScheduleConfig>,
    net: &DenoiserConfig,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Checkpoint>
where
    F: FnMut(&Checkpoint, bool) -> Result<()>,
{
    config.validate()?;
    net.validate()?;
    if data.train.n_records() == 0 {
        return Err(Error::EmptyDataset);
    }
    if data.train.n_codes() != net.n_tokens {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} codes, model expects {}",
            data.train.n_codes(),
            net.n_tokens
        )));
    }
    let train_tokens = Tokens::from_codes(&data.train);
    // an empty validation split falls back to the training records
    let valid_tokens = if data.validation.n_records() > 0 {
        Tokens::from_codes(&data.validation)
    } else {
        train_tokens.clone()
    };
    let params = init_params(net, config.seed)?;
    let mut ckpt = Checkpoint {
        net: net.clone(),
        train: config.clone(),
        schedule_config,
        schedule: schedule.clone(),
        optimizer: AdamState::new(params.len()),
        params,
        epoch: 0,
        train_history: Vec::new(),
        valid_history: Vec::new(),
    };
    let n = train_tokens.n_records();
    let mut best = f64::INFINITY;
    for epoch in 0..config.epochs {
        let hyper = AdamHyper::new(lr_at_epoch(config, epoch), config.weight_decay);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut ts = Vec::with_capacity(batch.len());
            let mut xs = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng = substream(config.seed, &[tag::TRAIN_NOISE, epoch as u64, i as u64]);
                let (t, xt) = corrupt_record(&train_tokens.select_records(&[i]), schedule, &mut rng, None)?;
                ts.push(t);
                xs.push(xt);
            }
            let x0 = train_tokens.select_records(batch);
            let mut lg = loss_and_grad_at(&ckpt.params, &x0, &ts, &stack(&xs)?, schedule)?;
            clip_global_norm(&mut lg.grad, config.clip_norm);
            optimizer_step(&mut ckpt.params, &lg.grad, &mut ckpt.optimizer, &hyper)?;
            epoch_loss += lg.loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / n as f64;
        let valid = validation_bound(&ckpt.params, &valid_tokens, schedule, config.seed)?;
        ckpt.epoch = epoch + 1;
        ckpt.train_history.push(train_loss);
        ckpt.valid_history.push(valid);
        let is_best = valid < best;
        if is_best {
            best = valid;
        }
        info!("epoch {:>3}  train {train_loss:.4}  valid {valid:.4}", epoch + 1);
        debug!("lr {:.3e}", hyper.lr);
        on_epoch(&ckpt, is_best)?;
    }
    Ok(ckpt)
}

/// [`train_with`] without per-epoch persistence.
pub fn train(
    data: &DatasetSplit,
    schedule: &Schedule,
    schedule_config: Option<ScheduleConfig>,
    net: &DenoiserConfig,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    train_with(data, schedule, schedule_config, net, config, |_, _| Ok(()))
}
