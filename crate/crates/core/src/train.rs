//! Mini-batch BCE training with Adam or SGD and early stopping.
//!
//! Each batch is split into fixed-size microbatches that run forward and
//! backward on their own tapes (in parallel) and whose gradients are summed
//! in microbatch order. The summation order is independent of the worker
//! count, so results are bit-identical whether the pool has one thread or
//! many.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval;
use crate::model::{
    batch_tensor, bind_params, model_forward, predict_batched, ModelConfig, ModelError,
    ModelParams,
};
use crate::signal::Segment;
use crate::tensor::{Tape, TensorError, BCE_EPS};

/// Fixed microbatch width; part of the numeric contract, not a tuning knob.
const MICROBATCH: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("training diverged: {0}")]
    DivergenceDetected(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 50,
            learning_rate: 1e-3,
            optimizer: OptimKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidConfig("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    /// Absent when the validation split contains a single class.
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned (0-based).
    pub best_epoch: usize,
    /// Wall-clock training time. Excluded from serialized reports so that
    /// rerunning a seed reproduces the report byte for byte; the CLI logs it
    /// to stderr instead.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Adam moment estimates, one pair of buffers per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction. `grads` must be in
/// [`ModelParams::named_tensors`] order.
pub fn adam_step(params: &mut ModelParams, grads: &[Vec<f64>], state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let mut tensors = params.tensors_mut();
    assert_eq!(tensors.len(), grads.len(), "gradient list does not match parameters");
    for (i, t) in tensors.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in t.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Plain gradient descent: `w <- w - lr * g`.
pub fn sgd_step(params: &mut ModelParams, grads: &[Vec<f64>], learning_rate: f64) {
    let mut tensors = params.tensors_mut();
    assert_eq!(tensors.len(), grads.len(), "gradient list does not match parameters");
    for (i, t) in tensors.iter_mut().enumerate() {
        for (j, w) in t.data_mut().iter_mut().enumerate() {
            *w -= learning_rate * grads[i][j];
        }
    }
}

/// Mean BCE of plain probability/label slices (no tape involved).
pub fn bce_value(probs: &[f64], labels: &[u8]) -> f64 {
    let mut acc = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= if y == 1 { pc.ln() } else { (1.0 - pc).ln() };
    }
    acc / labels.len() as f64
}

/// Forward+backward over one batch. Returns the batch-mean loss, the
/// per-sample probabilities, and summed gradients in parameter order.
fn batch_grads(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    rows: &[&[f64]],
    labels: &[u8],
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>), TrainError> {
    let total = rows.len();
    let ranges: Vec<(usize, usize)> = (0..total)
        .step_by(MICROBATCH)
        .map(|lo| (lo, (lo + MICROBATCH).min(total)))
        .collect();

    let pieces: Vec<Result<(f64, Vec<f64>, Vec<Vec<f64>>), TrainError>> =
        crate::par::map(&ranges, |&(lo, hi)| {
            let tape = Tape::new();
            let bound = bind_params(&tape, params);
            let x = tape.leaf(&batch_tensor(&rows[lo..hi]));
            let p = model_forward(&tape, x, &bound, model_cfg)?;
            let probs = tape.data(p);
            let loss = tape.bce_loss(p, &labels[lo..hi])?;
            // Weight by share of the batch so summed chunk losses (and
            // gradients) equal the batch mean.
            let scaled = tape.scale(loss, (hi - lo) as f64 / total as f64);
            tape.backward(scaled)?;
            let grads = bound
                .vars()
                .iter()
                .map(|v| {
                    tape.grad(*v)
                        .unwrap_or_else(|| vec![0.0; tape.data(*v).len()])
                })
                .collect();
            Ok((tape.scalar_value(scaled), probs, grads))
        });

    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(total);
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for piece in pieces {
        let (l, p, g) = piece?;
        loss += l;
        probs.extend(p);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (ai, bi) in a.iter_mut().zip(b) {
                        *ai += bi;
                    }
                }
            }
        }
    }
    Ok((loss, probs, grads.unwrap()))
}

/// Trains from scratch, keeping the parameters of the epoch with the best
/// validation AUC (validation loss when AUC is undefined), and stops after
/// `patience` epochs without improvement.
pub fn train(
    model_cfg: &ModelConfig,
    train_segments: &[Segment],
    val_segments: &[Segment],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_segments.is_empty() {
        return Err(TrainError::EmptyDataset("no training segments".into()));
    }
    if val_segments.is_empty() {
        return Err(TrainError::EmptyDataset("no validation segments".into()));
    }
    for s in train_segments.iter().chain(val_segments) {
        if s.values.len() != model_cfg.input_width {
            return Err(TrainError::InvalidConfig(format!(
                "segment width {} does not match model input width {}",
                s.values.len(),
                model_cfg.input_width
            )));
        }
    }

    let start = std::time::Instant::now();
    let mut params = ModelParams::init(model_cfg, crate::derive_seed(cfg.seed, "model-init"))?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(cfg.seed, "shuffle"));

    let labels: Vec<u8> = train_segments.iter().map(|s| s.label).collect();
    let val_labels: Vec<u8> = val_segments.iter().map(|s| s.label).collect();
    let val_rows: Vec<&[f64]> = val_segments.iter().map(|s| s.values.as_slice()).collect();

    let mut order: Vec<usize> = (0..train_segments.len()).collect();
    let mut epochs: Vec<EpochStats> = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None; // (metric, epoch, params)
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f64]> = batch
                .iter()
                .map(|&i| train_segments[i].values.as_slice())
                .collect();
            let batch_labels: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, probs, grads) = batch_grads(&params, model_cfg, &rows, &batch_labels)?;
            if !loss.is_finite() {
                return Err(TrainError::DivergenceDetected(format!(
                    "loss {loss} at epoch {epoch}"
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            correct += probs
                .iter()
                .zip(&batch_labels)
                .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
                .count();
            match cfg.optimizer {
                OptimKind::Adam => adam_step(&mut params, &grads, &mut adam, cfg),
                OptimKind::Sgd => sgd_step(&mut params, &grads, cfg.learning_rate),
            }
        }
        let train_loss = epoch_loss / train_segments.len() as f64;
        let train_acc = correct as f64 / train_segments.len() as f64;

        let val_probs = predict_batched(&params, model_cfg, &val_rows)?;
        let val_loss = bce_value(&val_probs, &val_labels);
        if !val_loss.is_finite() {
            return Err(TrainError::DivergenceDetected(format!(
                "validation loss {val_loss} at epoch {epoch}"
            )));
        }
        let val_auc = eval::roc_auc(&val_probs, &val_labels).ok().map(|(_, a)| a);
        epochs.push(EpochStats {
            train_loss,
            train_acc,
            val_loss,
            val_auc,
        });

        // Higher is better; fall back to negated loss when AUC is undefined.
        let metric = val_auc.unwrap_or(-val_loss);
        let improved = best.as_ref().map(|(m, _, _)| metric > *m).unwrap_or(true);
        if improved {
            best = Some((metric, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok((
        best_params,
        TrainReport {
            epochs,
            best_epoch,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}
