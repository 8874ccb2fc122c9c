//! The attention-CNN classifier.
//!
//! Four (configurable) convolution blocks, each `conv → ReLU → channel
//! attention → spatial attention → max pool`, then global average pooling
//! over time and a single dense logit with a sigmoid. Channel attention
//! squeezes the time axis with average and max pooling and pushes both
//! descriptors through a shared bottleneck MLP; spatial attention squeezes
//! the channel axis, concatenates the average and max maps, and convolves
//! them with a width-7 kernel into one gate per time position.
//!
//! Two channel-attention variants are supported: `paper-eq2` applies the
//! sigmoid per branch and sums (`σ(MLP(avg)) + σ(MLP(max))`, gates in
//! (0, 2)); `standard-cbam` sums first (`σ(MLP(avg) + MLP(max))`, gates in
//! (0, 1)).

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Spatial attention always uses a width-7 kernel with same-padding.
pub const SAM_KERNEL: usize = 7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the two channel-attention branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CamVariant {
    /// `σ(MLP(avg)) + σ(MLP(max))`; attention values in (0, 2).
    #[serde(rename = "paper-eq2")]
    PaperEq2,
    /// `σ(MLP(avg) + MLP(max))`; attention values in (0, 1).
    #[serde(rename = "standard-cbam")]
    StandardCbam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_width: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    /// Convolution kernel width (odd; same-padding).
    pub kernel: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    /// Channel-attention bottleneck reduction per block; must divide the
    /// block's channel count.
    pub reductions: Vec<usize>,
    pub cam_variant: CamVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_width: 600,
            channels: vec![16, 32, 64, 128],
            kernel: 7,
            pool_window: 2,
            pool_stride: 2,
            reductions: vec![4, 8, 8, 8],
            cam_variant: CamVariant::PaperEq2,
        }
    }
}

impl ModelConfig {
    /// Two blocks on a 40-sample window: small enough for end-to-end
    /// finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_width: 40,
            channels: vec![4, 8],
            kernel: 7,
            pool_window: 2,
            pool_stride: 2,
            reductions: vec![2, 2],
            cam_variant: CamVariant::PaperEq2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.is_empty() {
            return Err(ModelError::InvalidConfig("need at least one block".into()));
        }
        if self.reductions.len() != self.channels.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} reductions for {} blocks",
                self.reductions.len(),
                self.channels.len()
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "conv kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.pool_window == 0 || self.pool_stride == 0 {
            return Err(ModelError::InvalidConfig("pool window/stride must be >= 1".into()));
        }
        for (c, r) in self.channels.iter().zip(&self.reductions) {
            if *r == 0 || c % r != 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "reduction {r} does not divide channel count {c}"
                )));
            }
        }
        // Width propagation: same-padded conv keeps width, pooling shrinks.
        let mut w = self.input_width;
        for (i, _) in self.channels.iter().enumerate() {
            if w < SAM_KERNEL {
                return Err(ModelError::InvalidConfig(format!(
                    "width {w} before block {i} is narrower than the spatial attention kernel"
                )));
            }
            if w < self.pool_window {
                return Err(ModelError::InvalidConfig(format!(
                    "width {w} before block {i} is narrower than the pool window"
                )));
            }
            w = (w - self.pool_window) / self.pool_stride + 1;
        }
        if w == 0 {
            return Err(ModelError::InvalidConfig("widths collapse to zero".into()));
        }
        Ok(())
    }

    /// Feature-map width after each block.
    pub fn block_widths(&self) -> Vec<usize> {
        let mut w = self.input_width;
        self.channels
            .iter()
            .map(|_| {
                w = (w - self.pool_window) / self.pool_stride + 1;
                w
            })
            .collect()
    }

    fn same_padding(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

/// Channel attention parameters: the shared bottleneck MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Spatial attention parameters: one `[1, 2, 7]` kernel plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub cam: CamParams,
    pub sam: SamParams,
}

/// All learnable weights of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn glorot(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).requires_grad()
}

fn zeros_grad(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).requires_grad()
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, fully determined by the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let k = config.kernel;
        let mut c_in = 1usize;
        let mut blocks = Vec::with_capacity(config.channels.len());
        for (&c, &r) in config.channels.iter().zip(&config.reductions) {
            let hidden = c / r;
            blocks.push(BlockParams {
                conv_w: glorot(&mut rng, &[c, c_in, k], c_in * k, c * k),
                conv_b: zeros_grad(&[c]),
                cam: CamParams {
                    w1: glorot(&mut rng, &[hidden, c], c, hidden),
                    b1: zeros_grad(&[hidden]),
                    w2: glorot(&mut rng, &[c, hidden], hidden, c),
                    b2: zeros_grad(&[c]),
                },
                sam: SamParams {
                    kernel: glorot(&mut rng, &[1, 2, SAM_KERNEL], 2 * SAM_KERNEL, SAM_KERNEL),
                    bias: zeros_grad(&[1]),
                },
            });
            c_in = c;
        }
        let head_w = glorot(&mut rng, &[1, c_in], c_in, 1);
        let head_b = zeros_grad(&[1]);
        Ok(ModelParams {
            blocks,
            head_w,
            head_b,
        })
    }

    /// Tensors with stable names, in a fixed order shared by the optimizer
    /// and the checkpoint format.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv.w"), &b.conv_w));
            out.push((format!("block{i}.conv.b"), &b.conv_b));
            out.push((format!("block{i}.cam.w1"), &b.cam.w1));
            out.push((format!("block{i}.cam.b1"), &b.cam.b1));
            out.push((format!("block{i}.cam.w2"), &b.cam.w2));
            out.push((format!("block{i}.cam.b2"), &b.cam.b2));
            out.push((format!("block{i}.sam.k"), &b.sam.kernel));
            out.push((format!("block{i}.sam.b"), &b.sam.bias));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in self.blocks.iter_mut() {
            out.push(&mut b.conv_w);
            out.push(&mut b.conv_b);
            out.push(&mut b.cam.w1);
            out.push(&mut b.cam.b1);
            out.push(&mut b.cam.w2);
            out.push(&mut b.cam.b2);
            out.push(&mut b.sam.kernel);
            out.push(&mut b.sam.bias);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Tape handles for one block's parameters.
pub struct BoundCam {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct BoundSam {
    pub kernel: Var,
    pub bias: Var,
}

pub struct BoundBlock {
    pub conv_w: Var,
    pub conv_b: Var,
    pub cam: BoundCam,
    pub sam: BoundSam,
}

/// All parameters copied onto a tape, in [`ModelParams::named_tensors`] order.
pub struct BoundParams {
    pub blocks: Vec<BoundBlock>,
    pub head_w: Var,
    pub head_b: Var,
}

impl BoundParams {
    /// Vars in the same order as [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([
                b.conv_w, b.conv_b, b.cam.w1, b.cam.b1, b.cam.w2, b.cam.b2, b.sam.kernel,
                b.sam.bias,
            ]);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Copies every parameter tensor onto the tape.
pub fn bind_params(tape: &Tape, params: &ModelParams) -> BoundParams {
    BoundParams {
        blocks: params
            .blocks
            .iter()
            .map(|b| BoundBlock {
                conv_w: tape.leaf(&b.conv_w),
                conv_b: tape.leaf(&b.conv_b),
                cam: BoundCam {
                    w1: tape.leaf(&b.cam.w1),
                    b1: tape.leaf(&b.cam.b1),
                    w2: tape.leaf(&b.cam.w2),
                    b2: tape.leaf(&b.cam.b2),
                },
                sam: BoundSam {
                    kernel: tape.leaf(&b.sam.kernel),
                    bias: tape.leaf(&b.sam.bias),
                },
            })
            .collect(),
        head_w: tape.leaf(&params.head_w),
        head_b: tape.leaf(&params.head_b),
    }
}

fn cam_mlp(tape: &Tape, v: Var, p: &BoundCam) -> Result<Var, TensorError> {
    let h = tape.dense(v, p.w1, p.b1)?;
    let h = tape.relu(h);
    tape.dense(h, p.w2, p.b2)
}

/// Channel attention: `[N, C, W] → [N, C]` gate.
pub fn cam_forward(
    tape: &Tape,
    x: Var,
    p: &BoundCam,
    variant: CamVariant,
) -> Result<Var, TensorError> {
    let avg = tape.global_avgpool_w(x)?;
    let max = tape.global_maxpool_w(x)?;
    let avg_out = cam_mlp(tape, avg, p)?;
    let max_out = cam_mlp(tape, max, p)?;
    match variant {
        CamVariant::PaperEq2 => {
            let a = tape.sigmoid(avg_out);
            let m = tape.sigmoid(max_out);
            tape.add(a, m)
        }
        CamVariant::StandardCbam => {
            let s = tape.add(avg_out, max_out)?;
            Ok(tape.sigmoid(s))
        }
    }
}

/// Spatial attention: `[N, C, W] → [N, 1, W]` gate in (0, 1).
pub fn sam_forward(tape: &Tape, x: Var, p: &BoundSam) -> Result<Var, TensorError> {
    let avg = tape.channel_avg(x)?;
    let max = tape.channel_max(x)?;
    let stacked = tape.concat_channels(avg, max)?;
    let conv = tape.conv1d(stacked, p.kernel, p.bias, 1, (SAM_KERNEL - 1) / 2)?;
    Ok(tape.sigmoid(conv))
}

/// Full attention block: channel gate first, spatial gate second. Shape is
/// preserved.
pub fn cbam_forward(
    tape: &Tape,
    x: Var,
    cam: &BoundCam,
    sam: &BoundSam,
    variant: CamVariant,
) -> Result<Var, TensorError> {
    let channel_gate = cam_forward(tape, x, cam, variant)?;
    let x = tape.mul_broadcast(x, channel_gate)?;
    let spatial_gate = sam_forward(tape, x, sam)?;
    tape.mul_broadcast(x, spatial_gate)
}

/// Classifier forward pass: `[N, 1, W] → [N]` probabilities in (0, 1).
pub fn model_forward(
    tape: &Tape,
    batch: Var,
    params: &BoundParams,
    config: &ModelConfig,
) -> Result<Var, TensorError> {
    let shape = tape.shape(batch);
    if shape.len() != 3 || shape[1] != 1 || shape[2] != config.input_width {
        return Err(TensorError::ShapeMismatch {
            op: "model_forward",
            detail: format!(
                "expected [N, 1, {}], got {shape:?}",
                config.input_width
            ),
        });
    }
    let n = shape[0];
    let mut h = batch;
    for block in &params.blocks {
        h = tape.conv1d(h, block.conv_w, block.conv_b, 1, config.same_padding())?;
        h = tape.relu(h);
        h = cbam_forward(tape, h, &block.cam, &block.sam, config.cam_variant)?;
        h = tape.maxpool1d(h, config.pool_window, config.pool_stride)?;
    }
    let pooled = tape.global_avgpool_w(h)?;
    let logit = tape.dense(pooled, params.head_w, params.head_b)?;
    let logit = tape.reshape(logit, &[n])?;
    Ok(tape.sigmoid(logit))
}

/// Packs segment value rows into a `[N, 1, W]` batch tensor.
pub fn batch_tensor(rows: &[&[f64]]) -> Tensor {
    let n = rows.len();
    let w = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(n * w);
    for r in rows {
        assert_eq!(r.len(), w, "ragged batch");
        data.extend_from_slice(r);
    }
    Tensor::from_vec(&[n, 1, w], data)
}

/// Forward pass without gradients: probabilities for a slice of segments.
pub fn predict(
    params: &ModelParams,
    config: &ModelConfig,
    rows: &[&[f64]],
) -> Result<Vec<f64>, ModelError> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    // Inference leaves do not require grad, so nothing is recorded.
    let mut frozen = params.clone();
    for t in frozen.tensors_mut() {
        let mut plain = Tensor::from_vec(t.shape(), t.data().to_vec());
        std::mem::swap(t, &mut plain);
    }
    let bound = bind_params(&tape, &frozen);
    let x = tape.leaf(&batch_tensor(rows));
    let p = model_forward(&tape, x, &bound, config)?;
    Ok(tape.data(p))
}

/// [`predict`] over fixed chunks, scored in parallel; output order matches
/// input order regardless of the thread count.
pub fn predict_batched(
    params: &ModelParams,
    config: &ModelConfig,
    rows: &[&[f64]],
) -> Result<Vec<f64>, ModelError> {
    const CHUNK: usize = 128;
    let ranges: Vec<(usize, usize)> = (0..rows.len())
        .step_by(CHUNK)
        .map(|lo| (lo, (lo + CHUNK).min(rows.len())))
        .collect();
    let chunks: Vec<Result<Vec<f64>, ModelError>> =
        crate::par::map(&ranges, |&(lo, hi)| predict(params, config, &rows[lo..hi]));
    let mut out = Vec::with_capacity(rows.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}
