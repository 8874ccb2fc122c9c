//! The autodiff tape: recorded operations and their backward rules.

use std::cell::RefCell;

use super::{idx3, shape_err, Tensor, TensorError};

/// Probability clamp for the cross-entropy loss; forestalls `log(0)`.
pub const BCE_EPS: f64 = 1e-12;

/// Handle to a value living on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var {
    id: usize,
    requires_grad: bool,
}

impl Var {
    /// Whether gradients flow through this value.
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

struct Slot {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

enum Broadcast {
    /// Attention over channels: factor shaped `[N, C]`, broadcast along W.
    PerChannel,
    /// Attention over positions: factor shaped `[N, 1, W]`, broadcast along C.
    PerPosition,
}

enum Op {
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
        window: usize,
        stride: usize,
    },
    GlobalAvgW {
        x: usize,
    },
    GlobalMaxW {
        x: usize,
        argmax: Vec<usize>,
    },
    ChannelAvg {
        x: usize,
    },
    ChannelMax {
        x: usize,
        argmax: Vec<usize>,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    MulBroadcast {
        x: usize,
        a: usize,
        kind: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Sum {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Bce {
        p: usize,
        labels: Vec<f64>,
    },
}

struct Node {
    out: usize,
    op: Op,
}

struct Inner {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
}

/// Records operations for reverse-mode differentiation.
///
/// Operations push their results as new slots; a node with a backward rule
/// is recorded only when some input requires gradient. [`Tape::backward`]
/// walks the nodes in reverse once, accumulates gradients additively, and
/// clears the recorded operations.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                slots: Vec::new(),
                nodes: Vec::new(),
            }),
        }
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&self, t: &Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.slots.len();
        inner.slots.push(Slot {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            grad: None,
        });
        Var {
            id,
            requires_grad: t.is_requires_grad(),
        }
    }

    /// Shape of a recorded value.
    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().slots[v.id].shape.clone()
    }

    /// Copy of a recorded value's data.
    pub fn data(&self, v: Var) -> Vec<f64> {
        self.inner.borrow().slots[v.id].data.clone()
    }

    /// Copy of the gradient accumulated at `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.inner.borrow().slots[v.id].grad.clone()
    }

    /// Value of a scalar slot.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.slots[v.id].data.len(), 1);
        inner.slots[v.id].data[0]
    }

    /// Number of recorded (not yet consumed) operations; used by tests.
    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Option<Op>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.slots.len();
        inner.slots.push(Slot {
            shape,
            data,
            grad: None,
        });
        if let Some(op) = op {
            if requires_grad {
                inner.nodes.push(Node { out: id, op });
            }
        }
        Var { id, requires_grad }
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize), TensorError> {
        let inner = self.inner.borrow();
        let s = &inner.slots[v.id].shape;
        if s.len() != 3 {
            return Err(shape_err(op, format!("expected rank-3 [N,C,W], got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    // ---------------------------------------------------------------------
    // Forward operations
    // ---------------------------------------------------------------------

    /// 1-D cross-correlation of `x: [N, C_in, W]` with kernels
    /// `w: [C_out, C_in, K]` and per-channel bias `b: [C_out]`.
    ///
    /// Output width is `floor((W + 2·padding − K) / stride) + 1`.
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (n_batch, c_in, width) = self.dims3("conv1d", x)?;
        let (c_out, kc_in, k) = self.dims3("conv1d", w)?;
        {
            let inner = self.inner.borrow();
            let bs = &inner.slots[b.id].shape;
            if bs.as_slice() != [c_out] {
                return Err(shape_err(
                    "conv1d",
                    format!("bias shape {bs:?} does not match [{c_out}]"),
                ));
            }
        }
        if kc_in != c_in {
            return Err(shape_err(
                "conv1d",
                format!("kernel expects {kc_in} input channels, input has {c_in}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv1d", "stride must be >= 1"));
        }
        if k == 0 || k > width + 2 * padding {
            return Err(shape_err(
                "conv1d",
                format!("kernel width {k} exceeds padded input width {}", width + 2 * padding),
            ));
        }
        let w_out = (width + 2 * padding - k) / stride + 1;

        let inner = self.inner.borrow();
        let xs = &inner.slots[x.id].data;
        let ws = &inner.slots[w.id].data;
        let bs = &inner.slots[b.id].data;
        let mut out = vec![0.0; n_batch * c_out * w_out];
        for n in 0..n_batch {
            for co in 0..c_out {
                let row = &mut out[idx3(c_out, w_out, n, co, 0)..idx3(c_out, w_out, n, co, 0) + w_out];
                row.fill(bs[co]);
                for ci in 0..c_in {
                    let xrow = &xs[idx3(c_in, width, n, ci, 0)..idx3(c_in, width, n, ci, 0) + width];
                    for kk in 0..k {
                        let wv = ws[(co * c_in + ci) * k + kk];
                        // in-bounds output positions: 0 <= wo*stride + kk - padding < width
                        let lo = padding.saturating_sub(kk).div_ceil(stride).min(w_out);
                        let hi = if width + padding > kk {
                            (((width + padding - kk - 1) / stride) + 1).min(w_out)
                        } else {
                            0
                        };
                        if hi <= lo {
                            continue;
                        }
                        if stride == 1 {
                            // Contiguous window: plain zipped accumulate.
                            let xw = &xrow[lo + kk - padding..hi + kk - padding];
                            for (o, xv) in row[lo..hi].iter_mut().zip(xw) {
                                *o += xv * wv;
                            }
                        } else {
                            for wo in lo..hi {
                                row[wo] += xrow[wo * stride + kk - padding] * wv;
                            }
                        }
                    }
                }
            }
        }
        drop(inner);

        let rg = x.requires_grad || w.requires_grad || b.requires_grad;
        Ok(self.push(
            vec![n_batch, c_out, w_out],
            out,
            Some(Op::Conv1d {
                x: x.id,
                w: w.id,
                b: b.id,
                stride,
                padding,
            }),
            rg,
        ))
    }

    /// Affine map `x: [N, F_in] → [N, F_out]` with `w: [F_out, F_in]`, `b: [F_out]`.
    pub fn dense(&self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (n_batch, f_in, c_out, f_out);
        {
            let inner = self.inner.borrow();
            let xs = &inner.slots[x.id].shape;
            let ws = &inner.slots[w.id].shape;
            let bs = &inner.slots[b.id].shape;
            if xs.len() != 2 || ws.len() != 2 {
                return Err(shape_err(
                    "dense",
                    format!("expected x [N,F_in] and w [F_out,F_in], got {xs:?} and {ws:?}"),
                ));
            }
            n_batch = xs[0];
            f_in = xs[1];
            f_out = ws[0];
            c_out = ws[1];
            if c_out != f_in {
                return Err(shape_err(
                    "dense",
                    format!("w expects {c_out} input features, x has {f_in}"),
                ));
            }
            if bs.as_slice() != [f_out] {
                return Err(shape_err(
                    "dense",
                    format!("bias shape {bs:?} does not match [{f_out}]"),
                ));
            }
        }

        let inner = self.inner.borrow();
        let xs = &inner.slots[x.id].data;
        let ws = &inner.slots[w.id].data;
        let bs = &inner.slots[b.id].data;
        let mut out = vec![0.0; n_batch * f_out];
        for n in 0..n_batch {
            for fo in 0..f_out {
                let mut acc = bs[fo];
                let wrow = &ws[fo * f_in..(fo + 1) * f_in];
                let xrow = &xs[n * f_in..(n + 1) * f_in];
                for (xi, wi) in xrow.iter().zip(wrow) {
                    acc += xi * wi;
                }
                out[n * f_out + fo] = acc;
            }
        }
        drop(inner);

        let rg = x.requires_grad || w.requires_grad || b.requires_grad;
        Ok(self.push(
            vec![n_batch, f_out],
            out,
            Some(Op::Dense {
                x: x.id,
                w: w.id,
                b: b.id,
            }),
            rg,
        ))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self, x: Var) -> Var {
        let (shape, out) = {
            let inner = self.inner.borrow();
            let s = &inner.slots[x.id];
            (
                s.shape.clone(),
                s.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            )
        };
        self.push(shape, out, Some(Op::Relu { x: x.id }), x.requires_grad)
    }

    /// Elementwise logistic function; output lies in (0, 1).
    pub fn sigmoid(&self, x: Var) -> Var {
        let (shape, out) = {
            let inner = self.inner.borrow();
            let s = &inner.slots[x.id];
            (
                s.shape.clone(),
                s.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            )
        };
        self.push(shape, out, Some(Op::Sigmoid { x: x.id }), x.requires_grad)
    }

    /// Max pooling along W. Gradient routes to the first maximum on ties.
    pub fn maxpool1d(&self, x: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        let (n_batch, c, width) = self.dims3("maxpool1d", x)?;
        if window == 0 || stride == 0 || window > width {
            return Err(shape_err(
                "maxpool1d",
                format!("window {window} stride {stride} invalid for width {width}"),
            ));
        }
        let w_out = (width - window) / stride + 1;
        let inner = self.inner.borrow();
        let xs = &inner.slots[x.id].data;
        let mut out = vec![0.0; n_batch * c * w_out];
        let mut argmax = vec![0usize; n_batch * c * w_out];
        for n in 0..n_batch {
            for ci in 0..c {
                for wo in 0..w_out {
                    let base = idx3(c, width, n, ci, wo * stride);
                    let mut best = xs[base];
                    let mut best_i = base;
                    for kk in 1..window {
                        let v = xs[base + kk];
                        if v > best {
                            best = v;
                            best_i = base + kk;
                        }
                    }
                    let o = idx3(c, w_out, n, ci, wo);
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        drop(inner);
        Ok(self.push(
            vec![n_batch, c, w_out],
            out,
            Some(Op::MaxPool { x: x.id, argmax }),
            x.requires_grad,
        ))
    }

    /// Average pooling along W.
    pub fn avgpool1d(&self, x: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        let (n_batch, c, width) = self.dims3("avgpool1d", x)?;
        if window == 0 || stride == 0 || window > width {
            return Err(shape_err(
                "avgpool1d",
                format!("window {window} stride {stride} invalid for width {width}"),
            ));
        }
        let w_out = (width - window) / stride + 1;
        let inner = self.inner.borrow();
        let xs = &inner.slots[x.id].data;
        let inv = 1.0 / window as f64;
        let mut out = vec![0.0; n_batch * c * w_out];
        for n in 0..n_batch {
            for ci in 0..c {
                for wo in 0..w_out {
                    let base = idx3(c, width, n, ci, wo * stride);
                    out[idx3(c, w_out, n, ci, wo)] = xs[base..base + window].iter().sum::<f64>() * inv;
                }
            }
        }
        drop(inner);
        Ok(self.push(
            vec![n_batch, c, w_out],
            out,
            Some(Op::AvgPool {
                x: x.id,
                window,
                stride,
            }),
            x.requires_grad,
        ))
    }

    /// Mean over the width axis: `[N, C, W] → [N, C]`.
    pub fn global_avgpool_w(&self, x: Var) -> Result<Var, TensorError> {
        let (n_batch, c, width) = self.dims3("global_avgpool_w", x)?;
        let inner = self.inner.borrow();
        let xs = &inner.slots[x.id].data;
        let inv = 1.0 / width as f64;
        let mut out = vec![0.0; n_batch * c];
        for n in 0..n_batch {
            for ci in 0..c {
                let base = idx3(c, width, n, ci, 0);
                out[n * c + ci] = xs[base..base + width].iter().sum::<f64>() * inv;
            }
        }
        drop(inner);
        Ok(self.push(
            vec![n_batch, c],
            out,
            Some(Op::GlobalAvgW { x: x.id }),
            x.requires_grad,
        ))
    }

    /// Max over the width axis: `[N, C, W] → [N, C]`. First index wins ties.
    pub fn global_maxpool_w(&self, x: Var) -> Result<Var, TensorError> {
        let (n_batch, c, width) = self.dims3("global_maxpool_w", x)?;
        let inner = self.inner.borrow();
        let xs = &inner.slots[x.id].data;
        let mut out = vec![0.0; n_batch * c];
        let mut argmax = vec![0usize; n_batch * c];
        for n in 0..n_batch {
            for ci in 0..c {
                let base = idx3(c, width, n, ci, 0);
                let mut best = xs[base];
                let mut best_i = base;
                for w in 1..width {
                    if xs[base + w] > best {
                        best = xs[base + w];
                        best_i = base + w;
                    }
                }
                out[n * c + ci] = best;
                argmax[n * c + ci] = best_i;
            }
        }
        drop(inner);
        Ok(self.push(
            vec![n_batch, c],
            out,
            Some(Op::GlobalMaxW { x: x.id, argmax }),
            x.requires_grad,
        ))
    }

    /// Mean over the channel axis: `[N, C, W] → [N, 1, W]`.
    pub fn channel_avg(&self, x: Var) -> Result<Var, TensorError> {
        let (n_batch, c, width) = self.dims3("channel_avg", x)?;
        let inner = self.inner.borrow();
        let xs = &inner.slots[x.id].data;
        let inv = 1.0 / c as f64;
        let mut out = vec![0.0; n_batch * width];
        for n in 0..n_batch {
            for ci in 0..c {
                let base = idx3(c, width, n, ci, 0);
                for w in 0..width {
                    out[n * width + w] += xs[base + w];
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        drop(inner);
        Ok(self.push(
            vec![n_batch, 1, width],
            out,
            Some(Op::ChannelAvg { x: x.id }),
            x.requires_grad,
        ))
    }

    /// Max over the channel axis: `[N, C, W] → [N, 1, W]`. First channel wins ties.
    pub fn channel_max(&self, x: Var) -> Result<Var, TensorError> {
        let (n_batch, c, width) = self.dims3("channel_max", x)?;
        let inner = self.inner.borrow();
        let xs = &inner.slots[x.id].data;
        let mut out = vec![0.0; n_batch * width];
        let mut argmax = vec![0usize; n_batch * width];
        for n in 0..n_batch {
            for w in 0..width {
                let mut best = xs[idx3(c, width, n, 0, w)];
                let mut best_c = 0usize;
                for ci in 1..c {
                    let v = xs[idx3(c, width, n, ci, w)];
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                out[n * width + w] = best;
                argmax[n * width + w] = idx3(c, width, n, best_c, w);
            }
        }
        drop(inner);
        Ok(self.push(
            vec![n_batch, 1, width],
            out,
            Some(Op::ChannelMax { x: x.id, argmax }),
            x.requires_grad,
        ))
    }

    /// Concatenates along the channel axis: `[N,C1,W] ++ [N,C2,W] → [N,C1+C2,W]`.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n_a, c_a, w_a) = self.dims3("concat_channels", a)?;
        let (n_b, c_b, w_b) = self.dims3("concat_channels", b)?;
        if n_a != n_b || w_a != w_b {
            return Err(shape_err(
                "concat_channels",
                format!("batch/width mismatch: [{n_a},{c_a},{w_a}] vs [{n_b},{c_b},{w_b}]"),
            ));
        }
        let c_out = c_a + c_b;
        let inner = self.inner.borrow();
        let xa = &inner.slots[a.id].data;
        let xb = &inner.slots[b.id].data;
        let mut out = vec![0.0; n_a * c_out * w_a];
        for n in 0..n_a {
            for ci in 0..c_a {
                let src = idx3(c_a, w_a, n, ci, 0);
                let dst = idx3(c_out, w_a, n, ci, 0);
                out[dst..dst + w_a].copy_from_slice(&xa[src..src + w_a]);
            }
            for ci in 0..c_b {
                let src = idx3(c_b, w_a, n, ci, 0);
                let dst = idx3(c_out, w_a, n, c_a + ci, 0);
                out[dst..dst + w_a].copy_from_slice(&xb[src..src + w_a]);
            }
        }
        drop(inner);
        Ok(self.push(
            vec![n_a, c_out, w_a],
            out,
            Some(Op::ConcatChannels { a: a.id, b: b.id }),
            a.requires_grad || b.requires_grad,
        ))
    }

    /// Applies an attention factor to `x: [N, C, W]`.
    ///
    /// `a` may be `[N, C]` (channel attention, broadcast along W) or
    /// `[N, 1, W]` (spatial attention, broadcast along C). No other
    /// broadcasting is supported.
    pub fn mul_broadcast(&self, x: Var, a: Var) -> Result<Var, TensorError> {
        let (n_batch, c, width) = self.dims3("mul_broadcast", x)?;
        let a_shape = self.shape(a);
        let kind = if a_shape.as_slice() == [n_batch, c] {
            Broadcast::PerChannel
        } else if a_shape.as_slice() == [n_batch, 1, width] {
            Broadcast::PerPosition
        } else {
            return Err(shape_err(
                "mul_broadcast",
                format!("factor shape {a_shape:?} matches neither [{n_batch},{c}] nor [{n_batch},1,{width}]"),
            ));
        };

        let inner = self.inner.borrow();
        let xs = &inner.slots[x.id].data;
        let fs = &inner.slots[a.id].data;
        let mut out = vec![0.0; xs.len()];
        match kind {
            Broadcast::PerChannel => {
                for n in 0..n_batch {
                    for ci in 0..c {
                        let f = fs[n * c + ci];
                        let base = idx3(c, width, n, ci, 0);
                        for w in 0..width {
                            out[base + w] = xs[base + w] * f;
                        }
                    }
                }
            }
            Broadcast::PerPosition => {
                for n in 0..n_batch {
                    for ci in 0..c {
                        let base = idx3(c, width, n, ci, 0);
                        for w in 0..width {
                            out[base + w] = xs[base + w] * fs[n * width + w];
                        }
                    }
                }
            }
        }
        drop(inner);
        Ok(self.push(
            vec![n_batch, c, width],
            out,
            Some(Op::MulBroadcast {
                x: x.id,
                a: a.id,
                kind,
            }),
            x.requires_grad || a.requires_grad,
        ))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = {
            let inner = self.inner.borrow();
            let sa = &inner.slots[a.id];
            let sb = &inner.slots[b.id];
            if sa.shape != sb.shape {
                return Err(shape_err(
                    "mul",
                    format!("{:?} vs {:?}", sa.shape, sb.shape),
                ));
            }
            (
                sa.shape.clone(),
                sa.data.iter().zip(&sb.data).map(|(x, y)| x * y).collect(),
            )
        };
        Ok(self.push(
            shape,
            out,
            Some(Op::Mul { a: a.id, b: b.id }),
            a.requires_grad || b.requires_grad,
        ))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = {
            let inner = self.inner.borrow();
            let sa = &inner.slots[a.id];
            let sb = &inner.slots[b.id];
            if sa.shape != sb.shape {
                return Err(shape_err(
                    "add",
                    format!("{:?} vs {:?}", sa.shape, sb.shape),
                ));
            }
            (
                sa.shape.clone(),
                sa.data.iter().zip(&sb.data).map(|(x, y)| x + y).collect(),
            )
        };
        Ok(self.push(
            shape,
            out,
            Some(Op::Add { a: a.id, b: b.id }),
            a.requires_grad || b.requires_grad,
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, x: Var, c: f64) -> Var {
        let (shape, out) = {
            let inner = self.inner.borrow();
            let s = &inner.slots[x.id];
            (s.shape.clone(), s.data.iter().map(|v| v * c).collect())
        };
        self.push(shape, out, Some(Op::Scale { x: x.id, c }), x.requires_grad)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let total: f64 = {
            let inner = self.inner.borrow();
            inner.slots[x.id].data.iter().sum()
        };
        self.push(vec![], vec![total], Some(Op::Sum { x: x.id }), x.requires_grad)
    }

    /// Reinterprets the value with a new shape of equal element count.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let data = self.data(x);
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {} elements as {shape:?}", data.len()),
            ));
        }
        Ok(self.push(
            shape.to_vec(),
            data,
            Some(Op::Reshape { x: x.id }),
            x.requires_grad,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p: [N]` against 0/1 labels.
    ///
    /// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` before the logs.
    pub fn bce_loss(&self, p: Var, labels: &[u8]) -> Result<Var, TensorError> {
        let shape = self.shape(p);
        if shape.len() != 1 || shape[0] != labels.len() || labels.is_empty() {
            return Err(shape_err(
                "bce_loss",
                format!("probabilities {shape:?} vs {} labels", labels.len()),
            ));
        }
        let n = labels.len() as f64;
        let labels: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let loss = {
            let inner = self.inner.borrow();
            let ps = &inner.slots[p.id].data;
            let mut acc = 0.0;
            for (pi, yi) in ps.iter().zip(&labels) {
                let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                acc -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
            }
            acc / n
        };
        Ok(self.push(
            vec![],
            vec![loss],
            Some(Op::Bce {
                p: p.id,
                labels,
            }),
            p.requires_grad,
        ))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse pass from a scalar loss.
    ///
    /// Fills the gradient of every slot on the path from the loss to the
    /// leaves; gradients accumulate additively across calls. The recorded
    /// operation list is cleared afterwards (slot values and gradients stay
    /// readable).
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        if inner.slots[loss.id].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(inner.slots[loss.id].shape.clone()));
        }
        accumulate(&mut inner.slots[loss.id].grad, &[1.0]);

        let nodes = std::mem::take(&mut inner.nodes);
        for node in nodes.iter().rev() {
            // Nodes past the loss, or on branches the loss never consumed,
            // have no output gradient and contribute nothing.
            let g_out = match inner.slots[node.out].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            backward_node(&mut inner.slots, node, &g_out);
        }
        Ok(())
    }
}

fn accumulate(grad: &mut Option<Vec<f64>>, delta: &[f64]) {
    match grad {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => *grad = Some(delta.to_vec()),
    }
}

fn backward_node(slots: &mut [Slot], node: &Node, g_out: &[f64]) {
    match &node.op {
        Op::Conv1d {
            x,
            w,
            b,
            stride,
            padding,
        } => {
            let (stride, padding) = (*stride, *padding);
            let xsh = slots[*x].shape.clone();
            let wsh = slots[*w].shape.clone();
            let (n_batch, c_in, width) = (xsh[0], xsh[1], xsh[2]);
            let (c_out, k) = (wsh[0], wsh[2]);
            let w_out = slots[node.out].shape[2];

            let mut dx = vec![0.0; n_batch * c_in * width];
            let mut dw = vec![0.0; c_out * c_in * k];
            let mut db = vec![0.0; c_out];
            {
                let xs = &slots[*x].data;
                let ws = &slots[*w].data;
                for n in 0..n_batch {
                    for co in 0..c_out {
                        let grow = &g_out[idx3(c_out, w_out, n, co, 0)..idx3(c_out, w_out, n, co, 0) + w_out];
                        db[co] += grow.iter().sum::<f64>();
                        for ci in 0..c_in {
                            let xbase = idx3(c_in, width, n, ci, 0);
                            for kk in 0..k {
                                let widx = (co * c_in + ci) * k + kk;
                                let wv = ws[widx];
                                let lo = padding.saturating_sub(kk).div_ceil(stride).min(w_out);
                                let hi = if width + padding > kk {
                                    (((width + padding - kk - 1) / stride) + 1).min(w_out)
                                } else {
                                    0
                                };
                                if hi <= lo {
                                    continue;
                                }
                                if stride == 1 {
                                    // Split into a dot product and an axpy over
                                    // contiguous windows.
                                    let start = xbase + lo + kk - padding;
                                    let len = hi - lo;
                                    let xw = &xs[start..start + len];
                                    let gw = &grow[lo..hi];
                                    let mut dwv = 0.0;
                                    for (g, xv) in gw.iter().zip(xw) {
                                        dwv += g * xv;
                                    }
                                    dw[widx] += dwv;
                                    for (d, g) in dx[start..start + len].iter_mut().zip(gw) {
                                        *d += g * wv;
                                    }
                                } else {
                                    let mut dwv = 0.0;
                                    for wo in lo..hi {
                                        let xi = xbase + wo * stride + kk - padding;
                                        let g = grow[wo];
                                        dwv += g * xs[xi];
                                        dx[xi] += g * wv;
                                    }
                                    dw[widx] += dwv;
                                }
                            }
                        }
                    }
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
            accumulate(&mut slots[*w].grad, &dw);
            accumulate(&mut slots[*b].grad, &db);
        }
        Op::Dense { x, w, b } => {
            let (n_batch, f_in) = (slots[*x].shape[0], slots[*x].shape[1]);
            let f_out = slots[*w].shape[0];
            let mut dx = vec![0.0; n_batch * f_in];
            let mut dw = vec![0.0; f_out * f_in];
            let mut db = vec![0.0; f_out];
            {
                let xs = &slots[*x].data;
                let ws = &slots[*w].data;
                for n in 0..n_batch {
                    for fo in 0..f_out {
                        let g = g_out[n * f_out + fo];
                        db[fo] += g;
                        let wrow = &ws[fo * f_in..(fo + 1) * f_in];
                        let xrow = &xs[n * f_in..(n + 1) * f_in];
                        for fi in 0..f_in {
                            dx[n * f_in + fi] += g * wrow[fi];
                            dw[fo * f_in + fi] += g * xrow[fi];
                        }
                    }
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
            accumulate(&mut slots[*w].grad, &dw);
            accumulate(&mut slots[*b].grad, &db);
        }
        Op::Relu { x } => {
            let dx: Vec<f64> = slots[*x]
                .data
                .iter()
                .zip(g_out)
                .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
                .collect();
            accumulate(&mut slots[*x].grad, &dx);
        }
        Op::Sigmoid { x } => {
            let dx: Vec<f64> = slots[node.out]
                .data
                .iter()
                .zip(g_out)
                .map(|(&y, &g)| g * y * (1.0 - y))
                .collect();
            accumulate(&mut slots[*x].grad, &dx);
        }
        Op::MaxPool { x, argmax } | Op::GlobalMaxW { x, argmax } | Op::ChannelMax { x, argmax } => {
            let mut dx = vec![0.0; slots[*x].data.len()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += g_out[o];
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Op::AvgPool { x, window, stride } => {
            let xsh = slots[*x].shape.clone();
            let (n_batch, c, width) = (xsh[0], xsh[1], xsh[2]);
            let w_out = slots[node.out].shape[2];
            let inv = 1.0 / *window as f64;
            let mut dx = vec![0.0; slots[*x].data.len()];
            for n in 0..n_batch {
                for ci in 0..c {
                    for wo in 0..w_out {
                        let g = g_out[idx3(c, w_out, n, ci, wo)] * inv;
                        let base = idx3(c, width, n, ci, wo * stride);
                        for kk in 0..*window {
                            dx[base + kk] += g;
                        }
                    }
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Op::GlobalAvgW { x } => {
            let xsh = slots[*x].shape.clone();
            let (n_batch, c, width) = (xsh[0], xsh[1], xsh[2]);
            let inv = 1.0 / width as f64;
            let mut dx = vec![0.0; slots[*x].data.len()];
            for n in 0..n_batch {
                for ci in 0..c {
                    let g = g_out[n * c + ci] * inv;
                    let base = idx3(c, width, n, ci, 0);
                    for w in 0..width {
                        dx[base + w] += g;
                    }
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Op::ChannelAvg { x } => {
            let xsh = slots[*x].shape.clone();
            let (n_batch, c, width) = (xsh[0], xsh[1], xsh[2]);
            let inv = 1.0 / c as f64;
            let mut dx = vec![0.0; slots[*x].data.len()];
            for n in 0..n_batch {
                for ci in 0..c {
                    let base = idx3(c, width, n, ci, 0);
                    for w in 0..width {
                        dx[base + w] += g_out[n * width + w] * inv;
                    }
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Op::ConcatChannels { a, b } => {
            let ash = slots[*a].shape.clone();
            let bsh = slots[*b].shape.clone();
            let (n_batch, c_a, width) = (ash[0], ash[1], ash[2]);
            let c_b = bsh[1];
            let c_out = c_a + c_b;
            let mut da = vec![0.0; slots[*a].data.len()];
            let mut db = vec![0.0; slots[*b].data.len()];
            for n in 0..n_batch {
                for ci in 0..c_a {
                    let src = idx3(c_out, width, n, ci, 0);
                    let dst = idx3(c_a, width, n, ci, 0);
                    da[dst..dst + width].copy_from_slice(&g_out[src..src + width]);
                }
                for ci in 0..c_b {
                    let src = idx3(c_out, width, n, c_a + ci, 0);
                    let dst = idx3(c_b, width, n, ci, 0);
                    db[dst..dst + width].copy_from_slice(&g_out[src..src + width]);
                }
            }
            accumulate(&mut slots[*a].grad, &da);
            accumulate(&mut slots[*b].grad, &db);
        }
        Op::MulBroadcast { x, a, kind } => {
            let xsh = slots[*x].shape.clone();
            let (n_batch, c, width) = (xsh[0], xsh[1], xsh[2]);
            let mut dx = vec![0.0; slots[*x].data.len()];
            let mut da = vec![0.0; slots[*a].data.len()];
            {
                let xs = &slots[*x].data;
                let fs = &slots[*a].data;
                match kind {
                    Broadcast::PerChannel => {
                        for n in 0..n_batch {
                            for ci in 0..c {
                                let f = fs[n * c + ci];
                                let base = idx3(c, width, n, ci, 0);
                                let mut df = 0.0;
                                for w in 0..width {
                                    let g = g_out[base + w];
                                    dx[base + w] += g * f;
                                    df += g * xs[base + w];
                                }
                                da[n * c + ci] += df;
                            }
                        }
                    }
                    Broadcast::PerPosition => {
                        for n in 0..n_batch {
                            for ci in 0..c {
                                let base = idx3(c, width, n, ci, 0);
                                for w in 0..width {
                                    let g = g_out[base + w];
                                    dx[base + w] += g * fs[n * width + w];
                                    da[n * width + w] += g * xs[base + w];
                                }
                            }
                        }
                    }
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
            accumulate(&mut slots[*a].grad, &da);
        }
        Op::Mul { a, b } => {
            let da: Vec<f64> = slots[*b].data.iter().zip(g_out).map(|(&y, &g)| g * y).collect();
            let db: Vec<f64> = slots[*a].data.iter().zip(g_out).map(|(&x, &g)| g * x).collect();
            accumulate(&mut slots[*a].grad, &da);
            accumulate(&mut slots[*b].grad, &db);
        }
        Op::Add { a, b } => {
            accumulate(&mut slots[*a].grad, g_out);
            accumulate(&mut slots[*b].grad, g_out);
        }
        Op::Scale { x, c } => {
            let dx: Vec<f64> = g_out.iter().map(|g| g * c).collect();
            accumulate(&mut slots[*x].grad, &dx);
        }
        Op::Sum { x } => {
            let dx = vec![g_out[0]; slots[*x].data.len()];
            accumulate(&mut slots[*x].grad, &dx);
        }
        Op::Reshape { x } => {
            accumulate(&mut slots[*x].grad, g_out);
        }
        Op::Bce { p, labels } => {
            let n = labels.len() as f64;
            let g = g_out[0];
            let dp: Vec<f64> = slots[*p]
                .data
                .iter()
                .zip(labels)
                .map(|(&pi, &yi)| {
                    if pi <= BCE_EPS || pi >= 1.0 - BCE_EPS {
                        // Clamp is active: the loss is locally constant in p.
                        0.0
                    } else {
                        g * (pi - yi) / (pi * (1.0 - pi)) / n
                    }
                })
                .collect();
            accumulate(&mut slots[*p].grad, &dp);
        }
    }
}
