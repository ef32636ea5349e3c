//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. When it is
//! recording, each op also appends a record to the tape; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients. An inference graph
//! ([`Graph::inference`]) computes the same values but never grows the tape.

use super::kernels::{col2im, gemm, im2col, Window};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use super::{NumericsError, CLAMP_EPS};

/// Handle to a value inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running-statistics update produced by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
    pub momentum: f64,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store
            .get_mut(self.mean)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .get_mut(self.var)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var_unbiased)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Backward rule supplied by [`Graph::custom`]: given the output gradient,
/// the input values and the output value, returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Hadamard {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        k: f64,
    },
    GlobalAvgPool {
        x: usize,
    },
    SelectCols {
        x: usize,
        cols: Vec<usize>,
    },
    SqrtSafe {
        x: usize,
    },
    Interaction {
        c: usize,
        w: usize,
    },
    Dice {
        pred: usize,
        target: Tensor,
        eps: f64,
    },
    Focal {
        pred: usize,
        target: Vec<usize>,
        weights: Vec<f64>,
        gamma: f64,
    },
    Bce {
        pred: usize,
        target: Tensor,
        mask: Option<Tensor>,
    },
    Mse {
        pred: usize,
        target: Tensor,
        mask: Option<Tensor>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward,
    },
}

struct Record {
    out: usize,
    op: Op,
}

/// One forward pass worth of values plus (optionally) the tape to differentiate it.
pub struct Graph {
    values: Vec<Tensor>,
    leaf_param: Vec<Option<ParamId>>,
    tape: Vec<Record>,
    recording: bool,
    stat_updates: Vec<StatUpdate>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(kind: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { kind, detail }
}

impl Graph {
    /// Graph that records a tape for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            leaf_param: Vec::new(),
            tape: Vec::new(),
            recording: true,
            stat_updates: Vec::new(),
        }
    }

    /// Graph for evaluation: values only, the tape stays empty.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor, op: impl FnOnce() -> Op) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.leaf_param.push(None);
        if self.recording {
            self.tape.push(Record { out: id, op: op() });
        }
        Var(id)
    }

    /// Constant input (no gradient flows to a parameter from it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.values.push(value);
        self.leaf_param.push(None);
        Var(self.values.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.input(store.get(id).clone());
        self.leaf_param[v.0] = Some(id);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?} incompatible with kernel {ws:?} (stride {stride})"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} filters", self.shape(b), ws[0]),
                ));
            }
        }
        let win = Window {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
        };
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {ws:?} larger than padded input {xs:?}"),
            ));
        }
        let out = conv2d_forward(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|b| &self.values[b.0]),
            &win,
        );
        Ok(self.push(out, || Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            stride,
            padding,
        }))
    }

    /// Transposed convolution; `w` has shape `[in, out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || stride == 0 {
            return Err(shape_err(
                "transposed-conv2d",
                format!("input {xs:?} incompatible with kernel {ws:?}"),
            ));
        }
        let oh = (xs[2] - 1) * stride + ws[2];
        let ow = (xs[3] - 1) * stride + ws[3];
        if oh < 2 * padding + 1 || ow < 2 * padding + 1 {
            return Err(shape_err(
                "transposed-conv2d",
                format!("padding {padding} too large"),
            ));
        }
        let win = Window {
            channels: ws[1],
            height: oh - 2 * padding,
            width: ow - 2 * padding,
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
        };
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(shape_err(
                    "transposed-conv2d",
                    format!("bias {:?}", self.shape(b)),
                ));
            }
        }
        let out = conv_transpose_forward(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|b| &self.values[b.0]),
            &win,
        );
        Ok(self.push(out, || Op::ConvTranspose2d {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            stride,
            padding,
        }))
    }

    /// `x [n, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(
                "linear",
                format!("input {xs:?} vs weight {ws:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {} outputs", self.shape(b), ws[0]),
                ));
            }
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * out];
        if let Some(b) = b {
            let bias = self.values[b.0].data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            false,
            true,
            n,
            inp,
            out,
            1.0,
            self.values[x.0].data(),
            self.values[w.0].data(),
            1.0,
            &mut y,
        );
        Ok(self.push(Tensor::new(vec![n, out], y), || Op::Linear {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.max(0.0));
        self.push(out, || Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(sigmoid);
        self.push(out, || Op::Sigmoid { x: x.0 })
    }

    /// Softmax over axis 1 (channels for `[n, c, h, w]`, classes for `[n, c]`).
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err(
                "softmax-over-channel",
                format!("input {xs:?} has no channel axis"),
            ));
        }
        let out = softmax_axis1(&self.values[x.0]);
        Ok(self.push(out, || Op::Softmax { x: x.0 }))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(shape_err("max-pool", format!("input {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.values[x.0].data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out);
        Ok(self.push(t, || Op::MaxPool2 { x: x.0, argmax }))
    }

    /// Batch normalisation over every axis except 1. In training mode the
    /// batch statistics are used and a [`StatUpdate`] is queued; otherwise
    /// the running statistics are read from `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || store.get(gamma).shape() != [xs[1]] {
            return Err(shape_err(
                "batch-norm",
                format!("input {xs:?} vs gamma {:?}", store.get(gamma).shape()),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let count = n * inner;
        let src = self.values[x.0].data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let s = &src[(i * c + ch) * inner..(i * c + ch + 1) * inner];
                    mean[ch] += s.iter().sum::<f64>();
                }
            }
            for m in &mut mean {
                *m /= count as f64;
            }
            for i in 0..n {
                for ch in 0..c {
                    let s = &src[(i * c + ch) * inner..(i * c + ch + 1) * inner];
                    var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= count as f64;
            }
            (mean, var)
        } else {
            (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = store.get(gamma).data();
        let bt = store.get(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                for k in off..off + inner {
                    xhat[k] = (src[k] - mean[ch]) * inv_std[ch];
                    out[k] = g[ch] * xhat[k] + bt[ch];
                }
            }
        }
        if train && self.recording {
            let unbiased = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            self.stat_updates.push(StatUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean: mean,
                batch_var_unbiased: var.iter().map(|v| v * unbiased).collect(),
                momentum,
            });
        }
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let xhat = Tensor::new(xs.clone(), xhat);
        Ok(self.push(Tensor::new(xs, out), || Op::BatchNorm {
            x: x.0,
            gamma: gv.0,
            beta: bv.0,
            xhat,
            inv_std,
            train,
        }))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var, NumericsError> {
        let first = self.shape(inputs[0]).to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat", format!("input {first:?}")));
        }
        let mut channels = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err("concat", format!("{s:?} vs {first:?}")));
            }
            channels += s[1];
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for v in inputs {
                let t = &self.values[v.0];
                let stride = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        Ok(self.push(Tensor::new(shape, data), || Op::Concat {
            inputs: inputs.iter().map(|v| v.0).collect(),
        }))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let n = t.shape()[0];
        let rest = t.len() / n.max(1);
        let out = t.clone().reshape(&[n, rest]);
        self.push(out, || Op::Reshape { x: x.0 })
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "hadamard",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        Ok(self.push(out, || Op::Hadamard { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        Ok(self.push(out, || Op::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.values[x.0].scale(k);
        self.push(out, || Op::Scale { x: x.0, k })
    }

    /// Mean over the spatial axes of `[n, c, h, w]`, giving `[n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global-avg-pool", format!("input {xs:?}")));
        }
        let inner = xs[2] * xs[3];
        let data: Vec<f64> = self.values[x.0]
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        Ok(self.push(Tensor::new(vec![xs[0], xs[1]], data), || {
            Op::GlobalAvgPool { x: x.0 }
        }))
    }

    /// Picks columns of a `[n, d]` matrix, in the given order.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || cols.iter().any(|&c| c >= xs[1]) {
            return Err(shape_err("select", format!("columns {cols:?} of {xs:?}")));
        }
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(xs[0] * cols.len());
        for i in 0..xs[0] {
            data.extend(cols.iter().map(|&c| src[i * xs[1] + c]));
        }
        let t = Tensor::new(vec![xs[0], cols.len()], data);
        Ok(self.push(t, || Op::SelectCols {
            x: x.0,
            cols: cols.to_vec(),
        }))
    }

    /// `sqrt(max(x, 0))` with derivative 0 wherever the output is 0.
    pub fn sqrt_safe(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.max(0.0).sqrt());
        self.push(out, || Op::SqrtSafe { x: x.0 })
    }

    /// Per-row pairwise interaction `[n, k] x [n, k] -> [n, 1]`; see
    /// [`crate::interaction::interact`] for the formula and degenerate rule.
    pub fn interaction(&mut self, c: Var, w: Var) -> Result<Var, NumericsError> {
        let cs = self.shape(c).to_vec();
        if cs.len() != 2 || self.shape(w) != cs.as_slice() {
            return Err(shape_err(
                "interaction",
                format!("{cs:?} vs {:?}", self.shape(w)),
            ));
        }
        let k = cs[1];
        let cv = self.values[c.0].data();
        let wv = self.values[w.0].data();
        if let Some(bad) = wv.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(NumericsError::NegativeWeight(*bad));
        }
        let out: Vec<f64> = (0..cs[0])
            .map(|i| {
                crate::interaction::interact_closed_form(
                    &cv[i * k..(i + 1) * k],
                    &wv[i * k..(i + 1) * k],
                )
            })
            .collect();
        Ok(
            self.push(Tensor::new(vec![cs[0], 1], out), || Op::Interaction {
                c: c.0,
                w: w.0,
            }),
        )
    }

    /// Soft dice loss over `[n, classes, h, w]` probabilities and a one-hot target.
    pub fn dice_loss(
        &mut self,
        pred: Var,
        target: &Tensor,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let ps = self.shape(pred).to_vec();
        if ps.len() != 4 || target.shape() != ps.as_slice() {
            return Err(shape_err(
                "dice",
                format!("pred {ps:?} vs target {:?}", target.shape()),
            ));
        }
        let stats = dice_stats(&self.values[pred.0], target);
        let classes = ps[1] as f64;
        let mean_dice: f64 = stats
            .iter()
            .map(|(i, p, t)| (2.0 * i + eps) / (p + t + eps))
            .sum::<f64>()
            / classes;
        let target = target.clone();
        Ok(self.push(Tensor::scalar(1.0 - mean_dice), || Op::Dice {
            pred: pred.0,
            target,
            eps,
        }))
    }

    /// Mean over pixels of `-w[class] (1 - p_true)^gamma log p_true`.
    pub fn focal_loss(
        &mut self,
        pred: Var,
        target: &[usize],
        weights: &[f64],
        gamma: f64,
    ) -> Result<Var, NumericsError> {
        let ps = self.shape(pred).to_vec();
        if ps.len() != 4
            || weights.len() != ps[1]
            || target.len() != ps[0] * ps[2] * ps[3]
            || gamma < 0.0
        {
            return Err(shape_err(
                "focal",
                format!(
                    "pred {ps:?}, {} labels, {} weights, gamma {gamma}",
                    target.len(),
                    weights.len()
                ),
            ));
        }
        let (n, c, plane) = (ps[0], ps[1], ps[2] * ps[3]);
        let p = self.values[pred.0].data();
        let mut total = 0.0;
        for i in 0..n {
            for px in 0..plane {
                let cls = target[i * plane + px];
                let pt = p[(i * c + cls) * plane + px].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
                total += -weights[cls] * (1.0 - pt).powf(gamma) * pt.ln();
            }
        }
        let loss = total / (n * plane) as f64;
        Ok(self.push(Tensor::scalar(loss), || Op::Focal {
            pred: pred.0,
            target: target.to_vec(),
            weights: weights.to_vec(),
            gamma,
        }))
    }

    /// Binary cross entropy on probabilities, optionally restricted to `mask > 0` entries.
    pub fn bce_loss(
        &mut self,
        pred: Var,
        target: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Var, NumericsError> {
        self.check_pointwise("bce", pred, target, mask)?;
        let p = self.values[pred.0].data();
        let (mut total, mut count) = (0.0, 0.0);
        for (k, (&pv, &t)) in p.iter().zip(target.data()).enumerate() {
            let m = mask.map_or(1.0, |m| m.data()[k]);
            if m == 0.0 {
                continue;
            }
            let pc = pv.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            total += -m * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
            count += m;
        }
        let loss = if count > 0.0 { total / count } else { 0.0 };
        Ok(self.push(Tensor::scalar(loss), || Op::Bce {
            pred: pred.0,
            target: target.clone(),
            mask: mask.cloned(),
        }))
    }

    pub fn mse_loss(
        &mut self,
        pred: Var,
        target: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Var, NumericsError> {
        self.check_pointwise("mse", pred, target, mask)?;
        let p = self.values[pred.0].data();
        let (mut total, mut count) = (0.0, 0.0);
        for (k, (&pv, &t)) in p.iter().zip(target.data()).enumerate() {
            let m = mask.map_or(1.0, |m| m.data()[k]);
            total += m * (pv - t).powi(2);
            count += m;
        }
        let loss = if count > 0.0 { total / count } else { 0.0 };
        Ok(self.push(Tensor::scalar(loss), || Op::Mse {
            pred: pred.0,
            target: target.clone(),
            mask: mask.cloned(),
        }))
    }

    /// Mean cross entropy of `[n, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || labels.len() != ls[0] || labels.iter().any(|&l| l >= ls[1]) {
            return Err(shape_err(
                "cross-entropy",
                format!("logits {ls:?} vs {} labels", labels.len()),
            ));
        }
        let probs = softmax_axis1(&self.values[logits.0]);
        let k = ls[1];
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs.data()[i * k + l].max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / ls[0] as f64;
        Ok(self.push(Tensor::scalar(loss), || Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        }))
    }

    /// Op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push(value, || Op::Custom {
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward,
        })
    }

    fn check_pointwise(
        &self,
        kind: &'static str,
        pred: Var,
        target: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(), NumericsError> {
        let ps = self.shape(pred);
        if target.shape() != ps || mask.is_some_and(|m| m.shape() != ps) {
            return Err(shape_err(
                kind,
                format!("pred {ps:?} vs target {:?}", target.shape()),
            ));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`; returns per-node gradients.
    fn propagate(&self, loss: Var) -> Result<Vec<Option<Tensor>>, NumericsError> {
        if self.values[loss.0].len() != 1 {
            return Err(NumericsError::NonScalarLoss(
                self.values[loss.0].shape().to_vec(),
            ));
        }
        if !self.recording {
            return Err(NumericsError::NotRecording);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::ones(self.values[loss.0].shape()));
        for rec in self.tape.iter().rev() {
            let Some(gout) = grads[rec.out].take() else {
                continue;
            };
            for (idx, g) in self.backward_op(rec, &gout) {
                match &mut grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[rec.out] = Some(gout);
        }
        Ok(grads)
    }

    /// Gradients of `loss` for every parameter in `store`; parameters not
    /// reachable from `loss` get zero.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients, NumericsError> {
        let grads = self.propagate(loss)?;
        let mut out = Gradients::zeros_like(store);
        for (node, g) in grads.iter().enumerate() {
            if let (Some(pid), Some(g)) = (self.leaf_param[node], g) {
                out.accumulate(pid, g);
            }
        }
        Ok(out)
    }

    /// Gradients of `loss` with respect to arbitrary graph values.
    pub fn backward_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>, NumericsError> {
        let grads = self.propagate(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape()))
            })
            .collect())
    }

    fn backward_op(&self, rec: &Record, gout: &Tensor) -> Vec<(usize, Tensor)> {
        let v = &self.values;
        let out = &v[rec.out];
        match &rec.op {
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xs = v[*x].shape();
                let ws = v[*w].shape();
                let win = Window {
                    channels: xs[1],
                    height: xs[2],
                    width: xs[3],
                    kernel_h: ws[2],
                    kernel_w: ws[3],
                    stride: *stride,
                    padding: *padding,
                };
                let (dx, dw, db) = conv2d_backward(&v[*x], &v[*w], gout, &win);
                let mut res = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    res.push((*b, db));
                }
                res
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let ws = v[*w].shape();
                let os = out.shape();
                let win = Window {
                    channels: ws[1],
                    height: os[2],
                    width: os[3],
                    kernel_h: ws[2],
                    kernel_w: ws[3],
                    stride: *stride,
                    padding: *padding,
                };
                let (dx, dw, db) = conv_transpose_backward(&v[*x], &v[*w], gout, &win);
                let mut res = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    res.push((*b, db));
                }
                res
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (v[*x].shape()[0], v[*x].shape()[1]);
                let out_f = v[*w].shape()[0];
                let mut dx = vec![0.0; n * inp];
                gemm(
                    false,
                    false,
                    n,
                    out_f,
                    inp,
                    1.0,
                    gout.data(),
                    v[*w].data(),
                    0.0,
                    &mut dx,
                );
                let mut dw = vec![0.0; out_f * inp];
                gemm(
                    true,
                    false,
                    out_f,
                    n,
                    inp,
                    1.0,
                    gout.data(),
                    v[*x].data(),
                    0.0,
                    &mut dw,
                );
                let mut res = vec![
                    (*x, Tensor::new(vec![n, inp], dx)),
                    (*w, Tensor::new(vec![out_f, inp], dw)),
                ];
                if let Some(b) = b {
                    let mut db = vec![0.0; out_f];
                    for row in gout.data().chunks(out_f) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    res.push((*b, Tensor::new(vec![out_f], db)));
                }
                res
            }
            Op::Relu { x } => vec![(
                *x,
                v[*x].zip_map(gout, |xv, g| if xv > 0.0 { g } else { 0.0 }),
            )],
            Op::Sigmoid { x } => vec![(*x, out.zip_map(gout, |y, g| g * y * (1.0 - y)))],
            Op::Softmax { x } => {
                let s = out.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let (y, g) = (out.data(), gout.data());
                let mut dx = vec![0.0; y.len()];
                for i in 0..n {
                    for p in 0..inner {
                        let idx = |ch: usize| (i * c + ch) * inner + p;
                        let dot: f64 = (0..c).map(|ch| y[idx(ch)] * g[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = y[idx(ch)] * (g[idx(ch)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(s.to_vec(), dx))]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(v[*x].shape());
                let d = dx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += gout.data()[o];
                }
                vec![(*x, dx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = out.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let m = (n * inner) as f64;
                let g = gout.data();
                let xh = xhat.data();
                let gam = v[*gamma].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * inner;
                        for k in off..off + inner {
                            dbeta[ch] += g[k];
                            dgamma[ch] += g[k] * xh[k];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * inner;
                        for k in off..off + inner {
                            dx[k] = if *train {
                                gam[ch] * inv_std[ch] / m
                                    * (m * g[k] - dbeta[ch] - xh[k] * dgamma[ch])
                            } else {
                                gam[ch] * inv_std[ch] * g[k]
                            };
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(s.to_vec(), dx)),
                    (*gamma, Tensor::new(vec![c], dgamma)),
                    (*beta, Tensor::new(vec![c], dbeta)),
                ]
            }
            Op::Concat { inputs } => {
                let s = out.shape();
                let n = s[0];
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|&inp| {
                        let is = v[inp].shape();
                        let stride = is[1] * inner;
                        let mut d = Vec::with_capacity(n * stride);
                        for i in 0..n {
                            d.extend_from_slice(
                                &gout.data()[i * total + offset..i * total + offset + stride],
                            );
                        }
                        offset += stride;
                        (inp, Tensor::new(is.to_vec(), d))
                    })
                    .collect()
            }
            Op::Reshape { x } => vec![(*x, gout.clone().reshape(v[*x].shape()))],
            Op::Hadamard { a, b } => vec![
                (*a, gout.zip_map(&v[*b], |g, y| g * y)),
                (*b, gout.zip_map(&v[*a], |g, y| g * y)),
            ],
            Op::Add { a, b } => vec![(*a, gout.clone()), (*b, gout.clone())],
            Op::Scale { x, k } => vec![(*x, gout.scale(*k))],
            Op::GlobalAvgPool { x } => {
                let xs = v[*x].shape();
                let inner = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(v[*x].len());
                for g in gout.data() {
                    dx.extend(std::iter::repeat_n(g / inner as f64, inner));
                }
                vec![(*x, Tensor::new(xs.to_vec(), dx))]
            }
            Op::SelectCols { x, cols } => {
                let xs = v[*x].shape();
                let mut dx = Tensor::zeros(xs);
                let d = dx.data_mut();
                for i in 0..xs[0] {
                    for (j, &c) in cols.iter().enumerate() {
                        d[i * xs[1] + c] += gout.data()[i * cols.len() + j];
                    }
                }
                vec![(*x, dx)]
            }
            Op::SqrtSafe { x } => vec![(
                *x,
                out.zip_map(gout, |y, g| if y > 0.0 { g * 0.5 / y } else { 0.0 }),
            )],
            Op::Interaction { c, w } => {
                let k = v[*c].shape()[1];
                let (cv, wv) = (v[*c].data(), v[*w].data());
                let mut dc = vec![0.0; cv.len()];
                let mut dw = vec![0.0; wv.len()];
                for (i, g) in gout.data().iter().enumerate() {
                    let r = i * k..(i + 1) * k;
                    let (gc, gw) =
                        crate::interaction::interact_gradient(&cv[r.clone()], &wv[r.clone()]);
                    for (j, idx) in r.enumerate() {
                        dc[idx] = g * gc[j];
                        dw[idx] = g * gw[j];
                    }
                }
                vec![
                    (*c, Tensor::new(v[*c].shape().to_vec(), dc)),
                    (*w, Tensor::new(v[*w].shape().to_vec(), dw)),
                ]
            }
            Op::Dice { pred, target, eps } => {
                let p = &v[*pred];
                let s = p.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let stats = dice_stats(p, target);
                let g0 = gout.item();
                let t = target.data();
                let mut dp = vec![0.0; p.len()];
                for (ch, &(inter, ps, ts)) in stats.iter().enumerate() {
                    let den = ps + ts + eps;
                    let num = 2.0 * inter + eps;
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        for k in off..off + plane {
                            dp[k] = -g0 / c as f64 * (2.0 * t[k] * den - num) / (den * den);
                        }
                    }
                }
                vec![(*pred, Tensor::new(s.to_vec(), dp))]
            }
            Op::Focal {
                pred,
                target,
                weights,
                gamma,
            } => {
                let p = &v[*pred];
                let s = p.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let scale = gout.item() / (n * plane) as f64;
                let mut dp = vec![0.0; p.len()];
                for i in 0..n {
                    for px in 0..plane {
                        let cls = target[i * plane + px];
                        let idx = (i * c + cls) * plane + px;
                        let pt = p.data()[idx].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
                        let q = 1.0 - pt;
                        let mut d = -q.powf(*gamma) / pt;
                        if *gamma > 0.0 {
                            d += gamma * q.powf(gamma - 1.0) * pt.ln();
                        }
                        dp[idx] = scale * weights[cls] * d;
                    }
                }
                vec![(*pred, Tensor::new(s.to_vec(), dp))]
            }
            Op::Bce { pred, target, mask } => {
                let p = &v[*pred];
                let count: f64 = mask.as_ref().map_or(p.len() as f64, |m| m.sum());
                let g0 = gout.item();
                let mut dp = vec![0.0; p.len()];
                if count > 0.0 {
                    for (k, d) in dp.iter_mut().enumerate() {
                        let m = mask.as_ref().map_or(1.0, |m| m.data()[k]);
                        let pc = p.data()[k].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
                        let t = target.data()[k];
                        *d = g0 * m * (pc - t) / (pc * (1.0 - pc)) / count;
                    }
                }
                vec![(*pred, Tensor::new(p.shape().to_vec(), dp))]
            }
            Op::Mse { pred, target, mask } => {
                let p = &v[*pred];
                let count: f64 = mask.as_ref().map_or(p.len() as f64, |m| m.sum());
                let g0 = gout.item();
                let mut dp = vec![0.0; p.len()];
                if count > 0.0 {
                    for (k, d) in dp.iter_mut().enumerate() {
                        let m = mask.as_ref().map_or(1.0, |m| m.data()[k]);
                        *d = g0 * m * 2.0 * (p.data()[k] - target.data()[k]) / count;
                    }
                }
                vec![(*pred, Tensor::new(p.shape().to_vec(), dp))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = probs.shape();
                let k = s[1];
                let scale = gout.item() / s[0] as f64;
                let mut d = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                for x in &mut d {
                    *x *= scale;
                }
                vec![(*logits, Tensor::new(s.to_vec(), d))]
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| &v[i]).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(backward(gout, &ins, out))
                    .collect()
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax along axis 1.
pub fn softmax_axis1(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..n {
        for p in 0..inner {
            let idx = |ch: usize| (i * c + ch) * inner + p;
            let max = (0..c)
                .map(|ch| src[idx(ch)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (src[idx(ch)] - max).exp();
                out[idx(ch)] = e;
                sum += e;
            }
            for ch in 0..c {
                out[idx(ch)] /= sum;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Per class: (overlap, prediction mass, target mass) summed over batch and pixels.
fn dice_stats(pred: &Tensor, target: &Tensor) -> Vec<(f64, f64, f64)> {
    let s = pred.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let (p, t) = (pred.data(), target.data());
    let mut stats = vec![(0.0, 0.0, 0.0); c];
    for i in 0..n {
        for (ch, st) in stats.iter_mut().enumerate() {
            let off = (i * c + ch) * plane;
            for k in off..off + plane {
                st.0 += p[k] * t[k];
                st.1 += p[k];
                st.2 += t[k];
            }
        }
    }
    stats
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, win: &Window) -> Tensor {
    let n = x.shape()[0];
    let o = w.shape()[0];
    let (rows, cols_n) = (win.col_rows(), win.col_cols());
    let plane_in = win.channels * win.height * win.width;
    let direct = win.kernel_h == 1 && win.kernel_w == 1 && win.stride == 1 && win.padding == 0;
    let mut out = vec![0.0; n * o * cols_n];
    let mut cols = if direct {
        Vec::new()
    } else {
        vec![0.0; rows * cols_n]
    };
    for i in 0..n {
        let xi = &x.data()[i * plane_in..(i + 1) * plane_in];
        let yi = &mut out[i * o * cols_n..(i + 1) * o * cols_n];
        if let Some(b) = b {
            for (ch, row) in yi.chunks_mut(cols_n).enumerate() {
                row.fill(b.data()[ch]);
            }
        }
        let src: &[f64] = if direct {
            xi
        } else {
            im2col(xi, win, &mut cols);
            &cols
        };
        gemm(false, false, o, rows, cols_n, 1.0, w.data(), src, 1.0, yi);
    }
    Tensor::new(vec![n, o, win.out_h(), win.out_w()], out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    win: &Window,
) -> (Tensor, Tensor, Tensor) {
    let n = x.shape()[0];
    let o = w.shape()[0];
    let (rows, cols_n) = (win.col_rows(), win.col_cols());
    let plane_in = win.channels * win.height * win.width;
    let direct = win.kernel_h == 1 && win.kernel_w == 1 && win.stride == 1 && win.padding == 0;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; o];
    let mut cols = vec![0.0; rows * cols_n];
    let mut dcols = vec![0.0; rows * cols_n];
    for i in 0..n {
        let xi = &x.data()[i * plane_in..(i + 1) * plane_in];
        let gi = &gout.data()[i * o * cols_n..(i + 1) * o * cols_n];
        for (ch, row) in gi.chunks(cols_n).enumerate() {
            db[ch] += row.iter().sum::<f64>();
        }
        let src: &[f64] = if direct {
            xi
        } else {
            im2col(xi, win, &mut cols);
            &cols
        };
        gemm(false, true, o, cols_n, rows, 1.0, gi, src, 1.0, &mut dw);
        let dxi = &mut dx[i * plane_in..(i + 1) * plane_in];
        if direct {
            gemm(true, false, rows, o, cols_n, 1.0, w.data(), gi, 0.0, dxi);
        } else {
            gemm(
                true,
                false,
                rows,
                o,
                cols_n,
                1.0,
                w.data(),
                gi,
                0.0,
                &mut dcols,
            );
            col2im(&dcols, win, dxi);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
        Tensor::new(vec![o], db),
    )
}

/// `win` describes the output plane seen as the input of the adjoint convolution.
fn conv_transpose_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, win: &Window) -> Tensor {
    let xs = x.shape();
    let (n, cin, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let cout = win.channels;
    let rows = win.col_rows();
    let plane_out = cout * win.height * win.width;
    let mut out = vec![0.0; n * plane_out];
    let mut cols = vec![0.0; rows * hw];
    for i in 0..n {
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        gemm(
            true,
            false,
            rows,
            cin,
            hw,
            1.0,
            w.data(),
            xi,
            0.0,
            &mut cols,
        );
        let yi = &mut out[i * plane_out..(i + 1) * plane_out];
        col2im(&cols, win, yi);
        if let Some(b) = b {
            let plane = win.height * win.width;
            for (ch, chunk) in yi.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v += b.data()[ch];
                }
            }
        }
    }
    Tensor::new(vec![n, cout, win.height, win.width], out)
}

fn conv_transpose_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    win: &Window,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let (n, cin, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let cout = win.channels;
    let rows = win.col_rows();
    let plane = win.height * win.width;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    let mut cols = vec![0.0; rows * hw];
    for i in 0..n {
        let gi = &gout.data()[i * cout * plane..(i + 1) * cout * plane];
        for (ch, chunk) in gi.chunks(plane).enumerate() {
            db[ch] += chunk.iter().sum::<f64>();
        }
        im2col(gi, win, &mut cols);
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        gemm(
            false,
            false,
            cin,
            rows,
            hw,
            1.0,
            w.data(),
            &cols,
            0.0,
            &mut dx[i * cin * hw..(i + 1) * cin * hw],
        );
        gemm(false, true, cin, hw, rows, 1.0, xi, &cols, 1.0, &mut dw);
    }
    (
        Tensor::new(xs.to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
        Tensor::new(vec![cout], db),
    )
}
