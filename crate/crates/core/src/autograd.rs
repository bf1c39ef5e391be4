//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records every operation at forward time; [`Graph::backward`]
//! replays the tape in reverse, accumulating gradients into every node that
//! (transitively) depends on a gradient-requiring leaf. Gradients add on
//! fan-out, so a tensor used twice receives both contributions. A graph can
//! be differentiated once; a second `backward` returns
//! [`AutogradError::AlreadyConsumed`].
//!
//! Tensors are row-major `f64` buffers with explicit shapes. Only the ops
//! the emotion classifier needs are provided; each stores whatever forward
//! state its backward pass requires (max indices, dropout masks, batch
//! statistics, softmax probabilities).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward target is not a scalar")]
    NotScalar,
    #[error("graph already consumed by backward")]
    AlreadyConsumed,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Abs(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Sum(Tensor),
    Linear {
        x: Tensor,
        w: Tensor,
        b: Tensor,
    },
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
    },
    MaxPool {
        x: Tensor,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Dropout {
        x: Tensor,
        mask: Vec<f64>,
    },
    ConcatFlatten(Vec<Tensor>),
    GatherRows {
        x: Tensor,
        idx: Vec<usize>,
    },
    SoftmaxXent {
        logits: Tensor,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Tensor,
        target: Vec<f64>,
    },
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Forward tape. Nodes are stored structure-of-arrays so the backward sweep
/// can read op metadata and values while writing gradients.
pub struct Graph {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Graph {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            ops: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, needs: bool) -> Tensor {
        debug_assert_eq!(values.len(), numel(&shape));
        self.ops.push(op);
        self.shapes.push(shape);
        self.values.push(values);
        self.needs.push(needs);
        self.grads.push(None);
        Tensor(self.ops.len() - 1)
    }

    /// New leaf tensor. `needs_grad` marks it as a differentiation target.
    pub fn leaf(
        &mut self,
        values: Vec<f64>,
        shape: Vec<usize>,
        needs_grad: bool,
    ) -> Result<Tensor, AutogradError> {
        if values.len() != numel(&shape) {
            return Err(AutogradError::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape, values, needs_grad))
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.shapes[t.0]
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.values[t.0]
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> Result<f64, AutogradError> {
        if self.values[t.0].len() != 1 {
            return Err(AutogradError::NotScalar);
        }
        Ok(self.values[t.0][0])
    }

    /// Gradient accumulated by [`Graph::backward`]; `None` before backward
    /// or for tensors that do not require gradients.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads[t.0].as_deref()
    }

    fn same_shape(&self, a: Tensor, b: Tensor, op: &str) -> Result<(), AutogradError> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(AutogradError::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shapes[a.0], self.shapes[b.0]
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutogradError> {
        self.same_shape(a, b, "add")?;
        let v: Vec<f64> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Op::Add(a, b), self.shapes[a.0].clone(), v, needs))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutogradError> {
        self.same_shape(a, b, "sub")?;
        let v: Vec<f64> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Op::Sub(a, b), self.shapes[a.0].clone(), v, needs))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutogradError> {
        self.same_shape(a, b, "mul")?;
        let v: Vec<f64> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Op::Mul(a, b), self.shapes[a.0].clone(), v, needs))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Result<Tensor, AutogradError> {
        if !c.is_finite() {
            return Err(AutogradError::InvalidArgument("non-finite scale".into()));
        }
        let v: Vec<f64> = self.values[x.0].iter().map(|y| c * y).collect();
        let needs = self.needs[x.0];
        Ok(self.push(Op::Scale(x, c), self.shapes[x.0].clone(), v, needs))
    }

    pub fn abs(&mut self, x: Tensor) -> Result<Tensor, AutogradError> {
        let v: Vec<f64> = self.values[x.0].iter().map(|y| y.abs()).collect();
        let needs = self.needs[x.0];
        Ok(self.push(Op::Abs(x), self.shapes[x.0].clone(), v, needs))
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor, AutogradError> {
        let v: Vec<f64> = self.values[x.0].iter().map(|y| y.max(0.0)).collect();
        let needs = self.needs[x.0];
        Ok(self.push(Op::Relu(x), self.shapes[x.0].clone(), v, needs))
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Result<Tensor, AutogradError> {
        let v: Vec<f64> = self.values[x.0]
            .iter()
            .map(|&y| {
                if y >= 0.0 {
                    1.0 / (1.0 + (-y).exp())
                } else {
                    let e = y.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let needs = self.needs[x.0];
        Ok(self.push(Op::Sigmoid(x), self.shapes[x.0].clone(), v, needs))
    }

    /// Sum of all elements, producing a `[1]`-shaped scalar.
    pub fn sum(&mut self, x: Tensor) -> Result<Tensor, AutogradError> {
        let s: f64 = self.values[x.0].iter().sum();
        let needs = self.needs[x.0];
        Ok(self.push(Op::Sum(x), vec![1], vec![s], needs))
    }

    /// Affine map `y = x w^T + b` with `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor, AutogradError> {
        let (xs, ws, bs) = (&self.shapes[x.0], &self.shapes[w.0], &self.shapes[b.0]);
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(AutogradError::ShapeMismatch(format!(
                "linear: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (bsz, nin, nout) = (xs[0], xs[1], ws[0]);
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let bv = &self.values[b.0];
        let mut out = vec![0.0; bsz * nout];
        for r in 0..bsz {
            let xrow = &xv[r * nin..(r + 1) * nin];
            let orow = &mut out[r * nout..(r + 1) * nout];
            for o in 0..nout {
                let wrow = &wv[o * nin..(o + 1) * nin];
                let mut acc = bv[o];
                for i in 0..nin {
                    acc += xrow[i] * wrow[i];
                }
                orow[o] = acc;
            }
        }
        let needs = self.needs[x.0] || self.needs[w.0] || self.needs[b.0];
        Ok(self.push(Op::Linear { x, w, b }, vec![bsz, nout], out, needs))
    }

    /// Valid 2-D cross-correlation of a single-channel batch.
    /// `x: [B, H, W]`, `w: [K, kh, kw]`, `b: [K]` gives
    /// `[B, K, H-kh+1, W-kw+1]`.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor, AutogradError> {
        let (xs, ws, bs) = (&self.shapes[x.0], &self.shapes[w.0], &self.shapes[b.0]);
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 || ws[0] != bs[0] {
            return Err(AutogradError::ShapeMismatch(format!(
                "conv2d: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (bsz, h, wd) = (xs[0], xs[1], xs[2]);
        let (k, kh, kw) = (ws[0], ws[1], ws[2]);
        if kh > h || kw > wd {
            return Err(AutogradError::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{wd}"
            )));
        }
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let bv = &self.values[b.0];
        let mut out = vec![0.0; bsz * k * oh * ow];
        for bi in 0..bsz {
            let xoff = bi * h * wd;
            for kk in 0..k {
                let ooff = (bi * k + kk) * oh * ow;
                let woff = kk * kh * kw;
                for i in 0..oh {
                    let orow = &mut out[ooff + i * ow..ooff + (i + 1) * ow];
                    for p in 0..kh {
                        let xrow = xoff + (i + p) * wd;
                        for q in 0..kw {
                            let wgt = wv[woff + p * kw + q];
                            let xr = &xv[xrow + q..xrow + q + ow];
                            axpy(orow, wgt, xr);
                        }
                    }
                }
                let blk = &mut out[ooff..ooff + oh * ow];
                for o in blk.iter_mut() {
                    *o += bv[kk];
                }
            }
        }
        let needs = self.needs[x.0] || self.needs[w.0] || self.needs[b.0];
        Ok(self.push(Op::Conv2d { x, w, b }, vec![bsz, k, oh, ow], out, needs))
    }

    /// Non-overlapping max pooling over trailing spatial dims of
    /// `x: [B, K, H, W]`; output is `[B, K, H/ph, W/pw]` (floor), trailing
    /// rows and columns that do not fill a window are dropped. Ties resolve
    /// to the first maximum in row-major order.
    pub fn max_pool(
        &mut self,
        x: Tensor,
        ph: usize,
        pw: usize,
    ) -> Result<Tensor, AutogradError> {
        let xs = &self.shapes[x.0];
        if xs.len() != 4 {
            return Err(AutogradError::ShapeMismatch(format!("max_pool: x {xs:?}")));
        }
        let (bsz, k, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        if ph == 0 || pw == 0 || ph > h || pw > wd {
            return Err(AutogradError::InvalidArgument(format!(
                "max_pool: window {ph}x{pw} for input {h}x{wd}"
            )));
        }
        let (oh, ow) = (h / ph, wd / pw);
        let xv = &self.values[x.0];
        let mut out = Vec::with_capacity(bsz * k * oh * ow);
        let mut argmax = Vec::with_capacity(bsz * k * oh * ow);
        for bi in 0..bsz {
            for kk in 0..k {
                let base = (bi * k + kk) * h * wd;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best_idx = base + oi * ph * wd + oj * pw;
                        let mut best = xv[best_idx];
                        for p in 0..ph {
                            for q in 0..pw {
                                let idx = base + (oi * ph + p) * wd + (oj * pw + q);
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        Ok(self.push(
            Op::MaxPool { x, argmax },
            vec![bsz, k, oh, ow],
            out,
            needs,
        ))
    }

    /// Batch normalization over the batch axis of `x: [B, C]`, training
    /// mode: normalizes with the (biased) batch statistics and returns them
    /// so the caller can maintain running estimates.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm_train(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>), AutogradError> {
        let (mean, var) = self.batch_stats(x, gamma, beta)?;
        let t = self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((t, mean, var))
    }

    /// Batch normalization in inference mode, using provided running
    /// statistics instead of batch statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Tensor, AutogradError> {
        self.batch_norm_with(x, gamma, beta, mean, var, eps, false)
    }

    fn batch_stats(
        &self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
    ) -> Result<(Vec<f64>, Vec<f64>), AutogradError> {
        let xs = &self.shapes[x.0];
        if xs.len() != 2 {
            return Err(AutogradError::ShapeMismatch(format!("batch_norm: x {xs:?}")));
        }
        let (bsz, c) = (xs[0], xs[1]);
        if self.shapes[gamma.0] != [c] || self.shapes[beta.0] != [c] {
            return Err(AutogradError::ShapeMismatch(
                "batch_norm: gamma/beta must be [C]".into(),
            ));
        }
        if bsz == 0 {
            return Err(AutogradError::InvalidArgument("batch_norm: empty batch".into()));
        }
        let xv = &self.values[x.0];
        let mut mean = vec![0.0; c];
        for r in 0..bsz {
            for j in 0..c {
                mean[j] += xv[r * c + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= bsz as f64;
        }
        let mut var = vec![0.0; c];
        for r in 0..bsz {
            for j in 0..c {
                let d = xv[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= bsz as f64;
        }
        Ok((mean, var))
    }

    fn batch_norm_with(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        training: bool,
    ) -> Result<Tensor, AutogradError> {
        let xs = &self.shapes[x.0];
        if xs.len() != 2 {
            return Err(AutogradError::ShapeMismatch(format!("batch_norm: x {xs:?}")));
        }
        let (bsz, c) = (xs[0], xs[1]);
        if self.shapes[gamma.0] != [c]
            || self.shapes[beta.0] != [c]
            || mean.len() != c
            || var.len() != c
        {
            return Err(AutogradError::ShapeMismatch(
                "batch_norm: gamma/beta/stats must be [C]".into(),
            ));
        }
        if eps <= 0.0 {
            return Err(AutogradError::InvalidArgument("batch_norm: eps <= 0".into()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = &self.values[x.0];
        let gv = &self.values[gamma.0];
        let bv = &self.values[beta.0];
        let mut x_hat = vec![0.0; bsz * c];
        let mut out = vec![0.0; bsz * c];
        for r in 0..bsz {
            for j in 0..c {
                let xh = (xv[r * c + j] - mean[j]) * inv_std[j];
                x_hat[r * c + j] = xh;
                out[r * c + j] = gv[j] * xh + bv[j];
            }
        }
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                training,
            },
            vec![bsz, c],
            out,
            needs,
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// scales survivors by `1/(1 - rate)`, so expectations match eval mode
    /// (where the op is simply omitted).
    pub fn dropout(
        &mut self,
        x: Tensor,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, AutogradError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutogradError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = self.values[x.0]
            .iter()
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let v: Vec<f64> = self.values[x.0]
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let needs = self.needs[x.0];
        Ok(self.push(Op::Dropout { x, mask }, self.shapes[x.0].clone(), v, needs))
    }

    /// Concatenates per-sample flattened views of the inputs along the
    /// feature axis. Every input must share the leading batch dimension;
    /// trailing dimensions are flattened. Output is `[B, sum of lengths]`.
    pub fn concat_flatten(&mut self, xs: &[Tensor]) -> Result<Tensor, AutogradError> {
        if xs.is_empty() {
            return Err(AutogradError::InvalidArgument("concat of nothing".into()));
        }
        let bsz = self.shapes[xs[0].0][0];
        let mut per_sample = Vec::with_capacity(xs.len());
        for t in xs {
            let s = &self.shapes[t.0];
            if s.is_empty() || s[0] != bsz {
                return Err(AutogradError::ShapeMismatch(format!(
                    "concat_flatten: batch {bsz} vs {s:?}"
                )));
            }
            per_sample.push(numel(s) / bsz);
        }
        let width: usize = per_sample.iter().sum();
        let mut out = vec![0.0; bsz * width];
        let mut offset = 0;
        for (t, len) in xs.iter().zip(&per_sample) {
            let v = &self.values[t.0];
            for r in 0..bsz {
                out[r * width + offset..r * width + offset + len]
                    .copy_from_slice(&v[r * len..(r + 1) * len]);
            }
            offset += len;
        }
        let needs = xs.iter().any(|t| self.needs[t.0]);
        Ok(self.push(
            Op::ConcatFlatten(xs.to_vec()),
            vec![bsz, width],
            out,
            needs,
        ))
    }

    /// Row lookup `out[r, :] = x[idx[r], :]`. Gradients scatter-add back,
    /// so repeated indices accumulate.
    pub fn gather_rows(&mut self, x: Tensor, idx: &[usize]) -> Result<Tensor, AutogradError> {
        let xs = &self.shapes[x.0];
        if xs.len() != 2 {
            return Err(AutogradError::ShapeMismatch(format!("gather_rows: x {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        if idx.is_empty() {
            return Err(AutogradError::InvalidArgument("gather_rows: empty index".into()));
        }
        if let Some(bad) = idx.iter().find(|i| **i >= n) {
            return Err(AutogradError::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let xv = &self.values[x.0];
        let mut out = vec![0.0; idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let needs = self.needs[x.0];
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            vec![idx.len(), d],
            out,
            needs,
        ))
    }

    /// Mean cross-entropy of softmaxed `logits: [B, C]` against integer
    /// labels, computed with max subtraction for stability.
    pub fn softmax_xent(
        &mut self,
        logits: Tensor,
        labels: &[usize],
    ) -> Result<Tensor, AutogradError> {
        let ls = &self.shapes[logits.0];
        if ls.len() != 2 {
            return Err(AutogradError::ShapeMismatch(format!("softmax_xent: {ls:?}")));
        }
        let (bsz, c) = (ls[0], ls[1]);
        if labels.len() != bsz {
            return Err(AutogradError::ShapeMismatch(format!(
                "softmax_xent: {} labels for batch {bsz}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= c) {
            return Err(AutogradError::InvalidArgument(format!(
                "softmax_xent: label {bad} out of range for {c} classes"
            )));
        }
        let lv = &self.values[logits.0];
        let mut probs = vec![0.0; bsz * c];
        let mut loss = 0.0;
        for r in 0..bsz {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                probs[r * c + j] = e;
                denom += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= denom;
            }
            loss += denom.ln() + max - row[labels[r]];
        }
        loss /= bsz as f64;
        let needs = self.needs[logits.0];
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            needs,
        ))
    }

    /// Mean squared error against a constant target, averaged over all
    /// elements.
    pub fn mse(&mut self, pred: Tensor, target: &[f64]) -> Result<Tensor, AutogradError> {
        let n = self.values[pred.0].len();
        if target.len() != n {
            return Err(AutogradError::ShapeMismatch(format!(
                "mse: {} targets for {n} predictions",
                target.len()
            )));
        }
        let loss = self.values[pred.0]
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        let needs = self.needs[pred.0];
        Ok(self.push(
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            vec![1],
            vec![loss],
            needs,
        ))
    }

    /// Reverse sweep from scalar `t`. Accumulates gradients for every node
    /// on a path to a gradient-requiring leaf; consumable once per graph.
    pub fn backward(&mut self, t: Tensor) -> Result<(), AutogradError> {
        if self.consumed {
            return Err(AutogradError::AlreadyConsumed);
        }
        if self.values[t.0].len() != 1 {
            return Err(AutogradError::NotScalar);
        }
        self.consumed = true;
        for i in 0..self.ops.len() {
            if self.needs[i] {
                self.grads[i] = Some(vec![0.0; self.values[i].len()]);
            }
        }
        if !self.needs[t.0] {
            return Ok(());
        }
        self.grads[t.0].as_mut().unwrap()[0] = 1.0;

        for i in (0..=t.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    // Adds node i's contribution (output grad `g`) into its inputs' grads.
    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Writes go through self.grads while ops/values are read-only, so
        // field borrows stay disjoint.
        macro_rules! grad_of {
            ($t:expr) => {
                self.grads[$t.0].as_mut().unwrap()
            };
        }
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs[a.0] {
                    axpy(grad_of!(a), 1.0, g);
                }
                if self.needs[b.0] {
                    axpy(grad_of!(b), 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs[a.0] {
                    axpy(grad_of!(a), 1.0, g);
                }
                if self.needs[b.0] {
                    axpy(grad_of!(b), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs[a.0] {
                    let bv = self.values[b.0].clone();
                    let ga = grad_of!(a);
                    for ((d, &gv), &v) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += gv * v;
                    }
                }
                if self.needs[b.0] {
                    let av = self.values[a.0].clone();
                    let gb = grad_of!(b);
                    for ((d, &gv), &v) in gb.iter_mut().zip(g).zip(&av) {
                        *d += gv * v;
                    }
                }
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                if self.needs[x.0] {
                    axpy(grad_of!(x), c, g);
                }
            }
            Op::Abs(x) => {
                let x = *x;
                if self.needs[x.0] {
                    let xv = &self.values[x.0];
                    let signs: Vec<f64> = xv
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let gx = grad_of!(x);
                    for ((d, &gv), s) in gx.iter_mut().zip(g).zip(signs) {
                        *d += gv * s;
                    }
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if self.needs[x.0] {
                    let active: Vec<bool> = self.values[x.0].iter().map(|&v| v > 0.0).collect();
                    let gx = grad_of!(x);
                    for ((d, &gv), a) in gx.iter_mut().zip(g).zip(active) {
                        if a {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let x = *x;
                if self.needs[x.0] {
                    let yv = self.values[i].clone();
                    let gx = grad_of!(x);
                    for ((d, &gv), &y) in gx.iter_mut().zip(g).zip(&yv) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Sum(x) => {
                let x = *x;
                if self.needs[x.0] {
                    let gx = grad_of!(x);
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (bsz, nin) = (self.shapes[x.0][0], self.shapes[x.0][1]);
                let nout = self.shapes[w.0][0];
                if self.needs[x.0] {
                    let wv = self.values[w.0].clone();
                    let gx = grad_of!(x);
                    for r in 0..bsz {
                        for o in 0..nout {
                            let gv = g[r * nout + o];
                            if gv != 0.0 {
                                axpy(
                                    &mut gx[r * nin..(r + 1) * nin],
                                    gv,
                                    &wv[o * nin..(o + 1) * nin],
                                );
                            }
                        }
                    }
                }
                if self.needs[w.0] {
                    let xv = self.values[x.0].clone();
                    let gw = grad_of!(w);
                    for r in 0..bsz {
                        for o in 0..nout {
                            let gv = g[r * nout + o];
                            if gv != 0.0 {
                                axpy(
                                    &mut gw[o * nin..(o + 1) * nin],
                                    gv,
                                    &xv[r * nin..(r + 1) * nin],
                                );
                            }
                        }
                    }
                }
                if self.needs[b.0] {
                    let gb = grad_of!(b);
                    for r in 0..bsz {
                        axpy(gb, 1.0, &g[r * nout..(r + 1) * nout]);
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.shapes[x.0].clone();
                let ws = self.shapes[w.0].clone();
                let (bsz, h, wd) = (xs[0], xs[1], xs[2]);
                let (k, kh, kw) = (ws[0], ws[1], ws[2]);
                let (oh, ow) = (h - kh + 1, wd - kw + 1);
                if self.needs[w.0] {
                    let xv = self.values[x.0].clone();
                    let gw = grad_of!(w);
                    for bi in 0..bsz {
                        let xoff = bi * h * wd;
                        for kk in 0..k {
                            let ooff = (bi * k + kk) * oh * ow;
                            for i in 0..oh {
                                let grow = &g[ooff + i * ow..ooff + (i + 1) * ow];
                                for p in 0..kh {
                                    let xrow = xoff + (i + p) * wd;
                                    for q in 0..kw {
                                        let xr = &xv[xrow + q..xrow + q + ow];
                                        let mut acc = 0.0;
                                        for (gv, xvv) in grow.iter().zip(xr) {
                                            acc += gv * xvv;
                                        }
                                        gw[kk * kh * kw + p * kw + q] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs[b.0] {
                    let gb = grad_of!(b);
                    for bi in 0..bsz {
                        for kk in 0..k {
                            let ooff = (bi * k + kk) * oh * ow;
                            gb[kk] += g[ooff..ooff + oh * ow].iter().sum::<f64>();
                        }
                    }
                }
                if self.needs[x.0] {
                    let wv = self.values[w.0].clone();
                    let gx = grad_of!(x);
                    for bi in 0..bsz {
                        let xoff = bi * h * wd;
                        for kk in 0..k {
                            let ooff = (bi * k + kk) * oh * ow;
                            for i in 0..oh {
                                let grow = &g[ooff + i * ow..ooff + (i + 1) * ow];
                                for p in 0..kh {
                                    let xrow = xoff + (i + p) * wd;
                                    for q in 0..kw {
                                        let wgt = wv[kk * kh * kw + p * kw + q];
                                        axpy(&mut gx[xrow + q..xrow + q + ow], wgt, grow);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                if self.needs[x.0] {
                    let argmax = argmax.clone();
                    let gx = grad_of!(x);
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                training,
            } => {
                let (x, gamma, beta, training) = (*x, *gamma, *beta, *training);
                let c = self.shapes[gamma.0][0];
                let bsz = self.shapes[x.0][0];
                let x_hat = x_hat.clone();
                let inv_std = inv_std.clone();
                if self.needs[beta.0] {
                    let gb = grad_of!(beta);
                    for r in 0..bsz {
                        axpy(gb, 1.0, &g[r * c..(r + 1) * c]);
                    }
                }
                if self.needs[gamma.0] {
                    let gg = grad_of!(gamma);
                    for r in 0..bsz {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * x_hat[r * c + j];
                        }
                    }
                }
                if self.needs[x.0] {
                    let gv = self.values[gamma.0].clone();
                    let gx = grad_of!(x);
                    if training {
                        // d x_hat, then fold in dependence of batch stats on x
                        let mut sum1 = vec![0.0; c];
                        let mut sum2 = vec![0.0; c];
                        for r in 0..bsz {
                            for j in 0..c {
                                let dxh = g[r * c + j] * gv[j];
                                sum1[j] += dxh;
                                sum2[j] += dxh * x_hat[r * c + j];
                            }
                        }
                        let n = bsz as f64;
                        for r in 0..bsz {
                            for j in 0..c {
                                let dxh = g[r * c + j] * gv[j];
                                gx[r * c + j] += inv_std[j]
                                    * (dxh - sum1[j] / n - x_hat[r * c + j] * sum2[j] / n);
                            }
                        }
                    } else {
                        for r in 0..bsz {
                            for j in 0..c {
                                gx[r * c + j] += g[r * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                if self.needs[x.0] {
                    let mask = mask.clone();
                    let gx = grad_of!(x);
                    for ((d, &gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::ConcatFlatten(xs) => {
                let xs = xs.clone();
                let bsz = self.shapes[xs[0].0][0];
                let width = self.shapes[i][1];
                let mut offset = 0;
                for t in xs {
                    let len = numel(&self.shapes[t.0]) / bsz;
                    if self.needs[t.0] {
                        let gt = grad_of!(t);
                        for r in 0..bsz {
                            axpy(
                                &mut gt[r * len..(r + 1) * len],
                                1.0,
                                &g[r * width + offset..r * width + offset + len],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                if self.needs[x.0] {
                    let idx = idx.clone();
                    let d = self.shapes[x.0][1];
                    let gx = grad_of!(x);
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut gx[src * d..(src + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                if self.needs[logits.0] {
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let c = self.shapes[logits.0][1];
                    let bsz = labels.len();
                    let scale = g[0] / bsz as f64;
                    let gl = grad_of!(logits);
                    for r in 0..bsz {
                        for j in 0..c {
                            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pred = *pred;
                if self.needs[pred.0] {
                    let target = target.clone();
                    let pv = self.values[pred.0].clone();
                    let n = pv.len() as f64;
                    let gv = g[0];
                    let gp = grad_of!(pred);
                    for (d, (&p, t)) in gp.iter_mut().zip(pv.iter().zip(target)) {
                        *d += gv * 2.0 * (p - t) / n;
                    }
                }
            }
        }
    }
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the left and right one-sided slopes
    /// disagree (the function has a kink there, e.g. relu at zero).
    pub skipped: usize,
}

const KINK_REL: f64 = 1e-2;

/// Compares `analytic` gradients against central finite differences of `f`
/// at `x0`. `f` must be a deterministic pure function of its argument (the
/// caller rebuilds graphs, reseeds dropout, and so on per evaluation).
pub fn grad_check<F>(mut f: F, analytic: &[f64], x0: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), x0.len(), "gradient length mismatch");
    assert!(eps > 0.0);
    let f0 = f(x0);
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..x0.len() {
        x[i] = x0[i] + eps;
        let fp = f(&x);
        x[i] = x0[i] - eps;
        let fm = f(&x);
        x[i] = x0[i];
        let slope_l = (f0 - fm) / eps;
        let slope_r = (fp - f0) / eps;
        if (slope_l - slope_r).abs() > KINK_REL * slope_l.abs().max(slope_r.abs()).max(1.0) {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs()
            / analytic[i].abs().max(numeric.abs()).max(1e-8);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    report
}
