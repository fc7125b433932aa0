//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! which is already a topological order. [`Tape::backward`] walks the records in
//! reverse and accumulates gradients. `backward` borrows the tape immutably, so
//! calling it twice on the same tape returns identical gradients; a tape is
//! still meant to serve exactly one forward pass.

use rand::Rng;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    SplitHeads(Var, usize),
    MergeHeads(Var),
    MeanRows(Var),
    SelectRow(Var, usize),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    FocalLoss {
        logits: Var,
        labels: Vec<f64>,
        gamma: f64,
        alpha: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`.
    ///
    /// Parameters always have an entry (zeros when disconnected from the loss);
    /// constants return `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))`, stable for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Focal loss of one example and its derivative with respect to the logit.
pub(crate) fn focal_term(logit: f64, label: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let positive = label > 0.5;
    let (z, sign, weight) = if positive {
        (logit, 1.0, alpha)
    } else {
        (-logit, -1.0, 1.0 - alpha)
    };
    // q = 1 - p_t, log_pt = ln p_t
    let q = sigmoid(-z);
    let log_pt = log_sigmoid(z);
    let q_gamma = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -weight * q_gamma * log_pt;
    let dz = -weight * q_gamma * (q - gamma * (1.0 - q) * log_pt);
    (loss, sign * dz)
}

/// Numerically stable softmax of each contiguous row of length `n`, in place.
pub(crate) fn softmax_rows(data: &mut [f64], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
}

fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Records a leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, &[])
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(bv).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// `x[.., n] + row[n]`, broadcasting `row` over every leading index.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (a, b) in chunk.iter_mut().zip(&r) {
                *a += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(relu);
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Valid (unpadded) 1-D convolution.
    ///
    /// `input` is `[C_in, L]`, `weight` is `[C_out, C_in, k]` and `bias` is
    /// `[C_out]`; the result is `[C_out, floor((L - k) / stride) + 1]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (c_in, len) = self.value(input).dims2()?;
        let (c_out, w_in, kernel) = self.value(weight).dims3()?;
        if w_in != c_in {
            return Err(Error::shape("conv1d", self.shape(input), self.shape(weight)));
        }
        if self.value(bias).len() != c_out {
            return Err(Error::shape("conv1d bias", self.shape(weight), self.shape(bias)));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        if len < kernel {
            return Err(Error::WindowTooShort { len, kernel });
        }
        let l_out = conv_out_len(len, kernel, stride);
        let cols = im2col(self.value(input).data(), c_in, len, kernel, stride, l_out);
        let mut out = vec![0.0; c_out * l_out];
        gemm(
            c_out,
            c_in * kernel,
            l_out,
            self.value(weight).data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        let b = self.value(bias).data();
        for (o, row) in out.chunks_mut(l_out).enumerate() {
            for x in row.iter_mut() {
                *x += b[o];
            }
        }
        let value = Tensor::from_parts(vec![c_out, l_out], out);
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            },
            &[input, weight, bias],
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        debug_assert!(out.all_finite(), "softmax input contains non-finite values");
        let n = out.last_dim();
        softmax_rows(out.data_mut(), n);
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization along the last axis followed by `gain * x + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).len() != d || self.value(shift).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + s[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
            &[x, gain, shift],
        ))
    }

    /// `softmax(Q Kᵀ / sqrt(d_h)) V` for each head; inputs are `[h, L, d_h]`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        self.attention_impl(q, k, v, None)
    }

    /// Attention with inverted dropout applied to the attention weights.
    pub fn scaled_dot_attention_dropout<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var> {
        if rate <= 0.0 {
            return self.attention_impl(q, k, v, None);
        }
        let (h, l, _) = self.value(q).dims3()?;
        let keep = dropout_mask(h * l * l, rate, rng);
        self.attention_impl(q, k, v, Some(keep))
    }

    fn attention_impl(&mut self, q: Var, k: Var, v: Var, keep: Option<Vec<f64>>) -> Result<Var> {
        let (h, l, dh) = self.value(q).dims3()?;
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(Error::shape("attention", self.shape(q), self.shape(other)));
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; h * l * l];
        let mut out = vec![0.0; h * l * dh];
        let mut weighted = vec![0.0; l * l];
        for head in 0..h {
            let qs = &qd[head * l * dh..(head + 1) * l * dh];
            let ks = &kd[head * l * dh..(head + 1) * l * dh];
            let vs = &vd[head * l * dh..(head + 1) * l * dh];
            let p = &mut probs[head * l * l..(head + 1) * l * l];
            gemm(l, dh, l, qs, false, ks, true, p, false);
            for x in p.iter_mut() {
                *x *= scale;
            }
            softmax_rows(p, l);
            let used: &[f64] = match &keep {
                Some(mask) => {
                    let m = &mask[head * l * l..(head + 1) * l * l];
                    for ((w, pv), mv) in weighted.iter_mut().zip(p.iter()).zip(m) {
                        *w = pv * mv;
                    }
                    &weighted
                }
                None => p,
            };
            gemm(l, l, dh, used, false, vs, false, &mut out[head * l * dh..(head + 1) * l * dh], false);
        }
        let value = Tensor::from_parts(vec![h, l, dh], out);
        Ok(self.push(value, Op::Attention { q, k, v, probs, keep }, &[q, k, v]))
    }

    /// `[L, h·d_h]` → `[h, L, d_h]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            for hh in 0..heads {
                let dst = hh * l * dh + t * dh;
                out[dst..dst + dh].copy_from_slice(&src[t * d + hh * dh..t * d + (hh + 1) * dh]);
            }
        }
        let value = Tensor::from_parts(vec![heads, l, dh], out);
        Ok(self.push(value, Op::SplitHeads(x, heads), &[x]))
    }

    /// `[h, L, d_h]` → `[L, h·d_h]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let (h, l, dh) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let d = h * dh;
        let mut out = vec![0.0; l * d];
        for hh in 0..h {
            for t in 0..l {
                let s = hh * l * dh + t * dh;
                out[t * d + hh * dh..t * d + (hh + 1) * dh].copy_from_slice(&src[s..s + dh]);
            }
        }
        let value = Tensor::from_parts(vec![l, d], out);
        Ok(self.push(value, Op::MergeHeads(x), &[x]))
    }

    /// Mean over the rows of a `[L, d]` matrix, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= l as f64;
        }
        Ok(self.push(Tensor::from_parts(vec![d], out), Op::MeanRows(x), &[x]))
    }

    /// Row `index` of a `[L, d]` matrix, giving `[d]`.
    pub fn select_row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        if index >= l {
            return Err(Error::shape("select_row", self.shape(x), &[index]));
        }
        let row = self.value(x).data()[index * d..(index + 1) * d].to_vec();
        Ok(self.push(Tensor::from_parts(vec![d], row), Op::SelectRow(x, index), &[x]))
    }

    /// Inverted dropout: zeroes each element with probability `rate`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = dropout_mask(self.value(x).len(), rate, rng);
        let data = self.value(x).data().iter().zip(&keep).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(out, Op::Dropout(x, keep), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean focal loss of `logits` against binary `labels`.
    pub fn focal_loss(&mut self, logits: Var, labels: &[f64], gamma: f64, alpha: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(Error::shape("focal_loss", lv.shape(), &[labels.len()]));
        }
        let n = labels.len() as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| focal_term(z, y, gamma, alpha).0)
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::FocalLoss {
                logits,
                labels: labels.to_vec(),
                gamma,
                alpha,
            },
            &[logits],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Param => {
                    if grads[idx].is_none() {
                        grads[idx] = Some(Tensor::zeros(node.value.shape()));
                    }
                }
                Op::Constant => grads[idx] = None,
                _ => {}
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * f)),
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                let rv = self.value(*row);
                let n = rv.len();
                let mut gr = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (a, b) in gr.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *row, Tensor::from_parts(rv.shape().to_vec(), gr));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = gd.iter().zip(xv.data()).map(|(g, &v)| g * gelu_grad(v)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?),
            Op::Reshape(x) => self.accumulate(grads, *x, g.reshape(self.shape(*x))?),
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (c_in, len) = self.value(*input).dims2()?;
                let (c_out, _, kernel) = self.value(*weight).dims3()?;
                let l_out = conv_out_len(len, kernel, *stride);
                let ck = c_in * kernel;
                if self.nodes[weight.0].needs_grad {
                    let cols = im2col(self.value(*input).data(), c_in, len, kernel, *stride, l_out);
                    let mut gw = vec![0.0; c_out * ck];
                    gemm(c_out, l_out, ck, gd, false, &cols, true, &mut gw, false);
                    self.accumulate(grads, *weight, Tensor::from_parts(vec![c_out, c_in, kernel], gw));
                }
                if self.nodes[bias.0].needs_grad {
                    let gb = gd.chunks(l_out).map(|row| row.iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![c_out], gb));
                }
                if self.nodes[input.0].needs_grad {
                    let mut gcols = vec![0.0; ck * l_out];
                    gemm(ck, c_out, l_out, self.value(*weight).data(), true, gd, false, &mut gcols, false);
                    let mut gi = vec![0.0; c_in * len];
                    for c in 0..c_in {
                        for i in 0..kernel {
                            let row = &gcols[(c * kernel + i) * l_out..(c * kernel + i + 1) * l_out];
                            for (j, v) in row.iter().enumerate() {
                                gi[c * len + j * stride + i] += v;
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::from_parts(vec![c_in, len], gi));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(gd.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(node.value.shape().to_vec(), gx));
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggain = vec![0.0; d];
                let mut gshift = vec![0.0; d];
                for (r, inv) in rstd.iter().enumerate() {
                    let gy = &gd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        ggain[j] += gy[j] * xh[j];
                        gshift[j] += gy[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        gx[r * d + j] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(node.value.shape().to_vec(), gx));
                let gain_shape = self.shape(*gain).to_vec();
                self.accumulate(grads, *gain, Tensor::from_parts(gain_shape, ggain));
                let shift_shape = self.shape(*shift).to_vec();
                self.accumulate(grads, *shift, Tensor::from_parts(shift_shape, gshift));
            }
            Op::Attention { q, k, v, probs, keep } => {
                let (h, l, dh) = self.value(*q).dims3()?;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; h * l * dh];
                let mut gk = vec![0.0; h * l * dh];
                let mut gv = vec![0.0; h * l * dh];
                let mut dp = vec![0.0; l * l];
                let mut used = vec![0.0; l * l];
                for head in 0..h {
                    let span = head * l * dh..(head + 1) * l * dh;
                    let pspan = head * l * l..(head + 1) * l * l;
                    let p = &probs[pspan.clone()];
                    match keep {
                        Some(mask) => {
                            for ((u, pv), m) in used.iter_mut().zip(p).zip(&mask[pspan.clone()]) {
                                *u = pv * m;
                            }
                        }
                        None => used.copy_from_slice(p),
                    }
                    let go = &gd[span.clone()];
                    // dV = Pᵀ dOut, dP = dOut Vᵀ
                    gemm(l, l, dh, &used, true, go, false, &mut gv[span.clone()], false);
                    gemm(l, dh, l, go, false, &vd[span.clone()], true, &mut dp, false);
                    if let Some(mask) = keep {
                        for (x, m) in dp.iter_mut().zip(&mask[pspan.clone()]) {
                            *x *= m;
                        }
                    }
                    for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..l {
                            drow[j] = prow[j] * (drow[j] - dot) * scale;
                        }
                    }
                    gemm(l, l, dh, &dp, false, &kd[span.clone()], false, &mut gq[span.clone()], false);
                    gemm(l, l, dh, &dp, true, &qd[span.clone()], false, &mut gk[span.clone()], false);
                }
                let shape = vec![h, l, dh];
                self.accumulate(grads, *q, Tensor::from_parts(shape.clone(), gq));
                self.accumulate(grads, *k, Tensor::from_parts(shape.clone(), gk));
                self.accumulate(grads, *v, Tensor::from_parts(shape, gv));
            }
            Op::SplitHeads(x, heads) => {
                let (l, d) = self.value(*x).dims2()?;
                let dh = d / heads;
                let mut gx = vec![0.0; l * d];
                for t in 0..l {
                    for hh in 0..*heads {
                        let s = hh * l * dh + t * dh;
                        gx[t * d + hh * dh..t * d + (hh + 1) * dh].copy_from_slice(&gd[s..s + dh]);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![l, d], gx));
            }
            Op::MergeHeads(x) => {
                let (h, l, dh) = self.value(*x).dims3()?;
                let d = h * dh;
                let mut gx = vec![0.0; l * d];
                for hh in 0..h {
                    for t in 0..l {
                        let s = hh * l * dh + t * dh;
                        gx[s..s + dh].copy_from_slice(&gd[t * d + hh * dh..t * d + (hh + 1) * dh]);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![h, l, dh], gx));
            }
            Op::MeanRows(x) => {
                let (l, d) = self.value(*x).dims2()?;
                let mut gx = Vec::with_capacity(l * d);
                for _ in 0..l {
                    gx.extend(gd.iter().map(|v| v / l as f64));
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![l, d], gx));
            }
            Op::SelectRow(x, index) => {
                let (l, d) = self.value(*x).dims2()?;
                let mut gx = vec![0.0; l * d];
                gx[index * d..(index + 1) * d].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::from_parts(vec![l, d], gx));
            }
            Op::Dropout(x, keep) => {
                let data = gd.iter().zip(keep).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), data));
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::FocalLoss {
                logits,
                labels,
                gamma,
                alpha,
            } => {
                let lv = self.value(*logits);
                let n = labels.len() as f64;
                let data = lv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| gd[0] * focal_term(z, y, *gamma, *alpha).1 / n)
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), data));
            }
        }
        Ok(())
    }
}

fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let scale = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect()
}

/// Column matrix `[C_in·k, L_out]` for the convolution-as-GEMM formulation.
fn im2col(input: &[f64], c_in: usize, len: usize, kernel: usize, stride: usize, l_out: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c_in * kernel * l_out];
    for c in 0..c_in {
        let src = &input[c * len..(c + 1) * len];
        for i in 0..kernel {
            let row = &mut cols[(c * kernel + i) * l_out..(c * kernel + i + 1) * l_out];
            if stride == 1 {
                row.copy_from_slice(&src[i..i + l_out]);
            } else {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = src[j * stride + i];
                }
            }
        }
    }
    cols
}
