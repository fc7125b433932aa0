//! Convolutional encoder, pre-norm transformer stack and a single-logit head.
//!
//! Windows `[6, L]` pass through valid 1-D convolutions, each followed by
//! ReLU. The `[C, L']` result is transposed to a `[L', C]` sequence, gets a
//! sinusoidal positional encoding, and runs through the transformer layers.
//! Each layer is `x + MHA(LN(x))` followed by `x + FFN(LN(x))` with a GELU
//! feed-forward. A final layer norm, pooling over positions and an affine map
//! give one logit. The CNN-only ablation pools the conv sequence directly.

mod checkpoint;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, Window, CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            out_channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    First,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    Sinusoidal,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Full,
    CnnOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub conv_spec: Vec<ConvSpec>,
    pub n_transformer_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub dropout_rate: f64,
    pub pooling: Pooling,
    pub positional_encoding: PositionalEncoding,
    pub input_channels: usize,
    pub input_length: usize,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_spec: vec![ConvSpec::new(5, 2, 256), ConvSpec::new(3, 2, 128), ConvSpec::new(1, 2, 64)],
            n_transformer_layers: 2,
            n_heads: 4,
            ffn_hidden: 256,
            dropout_rate: 0.1,
            pooling: Pooling::Mean,
            positional_encoding: PositionalEncoding::Sinusoidal,
            input_channels: CHANNELS.len(),
            input_length: 5760,
            architecture: Architecture::Full,
        }
    }
}

impl ModelConfig {
    /// Width of the sequence entering the transformer.
    pub fn width(&self) -> usize {
        self.conv_spec.last().map_or(self.input_channels, |c| c.out_channels)
    }

    /// Lengths after the input and after every conv layer.
    pub fn sequence_lengths(&self) -> Vec<usize> {
        let mut out = vec![self.input_length];
        let mut len = self.input_length;
        for c in &self.conv_spec {
            if len < c.kernel || c.stride == 0 {
                break;
            }
            len = (len - c.kernel) / c.stride + 1;
            out.push(len);
        }
        out
    }

    pub fn sequence_length(&self) -> usize {
        *self.sequence_lengths().last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_spec.is_empty() {
            return Err(Error::Config("conv_spec must contain at least one layer".into()));
        }
        if self.conv_spec.iter().any(|c| c.kernel == 0 || c.stride == 0 || c.out_channels == 0) {
            return Err(Error::Config("conv kernel, stride and channels must be positive".into()));
        }
        if self.input_channels == 0 || self.input_length == 0 {
            return Err(Error::Config("input shape must be positive".into()));
        }
        if self.sequence_lengths().len() != self.conv_spec.len() + 1 {
            return Err(Error::Config(format!(
                "input length {} is too short for the conv stack",
                self.input_length
            )));
        }
        let d = self.width();
        if self.architecture == Architecture::Full && self.n_transformer_layers > 0 {
            if self.n_heads == 0 || d % self.n_heads != 0 {
                return Err(Error::Config(format!(
                    "model width {d} is not divisible by {} heads",
                    self.n_heads
                )));
            }
            if self.ffn_hidden == 0 {
                return Err(Error::Config("ffn_hidden must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.input_channels;
        for (i, c) in self.conv_spec.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![c.out_channels, c_in, c.kernel]));
            out.push((format!("conv{i}.bias"), vec![c.out_channels]));
            c_in = c.out_channels;
        }
        let d = self.width();
        let h = self.ffn_hidden;
        for l in 0..self.n_transformer_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.push((p("ln1.gain"), vec![d]));
            out.push((p("ln1.shift"), vec![d]));
            for m in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.w{m}")), vec![d, d]));
                out.push((p(&format!("attn.b{m}")), vec![d]));
            }
            out.push((p("ln2.gain"), vec![d]));
            out.push((p("ln2.shift"), vec![d]));
            out.push((p("ffn.w1"), vec![d, h]));
            out.push((p("ffn.b1"), vec![h]));
            out.push((p("ffn.w2"), vec![h, d]));
            out.push((p("ffn.b2"), vec![d]));
        }
        if self.n_transformer_layers > 0 {
            out.push(("final_ln.gain".into(), vec![d]));
            out.push(("final_ln.shift".into(), vec![d]));
        }
        out.push(("head.weight".into(), vec![d, 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }
}

/// Every trainable tensor plus the input normalization used in training.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    pub tensors: IndexMap<String, Tensor>,
    pub normalization: Normalization,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that names and shapes match `config` exactly.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (have_name, t)) in expected.iter().zip(&self.tensors) {
            if name != have_name {
                return Err(Error::Checkpoint(format!("expected parameter `{name}`, found `{have_name}`")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", shape, t.shape()));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Resets the classifier head with a fresh draw from `seed`.
    pub fn reinit_head(&mut self, config: &ModelConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4EAD);
        let d = config.width();
        self.tensors.insert("head.weight".into(), fan_in_normal(&[d, 1], d, 1.0, &mut rng));
        self.tensors.insert("head.bias".into(), Tensor::zeros(&[1]));
    }
}

fn fan_in_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (gain / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Fan-in scaled Gaussian weights with zero biases and unit norm gains.
///
/// Conv weights use variance `2 / fan_in` to suit the ReLU; linear maps use
/// `1 / fan_in`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = IndexMap::new();
    for (name, shape) in config.parameter_shapes() {
        let t = if name.ends_with(".gain") {
            Tensor::full(&shape, 1.0)
        } else if name.starts_with("conv") && name.ends_with(".weight") {
            fan_in_normal(&shape, shape[1] * shape[2], 2.0, &mut rng)
        } else if shape.len() == 2 {
            fan_in_normal(&shape, shape[0], 1.0, &mut rng)
        } else {
            Tensor::zeros(&shape)
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams {
        tensors,
        normalization: Normalization::identity(),
    })
}

/// Parameters entered on a tape, addressable by name.
pub struct ParamVars<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> ParamVars<'a> {
    /// Enters each tensor as a trainable leaf (`trainable`) or a constant.
    pub fn enter(tape: &mut Tape, params: &'a ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .values()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self { params, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .tensors
            .get_index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Vars in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn check_finite(tape: &Tape, v: Var, layer: impl FnOnce() -> String) -> Result<Var> {
    if tape.value(v).all_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteActivation(layer()))
    }
}

/// Fixed sinusoidal encoding `[L, d]`.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, j) = (i / d, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Normalized copy of a window's channels, checked against the config.
pub fn prepare_input(channels: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    let expected = [config.input_channels, config.input_length];
    if channels.shape() != expected {
        return Err(Error::shape("model input", &expected, channels.shape()));
    }
    let mut x = channels.clone();
    params.normalization.apply(&mut x);
    Ok(x)
}

/// Conv stack on a prepared `[C, L]` input, giving the `[L', C_last]` sequence.
pub fn conv_encoder(tape: &mut Tape, p: &ParamVars, config: &ModelConfig, input: Var) -> Result<Var> {
    let mut x = input;
    for (i, c) in config.conv_spec.iter().enumerate() {
        let w = p.var(&format!("conv{i}.weight"))?;
        let b = p.var(&format!("conv{i}.bias"))?;
        x = tape.conv1d(x, w, b, c.stride)?;
        x = tape.relu(x);
        x = check_finite(tape, x, || format!("conv{i}"))?;
    }
    tape.transpose(x)
}

/// Dropout source for training passes.
pub type DropoutRng<'r> = Option<&'r mut ChaCha8Rng>;

/// Transformer stack on a `[L', d]` sequence, including the positional
/// encoding and the final layer norm. Dropout applies only with `rng`.
pub fn transformer(
    tape: &mut Tape,
    p: &ParamVars,
    config: &ModelConfig,
    seq: Var,
    mut rng: DropoutRng<'_>,
) -> Result<Var> {
    if config.n_transformer_layers == 0 {
        return Ok(seq);
    }
    let (len, d) = tape.value(seq).dims2()?;
    if d != config.width() {
        return Err(Error::shape("transformer input", &[len, config.width()], &[len, d]));
    }
    let rate = config.dropout_rate;
    let mut x = seq;
    if config.positional_encoding == PositionalEncoding::Sinusoidal {
        let pe = tape.constant(sinusoidal_encoding(len, d));
        x = tape.add(x, pe)?;
    }
    for l in 0..config.n_transformer_layers {
        let v = |s: &str| p.var(&format!("layer{l}.{s}"));
        let h = tape.layer_norm(x, v("ln1.gain")?, v("ln1.shift")?, LN_EPS)?;
        let proj = |m: &str, tape: &mut Tape| -> Result<Var> {
            let y = tape.matmul(h, v(&format!("attn.w{m}"))?)?;
            tape.add_row(y, v(&format!("attn.b{m}"))?)
        };
        let q = proj("q", tape)?;
        let k = proj("k", tape)?;
        let vv = proj("v", tape)?;
        let (q, k, vv) = (
            tape.split_heads(q, config.n_heads)?,
            tape.split_heads(k, config.n_heads)?,
            tape.split_heads(vv, config.n_heads)?,
        );
        let a = match rng.as_deref_mut() {
            Some(r) => tape.scaled_dot_attention_dropout(q, k, vv, rate, r)?,
            None => tape.scaled_dot_attention(q, k, vv)?,
        };
        let a = tape.merge_heads(a)?;
        let o = tape.matmul(a, v("attn.wo")?)?;
        let o = tape.add_row(o, v("attn.bo")?)?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(x, v("ln2.gain")?, v("ln2.shift")?, LN_EPS)?;
        let f = tape.matmul(h, v("ffn.w1")?)?;
        let f = tape.add_row(f, v("ffn.b1")?)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, v("ffn.w2")?)?;
        let mut f = tape.add_row(f, v("ffn.b2")?)?;
        if let Some(r) = rng.as_deref_mut() {
            f = tape.dropout(f, rate, r);
        }
        x = tape.add(x, f)?;
        x = check_finite(tape, x, || format!("transformer layer {l}"))?;
    }
    tape.layer_norm(x, p.var("final_ln.gain")?, p.var("final_ln.shift")?, LN_EPS)
}

/// Pooling and the linear head, giving a `[1]` logit.
pub fn head(tape: &mut Tape, p: &ParamVars, config: &ModelConfig, seq: Var) -> Result<Var> {
    let pooled = match config.pooling {
        Pooling::Mean => tape.mean_rows(seq)?,
        Pooling::First => tape.select_row(seq, 0)?,
    };
    let d = tape.value(pooled).len();
    let pooled = tape.reshape(pooled, &[1, d])?;
    let logit = tape.matmul(pooled, p.var("head.weight")?)?;
    let logit = tape.add_row(logit, p.var("head.bias")?)?;
    let logit = tape.reshape(logit, &[1])?;
    check_finite(tape, logit, || "classifier head".into())
}

/// Full graph from a prepared input to the logit, following
/// `config.architecture`.
pub fn logit_graph(tape: &mut Tape, p: &ParamVars, config: &ModelConfig, input: Var, rng: DropoutRng<'_>) -> Result<Var> {
    let seq = conv_encoder(tape, p, config, input)?;
    let seq = match config.architecture {
        Architecture::Full => transformer(tape, p, config, seq, rng)?,
        Architecture::CnnOnly => seq,
    };
    head(tape, p, config, seq)
}

/// Conv sequence `[L', d]` of one window without gradients.
pub fn conv_encoder_forward(channels: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    let x = prepare_input(channels, params, config)?;
    let mut tape = Tape::new();
    let p = ParamVars::enter(&mut tape, params, false);
    let input = tape.constant(x);
    let out = conv_encoder(&mut tape, &p, config, input)?;
    Ok(tape.value(out).clone())
}

/// Transformer stack on a `[L', d]` sequence without gradients.
pub fn transformer_forward(
    seq: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    dropout: DropoutRng<'_>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = ParamVars::enter(&mut tape, params, false);
    let s = tape.constant(seq.clone());
    let out = transformer(&mut tape, &p, config, s, dropout)?;
    Ok(tape.value(out).clone())
}

/// Pooled `[d]` representation of a `[L', d]` sequence.
pub fn pool(seq: &Tensor, pooling: Pooling) -> Result<Tensor> {
    let (l, d) = seq.dims2()?;
    Ok(match pooling {
        Pooling::Mean => {
            let mut out = vec![0.0; d];
            for row in seq.data().chunks(d) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::from_fn(&[d], |j| out[j] / l as f64)
        }
        Pooling::First => Tensor::from_fn(&[d], |j| seq.data()[j]),
    })
}

fn logit_with(
    channels: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    architecture: Architecture,
    dropout: DropoutRng<'_>,
) -> Result<f64> {
    let x = prepare_input(channels, params, config)?;
    let mut tape = Tape::new();
    let p = ParamVars::enter(&mut tape, params, false);
    let input = tape.constant(x);
    let cfg = ModelConfig {
        architecture,
        ..config.clone()
    };
    let logit = logit_graph(&mut tape, &p, &cfg, input, dropout)?;
    Ok(tape.value(logit).item())
}

/// Logit of the full model. Dropout is active only when `dropout` is given.
pub fn forward(channels: &Tensor, params: &ModelParams, config: &ModelConfig, dropout: DropoutRng<'_>) -> Result<f64> {
    logit_with(channels, params, config, Architecture::Full, dropout)
}

/// Logit of the CNN-only ablation; transformer parameters are never read.
pub fn cnn_only_forward(channels: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    logit_with(channels, params, config, Architecture::CnnOnly, None)
}

/// Inference logit following `config.architecture`.
pub fn predict_logit(channels: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    logit_with(channels, params, config, config.architecture, None)
}

pub fn score(logit: f64) -> f64 {
    sigmoid(logit)
}

/// Inference logits of many windows, in input order.
pub fn forward_batch(windows: &[Window], params: &ModelParams, config: &ModelConfig) -> Result<Vec<f64>> {
    windows
        .par_iter()
        .map(|w| predict_logit(&w.channels, params, config))
        .collect()
}

/// Per-example dropout stream derived from a base seed and coordinates.
pub fn dropout_rng(seed: u64, epoch: usize, example: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) ^ example as u64);
    let _: u64 = rng.random();
    rng
}
