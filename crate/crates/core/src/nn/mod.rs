//! Layers and activations used by the network zoo.
//!
//! The free functions are the differentiable building blocks; [`Network`]
//! strings them together from declarative [`LayerSpec`]s and owns the
//! parameters.

mod network;

use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::engine::{BatchStats, Graph, Padding, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use network::{Bound, LayerSpec, Network, Param, ParamStore};

/// Slope of the leaky ReLU used throughout the zoo.
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu { slope: LEAKY_SLOPE }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            Activation::Relu => "R",
            Activation::LeakyRelu { .. } => "LR",
            Activation::Tanh => "TH",
            Activation::Sigmoid => "S",
            Activation::Linear => "lin",
        }
    }
}

/// Per-call state for a forward pass.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    /// Source of dropout masks; required when dropout runs in train mode.
    pub rng: Option<&'a mut Rng>,
    /// Whether train-mode batch norm folds batch statistics into its
    /// running estimates.
    pub update_stats: bool,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            rng: None,
            update_stats: false,
        }
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng: Some(rng),
            update_stats: true,
        }
    }
}

/// Uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

/// `y = x W + b` over the last axis; `x` may carry extra leading axes
/// (e.g. `[batch, time, in]`), which are treated as rows.
pub fn dense_forward(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = g.shape(x)?.to_vec();
    let ws = g.shape(w)?.to_vec();
    let inputs = *xs.last().expect("non-empty shape");
    if ws.len() != 2 || ws[0] != inputs {
        return Err(Error::ShapeMismatch {
            op: "dense",
            left: xs,
            right: ws,
        });
    }
    let rows = xs.iter().product::<usize>() / inputs;
    let flat = if xs.len() == 2 {
        x
    } else {
        g.reshape(x, &[rows, inputs])?
    };
    let y = g.matmul(flat, w)?;
    let y = g.add(y, b)?;
    if xs.len() == 2 {
        Ok(y)
    } else {
        let mut out = xs;
        *out.last_mut().expect("non-empty shape") = ws[1];
        g.reshape(y, &out)
    }
}

/// Convolution plus bias. `w` is `[kernel, in_ch, out_ch]` and the kernel
/// length must be odd.
pub fn conv1d_forward(
    g: &mut Graph,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let kernel = g.shape(w)?[0];
    if kernel % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv1d kernel must be odd, got {kernel}"
        )));
    }
    let y = g.conv1d(x, w, stride, padding)?;
    g.add(y, b)
}

pub fn upsample1d(g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
    g.upsample1d(x, factor)
}

/// Running estimates kept alongside a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average with weight `momentum` on the new batch;
    /// the variance estimate uses the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let n = batch.count as f64;
        let correction = n / (n - 1.0);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * correction;
        }
    }
}

/// Batch normalization over every axis except the last (channels).
pub fn batchnorm_forward(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
    update_stats: bool,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (y, batch) = g.batch_norm_train(x, gamma, beta, eps)?;
            if update_stats {
                stats.update(&batch, momentum);
            }
            Ok(y)
        }
        Mode::Eval => g.batch_norm_eval(x, gamma, beta, &stats.mean, &stats.var, eps),
    }
}

/// Inverted dropout: in train mode entries are zeroed with probability
/// `rate` and survivors scaled by `1 / (1 - rate)`.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: Option<&mut Rng>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let rng = rng.ok_or_else(|| Error::invalid("train-mode dropout needs a random stream"))?;
    let shape = g.shape(x)?.to_vec();
    let keep = Bernoulli::new(1.0 - rate).expect("probability in (0, 1]");
    let scale = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if keep.sample(rng) { scale } else { 0.0 })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?)?;
    g.mul(x, mask)
}

/// Hidden state at every step of a zero-initialized LSTM.
pub fn lstm_forward(g: &mut Graph, x: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
    g.lstm(x, w_ih, w_hh, bias)
}

pub fn activation(g: &mut Graph, kind: Activation, x: Var) -> Result<Var> {
    match kind {
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu { slope } => g.leaky_relu(x, slope),
        Activation::Tanh => g.tanh(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Linear => Ok(x),
    }
}
