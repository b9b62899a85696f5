use serde::{Deserialize, Serialize};

use super::{
    activation, batchnorm_forward, conv1d_forward, dense_forward, dropout, glorot_uniform,
    lstm_forward, Activation, ForwardCtx, RunningStats, BN_EPS, BN_MOMENTUM,
};
use crate::engine::{Graph, Padding, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One layer of a sequential network. Shapes are per sample (no batch axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected over the last axis.
    Dense {
        units: usize,
    },
    /// Same-padded convolution along time.
    Conv1d {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm,
    Activation(Activation),
    Dropout {
        rate: f64,
    },
    Upsample {
        factor: usize,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
    Lstm {
        hidden: usize,
    },
    /// Keeps only the final time step: `[T, C] -> [C]`.
    LastStep,
    /// Centered crop of the time axis, extra step dropped at the end.
    CenterCrop {
        len: usize,
    },
}

impl LayerSpec {
    /// Compact label such as `Conv1D(40, 5, St:2)` or `LSTM(100)`.
    pub fn label(&self) -> String {
        match self {
            LayerSpec::Dense { units } => format!("Dense({units})"),
            LayerSpec::Conv1d {
                filters,
                kernel,
                stride,
            } if *stride > 1 => {
                format!("Conv1D({filters}, {kernel}, St:{stride})")
            }
            LayerSpec::Conv1d {
                filters, kernel, ..
            } => format!("Conv1D({filters}, {kernel})"),
            LayerSpec::BatchNorm => "BN".into(),
            LayerSpec::Activation(a) => a.short_name().into(),
            LayerSpec::Dropout { rate } => format!("D({rate})"),
            LayerSpec::Upsample { factor } => format!("US({factor})"),
            LayerSpec::Flatten => "Flatten".into(),
            LayerSpec::Reshape { shape } => format!("Reshape{shape:?}"),
            LayerSpec::Lstm { hidden } => format!("LSTM({hidden})"),
            LayerSpec::LastStep => "LastStep".into(),
            LayerSpec::CenterCrop { len } => format!("Crop({len})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in declaration order. Non-trainable entries hold
/// batch-norm running statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, tensor: Tensor, trainable: bool) -> usize {
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(trainable),
            trainable,
        });
        self.params.len() - 1
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut().filter(|p| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// All entries in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    /// Overwrites every entry from a flat buffer in declaration order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params.iter().map(|p| p.tensor.numel()).sum();
        if total != flat.len() {
            return Err(Error::Format(format!(
                "parameter blob holds {} values, network expects {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    params: Vec<usize>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

/// Parameter leaves of one network inside one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

/// Sequential stack of layers with resolved shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    store: ParamStore,
}

fn flat_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Network {
    /// Resolves shapes layer by layer from `input_shape` and initializes
    /// parameters from `rng`.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::default();
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "invalid network input shape {shape:?}"
            )));
        }
        for (i, spec) in specs.iter().enumerate() {
            let in_shape = shape.clone();
            let mismatch = || Error::ShapeMismatch {
                op: "network",
                left: in_shape.clone(),
                right: vec![i],
            };
            let mut params = Vec::new();
            let prefix = format!("{i}.{}", spec.label());
            match spec {
                LayerSpec::Dense { units } => {
                    let inputs = *shape.last().ok_or_else(mismatch)?;
                    let w = glorot_uniform(&[inputs, *units], inputs, *units, rng);
                    params.push(store.push(format!("{prefix}.weight"), w, true));
                    params.push(store.push(
                        format!("{prefix}.bias"),
                        Tensor::zeros(&[*units]),
                        true,
                    ));
                    *shape.last_mut().expect("non-empty") = *units;
                }
                LayerSpec::Conv1d {
                    filters,
                    kernel,
                    stride,
                } => {
                    if shape.len() != 2 || kernel % 2 == 0 || *stride == 0 {
                        return Err(mismatch());
                    }
                    let in_ch = shape[1];
                    let w = glorot_uniform(
                        &[*kernel, in_ch, *filters],
                        kernel * in_ch,
                        kernel * filters,
                        rng,
                    );
                    params.push(store.push(format!("{prefix}.weight"), w, true));
                    params.push(store.push(
                        format!("{prefix}.bias"),
                        Tensor::zeros(&[*filters]),
                        true,
                    ));
                    let (out, _) = Padding::Same
                        .resolve(shape[0], *kernel, *stride)
                        .ok_or_else(mismatch)?;
                    shape = vec![out, *filters];
                }
                LayerSpec::BatchNorm => {
                    let c = *shape.last().expect("non-empty");
                    params.push(store.push(
                        format!("{prefix}.gamma"),
                        Tensor::full(&[c], 1.0),
                        true,
                    ));
                    params.push(store.push(format!("{prefix}.beta"), Tensor::zeros(&[c]), true));
                    params.push(store.push(
                        format!("{prefix}.running_mean"),
                        Tensor::zeros(&[c]),
                        false,
                    ));
                    params.push(store.push(
                        format!("{prefix}.running_var"),
                        Tensor::full(&[c], 1.0),
                        false,
                    ));
                }
                LayerSpec::Activation(_) => {}
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::invalid(format!(
                            "dropout rate {rate} outside [0, 1)"
                        )));
                    }
                }
                LayerSpec::Upsample { factor } => {
                    if shape.len() != 2 || *factor < 2 {
                        return Err(mismatch());
                    }
                    shape[0] *= factor;
                }
                LayerSpec::Flatten => shape = vec![flat_len(&shape)],
                LayerSpec::Reshape { shape: target } => {
                    if flat_len(target) != flat_len(&shape) {
                        return Err(mismatch());
                    }
                    shape = target.clone();
                }
                LayerSpec::Lstm { hidden } => {
                    if shape.len() != 2 {
                        return Err(mismatch());
                    }
                    let (inputs, g4) = (shape[1], 4 * hidden);
                    let w_ih = glorot_uniform(&[inputs, g4], inputs, g4, rng);
                    let w_hh = glorot_uniform(&[*hidden, g4], *hidden, g4, rng);
                    // Forget-gate block starts at 1.0.
                    let mut bias = vec![0.0; g4];
                    bias[*hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
                    params.push(store.push(format!("{prefix}.w_ih"), w_ih, true));
                    params.push(store.push(format!("{prefix}.w_hh"), w_hh, true));
                    params.push(store.push(format!("{prefix}.bias"), Tensor::from_vec(bias), true));
                    shape = vec![shape[0], *hidden];
                }
                LayerSpec::LastStep => {
                    if shape.len() != 2 {
                        return Err(mismatch());
                    }
                    shape = vec![shape[1]];
                }
                LayerSpec::CenterCrop { len } => {
                    if shape.len() != 2 || *len > shape[0] || *len == 0 {
                        return Err(mismatch());
                    }
                    shape[0] = *len;
                }
            }
            layers.push(Layer {
                spec: spec.clone(),
                params,
                in_shape,
                out_shape: shape.clone(),
            });
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            store,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map_or(&self.input_shape, |l| &l.out_shape)
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    /// `(label, in_shape, out_shape)` per layer.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>, Vec<usize>)> {
        self.layers
            .iter()
            .map(|l| (l.spec.label(), l.in_shape.clone(), l.out_shape.clone()))
            .collect()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.spec == LayerSpec::BatchNorm)
    }

    /// Inserts every parameter as a leaf. With `track` the trainable ones
    /// receive gradients; otherwise all are constants.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Result<Bound> {
        let vars = self
            .store
            .iter()
            .map(|p| {
                let t = Tensor::from_parts(p.tensor.shape().to_vec(), p.tensor.data().to_vec());
                g.leaf(t.with_requires_grad(track && p.trainable))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Uses caller-made leaves, one per stored parameter in declaration
    /// order, in place of [`Network::bind`].
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.store.len() {
            return Err(Error::invalid(format!(
                "network has {} parameters, got {} variables",
                self.store.len(),
                vars.len()
            )));
        }
        Ok(Bound { vars })
    }

    /// Adds the graph gradients of the bound parameters into the store.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for (p, &v) in self.store.iter_mut().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            if let Some(grad) = g.grad(v)? {
                p.tensor.accumulate_grad(grad);
            }
        }
        Ok(())
    }

    fn running_stats(&self, layer: &Layer) -> RunningStats {
        RunningStats {
            mean: self.store.get(layer.params[2]).tensor.data().to_vec(),
            var: self.store.get(layer.params[3]).tensor.data().to_vec(),
        }
    }

    /// Runs the stack on `x` of shape `[batch, ..input_shape]`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let xs = g.shape(x)?.to_vec();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: xs,
                right: self.input_shape.clone(),
            });
        }
        let batch = xs[0];
        let mut h = x;
        for li in 0..self.layers.len() {
            let layer = &self.layers[li];
            let p = |k: usize| bound.vars[layer.params[k]];
            h = match &layer.spec {
                LayerSpec::Dense { .. } => dense_forward(g, h, p(0), p(1))?,
                LayerSpec::Conv1d { stride, .. } => {
                    conv1d_forward(g, h, p(0), p(1), *stride, Padding::Same)?
                }
                LayerSpec::BatchNorm => {
                    let mut stats = self.running_stats(layer);
                    let (gamma, beta) = (p(0), p(1));
                    let (mean_idx, var_idx) = (layer.params[2], layer.params[3]);
                    let y = batchnorm_forward(
                        g,
                        h,
                        gamma,
                        beta,
                        &mut stats,
                        ctx.mode,
                        BN_MOMENTUM,
                        BN_EPS,
                        ctx.update_stats,
                    )?;
                    if ctx.update_stats && ctx.mode == super::Mode::Train {
                        self.store
                            .get_mut(mean_idx)
                            .tensor
                            .data_mut()
                            .copy_from_slice(&stats.mean);
                        self.store
                            .get_mut(var_idx)
                            .tensor
                            .data_mut()
                            .copy_from_slice(&stats.var);
                    }
                    y
                }
                LayerSpec::Activation(a) => activation(g, *a, h)?,
                LayerSpec::Dropout { rate } => {
                    dropout(g, h, *rate, ctx.mode, ctx.rng.as_deref_mut())?
                }
                LayerSpec::Upsample { factor } => g.upsample1d(h, *factor)?,
                LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(&layer.out_shape);
                    g.reshape(h, &shape)?
                }
                LayerSpec::Lstm { .. } => lstm_forward(g, h, p(0), p(1), p(2))?,
                LayerSpec::LastStep => {
                    let (t, c) = (layer.in_shape[0], layer.in_shape[1]);
                    let last = g.slice_time(h, t - 1, 1)?;
                    g.reshape(last, &[batch, c])?
                }
                LayerSpec::CenterCrop { len } => {
                    let start = (layer.in_shape[0] - len) / 2;
                    g.slice_time(h, start, *len)?
                }
            };
        }
        Ok(h)
    }

    /// Eval-mode forward on a plain tensor without gradient tracking.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let y = self.forward(&mut g, &bound, xv, &mut ForwardCtx::eval())?;
        Ok(g.value(y)?.clone())
    }
}
