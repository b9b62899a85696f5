//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append
//! nodes in execution order, so node indices are already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Sequence data is
//! laid out as `batch x time x channels`.

use std::sync::atomic::{AtomicU64, Ordering};

use super::linalg::{gemm, sigmoid, sigmoid_slice, tanh_slice, Trans};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Which operand of a binary op is repeated to match the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Left operand repeats with the given period.
    Left(usize),
    /// Right operand repeats with the given period.
    Right(usize),
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Log,
    Exp,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Debug)]
struct ConvSaved {
    batch: usize,
    in_len: usize,
    in_ch: usize,
    out_len: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    cols: Vec<f64>,
}

#[derive(Debug)]
struct BatchNormSaved {
    channels: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

#[derive(Debug)]
struct LstmSaved {
    batch: usize,
    steps: usize,
    inputs: usize,
    hidden: usize,
    /// Post-activation gates `[steps, batch, 4*hidden]` in i, f, g, o order.
    gates: Vec<f64>,
    /// Cell states `[steps + 1, batch, hidden]`, entry 0 is the zero state.
    cells: Vec<f64>,
    /// Hidden states `[steps + 1, batch, hidden]`, entry 0 is the zero state.
    hiddens: Vec<f64>,
    tanh_cells: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Broadcast),
    Unary(Unary),
    MatMul { m: usize, k: usize, n: usize },
    Sum,
    Mean,
    Reshape,
    Upsample { factor: usize },
    SliceTime { start: usize },
    Conv1d(Box<ConvSaved>),
    BatchNorm(Box<BatchNormSaved>),
    Lstm(Box<LstmSaved>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of rows each statistic was computed over.
    pub count: usize,
}

/// Convolution geometry along the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    /// Output length and leading pad for an input of `len` steps.
    pub fn resolve(self, len: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = len.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(len);
                Some((out, total / 2))
            }
            Padding::Valid => {
                if kernel > len {
                    None
                } else {
                    Some(((len - kernel) / stride + 1, 0))
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::None));
    }
    // `small` may repeat over `big` when its shape, stripped of leading
    // singleton extents, is a suffix of `big`.
    let repeats = |small: &[usize], big: &[usize]| {
        let first = small.iter().position(|&e| e != 1).unwrap_or(small.len());
        let core = &small[first..];
        core.len() <= big.len()
            && big[big.len() - core.len()..] == *core
            && small.len() <= big.len()
    };
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb <= na && repeats(b, a) {
        Ok((a.to_vec(), Broadcast::Right(nb)))
    } else if na < nb && repeats(a, b) {
        Ok((b.to_vec(), Broadcast::Left(na)))
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

fn reduce_period(g: &[f64], period: usize) -> Vec<f64> {
    let mut out = vec![0.0; period];
    for chunk in g.chunks_exact(period) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id {
            return Err(Error::NotAttached);
        }
        self.nodes.get(v.index).ok_or(Error::NotAttached)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, mut value: Tensor, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|&i| self.nodes[i].value.requires_grad()),
        };
        value.set_requires_grad(requires_grad);
        let index = self.nodes.len();
        self.nodes.push(Node { op, inputs, value });
        Ok(Var {
            graph: self.id,
            index,
        })
    }

    /// Inserts a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, Vec::new(), t, "leaf")
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Result<Option<&[f64]>> {
        Ok(self.node(v)?.value.grad())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.value.requires_grad())
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (shape, bc) = broadcast(name, ta.shape(), tb.shape())?;
        let (x, y) = (ta.data(), tb.data());
        let f = |p: f64, q: f64| match kind {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
        };
        let data: Vec<f64> = match bc {
            Broadcast::None => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
            Broadcast::Right(period) => x
                .iter()
                .enumerate()
                .map(|(i, &p)| f(p, y[i % period]))
                .collect(),
            Broadcast::Left(period) => y
                .iter()
                .enumerate()
                .map(|(i, &q)| f(x[i % period], q))
                .collect(),
        };
        self.push(
            Op::Binary(kind, bc),
            vec![a.index, b.index],
            Tensor::from_parts(shape, data),
            name,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let f = |x: f64| match kind {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Scale(s) => s * x,
            Unary::AddScalar(s) => x + s,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        };
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(Op::Unary(kind), vec![a.index], out, "elementwise op")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Unary::Scale(s), a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(s), a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(Unary::Clamp(lo, hi), a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            Trans::No,
            tb.data(),
            Trans::No,
            0.0,
            &mut c,
        );
        self.push(
            Op::MatMul { m, k, n },
            vec![a.index, b.index],
            Tensor::from_parts(vec![m, n], c),
            "matmul",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        self.push(Op::Sum, vec![a.index], Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean, vec![a.index], Tensor::scalar(s), "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.node(a)?.value.reshape(shape)?;
        self.push(Op::Reshape, vec![a.index], t, "reshape")
    }

    fn seq_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(v)?;
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![0, 0, 0],
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Nearest-neighbour upsampling along time: each step repeated `factor` times.
    pub fn upsample1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(Error::invalid(format!(
                "upsample factor must be >= 2, got {factor}"
            )));
        }
        let (b, t, c) = self.seq_dims("upsample1d", x)?;
        let src = self.node(x)?.value.data();
        let mut out = Vec::with_capacity(b * t * factor * c);
        for row in src.chunks_exact(c) {
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        self.push(
            Op::Upsample { factor },
            vec![x.index],
            Tensor::from_parts(vec![b, t * factor, c], out),
            "upsample1d",
        )
    }

    /// Steps `start..start+len` of every sequence.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, t, c) = self.seq_dims("slice_time", x)?;
        if len == 0 || start + len > t {
            return Err(Error::invalid(format!(
                "time slice {start}..{} out of range for length {t}",
                start + len
            )));
        }
        let src = self.node(x)?.value.data();
        let mut out = Vec::with_capacity(b * len * c);
        for bi in 0..b {
            let base = (bi * t + start) * c;
            out.extend_from_slice(&src[base..base + len * c]);
        }
        self.push(
            Op::SliceTime { start },
            vec![x.index],
            Tensor::from_parts(vec![b, len, c], out),
            "slice_time",
        )
    }

    /// Cross-correlation along time. `x` is `[batch, len, in_ch]`, `w` is
    /// `[kernel, in_ch, out_ch]`; no bias.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (batch, in_len, in_ch) = self.seq_dims("conv1d", x)?;
        let ws = self.shape(w)?.to_vec();
        if ws.len() != 3 || ws[1] != in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: vec![batch, in_len, in_ch],
                right: ws,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d stride must be >= 1"));
        }
        let (kernel, out_ch) = (ws[0], ws[2]);
        let (out_len, pad_left) = padding.resolve(in_len, kernel, stride).ok_or_else(|| {
            Error::invalid(format!(
                "kernel {kernel} longer than input of length {in_len}"
            ))
        })?;
        let patch = kernel * in_ch;
        let xs = self.node(x)?.value.data();
        let mut cols = vec![0.0; batch * out_len * patch];
        for b in 0..batch {
            for o in 0..out_len {
                let row = &mut cols[(b * out_len + o) * patch..][..patch];
                for k in 0..kernel {
                    let pos = (o * stride + k) as isize - pad_left as isize;
                    if pos >= 0 && (pos as usize) < in_len {
                        let src = &xs[(b * in_len + pos as usize) * in_ch..][..in_ch];
                        row[k * in_ch..(k + 1) * in_ch].copy_from_slice(src);
                    }
                }
            }
        }
        let mut out = vec![0.0; batch * out_len * out_ch];
        let wd = self.node(w)?.value.data();
        gemm(
            batch * out_len,
            patch,
            out_ch,
            1.0,
            &cols,
            Trans::No,
            wd,
            Trans::No,
            0.0,
            &mut out,
        );
        let saved = ConvSaved {
            batch,
            in_len,
            in_ch,
            out_len,
            out_ch,
            kernel,
            stride,
            pad_left,
            cols,
        };
        self.push(
            Op::Conv1d(Box::new(saved)),
            vec![x.index, w.index],
            Tensor::from_parts(vec![batch, out_len, out_ch], out),
            "conv1d",
        )
    }

    /// Normalizes over every axis but the last using the batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (channels, rows) = self.norm_dims(x, gamma, beta)?;
        if rows < 2 {
            return Err(Error::invalid(
                "batch norm in train mode needs at least 2 samples per channel",
            ));
        }
        let xs = self.node(x)?.value.data();
        let mut mean = vec![0.0; channels];
        for row in xs.chunks_exact(channels) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; channels];
        for row in xs.chunks_exact(channels) {
            for c in 0..channels {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count: rows,
        };
        let v = self.batch_norm_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, stats))
    }

    /// Per-channel affine normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (channels, _) = self.norm_dims(x, gamma, beta)?;
        if mean.len() != channels || var.len() != channels {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: vec![channels],
                right: vec![mean.len()],
            });
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn norm_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x)?;
        let channels = *xs.last().expect("tensor shape is non-empty");
        for p in [gamma, beta] {
            if self.node(p)?.value.numel() != channels {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    left: xs.to_vec(),
                    right: self.shape(p)?.to_vec(),
                });
            }
        }
        Ok((channels, self.node(x)?.value.numel() / channels))
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<Var> {
        let t = &self.node(x)?.value;
        let shape = t.shape().to_vec();
        let channels = mean.len();
        let g = self.node(gamma)?.value.data();
        let bt = self.node(beta)?.value.data();
        let mut xhat = Vec::with_capacity(t.numel());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(channels) {
            for c in 0..channels {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(g[c] * h + bt[c]);
            }
        }
        let saved = BatchNormSaved {
            channels,
            xhat,
            inv_std,
            train,
        };
        self.push(
            Op::BatchNorm(Box::new(saved)),
            vec![x.index, gamma.index, beta.index],
            Tensor::from_parts(shape, out),
            "batch_norm",
        )
    }

    /// Unidirectional LSTM from zero initial state, returning the hidden
    /// state at every step. `x` is `[batch, steps, inputs]`, `w_ih` is
    /// `[inputs, 4h]`, `w_hh` is `[h, 4h]`, `bias` is `[4h]`; gate blocks are
    /// ordered input, forget, candidate, output.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
        let (batch, steps, inputs) = self.seq_dims("lstm", x)?;
        let wi = self.shape(w_ih)?.to_vec();
        let wh = self.shape(w_hh)?.to_vec();
        let bs = self.shape(bias)?.to_vec();
        if wi.len() != 2 || wi[0] != inputs || wi[1] % 4 != 0 {
            return Err(Error::ShapeMismatch {
                op: "lstm",
                left: vec![batch, steps, inputs],
                right: wi,
            });
        }
        let hidden = wi[1] / 4;
        let g4 = 4 * hidden;
        if wh != [hidden, g4] || bs.iter().product::<usize>() != g4 {
            return Err(Error::ShapeMismatch {
                op: "lstm",
                left: wi,
                right: wh,
            });
        }
        let xd = self.node(x)?.value.data();
        let wid = self.node(w_ih)?.value.data();
        let whd = self.node(w_hh)?.value.data();
        let bd = self.node(bias)?.value.data();

        // Gate pre-activations, time-major `[steps, batch, 4h]`, seeded with
        // the bias and the input projection of every row at once.
        let rows = steps * batch;
        let mut x_tm = vec![0.0; rows * inputs];
        for t in 0..steps {
            for b in 0..batch {
                x_tm[(t * batch + b) * inputs..][..inputs]
                    .copy_from_slice(&xd[(b * steps + t) * inputs..][..inputs]);
            }
        }
        let mut gates = Vec::with_capacity(rows * g4);
        for _ in 0..rows {
            gates.extend_from_slice(bd);
        }
        gemm(
            rows,
            inputs,
            g4,
            1.0,
            &x_tm,
            Trans::No,
            wid,
            Trans::No,
            1.0,
            &mut gates,
        );

        let bh = batch * hidden;
        let mut cells = vec![0.0; (steps + 1) * bh];
        let mut hiddens = vec![0.0; (steps + 1) * bh];
        let mut tanh_cells = vec![0.0; steps * bh];
        let mut out = vec![0.0; batch * steps * hidden];
        for t in 0..steps {
            let pre = &mut gates[t * batch * g4..(t + 1) * batch * g4];
            if t > 0 {
                let h_prev = &hiddens[t * bh..(t + 1) * bh];
                gemm(
                    batch,
                    hidden,
                    g4,
                    1.0,
                    h_prev,
                    Trans::No,
                    whd,
                    Trans::No,
                    1.0,
                    pre,
                );
            }
            let (c_prev_all, c_next_all) = cells.split_at_mut((t + 1) * bh);
            let c_prev = &c_prev_all[t * bh..];
            let c_next = &mut c_next_all[..bh];
            let h_next = &mut hiddens[(t + 1) * bh..(t + 2) * bh];
            let tc = &mut tanh_cells[t * bh..(t + 1) * bh];
            for b in 0..batch {
                let row = &mut pre[b * g4..(b + 1) * g4];
                sigmoid_slice(&mut row[..2 * hidden]);
                tanh_slice(&mut row[2 * hidden..3 * hidden]);
                sigmoid_slice(&mut row[3 * hidden..]);
                let (ig, rest) = row.split_at(hidden);
                let (fg, rest) = rest.split_at(hidden);
                let (gg, og) = rest.split_at(hidden);
                let span = b * hidden..(b + 1) * hidden;
                let (cp, cn) = (&c_prev[span.clone()], &mut c_next[span.clone()]);
                for j in 0..hidden {
                    cn[j] = fg[j] * cp[j] + ig[j] * gg[j];
                }
                let th = &mut tc[span.clone()];
                th.copy_from_slice(cn);
                tanh_slice(th);
                let hn = &mut h_next[span];
                for j in 0..hidden {
                    hn[j] = og[j] * th[j];
                }
                out[(b * steps + t) * hidden..][..hidden].copy_from_slice(hn);
            }
        }
        let saved = LstmSaved {
            batch,
            steps,
            inputs,
            hidden,
            gates,
            cells,
            hiddens,
            tanh_cells,
        };
        self.push(
            Op::Lstm(Box::new(saved)),
            vec![x.index, w_ih.index, w_hh.index, bias.index],
            Tensor::from_parts(vec![batch, steps, hidden], out),
            "lstm",
        )
    }

    /// Reverse sweep from a scalar `root`. Afterwards every leaf that
    /// requires a gradient holds `d root / d leaf` (zeros if unreachable),
    /// accumulated onto any gradient it already had.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = self.node(root)?;
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.index).map(|_| None).collect();
        grads[root.index] = Some(vec![1.0]);
        for i in (0..=root.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (input, delta) in self.local_backward(node, &g) {
                if self.nodes[input].value.requires_grad() {
                    accumulate(&mut grads[input], delta);
                }
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let delta = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.accumulate_grad(&delta);
            }
        }
        Ok(())
    }

    fn needs(&self, index: usize) -> bool {
        self.nodes[index].value.requires_grad()
    }

    fn local_backward(&self, node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let inp = &node.inputs;
        let input_value = |k: usize| &self.nodes[inp[k]].value;
        let mut out = Vec::with_capacity(inp.len());
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, bc) => {
                let (x, y) = (input_value(0).data(), input_value(1).data());
                let (lp, rp) = match *bc {
                    Broadcast::None => (x.len(), y.len()),
                    Broadcast::Left(p) => (p, g.len()),
                    Broadcast::Right(p) => (g.len(), p),
                };
                if self.needs(inp[0]) {
                    let full: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(i, gv)| gv * y[i % rp]).collect(),
                    };
                    out.push((
                        inp[0],
                        if lp < g.len() {
                            reduce_period(&full, lp)
                        } else {
                            full
                        },
                    ));
                }
                if self.needs(inp[1]) {
                    let full: Vec<f64> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|v| -v).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(i, gv)| gv * x[i % lp]).collect(),
                    };
                    out.push((
                        inp[1],
                        if rp < g.len() {
                            reduce_period(&full, rp)
                        } else {
                            full
                        },
                    ));
                }
            }
            Op::Unary(kind) => {
                let x = input_value(0).data();
                let y = node.value.data();
                let d: Vec<f64> = match *kind {
                    Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::LeakyRelu(s) => g
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x >= 0.0 { *g } else { s * g })
                        .collect(),
                    Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Scale(s) => g.iter().map(|g| s * g).collect(),
                    Unary::AddScalar(_) => g.to_vec(),
                    Unary::Clamp(lo, hi) => g
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if (lo..=hi).contains(x) { *g } else { 0.0 })
                        .collect(),
                };
                out.push((inp[0], d));
            }
            Op::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(inp[0]) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        Trans::No,
                        input_value(1).data(),
                        Trans::Yes,
                        0.0,
                        &mut da,
                    );
                    out.push((inp[0], da));
                }
                if self.needs(inp[1]) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        input_value(0).data(),
                        Trans::Yes,
                        g,
                        Trans::No,
                        0.0,
                        &mut db,
                    );
                    out.push((inp[1], db));
                }
            }
            Op::Sum => out.push((inp[0], vec![g[0]; input_value(0).numel()])),
            Op::Mean => {
                let n = input_value(0).numel();
                out.push((inp[0], vec![g[0] / n as f64; n]));
            }
            Op::Reshape => out.push((inp[0], g.to_vec())),
            Op::Upsample { factor } => {
                let c = *input_value(0).shape().last().expect("non-empty shape");
                let mut d = vec![0.0; input_value(0).numel()];
                for (dst, src) in d.chunks_exact_mut(c).zip(g.chunks_exact(c * factor)) {
                    for rep in src.chunks_exact(c) {
                        dst.iter_mut().zip(rep).for_each(|(a, b)| *a += b);
                    }
                }
                out.push((inp[0], d));
            }
            Op::SliceTime { start } => {
                let s = input_value(0).shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                let len = node.value.shape()[1];
                let mut d = vec![0.0; b * t * c];
                for bi in 0..b {
                    d[(bi * t + start) * c..][..len * c]
                        .copy_from_slice(&g[bi * len * c..(bi + 1) * len * c]);
                }
                out.push((inp[0], d));
            }
            Op::Conv1d(s) => {
                let patch = s.kernel * s.in_ch;
                let rows = s.batch * s.out_len;
                if self.needs(inp[1]) {
                    let mut dw = vec![0.0; patch * s.out_ch];
                    gemm(
                        patch,
                        rows,
                        s.out_ch,
                        1.0,
                        &s.cols,
                        Trans::Yes,
                        g,
                        Trans::No,
                        0.0,
                        &mut dw,
                    );
                    out.push((inp[1], dw));
                }
                if self.needs(inp[0]) {
                    let mut dcols = vec![0.0; rows * patch];
                    let w = input_value(1).data();
                    gemm(
                        rows,
                        s.out_ch,
                        patch,
                        1.0,
                        g,
                        Trans::No,
                        w,
                        Trans::Yes,
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; s.batch * s.in_len * s.in_ch];
                    for b in 0..s.batch {
                        for o in 0..s.out_len {
                            let row = &dcols[(b * s.out_len + o) * patch..][..patch];
                            for k in 0..s.kernel {
                                let pos = (o * s.stride + k) as isize - s.pad_left as isize;
                                if pos >= 0 && (pos as usize) < s.in_len {
                                    let dst = &mut dx[(b * s.in_len + pos as usize) * s.in_ch..]
                                        [..s.in_ch];
                                    dst.iter_mut()
                                        .zip(&row[k * s.in_ch..(k + 1) * s.in_ch])
                                        .for_each(|(a, v)| *a += v);
                                }
                            }
                        }
                    }
                    out.push((inp[0], dx));
                }
            }
            Op::BatchNorm(s) => {
                let c = s.channels;
                let gamma = input_value(1).data();
                let rows = s.xhat.len() / c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gr, hr) in g.chunks_exact(c).zip(s.xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                }
                if self.needs(inp[0]) {
                    let mut dx = Vec::with_capacity(g.len());
                    if s.train {
                        // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let n = rows as f64;
                        for (gr, hr) in g.chunks_exact(c).zip(s.xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let dxhat = gr[j] * gamma[j];
                                let mean_d = dbeta[j] * gamma[j] / n;
                                let mean_dh = dgamma[j] * gamma[j] / n;
                                dx.push(s.inv_std[j] * (dxhat - mean_d - hr[j] * mean_dh));
                            }
                        }
                    } else {
                        for gr in g.chunks_exact(c) {
                            for j in 0..c {
                                dx.push(gr[j] * gamma[j] * s.inv_std[j]);
                            }
                        }
                    }
                    out.push((inp[0], dx));
                }
                out.push((inp[1], dgamma));
                out.push((inp[2], dbeta));
            }
            Op::Lstm(s) => out.extend(self.lstm_backward(inp, s, g)),
        }
        out
    }

    fn lstm_backward(&self, inp: &[usize], s: &LstmSaved, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let (batch, steps, hidden) = (s.batch, s.steps, s.hidden);
        let g4 = 4 * hidden;
        let bh = batch * hidden;
        let w_ih = self.nodes[inp[1]].value.data();
        let w_hh = self.nodes[inp[2]].value.data();
        let mut w_hh_t = vec![0.0; g4 * hidden];
        for r in 0..hidden {
            for c in 0..g4 {
                w_hh_t[c * hidden + r] = w_hh[r * g4 + c];
            }
        }

        // Pre-activation gradients, time-major `[steps, batch, 4h]`.
        let mut dpre = vec![0.0; steps * batch * g4];
        let mut dh_next = vec![0.0; bh];
        let mut dc_next = vec![0.0; bh];
        for t in (0..steps).rev() {
            let gates = &s.gates[t * batch * g4..(t + 1) * batch * g4];
            let c_prev = &s.cells[t * bh..(t + 1) * bh];
            let tc = &s.tanh_cells[t * bh..(t + 1) * bh];
            let dp = &mut dpre[t * batch * g4..(t + 1) * batch * g4];
            for b in 0..batch {
                let gr = &gates[b * g4..(b + 1) * g4];
                let dr = &mut dp[b * g4..(b + 1) * g4];
                for j in 0..hidden {
                    let idx = b * hidden + j;
                    let (i, f, gg, o) = (
                        gr[j],
                        gr[hidden + j],
                        gr[2 * hidden + j],
                        gr[3 * hidden + j],
                    );
                    let dh = g[(b * steps + t) * hidden + j] + dh_next[idx];
                    let th = tc[idx];
                    let dc = dh * o * (1.0 - th * th) + dc_next[idx];
                    dr[j] = dc * gg * i * (1.0 - i);
                    dr[hidden + j] = dc * c_prev[idx] * f * (1.0 - f);
                    dr[2 * hidden + j] = dc * i * (1.0 - gg * gg);
                    dr[3 * hidden + j] = dh * th * o * (1.0 - o);
                    dc_next[idx] = dc * f;
                }
            }
            if t > 0 {
                gemm(
                    batch,
                    g4,
                    hidden,
                    1.0,
                    dp,
                    Trans::No,
                    &w_hh_t,
                    Trans::No,
                    0.0,
                    &mut dh_next,
                );
            }
        }

        let rows = steps * batch;
        let mut out = Vec::with_capacity(4);
        if self.needs(inp[0]) {
            let mut dx_tm = vec![0.0; rows * s.inputs];
            gemm(
                rows,
                g4,
                s.inputs,
                1.0,
                &dpre,
                Trans::No,
                w_ih,
                Trans::Yes,
                0.0,
                &mut dx_tm,
            );
            let mut dx = vec![0.0; rows * s.inputs];
            for t in 0..steps {
                for b in 0..batch {
                    dx[(b * steps + t) * s.inputs..][..s.inputs]
                        .copy_from_slice(&dx_tm[(t * batch + b) * s.inputs..][..s.inputs]);
                }
            }
            out.push((inp[0], dx));
        }
        if self.needs(inp[1]) {
            let x = self.nodes[inp[0]].value.data();
            let mut x_tm = vec![0.0; rows * s.inputs];
            for t in 0..steps {
                for b in 0..batch {
                    x_tm[(t * batch + b) * s.inputs..][..s.inputs]
                        .copy_from_slice(&x[(b * steps + t) * s.inputs..][..s.inputs]);
                }
            }
            let mut dw = vec![0.0; s.inputs * g4];
            gemm(
                s.inputs,
                rows,
                g4,
                1.0,
                &x_tm,
                Trans::Yes,
                &dpre,
                Trans::No,
                0.0,
                &mut dw,
            );
            out.push((inp[1], dw));
        }
        if self.needs(inp[2]) {
            // Hidden states 0..steps are the h_{t-1} inputs of each step.
            let h_prev = &s.hiddens[..rows * hidden];
            let mut dw = vec![0.0; hidden * g4];
            gemm(
                hidden,
                rows,
                g4,
                1.0,
                h_prev,
                Trans::Yes,
                &dpre,
                Trans::No,
                0.0,
                &mut dw,
            );
            out.push((inp[2], dw));
        }
        if self.needs(inp[3]) {
            out.push((inp[3], reduce_period(&dpre, g4)));
        }
        out
    }
}
