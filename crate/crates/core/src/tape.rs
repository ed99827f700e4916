//! Reverse-mode differentiation over a flat record of primitive ops.
//!
//! Every primitive pushes one node holding its output and whatever it needs
//! for the backward pass. `backward` walks the nodes in exact reverse order.
//! Parameters enter through [`Tape::param`]; their gradients are folded back
//! into a [`ParamStore`] with [`Tape::accumulate_into`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TamError};
use crate::kernels::{self, Aggregation, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics handed to [`Tape::batch_norm`].
pub struct BnState<'a, F> {
    pub mean: &'a Tensor<F>,
    pub var: &'a Tensor<F>,
    pub mean_name: &'a str,
    pub var_name: &'a str,
}

enum Op<F> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    BroadcastMul {
        x: Var,
        s: Var,
    },
    MeanTrailing {
        x: Var,
        inner: usize,
    },
    SwapLast2(Var),
    Aggregate {
        z: Var,
        theta: Var,
        shared: bool,
    },
    TemporalPool {
        x: Var,
        k: usize,
    },
    Shift {
        x: Var,
        fold: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv",
            Op::AddBias { .. } => "add_bias",
            Op::Linear { .. } => "fully_connected",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::BroadcastMul { .. } => "broadcast_mul",
            Op::MeanTrailing { .. } => "mean",
            Op::SwapLast2(_) => "swap_last2",
            Op::Aggregate { .. } => "adaptive_aggregate",
            Op::TemporalPool { .. } => "temporal_avg_pool",
            Op::Shift { .. } => "temporal_shift",
            Op::MaxPool { .. } => "max_pool2d",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, Var)>,
    grads: Vec<Option<Tensor<F>>>,
    state_updates: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_rank<F: Real>(op: &'static str, t: &Tensor<F>, ranks: &[usize]) -> Result<()> {
    if ranks.contains(&t.rank()) {
        Ok(())
    } else {
        Err(TamError::shape(
            op,
            format!("expected rank in {ranks:?}, got shape {:?}", t.shape()),
        ))
    }
}

fn same_shape<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() == b.shape() {
        return Ok(());
    }
    if a.rank() != b.rank() {
        return Err(TamError::shape(
            op,
            format!("rank {} vs {} ({:?} vs {:?})", a.rank(), b.rank(), a.shape(), b.shape()),
        ));
    }
    let axis = a
        .shape()
        .iter()
        .zip(b.shape())
        .position(|(x, y)| x != y)
        .unwrap_or(0);
    Err(TamError::shape(
        op,
        format!(
            "dimension {axis}: {} vs {} ({:?} vs {:?})",
            a.dim(axis),
            b.dim(axis),
            a.shape(),
            b.shape()
        ),
    ))
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
            state_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TamError::NonFinite { op: op.name() });
        }
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Data leaf without gradient tracking.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Data leaf whose gradient is wanted.
    pub fn input_with_grad(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Loads a named entry of `store`. Trainable entries are tracked and
    /// receive gradients in [`Tape::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        let entry = store
            .entry(name)
            .ok_or_else(|| TamError::MissingParam(name.to_string()))?;
        let trainable = entry.trainable();
        let v = self.leaf(entry.value.clone(), trainable);
        if trainable {
            self.params.push((name.to_string(), v));
        }
        Ok(v)
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    // ---- convolution family ------------------------------------------------

    fn conv_impl(&mut self, x: Var, w: Var, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        let mut out = vec![F::zero(); geom.n * geom.cout * geom.positions()];
        kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        let value = Tensor::new(&out_shape, out)?;
        self.push(value, Op::Conv { x, w, geom }, &[x, w])
    }

    /// 2D cross-correlation on `(N, C, H, W)` images or frame-wise on
    /// `(N, C, T, H, W)` clips; `w` is `(C', C, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        expect_rank(OP, self.value(x), &[4, 5])?;
        expect_rank(OP, self.value(w), &[4])?;
        let (n, c) = (xs[0], xs[1]);
        let (t, h, wd) = if xs.len() == 5 { (xs[2], xs[3], xs[4]) } else { (1, xs[2], xs[3]) };
        if ws[1] != c {
            return Err(TamError::shape(OP, format!("input channels (dim 1) {c} vs weight input channels {}", ws[1])));
        }
        if ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(TamError::shape(OP, format!("kernel must be square and odd, got {}x{}", ws[2], ws[3])));
        }
        if stride == 0 || h + 2 * pad < ws[2] || wd + 2 * pad < ws[3] {
            return Err(TamError::shape(OP, format!("kernel {} does not fit {h}x{wd} with pad {pad}", ws[2])));
        }
        let geom = ConvGeom { n, cin: c, t, h, w: wd, cout: ws[0], kt: 1, kh: ws[2], kw: ws[3], stride, pt: 0, ph: pad, pw: pad };
        let out_shape = if xs.len() == 5 {
            vec![n, ws[0], t, geom.out_h(), geom.out_w()]
        } else {
            vec![n, ws[0], geom.out_h(), geom.out_w()]
        };
        self.conv_impl(x, w, geom, out_shape)
    }

    /// Temporal convolution on `(N, C, T)` signals with `w` of shape `(C', C, k)`.
    pub fn conv1d_temporal(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        const OP: &str = "conv1d_temporal";
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        expect_rank(OP, self.value(x), &[3])?;
        expect_rank(OP, self.value(w), &[3])?;
        if ws[1] != xs[1] {
            return Err(TamError::shape(OP, format!("input channels (dim 1) {} vs weight input channels {}", xs[1], ws[1])));
        }
        if xs[2] + 2 * pad < ws[2] {
            return Err(TamError::shape(OP, format!("kernel {} longer than padded length {}", ws[2], xs[2] + 2 * pad)));
        }
        let geom = ConvGeom { n: xs[0], cin: xs[1], t: xs[2], h: 1, w: 1, cout: ws[0], kt: ws[2], kh: 1, kw: 1, stride: 1, pt: pad, ph: 0, pw: 0 };
        let out_shape = vec![xs[0], ws[0], geom.out_t()];
        self.conv_impl(x, w, geom, out_shape)
    }

    /// Spatio-temporal convolution on `(N, C, T, H, W)` with `w` of shape
    /// `(C', C, kt, kh, kw)`; time is never strided.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, pad: (usize, usize, usize)) -> Result<Var> {
        const OP: &str = "conv3d";
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        expect_rank(OP, self.value(x), &[5])?;
        expect_rank(OP, self.value(w), &[5])?;
        if ws[1] != xs[1] {
            return Err(TamError::shape(OP, format!("input channels (dim 1) {} vs weight input channels {}", xs[1], ws[1])));
        }
        if stride == 0 || xs[2] + 2 * pad.0 < ws[2] || xs[3] + 2 * pad.1 < ws[3] || xs[4] + 2 * pad.2 < ws[4] {
            return Err(TamError::shape(OP, format!("kernel {:?} does not fit input {:?}", &ws[2..], &xs[2..])));
        }
        let geom = ConvGeom { n: xs[0], cin: xs[1], t: xs[2], h: xs[3], w: xs[4], cout: ws[0], kt: ws[2], kh: ws[3], kw: ws[4], stride, pt: pad.0, ph: pad.1, pw: pad.2 };
        let out_shape = vec![xs[0], ws[0], geom.out_t(), geom.out_h(), geom.out_w()];
        self.conv_impl(x, w, geom, out_shape)
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1) {
            return Err(TamError::shape("add_bias", format!("bias {:?} vs input {:?} (dim 1)", bv.shape(), xv.shape())));
        }
        let c = xv.dim(1);
        let inner = xv.numel() / (xv.dim(0) * c);
        let mut out = xv.clone();
        let bd = bv.data();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bias = bd[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        self.push(out, Op::AddBias { x, b }, &[x, b])
    }

    /// Matrix product over the trailing dimension: `(..., D_in) x (D_in, D_out)`.
    pub fn fully_connected(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        expect_rank("fully_connected", wv, &[2])?;
        let din = *xv.shape().last().unwrap_or(&0);
        if xv.rank() == 0 || din != wv.dim(0) {
            return Err(TamError::shape(
                "fully_connected",
                format!("trailing dimension {din} vs weight rows {} ({:?} x {:?})", wv.dim(0), xv.shape(), wv.shape()),
            ));
        }
        let dout = wv.dim(1);
        let m = xv.numel() / din.max(1);
        let mut out = vec![F::zero(); m * dout];
        F::gemm(m, din, dout, F::one(), xv.data(), (din as isize, 1), wv.data(), (dout as isize, 1), F::zero(), &mut out, (dout as isize, 1));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Linear { x, w }, &[x, w])
    }

    /// Per-channel normalization over every axis except 1. Train mode uses
    /// batch moments and records updated running statistics; eval mode
    /// uses the running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: BnState<'_, F>, mode: Mode) -> Result<Var> {
        const OP: &str = "batch_norm";
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(TamError::shape(OP, format!("need rank >= 2, got {:?}", xv.shape())));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let inner = xv.numel() / (n * c).max(1);
        for (label, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta)), ("running mean", state.mean), ("running var", state.var)] {
            if t.shape() != [c] {
                return Err(TamError::shape(OP, format!("{label} shape {:?} vs channels {c} (dim 1)", t.shape())));
            }
        }
        let count = n * inner;
        let eps = F::cst(BN_EPS);
        let xd = xv.data();
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(TamError::shape(OP, format!("train mode needs at least 2 values per channel, got {count}")));
                }
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ch in 0..c {
                    let mut s = F::zero();
                    for b in 0..n {
                        s += xd[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().copied().sum::<F>();
                    }
                    let m = s / F::cst(count as f64);
                    let mut q = F::zero();
                    for b in 0..n {
                        q += xd[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().map(|&v| (v - m) * (v - m)).sum::<F>();
                    }
                    mean[ch] = m;
                    var[ch] = q / F::cst(count as f64);
                }
                let mom = F::cst(BN_MOMENTUM);
                let unbias = F::cst(count as f64 / (count - 1) as f64);
                let new_mean: Vec<F> = state.mean.data().iter().zip(&mean).map(|(&r, &m)| (F::one() - mom) * r + mom * m).collect();
                let new_var: Vec<F> = state.var.data().iter().zip(&var).map(|(&r, &v)| (F::one() - mom) * r + mom * v * unbias).collect();
                self.state_updates.push((state.mean_name.to_string(), Tensor::new(&[c], new_mean)?));
                self.state_updates.push((state.var_name.to_string(), Tensor::new(&[c], new_var)?));
                (mean, var)
            }
            Mode::Eval => (state.mean.data().to_vec(), state.var.data().to_vec()),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let xd = self.value(x).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for (i, (xc, (hc, oc))) in xd.chunks(inner).zip(xhat.chunks_mut(inner).zip(out.chunks_mut(inner))).enumerate() {
            let ch = i % c;
            for ((&v, h), o) in xc.iter().zip(hc.iter_mut()).zip(oc.iter_mut()) {
                *h = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *h + bt[ch];
            }
        }
        let value = Tensor::new(self.value(x).shape(), out)?;
        self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: mode == Mode::Train },
            &[x, gamma, beta],
        )
    }

    // ---- pointwise ---------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| if a > F::zero() { a } else { F::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| F::one() / (F::one() + (-a).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv.shape().last().ok_or_else(|| TamError::shape("softmax", "rank-0 input"))?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(k.max(1)) {
            softmax_row(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Multiplies `x` by `s`, where `s.shape` is a leading prefix of
    /// `x.shape`; `s` is replicated over the remaining trailing axes.
    pub fn broadcast_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.rank() > xv.rank() || xv.shape()[..sv.rank()] != *sv.shape() {
            return Err(TamError::shape(
                "broadcast_mul",
                format!("scale {:?} is not a prefix of input {:?}", sv.shape(), xv.shape()),
            ));
        }
        let inner = xv.numel() / sv.numel().max(1);
        let mut out = xv.clone();
        let sd = sv.data();
        out.data_mut()
            .par_chunks_mut(inner.max(1))
            .zip(sd.par_iter())
            .for_each(|(chunk, &g)| chunk.iter_mut().for_each(|v| *v *= g));
        self.push(out, Op::BroadcastMul { x, s }, &[x, s])
    }

    /// Mean over the trailing `axes` axes.
    pub fn mean_trailing(&mut self, x: Var, axes: usize) -> Result<Var> {
        let xv = self.value(x);
        if axes == 0 || axes > xv.rank() {
            return Err(TamError::shape("mean", format!("cannot reduce {axes} trailing axes of {:?}", xv.shape())));
        }
        let keep = xv.rank() - axes;
        let inner: usize = xv.shape()[keep..].iter().product();
        let inv = F::one() / F::cst(inner as f64);
        let data: Vec<F> = xv.data().chunks(inner.max(1)).map(|c| c.iter().copied().sum::<F>() * inv).collect();
        let value = Tensor::new(&xv.shape()[..keep], data)?;
        self.push(value, Op::MeanTrailing { x, inner }, &[x])
    }

    /// Global spatial average pooling `(N, C, T, H, W) -> (N, C, T)`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        expect_rank("spatial_mean", self.value(x), &[5])?;
        self.mean_trailing(x, 2)
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("swap_last2", xv, &[3])?;
        let (n, a, b) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let out = swap_last2_data(xv.data(), n, a, b);
        let value = Tensor::new(&[n, b, a], out)?;
        self.push(value, Op::SwapLast2(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ---- temporal operators -------------------------------------------------

    /// Depthwise temporal aggregation of `z` `(N, C, T, ...)` with per-video
    /// kernels `theta` `(N, C, K)` or a shared kernel `(C, K)`; zero padding.
    pub fn adaptive_aggregate(&mut self, z: Var, theta: Var) -> Result<Var> {
        const OP: &str = "adaptive_aggregate";
        let (zv, tv) = (self.value(z), self.value(theta));
        if zv.rank() < 3 {
            return Err(TamError::shape(OP, format!("input needs (N, C, T, ...), got {:?}", zv.shape())));
        }
        let (n, c, t) = (zv.dim(0), zv.dim(1), zv.dim(2));
        let shared = match tv.shape() {
            [tn, tc, _] if *tn == n && *tc == c => false,
            [tc, _] if *tc == c => true,
            other => {
                return Err(TamError::shape(OP, format!("kernel shape {other:?} vs input (N, C) = ({n}, {c})")));
            }
        };
        let k = *tv.shape().last().unwrap();
        if k % 2 == 0 {
            return Err(TamError::shape(OP, format!("kernel size {k} must be odd")));
        }
        if k > t {
            return Err(TamError::shape(OP, format!("kernel size {k} exceeds {t} frames")));
        }
        let s = zv.numel() / (n * c * t).max(1);
        let agg = Aggregation { n, c, t, s, k, shared };
        let mut out = vec![F::zero(); zv.numel()];
        agg.forward(zv.data(), tv.data(), &mut out);
        let value = Tensor::new(zv.shape(), out)?;
        self.push(value, Op::Aggregate { z, theta, shared }, &[z, theta])
    }

    /// Stride-1 average pooling over time with window `k`, normalized by the
    /// in-range window size (no temporal downsampling).
    pub fn temporal_avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 || k % 2 == 0 {
            return Err(TamError::shape("temporal_avg_pool", format!("need (N, C, T, ...) and odd window, got {:?} / {k}", xv.shape())));
        }
        let t = xv.dim(2);
        let s = xv.numel() / (xv.dim(0) * xv.dim(1) * t).max(1);
        let mut out = vec![F::zero(); xv.numel()];
        kernels::temporal_avg_pool(xv.data(), t, s, k, &mut out);
        let value = Tensor::new(xv.shape(), out)?;
        self.push(value, Op::TemporalPool { x, k }, &[x])
    }

    /// Shifts the first `fold` channels forward one frame and the next
    /// `fold` channels backward one frame, zero filled.
    pub fn temporal_shift(&mut self, x: Var, fold: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 || 2 * fold > xv.dim(1) {
            return Err(TamError::shape("temporal_shift", format!("fold {fold} too large for {:?}", xv.shape())));
        }
        let (c, t) = (xv.dim(1), xv.dim(2));
        let s = xv.numel() / (xv.dim(0) * c * t).max(1);
        let mut out = vec![F::zero(); xv.numel()];
        kernels::temporal_shift(xv.data(), c, t, s, fold, false, &mut out);
        let value = Tensor::new(xv.shape(), out)?;
        self.push(value, Op::Shift { x, fold }, &[x])
    }

    /// Spatial max pooling on `(N, C, H, W)` or frame-wise on `(N, C, T, H, W)`.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("max_pool2d", xv, &[4, 5])?;
        let r = xv.rank();
        let (h, w) = (xv.dim(r - 2), xv.dim(r - 1));
        if stride == 0 || pad >= k || h + 2 * pad < k || w + 2 * pad < k {
            return Err(TamError::shape("max_pool2d", format!("window {k} / pad {pad} invalid for {h}x{w}")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let planes = xv.numel() / (h * w);
        let mut out = vec![F::zero(); planes * oh * ow];
        let argmax = kernels::max_pool2d(xv.data(), h, w, k, stride, pad, &mut out);
        let mut shape = xv.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        expect_rank("cross_entropy", lv, &[2])?;
        let (n, k) = (lv.dim(0), lv.dim(1));
        if labels.len() != n {
            return Err(TamError::shape("cross_entropy", format!("{} labels for batch {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TamError::shape("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = F::zero();
        for (row, (lrow, &y)) in probs.chunks_mut(k).zip(lv.data().chunks(k).zip(labels)) {
            let m = lrow.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + lrow.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            loss += lse - lrow[y];
            softmax_row(row);
        }
        let value = Tensor::scalar(loss / F::cst(n as f64));
        self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    // ---- backward ------------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TamError::Backward("tape is empty".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TamError::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Only leaf gradients are kept; interior buffers are recycled
            // into their parents' gradients.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.backward_node(i, g, &mut grads);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor<F>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let gd = g.data();
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, geom } => {
                let mut dw = vec![F::zero(); val(*w).numel()];
                if nodes[x.0].needs_grad {
                    let mut dx = vec![F::zero(); val(*x).numel()];
                    kernels::conv_backward(geom, val(*x).data(), val(*w).data(), gd, Some(&mut dx), &mut dw);
                    acc(*x, Tensor::new(val(*x).shape(), dx).unwrap());
                } else {
                    kernels::conv_backward(geom, val(*x).data(), val(*w).data(), gd, None, &mut dw);
                }
                acc(*w, Tensor::new(val(*w).shape(), dw).unwrap());
            }
            Op::AddBias { x, b } => {
                let c = val(*b).numel();
                let inner = g.numel() / (g.dim(0) * c);
                let mut db = vec![F::zero(); c];
                for (j, chunk) in gd.chunks(inner).enumerate() {
                    db[j % c] += chunk.iter().copied().sum::<F>();
                }
                acc(*b, Tensor::new(&[c], db).unwrap());
                acc(*x, g);
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let (din, dout) = (wv.dim(0), wv.dim(1));
                let m = xv.numel() / din.max(1);
                if nodes[x.0].needs_grad {
                    let mut dx = vec![F::zero(); xv.numel()];
                    F::gemm(m, dout, din, F::one(), gd, (dout as isize, 1), wv.data(), (1, dout as isize), F::zero(), &mut dx, (din as isize, 1));
                    acc(*x, Tensor::new(xv.shape(), dx).unwrap());
                }
                let mut dw = vec![F::zero(); din * dout];
                F::gemm(din, m, dout, F::one(), xv.data(), (1, din as isize), gd, (dout as isize, 1), F::zero(), &mut dw, (dout as isize, 1));
                acc(*w, Tensor::new(wv.shape(), dw).unwrap());
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let xv = val(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let inner = xv.numel() / (n * c);
                let count = F::cst((n * inner) as f64);
                let gam = val(*gamma).data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for (j, (gc, hc)) in gd.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = j % c;
                    dbeta[ch] += gc.iter().copied().sum::<F>();
                    dgamma[ch] += gc.iter().zip(hc).map(|(&a, &b)| a * b).sum::<F>();
                }
                if nodes[x.0].needs_grad {
                    let mut dx = vec![F::zero(); xv.numel()];
                    for (j, (dc, (gc, hc))) in dx.chunks_mut(inner).zip(gd.chunks(inner).zip(xhat.chunks(inner))).enumerate() {
                        let ch = j % c;
                        let scale = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let mb = dbeta[ch] / count;
                            let mg = dgamma[ch] / count;
                            for ((d, &gv), &h) in dc.iter_mut().zip(gc).zip(hc) {
                                *d = scale * (gv - mb - h * mg);
                            }
                        } else {
                            for (d, &gv) in dc.iter_mut().zip(gc) {
                                *d = scale * gv;
                            }
                        }
                    }
                    acc(*x, Tensor::new(xv.shape(), dx).unwrap());
                }
                acc(*gamma, Tensor::new(&[c], dgamma).unwrap());
                acc(*beta, Tensor::new(&[c], dbeta).unwrap());
            }
            Op::Relu(x) => {
                let mut d = g;
                for (v, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    if yv <= F::zero() {
                        *v = F::zero();
                    }
                }
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = g;
                for (v, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *v *= yv * (F::one() - yv);
                }
                acc(*x, d);
            }
            Op::Softmax(x) => {
                let k = *y.shape().last().unwrap();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                    let dot: F = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, Tensor::from_fn(g.shape(), |j| gd[j] * bd[j]));
                acc(*b, Tensor::from_fn(g.shape(), |j| gd[j] * ad[j]));
            }
            Op::Scale(x, s) => {
                let mut d = g;
                d.data_mut().iter_mut().for_each(|v| *v *= *s);
                acc(*x, d);
            }
            Op::BroadcastMul { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let inner = xv.numel() / sv.numel().max(1);
                let ds: Vec<F> = gd
                    .par_chunks(inner.max(1))
                    .zip(xv.data().par_chunks(inner.max(1)))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<F>())
                    .collect();
                acc(*s, Tensor::new(sv.shape(), ds).unwrap());
                if nodes[x.0].needs_grad {
                    let mut dx = g;
                    dx.data_mut()
                        .par_chunks_mut(inner.max(1))
                        .zip(sv.data().par_iter())
                        .for_each(|(chunk, &f)| chunk.iter_mut().for_each(|v| *v *= f));
                    acc(*x, dx);
                }
            }
            Op::MeanTrailing { x, inner } => {
                let inv = F::one() / F::cst(*inner as f64);
                let xv = val(*x);
                let d = Tensor::from_fn(xv.shape(), |j| gd[j / inner] * inv);
                acc(*x, d);
            }
            Op::SwapLast2(x) => {
                let (n, b, a) = (g.dim(0), g.dim(1), g.dim(2));
                let d = swap_last2_data(gd, n, b, a);
                acc(*x, Tensor::new(val(*x).shape(), d).unwrap());
            }
            Op::Aggregate { z, theta, shared } => {
                let (zv, tv) = (val(*z), val(*theta));
                let (n, c, t) = (zv.dim(0), zv.dim(1), zv.dim(2));
                let k = *tv.shape().last().unwrap();
                let agg = Aggregation { n, c, t, s: zv.numel() / (n * c * t), k, shared: *shared };
                let mut dtheta = vec![F::zero(); tv.numel()];
                if nodes[z.0].needs_grad {
                    let mut dz = vec![F::zero(); zv.numel()];
                    agg.backward(zv.data(), tv.data(), gd, Some(&mut dz), &mut dtheta);
                    acc(*z, Tensor::new(zv.shape(), dz).unwrap());
                } else {
                    agg.backward(zv.data(), tv.data(), gd, None, &mut dtheta);
                }
                acc(*theta, Tensor::new(tv.shape(), dtheta).unwrap());
            }
            Op::TemporalPool { x, k } => {
                let xv = val(*x);
                let t = xv.dim(2);
                let s = xv.numel() / (xv.dim(0) * xv.dim(1) * t);
                let mut dx = vec![F::zero(); xv.numel()];
                kernels::temporal_avg_pool_backward(gd, t, s, *k, &mut dx);
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::Shift { x, fold } => {
                let xv = val(*x);
                let (c, t) = (xv.dim(1), xv.dim(2));
                let s = xv.numel() / (xv.dim(0) * c * t);
                let mut dx = vec![F::zero(); xv.numel()];
                kernels::temporal_shift(gd, c, t, s, *fold, true, &mut dx);
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let xv = val(*x);
                let r = xv.rank();
                let plane_in = xv.dim(r - 2) * xv.dim(r - 1);
                let plane_out = y.dim(r - 2) * y.dim(r - 1);
                let mut dx = vec![F::zero(); xv.numel()];
                for (j, (&gv, &a)) in gd.iter().zip(argmax).enumerate() {
                    dx[(j / plane_out) * plane_in + a as usize] += gv;
                }
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = val(*logits);
                let (n, k) = (lv.dim(0), lv.dim(1));
                let scale = gd[0] / F::cst(n as f64);
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    row[l] -= F::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, Tensor::new(lv.shape(), d).unwrap());
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), gd[0])),
        }
    }

    /// Adds the gradients of every tracked parameter into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = self.grad(*v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Running-statistics updates recorded by train-mode batch norms.
    pub fn state_updates(&self) -> &[(String, Tensor<F>)] {
        &self.state_updates
    }

    pub fn commit_state(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (name, value) in &self.state_updates {
            store.set_value(name, value.clone())?;
        }
        Ok(())
    }
}

pub(crate) fn softmax_row<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn swap_last2_data<F: Real>(d: &[F], n: usize, a: usize, b: usize) -> Vec<F> {
    let mut out = vec![F::zero(); d.len()];
    for i in 0..n {
        let src = &d[i * a * b..(i + 1) * a * b];
        let dst = &mut out[i * a * b..(i + 1) * a * b];
        for p in 0..a {
            for q in 0..b {
                dst[q * a + p] = src[p * b + q];
            }
        }
    }
    out
}
