//! Temporal adaptive module.
//!
//! A clip `X` of shape `(N, C, T, H, W)` is squeezed spatially to an
//! `(N, C, T)` signal that feeds two branches:
//!
//! * the local branch, `Conv1D(k=3, C -> C/beta) -> BN -> ReLU ->
//!   Conv1D(k=1, C/beta -> C) -> sigmoid`, giving a location-sensitive
//!   importance map `V` in `(0, 1)`;
//! * the global branch, two fully connected layers shared by all channels
//!   (`T -> alpha*T -> K`) with a ReLU in between and a softmax at the end,
//!   giving one aggregation kernel `Theta_c` per channel and video.
//!
//! The output is `Y = Theta (*) (V . X)`: the excited clip is convolved in
//! time, channel by channel, with each video's own kernel (zero padded).
//! The reversed order computes `Y = V . (Theta (*) X)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TamError};
use crate::nn::{add_batch_norm, kaiming, normal, Ctx};
use crate::params::{ParamKind, ParamStore};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TamOrder {
    /// Excite with the local branch, then aggregate with the global kernel.
    #[default]
    Standard,
    /// Aggregate first, then excite.
    Reversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamConfig {
    pub channels: usize,
    pub frames: usize,
    pub kernel_size: usize,
    pub alpha: usize,
    pub beta: usize,
    pub order: TamOrder,
    /// Batch norm between the two global-branch fully connected layers.
    pub global_norm: bool,
}

impl TamConfig {
    pub fn new(channels: usize, frames: usize) -> Self {
        Self {
            channels,
            frames,
            kernel_size: 3,
            alpha: 2,
            beta: 4,
            order: TamOrder::Standard,
            global_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.frames == 0 {
            return Err(TamError::config("TAM needs at least one channel and one frame"));
        }
        if self.beta == 0 || self.channels % self.beta != 0 {
            return Err(TamError::config(format!(
                "TAM channels {} not divisible by beta {}",
                self.channels, self.beta
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(TamError::config(format!("TAM kernel size {} must be odd", self.kernel_size)));
        }
        if self.kernel_size > self.frames {
            return Err(TamError::config(format!(
                "TAM kernel size {} exceeds {} frames",
                self.kernel_size, self.frames
            )));
        }
        if self.alpha == 0 {
            return Err(TamError::config("TAM alpha must be >= 1"));
        }
        Ok(())
    }

    pub fn reduced(&self) -> usize {
        self.channels / self.beta
    }

    pub fn hidden(&self) -> usize {
        self.alpha * self.frames
    }

    /// Number of trainable scalars the module adds.
    pub fn num_params(&self) -> usize {
        let (c, r, t, h, k) = (self.channels, self.reduced(), self.frames, self.hidden(), self.kernel_size);
        let local = c * r * 3 + 2 * r + r * c + c;
        let global = t * h + h * k + if self.global_norm { 2 * h } else { 0 };
        local + global
    }
}

/// Spatially squeezed clip, `(N, C, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezedSignal<F>(pub Tensor<F>);

/// Importance weights `V`, `(N, C, T)`, every entry in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap<F>(Tensor<F>);

impl<F: Real> ImportanceMap<F> {
    pub fn new(values: Tensor<F>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(TamError::shape("importance_map", format!("expected (N, C, T), got {:?}", values.shape())));
        }
        if let Some(bad) = values.data().iter().find(|&&v| !(v > F::zero() && v < F::one())) {
            return Err(TamError::config(format!("importance weight {bad} outside (0, 1)")));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }
}

/// Aggregation kernels `Theta`, `(N, C, K)`, every row on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveKernel<F>(Tensor<F>);

impl<F: Real> AdaptiveKernel<F> {
    /// Checks non-negativity and unit row sums within `tol`.
    pub fn new(values: Tensor<F>, tol: f64) -> Result<Self> {
        if values.rank() != 3 {
            return Err(TamError::shape("adaptive_kernel", format!("expected (N, C, K), got {:?}", values.shape())));
        }
        let k = values.dim(2);
        for row in values.data().chunks(k.max(1)) {
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            if row.iter().any(|&v| v < F::zero()) || (sum - 1.0).abs() > tol {
                return Err(TamError::config(format!("kernel row {row:?} is not on the simplex")));
            }
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }
}

/// Parameter names for a module registered under `prefix`.
pub struct TamParamNames {
    pub conv1: String,
    pub bn: String,
    pub conv2: String,
    pub conv2_bias: String,
    pub fc1: String,
    pub fc2: String,
    pub norm: String,
}

impl TamParamNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            conv1: format!("{prefix}.local.conv1.weight"),
            bn: format!("{prefix}.local.bn"),
            conv2: format!("{prefix}.local.conv2.weight"),
            conv2_bias: format!("{prefix}.local.conv2.bias"),
            fc1: format!("{prefix}.global.fc1.weight"),
            fc2: format!("{prefix}.global.fc2.weight"),
            norm: format!("{prefix}.global.norm"),
        }
    }
}

/// Allocates the module's parameters. Convolutions and the first fully
/// connected layer use fan-in normal init; the second fully connected layer
/// starts small so initial kernels are close to uniform.
pub fn register_params<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &TamConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let names = TamParamNames::new(prefix);
    register_local(store, cfg, &names, rng)?;
    register_global(store, cfg, &names, rng)
}

/// Local branch parameters only.
pub fn register_local<F: Real>(store: &mut ParamStore<F>, cfg: &TamConfig, names: &TamParamNames, rng: &mut impl Rng) -> Result<()> {
    let (c, r) = (cfg.channels, cfg.reduced());
    store.insert(names.conv1.clone(), kaiming(&[r, c, 3], c * 3, rng), ParamKind::Weight)?;
    add_batch_norm(store, &names.bn, r, 1.0)?;
    store.insert(names.conv2.clone(), kaiming(&[c, r, 1], r, rng), ParamKind::Weight)?;
    store.insert(names.conv2_bias.clone(), Tensor::zeros(&[c]), ParamKind::Bias)
}

/// Global branch parameters only.
pub fn register_global<F: Real>(store: &mut ParamStore<F>, cfg: &TamConfig, names: &TamParamNames, rng: &mut impl Rng) -> Result<()> {
    let (t, h, k) = (cfg.frames, cfg.hidden(), cfg.kernel_size);
    store.insert(names.fc1.clone(), kaiming(&[t, h], t, rng), ParamKind::Weight)?;
    store.insert(names.fc2.clone(), normal(&[h, k], 0.1 / (h as f64).sqrt(), rng), ParamKind::Weight)?;
    if cfg.global_norm {
        add_batch_norm(store, &names.norm, h, 1.0)?;
    }
    Ok(())
}

/// Global spatial average pooling, `(N, C, T, H, W) -> (N, C, T)`.
pub fn spatial_squeeze<F: Real>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    tape.spatial_mean(x)
}

fn check_signal<F: Real>(tape: &Tape<F>, sq: Var, cfg: &TamConfig) -> Result<()> {
    let s = tape.shape(sq);
    if s.len() != 3 || s[1] != cfg.channels || s[2] != cfg.frames {
        return Err(TamError::shape(
            "tam",
            format!("squeezed signal {s:?} vs configured (C, T) = ({}, {})", cfg.channels, cfg.frames),
        ));
    }
    Ok(())
}

/// Importance map `V = sigmoid(conv_k1(relu(bn(conv_k3(sq)))))`.
pub fn local_branch<F: Real>(ctx: &mut Ctx<'_, F>, prefix: &str, sq: Var, cfg: &TamConfig) -> Result<Var> {
    cfg.validate()?;
    check_signal(ctx.tape, sq, cfg)?;
    let names = TamParamNames::new(prefix);
    let w1 = ctx.param(&names.conv1)?;
    let h = ctx.tape.conv1d_temporal(sq, w1, 1)?;
    let h = ctx.batch_norm(&names.bn, h)?;
    let h = ctx.tape.relu(h)?;
    let w2 = ctx.param(&names.conv2)?;
    let b2 = ctx.param(&names.conv2_bias)?;
    let h = ctx.tape.conv1d_temporal(h, w2, 0)?;
    let h = ctx.tape.add_bias(h, b2)?;
    ctx.tape.sigmoid(h)
}

/// Kernels `Theta_c = softmax(W2^T relu(W1^T sq_c))`, `(N, C, K)`; the same
/// weights are applied to every channel row.
pub fn global_branch<F: Real>(ctx: &mut Ctx<'_, F>, prefix: &str, sq: Var, cfg: &TamConfig) -> Result<Var> {
    cfg.validate()?;
    check_signal(ctx.tape, sq, cfg)?;
    let names = TamParamNames::new(prefix);
    let w1 = ctx.param(&names.fc1)?;
    let mut h = ctx.tape.fully_connected(sq, w1)?;
    if cfg.global_norm {
        let swapped = ctx.tape.swap_last2(h)?;
        let normed = ctx.batch_norm(&names.norm, swapped)?;
        h = ctx.tape.swap_last2(normed)?;
    }
    let h = ctx.tape.relu(h)?;
    let w2 = ctx.param(&names.fc2)?;
    let logits = ctx.tape.fully_connected(h, w2)?;
    ctx.tape.softmax(logits)
}

/// `Z = V . X` with `V` replicated over the spatial axes.
pub fn excite<F: Real>(tape: &mut Tape<F>, x: Var, v: Var) -> Result<Var> {
    let (xs, vs) = (tape.shape(x), tape.shape(v));
    if xs.len() != 5 || vs.len() != 3 || xs[..3] != vs[..] {
        return Err(TamError::shape("excite", format!("importance {vs:?} vs clip {xs:?} on (N, C, T)")));
    }
    tape.broadcast_mul(x, v)
}

/// `Y[c, t] = sum_k Theta[c, k] Z[c, t + k - (K-1)/2]`, zero padded in time.
pub fn adaptive_aggregate<F: Real>(tape: &mut Tape<F>, z: Var, theta: Var) -> Result<Var> {
    tape.adaptive_aggregate(z, theta)
}

fn forced<F: Real>(ctx: &mut Ctx<'_, F>, shape: [usize; 3], row: &[F]) -> Result<Var> {
    if row.len() != shape[2] {
        return Err(TamError::config(format!("forced kernel has {} taps, module uses {}", row.len(), shape[2])));
    }
    let t = Tensor::from_fn(&shape, |i| row[i % shape[2]]);
    Ok(ctx.tape.input(t))
}

/// Intermediate results of one module evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TamTrace {
    pub output: Var,
    pub importance: Var,
    pub kernel: Var,
}

/// Full module on a `(N, C, T, H, W)` clip, honoring any forced values in
/// `ctx.overrides` and recording kernels into `ctx.probe` under `prefix`.
pub fn tam_forward<F: Real>(ctx: &mut Ctx<'_, F>, prefix: &str, x: Var, cfg: &TamConfig) -> Result<TamTrace> {
    let xs = ctx.tape.shape(x).to_vec();
    if xs.len() != 5 || xs[1] != cfg.channels || xs[2] != cfg.frames {
        return Err(TamError::shape(
            "tam_forward",
            format!("clip {xs:?} vs configured (C, T) = ({}, {})", cfg.channels, cfg.frames),
        ));
    }
    let sq = spatial_squeeze(ctx.tape, x)?;
    let (n, c, t, k) = (xs[0], xs[1], xs[2], cfg.kernel_size);
    let importance = match ctx.overrides.importance {
        Some(v) => forced(ctx, [n, c, t], &vec![v; t])?,
        None => local_branch(ctx, prefix, sq, cfg)?,
    };
    let kernel = match ctx.overrides.theta.clone() {
        Some(row) => forced(ctx, [n, c, k], &row)?,
        None => global_branch(ctx, prefix, sq, cfg)?,
    };
    let output = match cfg.order {
        TamOrder::Standard => {
            let z = excite(ctx.tape, x, importance)?;
            adaptive_aggregate(ctx.tape, z, kernel)?
        }
        TamOrder::Reversed => {
            let a = adaptive_aggregate(ctx.tape, x, kernel)?;
            excite(ctx.tape, a, importance)?
        }
    };
    if ctx.probe.is_some() {
        let theta = ctx.tape.value(kernel).clone();
        let v = ctx.tape.value(importance).clone();
        ctx.record(prefix, theta, Some(v));
    }
    Ok(TamTrace {
        output,
        importance,
        kernel,
    })
}

/// Concrete result of evaluating one module outside a training graph.
#[derive(Debug, Clone)]
pub struct TamOutput<F> {
    pub output: Tensor<F>,
    pub importance: ImportanceMap<F>,
    pub kernel: AdaptiveKernel<F>,
}

/// Evaluates the module on a fresh tape and validates the branch outputs.
pub fn evaluate<F: Real>(
    x: &Tensor<F>,
    store: &ParamStore<F>,
    prefix: &str,
    cfg: &TamConfig,
    mode: Mode,
) -> Result<TamOutput<F>> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let mut ctx = Ctx::new(&mut tape, store, mode);
    let trace = tam_forward(&mut ctx, prefix, xv, cfg)?;
    let tol = if F::DTYPE == crate::DType::F64 { 1e-12 } else { 1e-6 };
    Ok(TamOutput {
        output: tape.value(trace.output).clone(),
        importance: ImportanceMap::new(tape.value(trace.importance).clone())?,
        kernel: AdaptiveKernel::new(tape.value(trace.kernel).clone(), tol)?,
    })
}
