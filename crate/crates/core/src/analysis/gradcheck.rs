//! Central finite-difference checks of tape gradients at f64.
//!
//! Each case builds an output from differentiable inputs and parameters; the
//! checked loss is `sum(R * output)` for a fixed random `R`, so every output
//! element contributes with a distinct weight.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{BlockVariant, NetConfig, StemConfig, TemporalModuleKind};
use crate::blocks::{register_layer, ta_block_forward};
use crate::error::{Result, TamError};
use crate::nn::{normal, Ctx};
use crate::params::{ParamKind, ParamStore};
use crate::tam::{self, TamConfig};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

type Builder = Box<dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// One differentiable computation with its inputs and parameters.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<(String, Tensor<f64>)>,
    pub params: ParamStore<f64>,
    pub mode: Mode,
    build: Builder,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<(String, Tensor<f64>)>,
        params: ParamStore<f64>,
        build: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            params,
            mode: Mode::Train,
            build: Box::new(build),
        }
    }

    fn output(&self, inputs: &[Tensor<f64>], params: &ParamStore<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let mut ctx = Ctx::new(&mut tape, params, self.mode);
        let y = (self.build)(&mut ctx, &vars)?;
        Ok(tape.value(y).clone())
    }

    fn loss(&self, inputs: &[Tensor<f64>], params: &ParamStore<f64>, r: &Tensor<f64>) -> Result<f64> {
        let y = self.output(inputs, params)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorError {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub op: String,
    pub seed: u64,
    pub tolerance: f64,
    pub tensors: Vec<TensorError>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// `max|a - n| / max(max|a|, max|n|, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-6, f64::max);
    diff / scale
}

/// Compares tape gradients against central differences for every input and
/// every trainable parameter of `case`.
pub fn check(case: &GradCase, seed: u64, tolerance: f64) -> Result<GradReport> {
    let inputs: Vec<Tensor<f64>> = case.inputs.iter().map(|(_, t)| t.clone()).collect();
    let probe = case.output(&inputs, &case.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r: Tensor<f64> = normal(probe.shape(), 1.0, &mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input_with_grad(t.clone())).collect();
    let loss = {
        let mut ctx = Ctx::new(&mut tape, &case.params, case.mode);
        let y = (case.build)(&mut ctx, &vars)?;
        let rv = ctx.tape.input(r.clone());
        let p = ctx.tape.mul(y, rv)?;
        ctx.tape.sum(p)?
    };
    tape.backward(loss)?;
    let mut grads = case.params.clone();
    grads.zero_grads();
    tape.accumulate_into(&mut grads)?;

    let mut tensors = Vec::new();
    for (i, (name, t)) in case.inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        let mut work = inputs.clone();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let base = t.data()[j];
            work[i].data_mut()[j] = base + STEP;
            let up = case.loss(&work, &case.params, &r)?;
            work[i].data_mut()[j] = base - STEP;
            let down = case.loss(&work, &case.params, &r)?;
            work[i].data_mut()[j] = base;
            *slot = (up - down) / (2.0 * STEP);
        }
        tensors.push(TensorError {
            name: name.clone(),
            numel: t.numel(),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    let names: Vec<String> = case
        .params
        .iter()
        .filter(|(_, e)| e.trainable())
        .map(|(n, _)| n.to_string())
        .collect();
    let mut work = case.params.clone();
    for name in names {
        let analytic = grads.grad(&name)?.data().to_vec();
        let n = analytic.len();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let base = work.value(&name)?.data()[j];
            work.entry_mut(&name).expect("listed").value.data_mut()[j] = base + STEP;
            let up = case.loss(&inputs, &work, &r)?;
            work.entry_mut(&name).expect("listed").value.data_mut()[j] = base - STEP;
            let down = case.loss(&inputs, &work, &r)?;
            work.entry_mut(&name).expect("listed").value.data_mut()[j] = base;
            *slot = (up - down) / (2.0 * STEP);
        }
        tensors.push(TensorError {
            rel_error: relative_error(&analytic, &numeric),
            name,
            numel: n,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        op: case.name.clone(),
        seed,
        tolerance,
        pass: max_rel_error < tolerance,
        max_rel_error,
        tensors,
    })
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(shape, 1.0, rng)
}

fn input(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (name.to_string(), t)
}

/// Names accepted by [`case`], in suite order.
pub const OPS: &[&str] = &[
    "linear",
    "conv1d",
    "conv2d",
    "conv2d_strided",
    "conv3d",
    "add_bias",
    "batch_norm",
    "batch_norm_1d",
    "relu",
    "sigmoid",
    "softmax",
    "add",
    "mul",
    "broadcast_mul",
    "mean",
    "swap",
    "aggregate",
    "aggregate_shared",
    "temporal_pool",
    "shift",
    "max_pool",
    "cross_entropy",
    "spatial_squeeze",
    "local_branch",
    "global_branch",
    "tam",
    "tam_reversed",
    "ta_block",
];

fn bn_case(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let c = shape[1];
    let mut p = ParamStore::new();
    p.insert("bn.gamma", normal(&[c], 1.0, rng), ParamKind::Norm)?;
    p.insert("bn.beta", normal(&[c], 1.0, rng), ParamKind::Norm)?;
    p.insert("bn.running_mean", Tensor::zeros(&[c]), ParamKind::State)?;
    p.insert("bn.running_var", Tensor::ones(&[c]), ParamKind::State)?;
    Ok(GradCase::new(name, vec![input("x", rand_t(shape, rng))], p, |ctx, v| {
        ctx.batch_norm("bn", v[0])
    }))
}

fn weights(entries: &[(&str, &[usize], ParamKind)], rng: &mut ChaCha8Rng) -> Result<ParamStore<f64>> {
    let mut p = ParamStore::new();
    for (n, s, k) in entries {
        p.insert(*n, rand_t(s, rng), *k)?;
    }
    Ok(p)
}

fn block_config() -> NetConfig {
    let mut cfg = NetConfig::toy(TemporalModuleKind::Tam);
    cfg.in_channels = 8;
    cfg.frame_size = 4;
    cfg.stem = StemConfig {
        width: 8,
        kernel: 1,
        stride: 1,
        max_pool: false,
    };
    cfg.widths = vec![8];
    cfg.blocks = vec![1];
    cfg.variant = BlockVariant::B;
    cfg
}

/// Builds the named case with values drawn from `seed`.
pub fn case(op: &str, seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let none = ParamStore::<f64>::new;
    let tam_cfg = TamConfig::new(4, 8);
    Ok(match op {
        "linear" => GradCase::new(
            op,
            vec![input("x", rand_t(&[2, 3, 5], r))],
            weights(&[("w", &[5, 4], ParamKind::Weight)], r)?,
            |ctx, v| {
                let w = ctx.param("w")?;
                ctx.tape.fully_connected(v[0], w)
            },
        ),
        "conv1d" => GradCase::new(
            op,
            vec![input("x", rand_t(&[2, 3, 6], r))],
            weights(&[("w", &[4, 3, 3], ParamKind::Weight)], r)?,
            |ctx, v| {
                let w = ctx.param("w")?;
                ctx.tape.conv1d_temporal(v[0], w, 1)
            },
        ),
        "conv2d" => GradCase::new(
            op,
            vec![input("x", rand_t(&[2, 3, 2, 5, 5], r))],
            weights(&[("w", &[4, 3, 3, 3], ParamKind::Weight)], r)?,
            |ctx, v| {
                let w = ctx.param("w")?;
                ctx.tape.conv2d(v[0], w, 1, 1)
            },
        ),
        "conv2d_strided" => GradCase::new(
            op,
            vec![input("x", rand_t(&[2, 2, 6, 6], r))],
            weights(&[("w", &[3, 2, 3, 3], ParamKind::Weight)], r)?,
            |ctx, v| {
                let w = ctx.param("w")?;
                ctx.tape.conv2d(v[0], w, 2, 1)
            },
        ),
        "conv3d" => GradCase::new(
            op,
            vec![input("x", rand_t(&[2, 2, 4, 4, 4], r))],
            weights(&[("w", &[3, 2, 3, 3, 3], ParamKind::Weight)], r)?,
            |ctx, v| {
                let w = ctx.param("w")?;
                ctx.tape.conv3d(v[0], w, 1, (1, 1, 1))
            },
        ),
        "add_bias" => GradCase::new(
            op,
            vec![input("x", rand_t(&[2, 3, 4], r))],
            weights(&[("b", &[3], ParamKind::Bias)], r)?,
            |ctx, v| {
                let b = ctx.param("b")?;
                ctx.tape.add_bias(v[0], b)
            },
        ),
        "batch_norm" => bn_case(op, &[2, 3, 2, 3, 3], r)?,
        "batch_norm_1d" => bn_case(op, &[2, 3, 5], r)?,
        "relu" => GradCase::new(op, vec![input("x", rand_t(&[3, 7], r))], none(), |ctx, v| ctx.tape.relu(v[0])),
        "sigmoid" => GradCase::new(op, vec![input("x", rand_t(&[3, 7], r))], none(), |ctx, v| ctx.tape.sigmoid(v[0])),
        "softmax" => GradCase::new(op, vec![input("x", rand_t(&[3, 5], r))], none(), |ctx, v| ctx.tape.softmax(v[0])),
        "add" => GradCase::new(
            op,
            vec![input("a", rand_t(&[2, 5], r)), input("b", rand_t(&[2, 5], r))],
            none(),
            |ctx, v| ctx.tape.add(v[0], v[1]),
        ),
        "mul" => GradCase::new(
            op,
            vec![input("a", rand_t(&[2, 5], r)), input("b", rand_t(&[2, 5], r))],
            none(),
            |ctx, v| ctx.tape.mul(v[0], v[1]),
        ),
        "broadcast_mul" => GradCase::new(
            op,
            vec![input("x", rand_t(&[2, 3, 4, 2, 2], r)), input("s", rand_t(&[2, 3, 4], r))],
            none(),
            |ctx, v| ctx.tape.broadcast_mul(v[0], v[1]),
        ),
        "mean" => GradCase::new(op, vec![input("x", rand_t(&[2, 3, 4, 5], r))], none(), |ctx, v| {
            ctx.tape.mean_trailing(v[0], 2)
        }),
        "swap" => GradCase::new(op, vec![input("x", rand_t(&[2, 3, 4], r))], none(), |ctx, v| ctx.tape.swap_last2(v[0])),
        "aggregate" => GradCase::new(
            op,
            vec![input("z", rand_t(&[2, 3, 6, 2, 2], r)), input("theta", rand_t(&[2, 3, 3], r))],
            none(),
            |ctx, v| ctx.tape.adaptive_aggregate(v[0], v[1]),
        ),
        "aggregate_shared" => GradCase::new(
            op,
            vec![input("z", rand_t(&[2, 3, 6, 2, 2], r)), input("theta", rand_t(&[3, 5], r))],
            none(),
            |ctx, v| ctx.tape.adaptive_aggregate(v[0], v[1]),
        ),
        "temporal_pool" => GradCase::new(op, vec![input("x", rand_t(&[2, 3, 6, 2, 2], r))], none(), |ctx, v| {
            ctx.tape.temporal_avg_pool(v[0], 3)
        }),
        "shift" => GradCase::new(op, vec![input("x", rand_t(&[2, 8, 5, 2, 2], r))], none(), |ctx, v| {
            ctx.tape.temporal_shift(v[0], 2)
        }),
        "max_pool" => GradCase::new(op, vec![input("x", rand_t(&[2, 2, 6, 6], r))], none(), |ctx, v| {
            ctx.tape.max_pool2d(v[0], 3, 2, 1)
        }),
        "cross_entropy" => GradCase::new(op, vec![input("logits", rand_t(&[4, 5], r))], none(), |ctx, v| {
            ctx.tape.cross_entropy(v[0], &[0, 3, 4, 3])
        }),
        "spatial_squeeze" => GradCase::new(op, vec![input("x", rand_t(&[2, 3, 4, 3, 3], r))], none(), |ctx, v| {
            tam::spatial_squeeze(ctx.tape, v[0])
        }),
        "local_branch" | "global_branch" | "tam" | "tam_reversed" => {
            let mut cfg = tam_cfg;
            if op == "tam_reversed" {
                cfg.order = tam::TamOrder::Reversed;
            }
            let mut p = ParamStore::new();
            tam::register_params(&mut p, "m", &cfg, r)?;
            // Non-trivial normalization parameters so their gradients matter.
            for n in ["m.local.bn.gamma", "m.local.bn.beta"] {
                let t = normal(&[cfg.reduced()], 1.0, r);
                p.set_value(n, t)?;
            }
            let name = op.to_string();
            if op == "local_branch" || op == "global_branch" {
                GradCase::new(op, vec![input("sq", rand_t(&[2, 4, 8], r))], p, move |ctx, v| {
                    if name == "local_branch" {
                        tam::local_branch(ctx, "m", v[0], &cfg)
                    } else {
                        tam::global_branch(ctx, "m", v[0], &cfg)
                    }
                })
            } else {
                GradCase::new(op, vec![input("x", rand_t(&[2, 4, 8, 3, 3], r))], p, move |ctx, v| {
                    Ok(tam::tam_forward(ctx, "m", v[0], &cfg)?.output)
                })
            }
        }
        "ta_block" => {
            let cfg = block_config();
            let plan = crate::arch::describe(&cfg)?;
            let block = plan.blocks[0].clone();
            let mut p = ParamStore::new();
            for layer in block.main.iter().chain(&block.shortcut) {
                register_layer(&mut p, layer, r)?;
            }
            // Zero-initialized residual gammas would hide the main path.
            let names: Vec<String> = p
                .iter()
                .filter(|(n, e)| n.ends_with(".gamma") && e.kind == ParamKind::Norm)
                .map(|(n, _)| n.to_string())
                .collect();
            for n in names {
                let c = p.value(&n)?.numel();
                p.set_value(&n, normal(&[c], 1.0, r))?;
            }
            let x = rand_t(&[2, 8, 8, 4, 4], r);
            GradCase::new(op, vec![input("x", x)], p, move |ctx, v| ta_block_forward(ctx, &block, v[0]))
        }
        other => {
            return Err(TamError::config(format!(
                "unknown gradcheck op `{other}`; valid: {}",
                OPS.join(", ")
            )))
        }
    })
}

/// Runs `ops` (all when empty) for each seed.
pub fn suite(ops: &[&str], seeds: &[u64], tolerance: f64) -> Result<Vec<GradReport>> {
    let ops: Vec<&str> = if ops.is_empty() { OPS.to_vec() } else { ops.to_vec() };
    let mut out = Vec::new();
    for op in ops {
        for &seed in seeds {
            out.push(check(&case(op, seed)?, seed, tolerance)?);
        }
    }
    Ok(out)
}
