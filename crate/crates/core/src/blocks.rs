//! Residual bottleneck blocks with pluggable temporal modules, the baseline
//! temporal operators, and concrete networks built from a [`NetworkPlan`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{describe, BlockPlan, ChannelwiseInit, LayerKind, LayerSpec, NetConfig, NetworkPlan};
use crate::error::{Result, TamError};
use crate::nn::{add_batch_norm, kaiming, normal, Ctx};
use crate::params::{ParamKind, ParamStore};
use crate::tam::{self, TamConfig, TamParamNames};

use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Real, Tensor};

pub use crate::arch::{BlockVariant, TemporalModuleKind as Kind};

/// Kernel of a video-invariant temporal convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalConvKind {
    /// `(C, C, 3)` weight mixing channels.
    Full,
    /// `(C, 3)` weight, one kernel per channel.
    Channelwise,
}

/// Temporal channel shift with `floor(C * fraction)` channels moved each way.
pub fn tsm_shift<F: Real>(tape: &mut Tape<F>, x: Var, fraction: f64) -> Result<Var> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    let fold = (c as f64 * fraction).floor() as usize;
    tape.temporal_shift(x, fold)
}

/// Shared-kernel temporal convolution on a `(N, C, T, H, W)` clip with zero
/// padding 1. `weight` is `(C, C, K, 1, 1)` for [`TemporalConvKind::Full`]
/// or `(C, K)` for the channel-wise variant.
pub fn temporal_conv_module<F: Real>(tape: &mut Tape<F>, x: Var, weight: Var, kind: TemporalConvKind) -> Result<Var> {
    match kind {
        TemporalConvKind::Channelwise => tape.adaptive_aggregate(x, weight),
        TemporalConvKind::Full => {
            let ws = tape.shape(weight).to_vec();
            if ws.len() != 5 || ws[3] != 1 || ws[4] != 1 || ws[2] % 2 == 0 {
                return Err(TamError::shape("temporal_conv", format!("expected (C', C, K, 1, 1) with odd K, got {ws:?}")));
            }
            tape.conv3d(x, weight, 1, (ws[2] / 2, 0, 0))
        }
    }
}

/// Channel gate from `(T, H, W)`-squeezed features through two fully
/// connected layers (`C -> C/r -> C`, with biases) and a sigmoid. The gate is
/// constant over time.
pub fn se_attention<F: Real>(ctx: &mut Ctx<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let xs = ctx.tape.shape(x).to_vec();
    if xs.len() != 5 {
        return Err(TamError::shape("se_attention", format!("expected (N, C, T, H, W), got {xs:?}")));
    }
    let pooled = ctx.tape.mean_trailing(x, 3)?;
    let w1 = ctx.param(&format!("{prefix}.fc1.weight"))?;
    let b1 = ctx.param(&format!("{prefix}.fc1.bias"))?;
    let w2 = ctx.param(&format!("{prefix}.fc2.weight"))?;
    let b2 = ctx.param(&format!("{prefix}.fc2.bias"))?;
    let h = ctx.tape.fully_connected(pooled, w1)?;
    let h = ctx.tape.add_bias(h, b1)?;
    let h = ctx.tape.relu(h)?;
    let g = ctx.tape.fully_connected(h, w2)?;
    let g = ctx.tape.add_bias(g, b2)?;
    let gate = ctx.tape.sigmoid(g)?;
    ctx.tape.broadcast_mul(x, gate)
}

pub fn register_se<F: Real>(store: &mut ParamStore<F>, prefix: &str, channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(TamError::config(format!("SE reduction {reduction} does not divide {channels} channels")));
    }
    let r = channels / reduction;
    store.insert(format!("{prefix}.fc1.weight"), kaiming(&[channels, r], channels, rng), ParamKind::Weight)?;
    store.insert(format!("{prefix}.fc1.bias"), Tensor::zeros(&[r]), ParamKind::Bias)?;
    store.insert(format!("{prefix}.fc2.weight"), kaiming(&[r, channels], r, rng), ParamKind::Weight)?;
    store.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(&[channels]), ParamKind::Bias)?;
    Ok(())
}

fn conv_weight_shape(layer: &LayerSpec) -> Option<Vec<usize>> {
    match layer.kind {
        LayerKind::Conv { kt, kh, kw, .. } => Some(if kt == 1 {
            vec![layer.output.c, layer.input.c, kh, kw]
        } else {
            vec![layer.output.c, layer.input.c, kt, kh, kw]
        }),
        LayerKind::TemporalConv { k } => Some(vec![layer.output.c, layer.input.c, k, 1, 1]),
        _ => None,
    }
}

/// Allocates the parameters of one planned layer.
pub fn register_layer<F: Real>(store: &mut ParamStore<F>, layer: &LayerSpec, rng: &mut ChaCha8Rng) -> Result<()> {
    let name = &layer.name;
    match &layer.kind {
        LayerKind::Conv { .. } | LayerKind::TemporalConv { .. } => {
            let shape = conv_weight_shape(layer).expect("conv layer");
            let fan_in: usize = shape[1..].iter().product();
            store.insert(format!("{name}.weight"), kaiming(&shape, fan_in, rng), ParamKind::Weight)?;
            if matches!(layer.kind, LayerKind::Conv { bias: true, .. }) {
                store.insert(format!("{name}.bias"), Tensor::zeros(&[layer.output.c]), ParamKind::Bias)?;
            }
        }
        LayerKind::BatchNorm { zero_gamma } => {
            add_batch_norm(store, name, layer.input.c, if *zero_gamma { 0.0 } else { 1.0 })?;
        }
        LayerKind::Channelwise { k, init } => {
            let (c, k) = (layer.input.c, *k);
            let fold = c / 8;
            let mid = k / 2;
            let w = Tensor::from_fn(&[c, k], |i| {
                let (ch, tap) = (i / k, i % k);
                let hot = match init {
                    ChannelwiseInit::Identity => mid,
                    ChannelwiseInit::Shift if ch < fold => 0,
                    ChannelwiseInit::Shift if ch < 2 * fold => k - 1,
                    ChannelwiseInit::Shift => mid,
                };
                if tap == hot {
                    F::one()
                } else {
                    F::zero()
                }
            });
            store.insert(format!("{name}.weight"), w, ParamKind::Weight)?;
        }
        LayerKind::Tam { cfg, kind, se_reduction } => {
            let names = TamParamNames::new(name);
            match kind {
                Kind::LocalOnly => tam::register_local(store, cfg, &names, rng)?,
                Kind::GlobalOnly => tam::register_global(store, cfg, &names, rng)?,
                Kind::GlobalSe => {
                    tam::register_global(store, cfg, &names, rng)?;
                    register_se(store, &format!("{name}.se"), cfg.channels, *se_reduction, rng)?;
                }
                _ => {
                    tam::register_local(store, cfg, &names, rng)?;
                    tam::register_global(store, cfg, &names, rng)?;
                }
            }
        }
        LayerKind::FrameLinear => {
            let (din, dout) = (layer.input.c, layer.output.c);
            store.insert(format!("{name}.weight"), normal(&[din, dout], (1.0 / din as f64).sqrt(), rng), ParamKind::Weight)?;
            store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]), ParamKind::Bias)?;
        }
        LayerKind::Relu
        | LayerKind::MaxPool { .. }
        | LayerKind::TemporalPool { .. }
        | LayerKind::Shift { .. }
        | LayerKind::GlobalPool
        | LayerKind::FrameAverage => {}
    }
    Ok(())
}

fn run_tam<F: Real>(ctx: &mut Ctx<'_, F>, name: &str, x: Var, cfg: &TamConfig, kind: Kind) -> Result<Var> {
    match kind {
        Kind::Tam | Kind::TamReversed => Ok(tam::tam_forward(ctx, name, x, cfg)?.output),
        Kind::GlobalOnly | Kind::GlobalSe => {
            let sq = tam::spatial_squeeze(ctx.tape, x)?;
            let theta = match ctx.overrides.theta.clone() {
                Some(row) => {
                    let (n, c) = (ctx.tape.shape(x)[0], cfg.channels);
                    let k = row.len();
                    ctx.tape.input(Tensor::from_fn(&[n, c, k], |i| row[i % k]))
                }
                None => tam::global_branch(ctx, name, sq, cfg)?,
            };
            let z = if kind == Kind::GlobalSe {
                se_attention(ctx, &format!("{name}.se"), x)?
            } else {
                x
            };
            let y = tam::adaptive_aggregate(ctx.tape, z, theta)?;
            if ctx.probe.is_some() {
                let t = ctx.tape.value(theta).clone();
                ctx.record(name, t, None);
            }
            Ok(y)
        }
        Kind::LocalOnly => {
            let sq = tam::spatial_squeeze(ctx.tape, x)?;
            let v = tam::local_branch(ctx, name, sq, cfg)?;
            tam::excite(ctx.tape, x, v)
        }
        other => Err(TamError::config(format!("{other:?} is not a TAM variant"))),
    }
}

/// Applies one planned layer.
pub fn run_layer<F: Real>(ctx: &mut Ctx<'_, F>, layer: &LayerSpec, x: Var) -> Result<Var> {
    let name = &layer.name;
    match &layer.kind {
        LayerKind::Conv { kt, kh, kw, stride, bias } => {
            let w = ctx.param(&format!("{name}.weight"))?;
            let y = if *kt == 1 {
                ctx.tape.conv2d(x, w, *stride, kh / 2)?
            } else {
                ctx.tape.conv3d(x, w, *stride, (kt / 2, kh / 2, kw / 2))?
            };
            if *bias {
                let b = ctx.param(&format!("{name}.bias"))?;
                ctx.tape.add_bias(y, b)
            } else {
                Ok(y)
            }
        }
        LayerKind::BatchNorm { .. } => ctx.batch_norm(name, x),
        LayerKind::Relu => ctx.tape.relu(x),
        LayerKind::MaxPool { k, stride, pad } => ctx.tape.max_pool2d(x, *k, *stride, *pad),
        LayerKind::TemporalPool { k } => ctx.tape.temporal_avg_pool(x, *k),
        LayerKind::TemporalConv { .. } => {
            let w = ctx.param(&format!("{name}.weight"))?;
            temporal_conv_module(ctx.tape, x, w, TemporalConvKind::Full)
        }
        LayerKind::Channelwise { .. } => {
            let w = ctx.param(&format!("{name}.weight"))?;
            let y = temporal_conv_module(ctx.tape, x, w, TemporalConvKind::Channelwise)?;
            if ctx.probe.is_some() {
                let n = ctx.tape.shape(x)[0];
                let wv = ctx.tape.value(w);
                let per = wv.numel();
                let theta = Tensor::from_fn(&[n, wv.dim(0), wv.dim(1)], |i| wv.data()[i % per]);
                ctx.record(name, theta, None);
            }
            Ok(y)
        }
        LayerKind::Shift { fold } => ctx.tape.temporal_shift(x, *fold),
        LayerKind::Tam { cfg, kind, .. } => run_tam(ctx, name, x, cfg, *kind),
        LayerKind::GlobalPool => ctx.tape.spatial_mean(x),
        LayerKind::FrameLinear => {
            let w = ctx.param(&format!("{name}.weight"))?;
            let b = ctx.param(&format!("{name}.bias"))?;
            let frames_first = ctx.tape.swap_last2(x)?;
            let scores = ctx.tape.fully_connected(frames_first, w)?;
            let scores = ctx.tape.swap_last2(scores)?;
            ctx.tape.add_bias(scores, b)
        }
        LayerKind::FrameAverage => ctx.tape.mean_trailing(x, 1),
    }
}

/// Residual bottleneck with its temporal module: main path, optional
/// projection shortcut, addition and ReLU.
pub fn ta_block_forward<F: Real>(ctx: &mut Ctx<'_, F>, block: &BlockPlan, x: Var) -> Result<Var> {
    let mut h = x;
    for layer in &block.main {
        h = run_layer(ctx, layer, h)?;
    }
    let mut s = x;
    for layer in &block.shortcut {
        s = run_layer(ctx, layer, s)?;
    }
    if ctx.tape.shape(h) != ctx.tape.shape(s) {
        return Err(TamError::shape(
            "ta_block",
            format!("{}: residual {:?} vs main {:?}", block.name, ctx.tape.shape(s), ctx.tape.shape(h)),
        ));
    }
    let y = ctx.tape.add(h, s)?;
    ctx.tape.relu(y)
}

/// Concrete network: configuration, plan and parameters.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: NetConfig,
    pub plan: NetworkPlan,
    pub params: ParamStore<F>,
}

/// Allocates a network for `cfg` with weights drawn from `seed`.
pub fn build_network<F: Real>(cfg: &NetConfig, seed: u64) -> Result<Model<F>> {
    let plan = describe(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for layer in plan.layers() {
        register_layer(&mut params, layer, &mut rng)?;
    }
    Ok(Model {
        config: cfg.clone(),
        plan,
        params,
    })
}

impl<F: Real> Model<F> {
    /// Clip logits `(N, classes)` for a `(N, C, T, H, W)` input.
    pub fn forward(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let xs = ctx.tape.shape(x).to_vec();
        if xs.len() != 5 || xs[1] != self.config.in_channels || xs[2] != self.config.frames {
            return Err(TamError::shape(
                "model",
                format!(
                    "input {xs:?} vs expected (N, {}, {}, H, W)",
                    self.config.in_channels, self.config.frames
                ),
            ));
        }
        let mut h = x;
        for layer in &self.plan.stem {
            h = run_layer(ctx, layer, h)?;
        }
        for block in &self.plan.blocks {
            h = ta_block_forward(ctx, block, h)?;
        }
        for layer in &self.plan.head {
            h = run_layer(ctx, layer, h)?;
        }
        Ok(h)
    }

    /// Logits for a clip batch without keeping the graph.
    pub fn predict(&self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let mut ctx = Ctx::new(&mut tape, &self.params, mode);
        let y = self.forward(&mut ctx, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn temporal_layer_names(&self) -> Vec<String> {
        self.plan.temporal_layers().map(|l| l.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal(&[n, 1, 8, 32, 32], 1.0, &mut rng)
    }

    #[test]
    fn logits_have_class_shape() {
        let m = build_network::<f64>(&NetConfig::toy(Kind::Tam), 1).unwrap();
        let y = m.predict(&clip(2, 3), Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 8]);
    }

    #[test]
    fn every_kind_builds_and_runs() {
        for kind in [
            Kind::None,
            Kind::AvgPool,
            Kind::TConv,
            Kind::ChannelwiseTConv,
            Kind::Shift,
            Kind::Inflate3x1x1,
            Kind::Tam,
            Kind::TamReversed,
            Kind::GlobalOnly,
            Kind::LocalOnly,
        ] {
            let m = build_network::<f64>(&NetConfig::toy(kind), 2).unwrap();
            let y = m.predict(&clip(2, 4), Mode::Train).unwrap();
            assert_eq!(y.shape(), &[2, 8], "{kind:?}");
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = build_network::<f64>(&NetConfig::toy(Kind::None), 1).unwrap();
        let bad = Tensor::<f64>::zeros(&[1, 3, 8, 32, 32]);
        assert!(matches!(m.predict(&bad, Mode::Eval), Err(TamError::Shape { .. })));
    }
}
