//! Analytic parameter and FLOPs counts over layer plans.
//!
//! Convention: one multiply-accumulate is one FLOP. Convolutions and fully
//! connected layers are counted; batch norm, activations, pooling and
//! softmax are free. The temporal adaptive module is charged for its
//! channel-wise aggregation `C*T*H*W*K`, the excitation product `C*T*H*W`,
//! the local branch convolutions on the squeezed signal, and the global
//! branch's two fully connected layers, evaluated once per channel.

use serde::Serialize;

use crate::arch::{describe, describe_at, LayerKind, LayerSpec, NetConfig, NetworkPlan, TemporalModuleKind as Kind};
use crate::error::{Result, TamError};
use crate::tam::TamConfig;

pub const CONVENTION: &str =
    "1 multiply-accumulate = 1 FLOP; conv and fc counted; batch norm, activations, pooling and softmax excluded";

fn tam_local_params(c: &TamConfig) -> usize {
    let (ch, r) = (c.channels, c.reduced());
    ch * r * 3 + 2 * r + r * ch + ch
}

fn tam_global_params(c: &TamConfig) -> usize {
    let h = c.hidden();
    c.frames * h + h * c.kernel_size + if c.global_norm { 2 * h } else { 0 }
}

fn se_params(c: usize, reduction: usize) -> usize {
    let r = c / reduction.max(1);
    c * r + r + r * c + c
}

/// Trainable scalars of one layer.
pub fn layer_params(layer: &LayerSpec) -> usize {
    let (cin, cout) = (layer.input.c, layer.output.c);
    match &layer.kind {
        LayerKind::Conv { kt, kh, kw, bias, .. } => cout * cin * kt * kh * kw + if *bias { cout } else { 0 },
        LayerKind::BatchNorm { .. } => 2 * cin,
        LayerKind::TemporalConv { k } => cout * cin * k,
        LayerKind::Channelwise { k, .. } => cin * k,
        LayerKind::Tam { cfg, kind, se_reduction } => match kind {
            Kind::LocalOnly => tam_local_params(cfg),
            Kind::GlobalOnly => tam_global_params(cfg),
            Kind::GlobalSe => tam_global_params(cfg) + se_params(cfg.channels, *se_reduction),
            _ => tam_local_params(cfg) + tam_global_params(cfg),
        },
        LayerKind::FrameLinear => cin * cout + cout,
        LayerKind::Relu
        | LayerKind::MaxPool { .. }
        | LayerKind::TemporalPool { .. }
        | LayerKind::Shift { .. }
        | LayerKind::GlobalPool
        | LayerKind::FrameAverage => 0,
    }
}

/// Multiply-accumulates of one layer for a single clip.
pub fn layer_flops(layer: &LayerSpec) -> u64 {
    let i = layer.input;
    let o = layer.output;
    let out_pos = o.positions() as u64;
    let in_pos = i.positions() as u64;
    let (cin, cout) = (i.c as u64, o.c as u64);
    match &layer.kind {
        LayerKind::Conv { kt, kh, kw, .. } => cout * cin * (kt * kh * kw) as u64 * out_pos,
        LayerKind::TemporalConv { k } => cout * cin * *k as u64 * out_pos,
        LayerKind::Channelwise { k, .. } => cin * *k as u64 * in_pos,
        LayerKind::Tam { cfg, kind, se_reduction } => {
            let (c, t, k) = (cfg.channels as u64, i.t as u64, cfg.kernel_size as u64);
            let r = cfg.reduced() as u64;
            let h = (cfg.alpha * i.t) as u64;
            let aggregate = c * in_pos * k;
            let excite = c * in_pos;
            let local = r * c * 3 * t + c * r * t;
            let global = c * (t * h + h * k);
            match kind {
                Kind::LocalOnly => excite + local,
                Kind::GlobalOnly => aggregate + global,
                Kind::GlobalSe => {
                    let sr = (cfg.channels / (*se_reduction).max(1)) as u64;
                    aggregate + global + 2 * c * sr + excite
                }
                _ => aggregate + excite + local + global,
            }
        }
        LayerKind::FrameLinear => cin * cout * i.t as u64,
        LayerKind::BatchNorm { .. }
        | LayerKind::Relu
        | LayerKind::MaxPool { .. }
        | LayerKind::TemporalPool { .. }
        | LayerKind::Shift { .. }
        | LayerKind::GlobalPool
        | LayerKind::FrameAverage => 0,
    }
}

pub fn count_params(plan: &NetworkPlan) -> usize {
    plan.layers().map(layer_params).sum()
}

pub fn count_flops(plan: &NetworkPlan) -> u64 {
    plan.layers().map(layer_flops).sum()
}

/// Architectures addressable by name, with the temporal module they use.
pub const ARCHS: &[(&str, Kind)] = &[
    ("c2d-r50", Kind::None),
    ("c2d-pool-r50", Kind::AvgPool),
    ("c2d-tconv-r50", Kind::TConv),
    ("c2d-tim-r50", Kind::ChannelwiseTConv),
    ("i3d3x1x1-r50", Kind::Inflate3x1x1),
    ("tsm-r50", Kind::Shift),
    ("tanet-r50", Kind::Tam),
    ("tanet-reversed-r50", Kind::TamReversed),
    ("tanet-global-r50", Kind::GlobalOnly),
    ("tanet-local-r50", Kind::LocalOnly),
    ("tanet-global-se-r50", Kind::GlobalSe),
    ("toy-c2d", Kind::None),
    ("toy-c2d-pool", Kind::AvgPool),
    ("toy-tconv", Kind::TConv),
    ("toy-tim", Kind::ChannelwiseTConv),
    ("toy-i3d", Kind::Inflate3x1x1),
    ("toy-tsm", Kind::Shift),
    ("toy-tanet", Kind::Tam),
    ("toy-tanet-reversed", Kind::TamReversed),
    ("toy-tanet-global", Kind::GlobalOnly),
    ("toy-tanet-local", Kind::LocalOnly),
    ("toy-tanet-global-se", Kind::GlobalSe),
];

pub fn arch_names() -> Vec<&'static str> {
    ARCHS.iter().map(|(n, _)| *n).collect()
}

/// Network configuration for a named architecture at `frames` frames.
pub fn named_config(name: &str, frames: usize) -> Result<NetConfig> {
    let &(_, kind) = ARCHS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        TamError::config(format!("unknown arch `{name}`; valid: {}", arch_names().join(", ")))
    })?;
    if name.starts_with("toy-") {
        let mut cfg = NetConfig::toy(kind);
        cfg.frames = frames;
        if kind == Kind::GlobalSe {
            cfg.se_reduction = 4;
        }
        Ok(cfg)
    } else {
        Ok(NetConfig::resnet50(kind, frames))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Complexity {
    pub arch: String,
    pub frames: usize,
    pub size: usize,
    pub params: usize,
    pub flops: u64,
    pub gflops: f64,
    pub params_m: f64,
    pub convention: &'static str,
}

/// Parameters and single-view FLOPs of a named architecture on a
/// `frames x size x size` clip.
pub fn analyze(name: &str, frames: usize, size: usize) -> Result<Complexity> {
    let cfg = named_config(name, frames)?;
    let plan = describe_at(&cfg, frames, size, size)?;
    let params = count_params(&plan);
    let flops = count_flops(&plan);
    Ok(Complexity {
        arch: name.to_string(),
        frames,
        size,
        params,
        flops,
        gflops: flops as f64 / 1e9,
        params_m: params as f64 / 1e6,
        convention: CONVENTION,
    })
}

/// Parameter count at the configuration's nominal geometry.
pub fn params_of(cfg: &NetConfig) -> Result<usize> {
    Ok(count_params(&describe(cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c2d_r50_matches_standard_resnet() {
        let c = analyze("c2d-r50", 8, 256).unwrap();
        // 23.508M backbone + 2048 * 400 + 400 head.
        assert_eq!(c.params, 23_508_032 + 819_600);
    }

    #[test]
    fn unknown_arch_lists_names() {
        let err = analyze("resnet", 8, 256).unwrap_err().to_string();
        assert!(err.contains("tanet-r50"));
    }
}
