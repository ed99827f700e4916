//! Network configuration and its symbolic layer plan.
//!
//! [`describe`] turns a [`NetConfig`] into a [`NetworkPlan`]: an ordered
//! list of layer descriptors with their input/output extents. The same plan
//! drives parameter allocation and the forward pass of concrete models, and
//! is what the analytic FLOPs/parameter counters walk, so the symbolic and
//! concrete views of a network cannot drift apart.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TamError};
use crate::tam::{TamConfig, TamOrder};

/// Where the temporal module sits inside a bottleneck block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    /// Before the first convolution.
    A,
    /// After the first convolution.
    #[default]
    B,
    /// After the second convolution.
    C,
    /// After the last convolution, before the residual addition.
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalModuleKind {
    /// Frame-wise 2D network (C2D).
    None,
    /// Stride-1 temporal average pooling (C2D-Pool).
    AvgPool,
    /// Full temporal convolution shared by all videos (C2D-TConv).
    #[serde(rename = "tconv")]
    TConv,
    /// Channel-wise temporal convolution shared by all videos (C2D-TIM).
    #[serde(rename = "channelwise_tconv")]
    ChannelwiseTConv,
    /// Parameter-free temporal channel shift (TSM).
    Shift,
    /// First 1x1 convolution of each block inflated to 3x1x1 (I3D).
    Inflate3x1x1,
    #[default]
    Tam,
    /// Aggregate before exciting.
    TamReversed,
    /// Global branch only: adaptive aggregation without importance map.
    GlobalOnly,
    /// Local branch only: importance map without aggregation.
    LocalOnly,
    /// Global branch with a squeeze-excitation gate in place of the local branch.
    GlobalSe,
}

impl TemporalModuleKind {
    /// Kinds that insert a dedicated layer at the block's variant position.
    pub fn is_inserted(self) -> bool {
        !matches!(self, TemporalModuleKind::None | TemporalModuleKind::Inflate3x1x1)
    }

    pub fn uses_tam(self) -> bool {
        matches!(
            self,
            TemporalModuleKind::Tam
                | TemporalModuleKind::TamReversed
                | TemporalModuleKind::GlobalOnly
                | TemporalModuleKind::LocalOnly
                | TemporalModuleKind::GlobalSe
        )
    }
}

/// Initial kernel of the channel-wise temporal convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelwiseInit {
    /// `[0, 1, 0]` for every channel.
    #[default]
    Identity,
    /// One-hot shift kernels on 1/8 + 1/8 of the channels, identity elsewhere.
    Shift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub max_pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TamSettings {
    pub kernel_size: usize,
    pub alpha: usize,
    pub beta: usize,
    pub global_norm: bool,
}

impl Default for TamSettings {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            alpha: 2,
            beta: 4,
            global_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub frames: usize,
    /// Nominal square frame size used for extents in the layer plan.
    pub frame_size: usize,
    pub num_classes: usize,
    pub stem: StemConfig,
    /// Output width of every block in each stage.
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Bottleneck width = stage width / ratio.
    pub bottleneck_ratio: usize,
    pub temporal: TemporalModuleKind,
    pub variant: BlockVariant,
    /// Stages receiving the temporal module; `None` means all.
    pub temporal_stages: Option<Vec<usize>>,
    pub tam: TamSettings,
    pub channelwise_init: ChannelwiseInit,
    pub pool_kernel: usize,
    pub shift_fraction: f64,
    pub se_reduction: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::toy(TemporalModuleKind::Tam)
    }
}

impl NetConfig {
    /// Desk-scale backbone: 3x3/2 stem, two stages of two bottlenecks.
    pub fn toy(kind: TemporalModuleKind) -> Self {
        Self {
            in_channels: 1,
            frames: 8,
            frame_size: 32,
            num_classes: 8,
            stem: StemConfig {
                width: 16,
                kernel: 3,
                stride: 2,
                max_pool: false,
            },
            widths: vec![16, 32],
            blocks: vec![2, 2],
            bottleneck_ratio: 2,
            temporal: kind,
            variant: BlockVariant::B,
            temporal_stages: None,
            tam: TamSettings::default(),
            channelwise_init: ChannelwiseInit::Identity,
            pool_kernel: 3,
            shift_fraction: 0.125,
            se_reduction: 16,
        }
    }

    /// ResNet-50 geometry with a 400-way head.
    pub fn resnet50(kind: TemporalModuleKind, frames: usize) -> Self {
        Self {
            in_channels: 3,
            frames,
            frame_size: 256,
            num_classes: 400,
            stem: StemConfig {
                width: 64,
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
            widths: vec![256, 512, 1024, 2048],
            blocks: vec![3, 4, 6, 3],
            bottleneck_ratio: 4,
            ..Self::toy(kind)
        }
    }

    pub fn stage_has_temporal(&self, stage: usize) -> bool {
        self.temporal != TemporalModuleKind::None
            && self
                .temporal_stages
                .as_ref()
                .is_none_or(|s| s.contains(&stage))
    }

    pub fn tam_config(&self, channels: usize) -> TamConfig {
        TamConfig {
            channels,
            frames: self.frames,
            kernel_size: self.tam.kernel_size,
            alpha: self.tam.alpha,
            beta: self.tam.beta,
            order: if self.temporal == TemporalModuleKind::TamReversed {
                TamOrder::Reversed
            } else {
                TamOrder::Standard
            },
            global_norm: self.tam.global_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        describe(self).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Extent {
    pub fn positions(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.c * self.positions()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LayerKind {
    Conv {
        kt: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        bias: bool,
    },
    BatchNorm {
        zero_gamma: bool,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
        pad: usize,
    },
    TemporalPool {
        k: usize,
    },
    TemporalConv {
        k: usize,
    },
    Channelwise {
        k: usize,
        init: ChannelwiseInit,
    },
    Shift {
        fold: usize,
    },
    Tam {
        cfg: TamConfig,
        kind: TemporalModuleKind,
        se_reduction: usize,
    },
    /// `(N, C, T, H, W) -> (N, C, T)`.
    GlobalPool,
    /// Fully connected layer applied to every frame: `(N, C, T) -> (N, K, T)`.
    FrameLinear,
    /// Mean of frame scores: `(N, K, T) -> (N, K)`.
    FrameAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input: Extent,
    pub output: Extent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockPlan {
    pub name: String,
    pub stage: usize,
    pub main: Vec<LayerSpec>,
    /// Empty for identity shortcuts.
    pub shortcut: Vec<LayerSpec>,
    pub input: Extent,
    pub output: Extent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkPlan {
    pub stem: Vec<LayerSpec>,
    pub blocks: Vec<BlockPlan>,
    pub head: Vec<LayerSpec>,
}

impl NetworkPlan {
    /// Every layer in execution order (block main path before shortcut).
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.stem
            .iter()
            .chain(self.blocks.iter().flat_map(|b| b.main.iter().chain(&b.shortcut)))
            .chain(&self.head)
    }

    pub fn temporal_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers().filter(|l| {
            matches!(
                l.kind,
                LayerKind::Tam { .. }
                    | LayerKind::Channelwise { .. }
                    | LayerKind::TemporalConv { .. }
                    | LayerKind::TemporalPool { .. }
                    | LayerKind::Shift { .. }
            )
        })
    }
}

struct Builder {
    at: Extent,
    out: Vec<LayerSpec>,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, output: Extent) {
        self.out.push(LayerSpec {
            name,
            kind,
            input: self.at,
            output,
        });
        self.at = output;
    }

    fn conv(&mut self, name: String, cout: usize, (kt, k): (usize, usize), stride: usize) {
        let pad = k / 2;
        let out = Extent {
            c: cout,
            t: self.at.t,
            h: (self.at.h + 2 * pad - k) / stride + 1,
            w: (self.at.w + 2 * pad - k) / stride + 1,
        };
        self.push(
            name,
            LayerKind::Conv {
                kt,
                kh: k,
                kw: k,
                stride,
                bias: false,
            },
            out,
        );
    }

    fn bn(&mut self, name: String, zero_gamma: bool) {
        let at = self.at;
        self.push(name, LayerKind::BatchNorm { zero_gamma }, at);
    }

    fn relu(&mut self, name: String) {
        let at = self.at;
        self.push(name, LayerKind::Relu, at);
    }

    fn temporal(&mut self, cfg: &NetConfig, name: String) -> Result<()> {
        let at = self.at;
        let kind = match cfg.temporal {
            TemporalModuleKind::AvgPool => {
                if cfg.pool_kernel % 2 == 0 {
                    return Err(TamError::config(format!("pool kernel {} must be odd", cfg.pool_kernel)));
                }
                LayerKind::TemporalPool { k: cfg.pool_kernel }
            }
            TemporalModuleKind::TConv => LayerKind::TemporalConv { k: 3 },
            TemporalModuleKind::ChannelwiseTConv => LayerKind::Channelwise {
                k: 3,
                init: cfg.channelwise_init,
            },
            TemporalModuleKind::Shift => {
                let fold = (at.c as f64 * cfg.shift_fraction).floor() as usize;
                if !(0.0..=0.5).contains(&cfg.shift_fraction) {
                    return Err(TamError::config(format!("shift fraction {} outside [0, 0.5]", cfg.shift_fraction)));
                }
                LayerKind::Shift { fold }
            }
            kind => {
                let tam = cfg.tam_config(at.c);
                tam.validate()?;
                if kind == TemporalModuleKind::GlobalSe && (cfg.se_reduction == 0 || at.c % cfg.se_reduction != 0) {
                    return Err(TamError::config(format!(
                        "SE reduction {} does not divide {} channels",
                        cfg.se_reduction, at.c
                    )));
                }
                LayerKind::Tam {
                    cfg: tam,
                    kind,
                    se_reduction: cfg.se_reduction,
                }
            }
        };
        self.push(name, kind, at);
        Ok(())
    }
}

/// Builds the layer plan for `cfg` at its nominal frame size.
pub fn describe(cfg: &NetConfig) -> Result<NetworkPlan> {
    describe_at(cfg, cfg.frames, cfg.frame_size, cfg.frame_size)
}

/// Builds the layer plan for an input clip of `t` frames of `h x w` pixels.
pub fn describe_at(cfg: &NetConfig, t: usize, h: usize, w: usize) -> Result<NetworkPlan> {
    if cfg.widths.is_empty() || cfg.widths.len() != cfg.blocks.len() {
        return Err(TamError::config(format!(
            "stage widths {:?} and block counts {:?} must be non-empty and aligned",
            cfg.widths, cfg.blocks
        )));
    }
    if cfg.in_channels == 0 || cfg.num_classes == 0 || cfg.frames == 0 || t == 0 {
        return Err(TamError::config("channels, classes and frames must be positive"));
    }
    if cfg.bottleneck_ratio == 0 || cfg.widths.iter().any(|&w| w == 0 || w % cfg.bottleneck_ratio != 0) {
        return Err(TamError::config(format!(
            "stage widths {:?} must be positive multiples of the bottleneck ratio {}",
            cfg.widths, cfg.bottleneck_ratio
        )));
    }
    if let Some(stages) = &cfg.temporal_stages {
        if let Some(bad) = stages.iter().find(|&&s| s >= cfg.widths.len()) {
            return Err(TamError::config(format!("temporal stage {bad} does not exist")));
        }
    }
    if cfg.stem.kernel % 2 == 0 || cfg.stem.stride == 0 || cfg.stem.width == 0 {
        return Err(TamError::config("stem kernel must be odd with positive stride and width"));
    }
    if h < cfg.stem.kernel / 2 + 1 || w < cfg.stem.kernel / 2 + 1 {
        return Err(TamError::config(format!("frame {h}x{w} too small for the stem")));
    }

    let mut b = Builder {
        at: Extent {
            c: cfg.in_channels,
            t,
            h,
            w,
        },
        out: Vec::new(),
    };
    b.conv("stem.conv".into(), cfg.stem.width, (1, cfg.stem.kernel), cfg.stem.stride);
    b.bn("stem.bn".into(), false);
    b.relu("stem.relu".into());
    if cfg.stem.max_pool {
        let at = b.at;
        let out = Extent {
            h: (at.h + 2 - 3) / 2 + 1,
            w: (at.w + 2 - 3) / 2 + 1,
            ..at
        };
        b.push("stem.pool".into(), LayerKind::MaxPool { k: 3, stride: 2, pad: 1 }, out);
    }
    let stem = std::mem::take(&mut b.out);

    let mut blocks = Vec::new();
    for (stage, (&width, &count)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
        let temporal = cfg.stage_has_temporal(stage);
        let inserted = temporal && cfg.temporal.is_inserted();
        let inflate = temporal && cfg.temporal == TemporalModuleKind::Inflate3x1x1;
        let mid = width / cfg.bottleneck_ratio;
        for index in 0..count {
            let name = format!("stage{stage}.block{index}");
            let stride = if stage > 0 && index == 0 { 2 } else { 1 };
            let input = b.at;
            let tmod = format!("{name}.temporal");
            if inserted && cfg.variant == BlockVariant::A {
                b.temporal(cfg, tmod.clone())?;
            }
            b.conv(format!("{name}.conv1"), mid, (if inflate { 3 } else { 1 }, 1), 1);
            b.bn(format!("{name}.bn1"), false);
            b.relu(format!("{name}.relu1"));
            if inserted && cfg.variant == BlockVariant::B {
                b.temporal(cfg, tmod.clone())?;
            }
            b.conv(format!("{name}.conv2"), mid, (1, 3), stride);
            b.bn(format!("{name}.bn2"), false);
            b.relu(format!("{name}.relu2"));
            if inserted && cfg.variant == BlockVariant::C {
                b.temporal(cfg, tmod.clone())?;
            }
            b.conv(format!("{name}.conv3"), width, (1, 1), 1);
            b.bn(format!("{name}.bn3"), true);
            if inserted && cfg.variant == BlockVariant::D {
                b.temporal(cfg, tmod.clone())?;
            }
            let main = std::mem::take(&mut b.out);
            let output = b.at;
            let shortcut = if input.c != width || stride != 1 {
                b.at = input;
                b.conv(format!("{name}.proj"), width, (1, 1), stride);
                b.bn(format!("{name}.proj_bn"), false);
                debug_assert_eq!(b.at, output);
                std::mem::take(&mut b.out)
            } else {
                Vec::new()
            };
            b.at = output;
            blocks.push(BlockPlan {
                name,
                stage,
                main,
                shortcut,
                input,
                output,
            });
        }
    }

    let at = b.at;
    b.push("head.pool".into(), LayerKind::GlobalPool, Extent { h: 1, w: 1, ..at });
    let at = b.at;
    b.push("head.fc".into(), LayerKind::FrameLinear, Extent { c: cfg.num_classes, ..at });
    let at = b.at;
    b.push("head.avg".into(), LayerKind::FrameAverage, Extent { t: 1, ..at });
    let head = std::mem::take(&mut b.out);

    Ok(NetworkPlan { stem, blocks, head })
}
