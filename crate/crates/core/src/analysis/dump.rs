//! Per-video aggregation kernels and importance maps of selected layers,
//! with distribution summaries.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::arch::LayerKind;
use crate::blocks::Model;
use crate::error::{Result, TamError};
use crate::nn::{Ctx, KernelProbe};
use crate::synth::Dataset;
use crate::tape::{Mode, Tape};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Aggregation kernel entry.
    Theta,
    /// Importance map entry.
    V,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Theta => "theta",
            Branch::V => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelRecord {
    pub layer: String,
    pub video: usize,
    pub channel: usize,
    pub branch: Branch,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct KernelDump {
    pub records: Vec<KernelRecord>,
}

pub const CSV_HEADER: &str = "layer,video,channel,branch,index,value";

impl KernelDump {
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{},{},{}", r.layer, r.video, r.channel, r.branch.name(), r.index, r.value)?;
        }
        Ok(())
    }

    /// `theta[layer][video][channel] -> K values`.
    fn thetas(&self) -> BTreeMap<&str, BTreeMap<usize, BTreeMap<usize, Vec<f64>>>> {
        let mut m: BTreeMap<&str, BTreeMap<usize, BTreeMap<usize, Vec<f64>>>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.branch == Branch::Theta) {
            m.entry(&r.layer)
                .or_default()
                .entry(r.video)
                .or_default()
                .entry(r.channel)
                .or_default()
                .push(r.value);
        }
        m
    }

    pub fn summarize(&self) -> Vec<LayerSummary> {
        self.thetas()
            .into_iter()
            .map(|(layer, videos)| summarize_layer(layer, &videos))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OffsetStats {
    pub index: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSummary {
    pub layer: String,
    pub videos: usize,
    pub channels: usize,
    pub kernel_size: usize,
    /// Distribution of each kernel offset over all videos and channels.
    pub offsets: Vec<OffsetStats>,
    /// Per channel: largest (over offsets) standard deviation across videos.
    pub cross_video_std: Vec<f64>,
    /// Share of channels whose kernels vary across videos at all.
    pub varying_channel_fraction: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn summarize_layer(layer: &str, videos: &BTreeMap<usize, BTreeMap<usize, Vec<f64>>>) -> LayerSummary {
    let channels = videos.values().map(|c| c.len()).max().unwrap_or(0);
    let k = videos
        .values()
        .flat_map(|c| c.values())
        .map(|v| v.len())
        .max()
        .unwrap_or(0);
    let mut offsets = Vec::with_capacity(k);
    for idx in 0..k {
        let mut vals: Vec<f64> = videos
            .values()
            .flat_map(|c| c.values())
            .filter_map(|v| v.get(idx).copied())
            .collect();
        vals.sort_by(f64::total_cmp);
        offsets.push(OffsetStats {
            index: idx,
            min: vals.first().copied().unwrap_or(f64::NAN),
            median: median(&vals),
            max: vals.last().copied().unwrap_or(f64::NAN),
        });
    }
    let mut cross_video_std = Vec::with_capacity(channels);
    for ch in 0..channels {
        let mut worst = 0.0f64;
        for idx in 0..k {
            let vals: Vec<f64> = videos
                .values()
                .filter_map(|c| c.get(&ch).and_then(|v| v.get(idx)).copied())
                .collect();
            let n = vals.len() as f64;
            if n < 2.0 {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            worst = worst.max(var.sqrt());
        }
        cross_video_std.push(worst);
    }
    let varying = cross_video_std.iter().filter(|&&s| s > 0.0).count();
    LayerSummary {
        layer: layer.to_string(),
        videos: videos.len(),
        channels,
        kernel_size: k,
        offsets,
        varying_channel_fraction: if channels == 0 { 0.0 } else { varying as f64 / channels as f64 },
        cross_video_std,
    }
}

/// Resolves layer selectors: a temporal layer name, `last` (the final
/// temporal layer) or `stageN.last` (the final one in stage N).
pub fn resolve_layers<F: Real>(model: &Model<F>, selectors: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for sel in selectors {
        let name = if sel == "last" {
            model.plan.temporal_layers().last().map(|l| l.name.clone())
        } else if let Some(stage) = sel.strip_suffix(".last") {
            let prefix = format!("{stage}.");
            model
                .plan
                .temporal_layers()
                .filter(|l| l.name.starts_with(&prefix))
                .last()
                .map(|l| l.name.clone())
        } else {
            Some(sel.clone())
        };
        let name = name.ok_or_else(|| TamError::config(format!("selector `{sel}` matches no temporal layer")))?;
        let layer = model
            .plan
            .layers()
            .find(|l| l.name == name)
            .ok_or_else(|| TamError::config(format!("no layer named `{name}`")))?;
        match layer.kind {
            LayerKind::Tam { .. } | LayerKind::Channelwise { .. } => out.push(name),
            _ => {
                return Err(TamError::config(format!(
                    "layer `{name}` has no aggregation kernel to inspect"
                )))
            }
        }
    }
    Ok(out)
}

/// Records the kernels (and importance maps where present) of `layers` for
/// every video of `data`, in video order.
pub fn dump_kernels<F: Real>(model: &Model<F>, data: &Dataset, layers: &[String], batch: usize) -> Result<KernelDump> {
    if data.is_empty() {
        return Err(TamError::config("kernel dump needs at least one video"));
    }
    let layers = resolve_layers(model, layers)?;
    let frames = model.config.frames;
    let offset = data.samples[0].clip.dim(2).saturating_sub(frames) / 2;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut dump = KernelDump::default();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch::<F>(chunk, offset, frames)?;
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let mut probe = KernelProbe::default();
        {
            let mut ctx = Ctx::new(&mut tape, &model.params, Mode::Eval);
            ctx.probe = Some(&mut probe);
            model.forward(&mut ctx, xv)?;
        }
        for layer in &layers {
            let rec = probe
                .layers
                .get(layer)
                .ok_or_else(|| TamError::config(format!("layer `{layer}` produced no kernel")))?;
            let ts = rec.theta.shape();
            let (c, k) = (ts[1], ts[2]);
            for (b, &video) in chunk.iter().enumerate() {
                for ch in 0..c {
                    for i in 0..k {
                        dump.records.push(KernelRecord {
                            layer: layer.clone(),
                            video,
                            channel: ch,
                            branch: Branch::Theta,
                            index: i,
                            value: rec.theta.data()[(b * c + ch) * k + i].as_f64(),
                        });
                    }
                    if let Some(v) = &rec.importance {
                        let t = v.dim(2);
                        for i in 0..t {
                            dump.records.push(KernelRecord {
                                layer: layer.clone(),
                                video,
                                channel: ch,
                                branch: Branch::V,
                                index: i,
                                value: v.data()[(b * c + ch) * t + i].as_f64(),
                            });
                        }
                    }
                }
            }
        }
    }
    // Group by layer so each layer's rows are contiguous.
    dump.records.sort_by(|a, b| {
        let la = layers.iter().position(|l| *l == a.layer);
        let lb = layers.iter().position(|l| *l == b.layer);
        la.cmp(&lb).then(a.video.cmp(&b.video))
    });
    Ok(dump)
}
