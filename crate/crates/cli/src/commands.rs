use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tam_core::analysis::{complexity, dump, gradcheck};
use tam_core::blocks::{build_network, Model};
use tam_core::synth::{self, Dataset, DatasetSpec, Split, GENERATOR_VERSION};
use tam_core::train::{self, history_csv, EpochRecord};
use tam_core::{checkpoint, DType, Real};

use crate::config::{load_json, RunConfig};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "best.tamc";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn emit(value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub split: String,
    pub file: String,
    pub count: usize,
    pub bytes: u64,
    pub class_counts: Vec<usize>,
}

/// Describes a dataset cache directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator_version: u32,
    pub spec: DatasetSpec,
    pub splits: Vec<SplitEntry>,
}

fn split_file(split: Split) -> String {
    format!("{}.bin", split.name())
}

const SPLITS: [Split; 2] = [Split::Train, Split::Val];

/// The manifest of `dir` when it describes `spec` and every file is intact.
fn current_manifest(dir: &Path, spec: &DatasetSpec) -> Option<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
    let m: Manifest = serde_json::from_str(&text).ok()?;
    if m.generator_version != GENERATOR_VERSION || &m.spec != spec {
        return None;
    }
    let intact = m
        .splits
        .iter()
        .all(|s| fs::metadata(dir.join(&s.file)).map(|md| md.len() == s.bytes).unwrap_or(false));
    intact.then_some(m)
}

pub fn gen_data(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let spec: DatasetSpec = load_json(spec_path)?;
    spec.validate()?;
    if let Some(m) = current_manifest(out, &spec) {
        info!("cache up to date: {}", out.display());
        return emit(&json!({ "status": "up_to_date", "out": out, "manifest": m }));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut splits = Vec::new();
    for split in SPLITS {
        let data = synth::generate(&spec, split)?;
        let file = split_file(split);
        let path = out.join(&file);
        synth::save_split(&path, &data).map_err(|e| io_err(&path, e))?;
        let bytes = fs::metadata(&path).map_err(|e| io_err(&path, e))?.len();
        let counts = data.class_counts();
        info!("{} clips: {} per class {:?}", split.name(), data.len(), counts);
        splits.push(SplitEntry {
            split: split.name().to_string(),
            file,
            count: data.len(),
            bytes,
            class_counts: counts,
        });
    }
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION,
        spec,
        splits,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    write(&out.join(MANIFEST), text)?;
    emit(&json!({ "status": "generated", "out": out, "manifest": manifest }))
}

/// A split from a gen-data cache (which must match the config's spec) or
/// generated in memory.
fn load_split(cfg: &RunConfig, data: Option<&Path>, split: Split) -> Result<Dataset, CliError> {
    let Some(dir) = data else {
        return Ok(synth::generate(&cfg.dataset, split)?);
    };
    let m: Manifest = load_json(&dir.join(MANIFEST))?;
    if m.spec != cfg.dataset || m.generator_version != GENERATOR_VERSION {
        return Err(CliError::Config(format!(
            "dataset cache {} was generated from a different spec or generator version",
            dir.display()
        )));
    }
    let path = dir.join(split_file(split));
    let ds = synth::load_split(&path, &cfg.dataset, split).map_err(|e| io_err(&path, e))?;
    if ds.len() != cfg.dataset.count(split) {
        return Err(CliError::Io(format!(
            "{}: {} clips, spec says {}",
            path.display(),
            ds.len(),
            cfg.dataset.count(split)
        )));
    }
    Ok(ds)
}

fn train_typed<F: Real>(cfg: &RunConfig, out: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let train_set = load_split(cfg, data, Split::Train)?;
    let val_set = load_split(cfg, data, Split::Val)?;
    let mut model = build_network::<F>(&cfg.net, cfg.seed)?;
    info!(
        "training {:?} ({} params) on {} clips for {} epochs",
        cfg.net.temporal,
        model.params.num_trainable(),
        train_set.len(),
        cfg.train.epochs
    );
    let metrics = out.join(METRICS);
    write(&metrics, history_csv(&[]))?;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut write_err = None;
    let result = train::train_loop(&mut model, &train_set, &val_set, &cfg.train, &cfg.eval, |r| {
        history.push(*r);
        if let Err(e) = fs::write(&metrics, history_csv(&history)) {
            write_err.get_or_insert(io_err(&metrics, e));
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let outcome = result?;
    let ckpt = out.join(CHECKPOINT);
    checkpoint::save(&ckpt, &outcome.best).map_err(|e| io_err(&ckpt, e))?;
    let best_top1 = outcome.best_epoch.map(|e| outcome.history[e].val_top1);
    emit(&json!({
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_top1": best_top1,
        "metrics": metrics,
        "checkpoint": ckpt,
    }))
}

pub fn train(config: &Path, out: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let resolved = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
    write(&out.join("config.json"), resolved)?;
    match cfg.train.dtype {
        DType::F32 => train_typed::<f32>(&cfg, out, data),
        DType::F64 => train_typed::<f64>(&cfg, out, data),
    }
}

/// Network for `cfg` carrying the weights of `path`.
fn restored<F: Real>(cfg: &RunConfig, path: &Path) -> Result<Model<F>, CliError> {
    let mut model = build_network::<F>(&cfg.net, cfg.seed)?;
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (_, loaded) = checkpoint::from_bytes::<F>(&bytes).map_err(|e| match e {
        tam_core::TamError::Format(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
        other => other.into(),
    })?;
    checkpoint::restore(&mut model.params, &loaded)?;
    Ok(model)
}

fn eval_typed<F: Real>(cfg: &RunConfig, ckpt: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let model = restored::<F>(cfg, ckpt)?;
    let val = load_split(cfg, data, Split::Val)?;
    let m = train::evaluate(&model, &val, &cfg.eval)?;
    emit(&json!({ "split": "val", "videos": val.len(), "top1": m.top1, "top5": m.top5 }))
}

pub fn eval(ckpt: &Path, config: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    match cfg.train.dtype {
        DType::F32 => eval_typed::<f32>(&cfg, ckpt, data),
        DType::F64 => eval_typed::<f64>(&cfg, ckpt, data),
    }
}

pub fn flops(arch: &str, frames: usize, size: usize) -> Result<(), CliError> {
    let c = complexity::analyze(arch, frames, size)?;
    emit(&serde_json::to_value(c).map_err(|e| CliError::Io(e.to_string()))?)
}

pub fn params(arch: &str, frames: usize) -> Result<(), CliError> {
    let c = complexity::analyze(arch, frames, 256)?;
    emit(&json!({ "arch": c.arch, "params": c.params, "params_m": c.params_m }))
}

pub fn gradcheck(ops: &[String], seeds: u64, tolerance: f64) -> Result<(), CliError> {
    let ops: Vec<&str> = if ops.is_empty() {
        gradcheck::OPS.to_vec()
    } else {
        ops.iter().map(String::as_str).collect()
    };
    for op in &ops {
        if !gradcheck::OPS.contains(op) {
            return Err(CliError::Config(format!("unknown op `{op}`; valid: {}", gradcheck::OPS.join(", "))));
        }
    }
    if seeds == 0 {
        return Err(CliError::Config("need at least one seed".into()));
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    let reports = gradcheck::suite(&ops, &seeds, tolerance)?;
    eprintln!("{:<18} {:>4} {:>12}  result", "op", "seed", "max rel err");
    for r in &reports {
        eprintln!("{:<18} {:>4} {:>12.3e}  {}", r.op, r.seed, r.max_rel_error, if r.pass { "pass" } else { "FAIL" });
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    emit(&json!({ "tolerance": tolerance, "checks": reports.len(), "failed": failed, "reports": reports }))?;
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    Ok(())
}

fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}

fn inspect_typed<F: Real>(
    cfg: &RunConfig,
    ckpt: &Path,
    layers: &[String],
    out: &Path,
    videos: Option<usize>,
    data: Option<&Path>,
) -> Result<(), CliError> {
    let model = restored::<F>(cfg, ckpt)?;
    let mut val = load_split(cfg, data, Split::Val)?;
    if let Some(n) = videos {
        if n == 0 {
            return Err(CliError::Config("--videos must be positive".into()));
        }
        val.samples.truncate(n);
    }
    let d = dump::dump_kernels(&model, &val, layers, cfg.eval.batch_size)?;
    let mut csv = Vec::new();
    d.write_csv(&mut csv)?;
    write(out, csv)?;
    let summary = d.summarize();
    for s in &summary {
        if s.varying_channel_fraction == 0.0 {
            warn!("{}: kernels identical for every video", s.layer);
        }
    }
    let value = json!({ "csv": out, "rows": d.records.len(), "layers": summary });
    let text = serde_json::to_string_pretty(&value).map_err(|e| CliError::Io(e.to_string()))?;
    write(&summary_path(out), &text)?;
    println!("{text}");
    Ok(())
}

pub fn inspect_kernels(
    ckpt: &Path,
    config: &Path,
    layers: &[String],
    out: &Path,
    videos: Option<usize>,
    data: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    match cfg.train.dtype {
        DType::F32 => inspect_typed::<f32>(&cfg, ckpt, layers, out, videos, data),
        DType::F64 => inspect_typed::<f64>(&cfg, ckpt, layers, out, videos, data),
    }
}
