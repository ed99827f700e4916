//! Synthetic motion clips whose labels depend only on temporal dynamics.
//!
//! A Gaussian blob moves on a torus so that every pixel is visited equally
//! often regardless of label; single frames carry no label information.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TamError};
use crate::tensor::{Real, Tensor};

pub const GENERATOR_VERSION: u32 = 1;
pub const RECORD_MAGIC: &[u8; 4] = b"TAMV";

/// Compass offsets `(dy, dx)` in label order: E, NE, N, NW, W, SW, S, SE.
pub const COMPASS: [(i64, i64); 8] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];
pub const DIRECTION_NAMES: [&str; 8] = ["E", "NE", "N", "NW", "W", "SW", "S", "SE"];
pub const DIRECTION_SPEED: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Direction8,
    Speed4,
    OrderReversal2,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Direction8 => 8,
            Task::Speed4 => 4,
            Task::OrderReversal2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7452_4149_4e00_0001,
            Split::Val => 0x5641_4c00_0000_0002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub task: Task,
    pub train_count: usize,
    pub val_count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            task: Task::Direction8,
            train_count: 2000,
            val_count: 500,
            frames: 8,
            height: 32,
            width: 32,
            channels: 1,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(TamError::config(format!("frames must be at least 16x16, got {}x{}", self.height, self.width)));
        }
        if self.frames < 8 {
            return Err(TamError::config(format!("need at least 8 frames, got {}", self.frames)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(TamError::config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(TamError::config(format!("noise must be a finite non-negative value, got {}", self.noise)));
        }
        if self.train_count == 0 {
            return Err(TamError::config("train_count must be positive"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.task.num_classes()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
        }
    }

    pub fn clip_shape(&self) -> [usize; 5] {
        [1, self.channels, self.frames, self.height, self.width]
    }

    /// Seed of sample `index` in `split`; splits never share seeds.
    pub fn sample_seed(&self, split: Split, index: usize) -> u64 {
        splitmix(splitmix(self.seed ^ split.tag()) ^ splitmix(index as u64 ^ 0x9e37_79b9))
    }

    pub fn label_of(&self, index: usize) -> usize {
        index % self.num_classes()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    /// `(1, C, T, H, W)` clip.
    pub clip: Tensor<f32>,
    pub label: usize,
    pub seed: u64,
}

struct Blob {
    y: f64,
    x: f64,
    sigma: f64,
    contrast: f64,
}

fn wrap_dist(a: f64, b: f64, n: usize) -> f64 {
    let n = n as f64;
    let d = (a - b).rem_euclid(n);
    d.min(n - d)
}

fn paint(frame: &mut [f32], h: usize, w: usize, blob: &Blob) {
    let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
    for i in 0..h {
        let dy = wrap_dist(i as f64, blob.y, h);
        for j in 0..w {
            let dx = wrap_dist(j as f64, blob.x, w);
            frame[i * w + j] += (blob.contrast * (-(dy * dy + dx * dx) * inv).exp()) as f32;
        }
    }
}

/// Renders the clip for `label` from `seed`. The blob's start, size and
/// contrast depend on the seed only, so matched seeds give matched frames up
/// to translation.
pub fn render(spec: &DatasetSpec, label: usize, seed: u64) -> Result<MotionSample> {
    spec.validate()?;
    if label >= spec.num_classes() {
        return Err(TamError::config(format!("label {label} out of range for {:?}", spec.task)));
    }
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.random_range(0..h) as i64;
    let x0 = rng.random_range(0..w) as i64;
    let sigma = rng.random_range(1.5..3.0);
    let contrast = rng.random_range(0.5..1.0);
    let plane = h * w;
    let mut frames = vec![0f32; t * plane];
    match spec.task {
        Task::Direction8 | Task::Speed4 => {
            let (dir, speed) = if spec.task == Task::Direction8 {
                (label, DIRECTION_SPEED)
            } else {
                (rng.random_range(0..8), label as i64 + 1)
            };
            let (dy, dx) = COMPASS[dir];
            for (f, frame) in frames.chunks_mut(plane).enumerate() {
                let s = f as i64 * speed;
                let blob = Blob {
                    y: (y0 + dy * s).rem_euclid(h as i64) as f64,
                    x: (x0 + dx * s).rem_euclid(w as i64) as f64,
                    sigma,
                    contrast,
                };
                paint(frame, h, w, &blob);
            }
        }
        Task::OrderReversal2 => {
            // A small blob followed by a large one elsewhere; label 1 plays
            // the two events in the opposite order.
            let y1 = rng.random_range(0..h) as f64;
            let x1 = rng.random_range(0..w) as f64;
            let first = Blob { y: y0 as f64, x: x0 as f64, sigma: 1.5, contrast };
            let second = Blob { y: y1, x: x1, sigma: 3.0, contrast };
            let half = t / 2;
            for (f, frame) in frames.chunks_mut(plane).enumerate() {
                let early = f < half;
                let blob = if early == (label == 0) { &first } else { &second };
                paint(frame, h, w, blob);
            }
        }
    }
    if spec.noise > 0.0 {
        let dist = Normal::new(0.0, spec.noise).map_err(|e| TamError::config(e.to_string()))?;
        for v in frames.iter_mut() {
            *v += dist.sample(&mut rng) as f32;
        }
    }
    let c = spec.channels;
    let mut data = Vec::with_capacity(c * frames.len());
    for _ in 0..c {
        data.extend_from_slice(&frames);
    }
    Ok(MotionSample {
        clip: Tensor::new(&spec.clip_shape(), data)?,
        label,
        seed,
    })
}

pub fn sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<MotionSample> {
    render(spec, spec.label_of(index), spec.sample_seed(split, index))
}

/// All samples of a split, generated in parallel and returned in index order.
pub fn generate(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.count(split))
        .into_par_iter()
        .map(|i| sample(spec, split, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        num_classes: spec.num_classes(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<MotionSample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Stacks the selected clips into `(N, C, T, H, W)`, taking frames
    /// `[offset, offset + frames)` of each.
    pub fn batch<F: Real>(&self, indices: &[usize], offset: usize, frames: usize) -> Result<(Tensor<F>, Vec<usize>)> {
        let first = self
            .samples
            .get(*indices.first().ok_or_else(|| TamError::config("empty batch"))?)
            .ok_or_else(|| TamError::config("batch index out of range"))?;
        let s = first.clip.shape();
        let (c, t, plane) = (s[1], s[2], s[3] * s[4]);
        if offset + frames > t {
            return Err(TamError::config(format!("frames [{offset}, {}) exceed clip length {t}", offset + frames)));
        }
        let mut data = Vec::with_capacity(indices.len() * c * frames * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let smp = self.samples.get(i).ok_or_else(|| TamError::config("batch index out of range"))?;
            if smp.clip.shape() != s {
                return Err(TamError::shape("batch", format!("{:?} vs {:?}", smp.clip.shape(), s)));
            }
            for ch in 0..c {
                let base = (ch * t + offset) * plane;
                data.extend(smp.clip.data()[base..base + frames * plane].iter().map(|&v| F::cst(v as f64)));
            }
            labels.push(smp.label);
        }
        Ok((Tensor::new(&[indices.len(), c, frames, s[3], s[4]], data)?, labels))
    }
}

/// Per-frame blob centroid `(t, y, x)` of a `(1, C, T, H, W)` clip: the
/// channel-averaged frame is smoothed with a toroidal 3x3 box, the peak is
/// located, and the intensity-weighted circular mean within radius 5 of the
/// peak is returned.
pub fn centroid_track(clip: &Tensor<f32>) -> Result<Vec<(usize, f64, f64)>> {
    let s = clip.shape();
    if s.len() != 5 || s[0] != 1 {
        return Err(TamError::shape("centroid_track", format!("expected (1, C, T, H, W), got {s:?}")));
    }
    let (c, t, h, w) = (s[1], s[2], s[3], s[4]);
    let plane = h * w;
    let mut out = Vec::with_capacity(t);
    for f in 0..t {
        let mut img = vec![0f64; plane];
        for ch in 0..c {
            let base = (ch * t + f) * plane;
            for (p, v) in img.iter_mut().zip(&clip.data()[base..base + plane]) {
                *p += *v as f64 / c as f64;
            }
        }
        if img.iter().all(|&v| v == 0.0) {
            return Err(TamError::config(format!("frame {f} is all zero")));
        }
        let at = |y: i64, x: i64| img[(y.rem_euclid(h as i64) as usize) * w + x.rem_euclid(w as i64) as usize];
        let mut best = (f64::NEG_INFINITY, 0i64, 0i64);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc += at(y + dy, x + dx);
                    }
                }
                if acc > best.0 {
                    best = (acc, y, x);
                }
            }
        }
        let (_, py, px) = best;
        let (mut sw, mut sy, mut sx) = (0.0, 0.0, 0.0);
        for dy in -5i64..=5 {
            for dx in -5i64..=5 {
                if dy * dy + dx * dx > 25 {
                    continue;
                }
                let v = at(py + dy, px + dx).max(0.0);
                sw += v;
                sy += v * dy as f64;
                sx += v * dx as f64;
            }
        }
        let (cy, cx) = if sw > 0.0 { (sy / sw, sx / sw) } else { (0.0, 0.0) };
        out.push((f, (py as f64 + cy).rem_euclid(h as f64), (px as f64 + cx).rem_euclid(w as f64)));
    }
    Ok(out)
}

fn wrapped_delta(a: f64, b: f64, n: usize) -> f64 {
    let n = n as f64;
    let d = (b - a).rem_euclid(n);
    if d > n / 2.0 {
        d - n
    } else {
        d
    }
}

/// Mean per-frame displacement `(dy, dx)` of a track on an `h x w` torus.
pub fn track_velocity(track: &[(usize, f64, f64)], h: usize, w: usize) -> (f64, f64) {
    let steps = track.len().saturating_sub(1).max(1) as f64;
    let (mut vy, mut vx) = (0.0, 0.0);
    for pair in track.windows(2) {
        vy += wrapped_delta(pair[0].1, pair[1].1, h);
        vx += wrapped_delta(pair[0].2, pair[1].2, w);
    }
    (vy / steps, vx / steps)
}

/// Nearest compass label for a displacement.
pub fn direction_label(dy: f64, dx: f64) -> usize {
    let angle = (-dy).atan2(dx);
    let sector = (angle / std::f64::consts::FRAC_PI_4).round() as i64;
    sector.rem_euclid(8) as usize
}

/// Reverses the time axis of a `(1, C, T, H, W)` clip.
pub fn reverse_time<F: Real>(clip: &Tensor<F>) -> Tensor<F> {
    let s = clip.shape();
    let (c, t, plane) = (s[1], s[2], s[3] * s[4]);
    let mut data = Vec::with_capacity(clip.numel());
    for ch in 0..c {
        for f in (0..t).rev() {
            let base = (ch * t + f) * plane;
            data.extend_from_slice(&clip.data()[base..base + plane]);
        }
    }
    Tensor::new(s, data).expect("same element count")
}

pub fn write_record(out: &mut impl Write, sample: &MotionSample) -> Result<()> {
    let s = sample.clip.shape();
    if s.len() != 5 {
        return Err(TamError::shape("write_record", format!("expected rank 5, got {s:?}")));
    }
    out.write_all(RECORD_MAGIC)?;
    out.write_all(&GENERATOR_VERSION.to_le_bytes())?;
    for &d in s {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&(sample.label as u32).to_le_bytes())?;
    for v in sample.clip.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_record(r: &mut impl Read, seed: u64) -> Result<Option<MotionSample>> {
    let mut magic = [0u8; 4];
    match r.read(&mut magic[..1])? {
        0 => return Ok(None),
        _ => r.read_exact(&mut magic[1..])?,
    }
    if &magic != RECORD_MAGIC {
        return Err(TamError::Format(format!("bad record magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != GENERATOR_VERSION {
        return Err(TamError::Format(format!("record version {version}, expected {GENERATOR_VERSION}")));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = read_u32(r)? as usize;
    }
    let label = read_u32(r)? as usize;
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Some(MotionSample {
        clip: Tensor::new(&dims, data)?,
        label,
        seed,
    }))
}

pub fn save_split(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in &data.samples {
        write_record(&mut out, s)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a split file written by [`save_split`]; seeds are re-derived from
/// the dataset spec by position.
pub fn load_split(path: &Path, spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut samples = Vec::with_capacity(spec.count(split));
    while let Some(s) = read_record(&mut r, spec.sample_seed(split, samples.len()))? {
        samples.push(s);
    }
    Ok(Dataset {
        samples,
        num_classes: spec.num_classes(),
    })
}

/// Bytes taken by one record of `spec`.
pub fn record_len(spec: &DatasetSpec) -> u64 {
    (4 + 4 + 20 + 4 + 4 * spec.clip_shape().iter().product::<usize>()) as u64
}
