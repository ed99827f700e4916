//! Structural invariants of the temporal module and the frame-wise baseline,
//! run as property tests through an explicit runner so callers can report
//! each property as a single pass/fail.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tam_core::arch::{NetConfig, TemporalModuleKind};
use tam_core::blocks::build_network;
use tam_core::nn::Ctx;
use tam_core::tam::{self, TamConfig};
use tam_core::{Mode, ParamStore, Tape, Tensor};

pub const PROPERTIES: &[&str] = &[
    "simplex_and_sigmoid_range",
    "spatial_shuffle_invariance",
    "batch_independence",
    "channel_isolation",
    "c2d_frame_permutation_invariance",
];

/// Random module geometry, parameter seed and data seed.
#[derive(Debug, Clone)]
pub struct Case {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub seed: u64,
}

pub fn case_strategy() -> impl Strategy<Value = Case> {
    (1usize..=3, 1usize..=6, 3usize..=8, 1usize..=5, 1usize..=5, prop::sample::select(vec![1usize, 3]), any::<u64>()).prop_map(
        |(n, c, t, h, w, k, seed)| Case { n, c, t, h, w, k, seed },
    )
}

impl Case {
    pub fn config(&self) -> TamConfig {
        let mut cfg = TamConfig::new(self.c, self.t);
        cfg.kernel_size = self.k;
        cfg.beta = [4, 2, 1].into_iter().find(|b| self.c % b == 0).unwrap();
        cfg
    }

    pub fn setup(&self) -> (TamConfig, ParamStore<f64>, Tensor<f64>) {
        let cfg = self.config();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut store = ParamStore::<f64>::new();
        tam::register_params(&mut store, "tam", &cfg, &mut rng).unwrap();
        // Perturb biases and batch norm so the branches are far from their
        // initial symmetric state.
        for (_, e) in store.iter_mut() {
            let v = e.value.data_mut();
            for x in v.iter_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        for (name, e) in store.iter_mut() {
            if name.ends_with("running_var") {
                e.value.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
            }
        }
        let x = Tensor::from_fn(&[self.n, self.c, self.t, self.h, self.w], |_| rng.random_range(-2.0..2.0));
        (cfg, store, x)
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol
}

/// Kernels live on the probability simplex; importance lies in (0, 1).
pub fn simplex_and_sigmoid_range(case: &Case) -> Result<(), TestCaseError> {
    let (cfg, store, x) = case.setup();
    let out = tam::evaluate(&x, &store, "tam", &cfg, Mode::Eval).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let theta = out.kernel.tensor();
    for row in theta.data().chunks(cfg.kernel_size) {
        let s: f64 = row.iter().sum();
        ensure((s - 1.0).abs() < 1e-12, || format!("kernel row sums to {s}"))?;
        ensure(row.iter().all(|&v| (0.0..=1.0).contains(&v)), || format!("kernel row {row:?} outside [0, 1]"))?;
    }
    let v = out.importance.tensor();
    ensure(v.data().iter().all(|&v| v > 0.0 && v < 1.0), || "importance outside (0, 1)".into())
}

/// Permuting pixel positions (the same permutation for every frame) leaves
/// the importance map and kernels unchanged.
pub fn spatial_shuffle_invariance(case: &Case) -> Result<(), TestCaseError> {
    let (cfg, store, x) = case.setup();
    let hw = case.h * case.w;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0xabc);
    let mut perm: Vec<usize> = (0..hw).collect();
    for i in (1..hw).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut shuffled = x.clone();
    for (dst, src) in shuffled.data_mut().chunks_mut(hw).zip(x.data().chunks(hw)) {
        for (i, &p) in perm.iter().enumerate() {
            dst[i] = src[p];
        }
    }
    let a = tam::evaluate(&x, &store, "tam", &cfg, Mode::Eval).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let b = tam::evaluate(&shuffled, &store, "tam", &cfg, Mode::Eval).map_err(|e| TestCaseError::fail(e.to_string()))?;
    ensure(close(a.importance.tensor(), b.importance.tensor(), 1e-12), || "importance changed under spatial shuffle".into())?;
    ensure(close(a.kernel.tensor(), b.kernel.tensor(), 1e-12), || "kernel changed under spatial shuffle".into())
}

/// In inference mode each video's output depends only on that video.
pub fn batch_independence(case: &Case) -> Result<(), TestCaseError> {
    let (cfg, store, x) = case.setup();
    let whole = tam::evaluate(&x, &store, "tam", &cfg, Mode::Eval).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let per = x.numel() / case.n;
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    for i in 0..case.n {
        let xi = Tensor::new(&shape, x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let oi = tam::evaluate(&xi, &store, "tam", &cfg, Mode::Eval).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let slice = Tensor::new(&shape, whole.output.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        ensure(close(&oi.output, &slice, 1e-12), || format!("video {i} differs when batched"))?;
    }
    Ok(())
}

/// Changing one channel's input never touches another channel's kernel,
/// and with fixed kernels never touches another channel's aggregation.
pub fn channel_isolation(case: &Case) -> Result<(), TestCaseError> {
    let (cfg, store, x) = case.setup();
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0x5151);
    let target = rng.random_range(0..case.c);
    let mut y = x.clone();
    let s = case.t * case.h * case.w;
    for nc in 0..case.n * case.c {
        if nc % case.c == target {
            y.data_mut()[nc * s..(nc + 1) * s].iter_mut().for_each(|v| *v += rng.random_range(-3.0..3.0));
        }
    }
    let kernels = |input: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.input(input.clone());
        let sq = tam::spatial_squeeze(&mut tape, xv).unwrap();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        let th = tam::global_branch(&mut ctx, "tam", sq, &cfg).unwrap();
        tape.value(th).clone()
    };
    let (ka, kb) = (kernels(&x), kernels(&y));
    let theta = Tensor::from_fn(&[case.n, case.c, case.k], |_| rng.random_range(-1.0..1.0));
    let aggregate = |input: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.input(input.clone());
        let tv = tape.input(theta.clone());
        let out = tam::adaptive_aggregate(&mut tape, xv, tv).unwrap();
        tape.value(out).clone()
    };
    let (aa, ab) = (aggregate(&x), aggregate(&y));
    let k = case.k;
    for nc in 0..case.n * case.c {
        if nc % case.c == target {
            continue;
        }
        ensure(ka.data()[nc * k..(nc + 1) * k] == kb.data()[nc * k..(nc + 1) * k], || {
            format!("kernel of channel {} moved when channel {target} changed", nc % case.c)
        })?;
        ensure(aa.data()[nc * s..(nc + 1) * s] == ab.data()[nc * s..(nc + 1) * s], || {
            format!("aggregation of channel {} moved when channel {target} changed", nc % case.c)
        })?;
    }
    Ok(())
}

/// The frame-wise baseline scores a clip identically whatever the frame order.
pub fn c2d_frame_permutation_invariance(seed: u64) -> Result<(), TestCaseError> {
    let mut cfg = NetConfig::toy(TemporalModuleKind::None);
    cfg.frame_size = 16;
    let model = build_network::<f64>(&cfg, seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
    let (t, side) = (cfg.frames, cfg.frame_size);
    let hw = side * side;
    let x = Tensor::from_fn(&[2, cfg.in_channels, t, side, side], |_| rng.random_range(0.0..1.0));
    let mut perm: Vec<usize> = (0..t).collect();
    for i in (1..t).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut y = x.clone();
    for nc in 0..2 * cfg.in_channels {
        for (ti, &p) in perm.iter().enumerate() {
            let (dst, src) = ((nc * t + ti) * hw, (nc * t + p) * hw);
            let frame = x.data()[src..src + hw].to_vec();
            y.data_mut()[dst..dst + hw].copy_from_slice(&frame);
        }
    }
    let a = model.predict(&x, Mode::Eval).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let b = model.predict(&y, Mode::Eval).map_err(|e| TestCaseError::fail(e.to_string()))?;
    ensure(close(&a, &b, 1e-10), || format!("logits moved by {} under frame permutation {perm:?}", a.max_abs_diff(&b)))
}

/// Runs one named property over `cases` random cases.
pub fn run(name: &str, cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let result = match name {
        "simplex_and_sigmoid_range" => runner.run(&case_strategy(), |c| simplex_and_sigmoid_range(&c)).map_err(|e| e.to_string()),
        "spatial_shuffle_invariance" => runner.run(&case_strategy(), |c| spatial_shuffle_invariance(&c)).map_err(|e| e.to_string()),
        "batch_independence" => runner.run(&case_strategy(), |c| batch_independence(&c)).map_err(|e| e.to_string()),
        "channel_isolation" => runner.run(&case_strategy(), |c| channel_isolation(&c)).map_err(|e| e.to_string()),
        "c2d_frame_permutation_invariance" => runner.run(&any::<u64>(), c2d_frame_permutation_invariance).map_err(|e| e.to_string()),
        other => return Err(format!("unknown property `{other}`")),
    };
    result.map_err(|e| format!("{name}: {e}"))
}
