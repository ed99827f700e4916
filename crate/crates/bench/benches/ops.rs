use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tam_core::analysis::complexity;
use tam_core::arch::{NetConfig, TemporalModuleKind};
use tam_core::blocks::build_network;
use tam_core::nn::Ctx;
use tam_core::tam::{self, TamConfig};
use tam_core::train::{self, Sgd, TrainConfig};
use tam_core::{Mode, ParamStore, Tape, Tensor};

// Cheap deterministic filler in [-1, 1).
fn filled(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| (i.wrapping_mul(2654435761) % 1024) as f32 / 512.0 - 1.0)
}

fn conv2d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for (ch, hw) in [(16, 32), (64, 16)] {
        let x = filled(&[8, ch, hw, hw]);
        let w = filled(&[ch, ch, 3, 3]);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{ch}ch_{hw}px")), &(x, w), |b, (x, w)| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                let wv = tape.input(w.clone());
                let y = tape.conv2d(xv, wv, 1, 1).unwrap();
                black_box(tape.value(y).sum())
            })
        });
    }
    g.finish();
}

fn aggregate(c: &mut Criterion) {
    let (n, ch, t, hw) = (4, 32, 8, 16);
    let z = filled(&[n, ch, t, hw, hw]);
    let theta = Tensor::full(&[n, ch, 3], 1.0 / 3.0);
    c.bench_function("adaptive_aggregate", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let zv = tape.input(z.clone());
            let tv = tape.input(theta.clone());
            let y = tam::adaptive_aggregate(&mut tape, zv, tv).unwrap();
            black_box(tape.value(y).sum())
        })
    });
}

fn tam_module(c: &mut Criterion) {
    let (n, ch, t, hw) = (4, 32, 8, 16);
    let cfg = TamConfig::new(ch, t);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    tam::register_params(&mut store, "tam", &cfg, &mut rng).unwrap();
    let x = filled(&[n, ch, t, hw, hw]);
    let mut g = c.benchmark_group("tam");
    g.bench_function("forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
            let trace = tam::tam_forward(&mut ctx, "tam", xv, &cfg).unwrap();
            black_box(tape.value(trace.output).sum())
        })
    });
    g.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.input_with_grad(x.clone());
            let loss = {
                let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
                let trace = tam::tam_forward(&mut ctx, "tam", xv, &cfg).unwrap();
                ctx.tape.sum(trace.output).unwrap()
            };
            tape.backward(loss).unwrap();
            black_box(tape.grad(xv).map(|g| g.sum()))
        })
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("toy_train_step");
    g.sample_size(10);
    for kind in [TemporalModuleKind::None, TemporalModuleKind::AvgPool, TemporalModuleKind::Tam] {
        let net = NetConfig::toy(kind);
        let mut model = build_network::<f32>(&net, 0).unwrap();
        let cfg = TrainConfig::default();
        let mut sgd = Sgd::new();
        let x = filled(&[16, net.in_channels, net.frames, net.frame_size, net.frame_size]);
        let labels: Vec<usize> = (0..16).map(|i| i % net.num_classes).collect();
        g.bench_function(format!("{kind:?}"), |b| {
            b.iter(|| black_box(train::train_step(&mut model, &mut sgd, &cfg, 1e-4, x.clone(), &labels).unwrap()))
        });
    }
    g.finish();
}

fn accounting(c: &mut Criterion) {
    c.bench_function("analyze_tanet_r50", |b| {
        b.iter(|| black_box(complexity::analyze("tanet-r50", 8, 256).unwrap().flops))
    });
}

criterion_group!(benches, conv2d, aggregate, tam_module, train_step, accounting);
criterion_main!(benches);
