//! Naive nested-loop references for the temporal module's building blocks.
//!
//! Inputs are drawn as small multiples of 1/16 so every partial sum is exact
//! in f64 and results can be compared bit for bit regardless of the order
//! in which the library accumulates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tam_core::nn::Ctx;
use tam_core::tam::{self, TamConfig};
use tam_core::{Mode, ParamStore, Tape, Tensor};

pub fn dyadic(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-64i32..=64) as f64 / 16.0)
}

pub fn naive_spatial_squeeze(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = Tensor::zeros(&[n, c, t]);
    let inv = 1.0 / (h * w) as f64;
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                let mut acc = 0.0;
                for yi in 0..h {
                    for xi in 0..w {
                        acc += x.at(&[ni, ci, ti, yi, xi]);
                    }
                }
                out.set(&[ni, ci, ti], acc * inv);
            }
        }
    }
    out
}

pub fn naive_excite(x: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let mut out = Tensor::zeros(&s);
    for ni in 0..s[0] {
        for ci in 0..s[1] {
            for ti in 0..s[2] {
                for yi in 0..s[3] {
                    for xi in 0..s[4] {
                        let idx = [ni, ci, ti, yi, xi];
                        out.set(&idx, v.at(&[ni, ci, ti]) * x.at(&idx));
                    }
                }
            }
        }
    }
    out
}

/// `Y[n,c,t] = sum_k theta[n,c,k] Z[n,c,t+k-(K-1)/2]`, zero outside `[0, T)`.
pub fn naive_aggregate(z: &Tensor<f64>, theta: &Tensor<f64>) -> Tensor<f64> {
    let s = z.shape().to_vec();
    let k = theta.dim(2);
    let r = (k as isize - 1) / 2;
    let mut out = Tensor::zeros(&s);
    for ni in 0..s[0] {
        for ci in 0..s[1] {
            for ti in 0..s[2] {
                for yi in 0..s[3] {
                    for xi in 0..s[4] {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            let src = ti as isize + ki as isize - r;
                            if src >= 0 && (src as usize) < s[2] {
                                acc += theta.at(&[ni, ci, ki]) * z.at(&[ni, ci, src as usize, yi, xi]);
                            }
                        }
                        out.set(&[ni, ci, ti, yi, xi], acc);
                    }
                }
            }
        }
    }
    out
}

/// `(N, C, T)` signal, `(C', C, k)` weight, symmetric zero padding.
pub fn naive_conv1d(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (n, c, t) = (x.dim(0), x.dim(1), x.dim(2));
    let (co, k) = (w.dim(0), w.dim(2));
    let ot = t + 2 * pad - k + 1;
    let mut out = Tensor::zeros(&[n, co, ot]);
    for ni in 0..n {
        for oi in 0..co {
            for ti in 0..ot {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ki in 0..k {
                        let src = (ti + ki) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += w.at(&[oi, ci, ki]) * x.at(&[ni, ci, src as usize]);
                        }
                    }
                }
                out.set(&[ni, oi, ti], acc);
            }
        }
    }
    out
}

/// `(N, C, H, W)` image, `(C', C, k, k)` weight.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, k) = (w.dim(0), w.dim(2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for ni in 0..n {
        for oi in 0..co {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yi = (yo * stride + ky) as isize - pad as isize;
                                let xi = (xo * stride + kx) as isize - pad as isize;
                                if yi >= 0 && xi >= 0 && (yi as usize) < h && (xi as usize) < wd {
                                    acc += w.at(&[oi, ci, ky, kx]) * x.at(&[ni, ci, yi as usize, xi as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[ni, oi, yo, xo], acc);
                }
            }
        }
    }
    out
}

fn exact(op: &str, got: &Tensor<f64>, want: &Tensor<f64>) -> Result<(), String> {
    if got.shape() != want.shape() {
        return Err(format!("{op}: shape {:?} vs oracle {:?}", got.shape(), want.shape()));
    }
    if let Some(i) = (0..got.numel()).find(|&i| got.data()[i].to_bits() != want.data()[i].to_bits()) {
        return Err(format!(
            "{op}: element {i} is {} but oracle gives {} (shape {:?})",
            got.data()[i],
            want.data()[i],
            got.shape()
        ));
    }
    Ok(())
}

fn unary(x: Tensor<f64>, f: impl FnOnce(&mut Tape<f64>, tam_core::Var) -> tam_core::Result<tam_core::Var>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let y = f(&mut tape, xv).unwrap();
    tape.value(y).clone()
}

fn binary(
    a: Tensor<f64>,
    b: Tensor<f64>,
    f: impl FnOnce(&mut Tape<f64>, tam_core::Var, tam_core::Var) -> tam_core::Result<tam_core::Var>,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let av = tape.input(a);
    let bv = tape.input(b);
    let y = f(&mut tape, av, bv).unwrap();
    tape.value(y).clone()
}

/// Compares every operator against its oracle on `cases` random instances
/// with `N <= 2, C <= 4, T <= 6, H, W <= 8`.
pub fn brute_force(seed: u64, cases: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let t = rng.random_range(3..=6);
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let x = dyadic(&[n, c, t, h, w], &mut rng);

        let got = unary(x.clone(), |tp, v| tam::spatial_squeeze(tp, v));
        exact("spatial_squeeze", &got, &naive_spatial_squeeze(&x))?;

        let v = Tensor::from_fn(&[n, c, t], |_| rng.random_range(0..=16) as f64 / 16.0);
        let got = binary(x.clone(), v.clone(), |tp, a, b| tam::excite(tp, a, b));
        exact("excite", &got, &naive_excite(&x, &v))?;

        let ks: Vec<usize> = [1, 3, 5].into_iter().filter(|&k| k <= t).collect();
        let k = ks[rng.random_range(0..ks.len())];
        let theta = dyadic(&[n, c, k], &mut rng);
        let got = binary(x.clone(), theta.clone(), |tp, a, b| tam::adaptive_aggregate(tp, a, b));
        exact("adaptive_aggregate", &got, &naive_aggregate(&x, &theta))?;

        let co = rng.random_range(1..=4);
        let k1 = rng.random_range(1..=3);
        let pad = rng.random_range(0..=k1 / 2 + 1);
        let sig = dyadic(&[n, c, t], &mut rng);
        let w1 = dyadic(&[co, c, k1], &mut rng);
        let got = binary(sig.clone(), w1.clone(), |tp, a, b| tp.conv1d_temporal(a, b, pad));
        exact("conv1d", &got, &naive_conv1d(&sig, &w1, pad))?;

        let k2 = [1, 3, 5][rng.random_range(0..3usize)];
        let stride = rng.random_range(1..=2);
        let pad2 = rng.random_range(0..=k2 / 2);
        let (ih, iw) = (h.max(k2), w.max(k2));
        let img = dyadic(&[n, c, ih, iw], &mut rng);
        let w2 = dyadic(&[co, c, k2, k2], &mut rng);
        let got = binary(img.clone(), w2.clone(), |tp, a, b| tp.conv2d(a, b, stride, pad2));
        exact("conv2d", &got, &naive_conv2d(&img, &w2, stride, pad2))?;
        checked += 1;
    }
    Ok(checked)
}

fn shift_oracle(x: &Tensor<f64>, delta: isize) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let per = s[3] * s[4];
    let mut out = Tensor::zeros(&s);
    for nc in 0..s[0] * s[1] {
        for ti in 0..s[2] {
            let src = ti as isize - delta;
            if src < 0 || src as usize >= s[2] {
                continue;
            }
            let from = (nc * s[2] + src as usize) * per;
            let to = (nc * s[2] + ti) * per;
            out.data_mut()[to..to + per].copy_from_slice(&x.data()[from..from + per]);
        }
    }
    out
}

/// Forces the module's kernel (and unit importance) and compares against
/// identity and zero-padded shifts, both for the bare aggregation and for
/// the full module.
pub fn degeneration(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, t, h, w) = (2, 4, 6, 5, 3);
    let x = Tensor::from_fn(&[n, c, t, h, w], |_| rng.random_range(-1.0..1.0));
    let cfg = TamConfig::new(c, t);
    let mut store = ParamStore::new();
    tam::register_params(&mut store, "tam", &cfg, &mut rng).map_err(|e| e.to_string())?;
    for (row, delta, what) in [([0.0, 1.0, 0.0], 0isize, "identity"), ([1.0, 0.0, 0.0], 1, "forward shift"), ([0.0, 0.0, 1.0], -1, "backward shift")] {
        let want = shift_oracle(&x, delta);
        let theta = Tensor::from_fn(&[n, c, 3], |i| row[i % 3]);
        let got = binary(x.clone(), theta, |tp, a, b| tam::adaptive_aggregate(tp, a, b));
        exact(&format!("aggregate {what}"), &got, &want)?;

        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        ctx.overrides.theta = Some(row.to_vec());
        ctx.overrides.importance = Some(1.0);
        let trace = tam::tam_forward(&mut ctx, "tam", xv, &cfg).map_err(|e| e.to_string())?;
        exact(&format!("module {what}"), tape.value(trace.output), &want)?;
    }
    Ok(())
}
