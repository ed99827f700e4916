//! Slice-level compute kernels behind the tape primitives.
//!
//! Activations are laid out as `(N, C, T, H, W)`; lower-rank inputs are
//! viewed with unit trailing extents. Convolution is cross-correlation with
//! zero padding, lowered to im2col + GEMM one sample at a time.

use rayon::prelude::*;

use crate::parallel::reduce_partials;
use crate::tensor::Real;

/// Geometry of a (temporal x spatial) convolution over one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    /// Spatial stride; time is never strided.
    pub stride: usize,
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_t(&self) -> usize {
        self.t + 2 * self.pt + 1 - self.kt
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.t * self.h * self.w
    }

    /// Output positions per sample.
    pub fn positions(&self) -> usize {
        self.out_t() * self.out_h() * self.out_w()
    }

    /// Rows of the im2col matrix (reduction length).
    pub fn patch(&self) -> usize {
        self.cin * self.kt * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kt == 1
            && self.kh == 1
            && self.kw == 1
            && self.stride == 1
            && self.pt == 0
            && self.ph == 0
            && self.pw == 0
    }

    /// Output columns `[lo, hi)` whose input column `xo * stride + d - pw`
    /// falls inside the frame.
    fn valid_cols(&self, d: usize, ow: usize) -> (usize, usize) {
        let lo = if self.pw > d { (self.pw - d).div_ceil(self.stride) } else { 0 };
        let reach = self.w + self.pw;
        let hi = if reach > d { ((reach - d - 1) / self.stride + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Patch matrix `(patch, positions)` of one sample.
    fn im2col<F: Real>(&self, x: &[F]) -> Vec<F> {
        let (ot, oh, ow) = (self.out_t(), self.out_h(), self.out_w());
        let mut cols = Vec::with_capacity(self.patch() * ot * oh * ow);
        let zero = F::zero();
        for c in 0..self.cin {
            let xc = &x[c * self.t * self.h * self.w..(c + 1) * self.t * self.h * self.w];
            for dt in 0..self.kt {
                for dy in 0..self.kh {
                    for dx in 0..self.kw {
                        let (lo, hi) = self.valid_cols(dx, ow);
                        for to in 0..ot {
                            let ti = (to + dt).wrapping_sub(self.pt);
                            if ti >= self.t {
                                cols.extend(std::iter::repeat_n(zero, oh * ow));
                                continue;
                            }
                            for yo in 0..oh {
                                let yi = (yo * self.stride + dy).wrapping_sub(self.ph);
                                if yi >= self.h {
                                    cols.extend(std::iter::repeat_n(zero, ow));
                                    continue;
                                }
                                let line = &xc[(ti * self.h + yi) * self.w..(ti * self.h + yi + 1) * self.w];
                                cols.extend(std::iter::repeat_n(zero, lo));
                                let start = lo * self.stride + dx - self.pw;
                                if self.stride == 1 {
                                    cols.extend_from_slice(&line[start..start + (hi - lo)]);
                                } else {
                                    cols.extend(line[start..].iter().step_by(self.stride).take(hi - lo).copied());
                                }
                                cols.extend(std::iter::repeat_n(zero, ow - hi));
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adds a patch-matrix gradient back onto the input gradient.
    fn col2im<F: Real>(&self, cols: &[F], dx: &mut [F]) {
        let (ot, oh, ow) = (self.out_t(), self.out_h(), self.out_w());
        let plane = self.t * self.h * self.w;
        let mut src = cols.chunks_exact(ow);
        for c in 0..self.cin {
            let dc = &mut dx[c * plane..(c + 1) * plane];
            for dt in 0..self.kt {
                for dy in 0..self.kh {
                    for dxk in 0..self.kw {
                        let (lo, hi) = self.valid_cols(dxk, ow);
                        for to in 0..ot {
                            let ti = (to + dt).wrapping_sub(self.pt);
                            for yo in 0..oh {
                                let row = src.next().expect("cols sized by geometry");
                                let yi = (yo * self.stride + dy).wrapping_sub(self.ph);
                                if ti >= self.t || yi >= self.h || lo == hi {
                                    continue;
                                }
                                let base = (ti * self.h + yi) * self.w;
                                let start = lo * self.stride + dxk - self.pw;
                                let line = &mut dc[base + start..base + self.w];
                                for (o, &v) in line.iter_mut().step_by(self.stride).zip(&row[lo..hi]) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<F: Real>(g: &ConvGeom, x: &[F], w: &[F], out: &mut [F]) {
    let (r, p) = (g.patch(), g.positions());
    out.par_chunks_mut(g.cout * p)
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(o, xn)| {
            if g.pointwise() {
                F::gemm(g.cout, r, p, F::one(), w, (r as isize, 1), xn, (p as isize, 1), F::zero(), o, (p as isize, 1));
            } else {
                let cols = g.im2col(xn);
                F::gemm(g.cout, r, p, F::one(), w, (r as isize, 1), &cols, (p as isize, 1), F::zero(), o, (p as isize, 1));
            }
        });
}

/// Accumulates into `dx` (when requested) and overwrites `dw`.
pub fn conv_backward<F: Real>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dout: &[F],
    dx: Option<&mut [F]>,
    dw: &mut [F],
) {
    let (r, p) = (g.patch(), g.positions());
    let per_sample = |xn: &[F], dn: &[F], dxn: Option<&mut [F]>| -> Vec<F> {
        let mut dwn = vec![F::zero(); g.cout * r];
        let cols_owned;
        let cols: &[F] = if g.pointwise() {
            xn
        } else {
            cols_owned = g.im2col(xn);
            &cols_owned
        };
        F::gemm(g.cout, p, r, F::one(), dn, (p as isize, 1), cols, (1, p as isize), F::zero(), &mut dwn, (r as isize, 1));
        if let Some(dxn) = dxn {
            if g.pointwise() {
                F::gemm(r, g.cout, p, F::one(), w, (1, r as isize), dn, (p as isize, 1), F::one(), dxn, (p as isize, 1));
            } else {
                let mut dcols = vec![F::zero(); r * p];
                F::gemm(r, g.cout, p, F::one(), w, (1, r as isize), dn, (p as isize, 1), F::zero(), &mut dcols, (p as isize, 1));
                g.col2im(&dcols, dxn);
            }
        }
        dwn
    };
    let partials: Vec<Vec<F>> = match dx {
        Some(dx) => dx
            .par_chunks_mut(g.in_len())
            .zip(x.par_chunks(g.in_len()))
            .zip(dout.par_chunks(g.cout * p))
            .map(|((dxn, xn), dn)| per_sample(xn, dn, Some(dxn)))
            .collect(),
        None => x
            .par_chunks(g.in_len())
            .zip(dout.par_chunks(g.cout * p))
            .map(|(xn, dn)| per_sample(xn, dn, None))
            .collect(),
    };
    reduce_partials(partials, dw);
}

/// Depthwise temporal aggregation `y[c,t,s] = sum_k theta[c,k] * z[c,t+k-r,s]`
/// with zero padding, `r = (K-1)/2`. `theta` holds `(N, C, K)` values, or
/// `(C, K)` when `shared` (one kernel for every sample).
pub struct Aggregation {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub s: usize,
    pub k: usize,
    pub shared: bool,
}

impl Aggregation {
    fn kernel_row<'a, F>(&self, theta: &'a [F], n: usize, c: usize) -> &'a [F] {
        let row = if self.shared { c } else { n * self.c + c };
        &theta[row * self.k..(row + 1) * self.k]
    }

    pub fn forward<F: Real>(&self, z: &[F], theta: &[F], y: &mut [F]) {
        let (t, s, r) = (self.t, self.s, (self.k - 1) / 2);
        y.par_chunks_mut(t * s)
            .zip(z.par_chunks(t * s))
            .enumerate()
            .for_each(|(nc, (yc, zc))| {
                let row = self.kernel_row(theta, nc / self.c, nc % self.c);
                yc.iter_mut().for_each(|v| *v = F::zero());
                for (ki, &wk) in row.iter().enumerate() {
                    for ti in 0..t {
                        let src = ti as isize + ki as isize - r as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let zs = &zc[src as usize * s..(src as usize + 1) * s];
                        for (o, &v) in yc[ti * s..(ti + 1) * s].iter_mut().zip(zs) {
                            *o += wk * v;
                        }
                    }
                }
            });
    }

    /// Accumulates `dz` and overwrites `dtheta`.
    pub fn backward<F: Real>(
        &self,
        z: &[F],
        theta: &[F],
        dy: &[F],
        dz: Option<&mut [F]>,
        dtheta: &mut [F],
    ) {
        let (t, s, k, r) = (self.t, self.s, self.k, (self.k - 1) / 2);
        let per_row = |nc: usize, zc: &[F], dyc: &[F], dzc: Option<&mut [F]>| -> Vec<F> {
            let row = self.kernel_row(theta, nc / self.c, nc % self.c);
            let mut grad = vec![F::zero(); k];
            let mut dzc = dzc;
            for ki in 0..k {
                for ti in 0..t {
                    let src = ti as isize + ki as isize - r as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let src = src as usize;
                    let g = &dyc[ti * s..(ti + 1) * s];
                    let zs = &zc[src * s..(src + 1) * s];
                    grad[ki] += g.iter().zip(zs).map(|(&a, &b)| a * b).sum::<F>();
                    if let Some(d) = dzc.as_deref_mut() {
                        for (o, &gv) in d[src * s..(src + 1) * s].iter_mut().zip(g) {
                            *o += row[ki] * gv;
                        }
                    }
                }
            }
            grad
        };
        let rows: Vec<Vec<F>> = match dz {
            Some(dz) => dz
                .par_chunks_mut(t * s)
                .zip(z.par_chunks(t * s))
                .zip(dy.par_chunks(t * s))
                .enumerate()
                .map(|(nc, ((dzc, zc), dyc))| per_row(nc, zc, dyc, Some(dzc)))
                .collect(),
            None => z
                .par_chunks(t * s)
                .zip(dy.par_chunks(t * s))
                .enumerate()
                .map(|(nc, (zc, dyc))| per_row(nc, zc, dyc, None))
                .collect(),
        };
        if self.shared {
            dtheta.iter_mut().for_each(|v| *v = F::zero());
            for (nc, g) in rows.iter().enumerate() {
                let c = nc % self.c;
                for (o, &v) in dtheta[c * k..(c + 1) * k].iter_mut().zip(g) {
                    *o += v;
                }
            }
        } else {
            for (nc, g) in rows.iter().enumerate() {
                dtheta[nc * k..(nc + 1) * k].copy_from_slice(g);
            }
        }
    }
}

/// Stride-1 temporal average pooling over `(rows, T, S)`, dividing by the
/// number of in-range frames so the output keeps length `T`.
pub fn temporal_avg_pool<F: Real>(x: &[F], t: usize, s: usize, k: usize, y: &mut [F]) {
    let r = (k - 1) / 2;
    y.par_chunks_mut(t * s)
        .zip(x.par_chunks(t * s))
        .for_each(|(yc, xc)| {
            for ti in 0..t {
                let lo = ti.saturating_sub(r);
                let hi = (ti + r).min(t - 1);
                let inv = F::one() / F::cst((hi - lo + 1) as f64);
                let out = &mut yc[ti * s..(ti + 1) * s];
                out.iter_mut().for_each(|v| *v = F::zero());
                for src in lo..=hi {
                    for (o, &v) in out.iter_mut().zip(&xc[src * s..(src + 1) * s]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|v| *v = *v * inv);
            }
        });
}

pub fn temporal_avg_pool_backward<F: Real>(dy: &[F], t: usize, s: usize, k: usize, dx: &mut [F]) {
    let r = (k - 1) / 2;
    dx.par_chunks_mut(t * s)
        .zip(dy.par_chunks(t * s))
        .for_each(|(dxc, dyc)| {
            for ti in 0..t {
                let lo = ti.saturating_sub(r);
                let hi = (ti + r).min(t - 1);
                let inv = F::one() / F::cst((hi - lo + 1) as f64);
                for src in lo..=hi {
                    for (o, &g) in dxc[src * s..(src + 1) * s]
                        .iter_mut()
                        .zip(&dyc[ti * s..(ti + 1) * s])
                    {
                        *o += g * inv;
                    }
                }
            }
        });
}

/// Temporal channel shift over `(N, C, T, S)`: channels `[0, fold)` move
/// forward in time (`y[t] = x[t-1]`), channels `[fold, 2*fold)` move
/// backward (`y[t] = x[t+1]`), the rest pass through; vacated frames are 0.
pub fn temporal_shift<F: Real>(
    x: &[F],
    c: usize,
    t: usize,
    s: usize,
    fold: usize,
    inverse: bool,
    y: &mut [F],
) {
    y.par_chunks_mut(t * s)
        .zip(x.par_chunks(t * s))
        .enumerate()
        .for_each(|(nc, (yc, xc))| {
            let ch = nc % c;
            let mut dir: isize = if ch < fold {
                1
            } else if ch < 2 * fold {
                -1
            } else {
                0
            };
            if inverse {
                dir = -dir;
            }
            for ti in 0..t {
                let src = ti as isize - dir;
                let out = &mut yc[ti * s..(ti + 1) * s];
                if src < 0 || src as usize >= t {
                    out.iter_mut().for_each(|v| *v = F::zero());
                } else {
                    out.copy_from_slice(&xc[src as usize * s..(src as usize + 1) * s]);
                }
            }
        });
}

/// 2D max pooling on `(rows, H, W)` planes with `-inf` padding; returns the
/// argmax index (within the plane) for every output element.
pub fn max_pool2d<F: Real>(
    x: &[F],
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    y: &mut [F],
) -> Vec<u32> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut arg = vec![0u32; y.len()];
    y.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .zip(x.par_chunks(h * w))
        .for_each(|((yp, ap), xp)| {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0;
                    for dy in 0..k {
                        let yi = (yo * stride + dy) as isize - pad as isize;
                        if yi < 0 || yi as usize >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let xi = (xo * stride + dx) as isize - pad as isize;
                            if xi < 0 || xi as usize >= w {
                                continue;
                            }
                            let i = yi as usize * w + xi as usize;
                            if xp[i] > best {
                                best = xp[i];
                                best_i = i;
                            }
                        }
                    }
                    yp[yo * ow + xo] = best;
                    ap[yo * ow + xo] = best_i as u32;
                }
            }
        });
    arg
}
