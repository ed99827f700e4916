//! Thread and reduction-order controls.
//!
//! Batch-parallel kernels always produce per-sample partial results; with
//! deterministic reductions enabled (the default) those partials are summed
//! in sample order so results do not depend on the thread count.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::tensor::Real;

static DETERMINISTIC: AtomicBool = AtomicBool::new(true);

pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::Relaxed);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::Relaxed)
}

/// Reads `TAM_DETERMINISTIC` (`0` disables ordered reductions).
pub fn init_from_env() {
    if let Ok(v) = std::env::var("TAM_DETERMINISTIC") {
        set_deterministic(v.trim() != "0");
    }
}

/// Sums equally sized partial buffers into `out` (which is overwritten).
pub(crate) fn reduce_partials<F: Real>(partials: Vec<Vec<F>>, out: &mut [F]) {
    out.iter_mut().for_each(|v| *v = F::zero());
    if deterministic() {
        for p in &partials {
            for (o, &v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
    } else if let Some(total) = partials.into_par_iter().reduce_with(|mut a, b| {
        for (x, y) in a.iter_mut().zip(&b) {
            *x += *y;
        }
        a
    }) {
        out.copy_from_slice(&total);
    }
}
