//! Summation, regression and deterministic chunked reductions.

use rayon::prelude::*;

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Ordinary least squares y = a + b x, returns (a, b, r²).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let mut ss_res = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = y - a - b * x;
        ss_res += r * r;
    }
    let r2 = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    (a, b, r2)
}

pub const CHUNK: usize = 4096;

/// Map fixed-size index chunks in parallel and fold the results in chunk
/// order, so the output does not depend on the thread count.
pub fn chunked_reduce<A, M, F>(count: usize, map: M, mut fold: F, init: A) -> A
where
    A: Send,
    M: Fn(std::ops::Range<usize>) -> A + Sync + Send,
    F: FnMut(A, A) -> A,
{
    let chunks: Vec<std::ops::Range<usize>> = (0..count)
        .step_by(CHUNK)
        .map(|lo| lo..(lo + CHUNK).min(count))
        .collect();
    let parts: Vec<A> = chunks.into_par_iter().map(&map).collect();
    let mut acc = init;
    for p in parts {
        acc = fold(acc, p);
    }
    acc
}
