//! Deterministic reductions and small statistics helpers.
//!
//! Sums are computed blockwise (Neumaier within fixed-size blocks, pairwise
//! across blocks), so the result does not depend on the rayon thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const BLOCK: usize = 1024;

fn neumaier<I: Iterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in it {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn pairwise(parts: &[f64]) -> f64 {
    match parts.len() {
        0 => 0.0,
        1 => parts[0],
        n => pairwise(&parts[..n / 2]) + pairwise(&parts[n / 2..]),
    }
}

pub fn sum(xs: &[f64]) -> f64 {
    if xs.len() <= BLOCK {
        return neumaier(xs.iter().copied());
    }
    let parts: Vec<f64> = xs
        .par_chunks(BLOCK)
        .map(|c| neumaier(c.iter().copied()))
        .collect();
    pairwise(&parts)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= BLOCK {
        return neumaier(a.iter().zip(b).map(|(x, y)| x * y));
    }
    let parts: Vec<f64> = a
        .par_chunks(BLOCK)
        .zip(b.par_chunks(BLOCK))
        .map(|(x, y)| neumaier(x.iter().zip(y).map(|(p, q)| p * q)))
        .collect();
    pairwise(&parts)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        sum(xs) / xs.len() as f64
    }
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let m = mean(xs);
        let stderr = if n > 1 {
            let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
            (sum(&dev) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        MeanStderr { mean: m, stderr, n }
    }

    /// Sample standard deviation.
    pub fn std(&self) -> f64 {
        self.stderr * (self.n as f64).sqrt()
    }
}
