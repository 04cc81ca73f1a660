//! Dense generators for small giants: the one-particle walk generator and the
//! exclusion generator on the full `2^n` configuration space.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::ClusterGraph;
use crate::walk::poisson_tail_below;

/// Largest giant for which the full exclusion state space is built.
pub const MAX_EXCLUSION_SITES: usize = 16;
/// Largest giant for which the exclusion generator is materialized as a matrix.
pub const MAX_DENSE_EXCLUSION_SITES: usize = 10;

/// `Q[i][j] = Σ rates from i to j` (parallel bonds add), `Q[i][i] = -λ(i)`, times `scale`.
pub fn walk_generator(graph: &ClusterGraph, scale: f64) -> DMatrix<f64> {
    let n = graph.len();
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        for e in graph.edges(i) {
            q[(i, e.to as usize)] += scale * e.rate;
            q[(i, i)] -= scale * e.rate;
        }
    }
    q
}

/// `exp(t Q)`.
pub fn expm(q: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    (q * t).exp()
}

/// Dense transition matrix `P_t = exp(t · scale · L_ω)` of the walk.
pub fn walk_transition(graph: &ClusterGraph, scale: f64, t: f64) -> DMatrix<f64> {
    expm(&walk_generator(graph, scale), t)
}

#[inline]
fn swap_bits(state: usize, i: usize, j: usize) -> usize {
    if ((state >> i) & 1) != ((state >> j) & 1) {
        state ^ (1 << i) ^ (1 << j)
    } else {
        state
    }
}

fn check_sites(n: usize, limit: usize) -> Result<()> {
    if n > limit {
        return Err(Error::invalid(format!(
            "{n} sites exceeds the dense limit of {limit}"
        )));
    }
    Ok(())
}

/// Exclusion generator over configurations `0..2^n` (bit `i` = occupancy of compact site `i`).
pub fn exclusion_generator(bonds: &[(u32, u32, f64)], n: usize) -> Result<DMatrix<f64>> {
    check_sites(n, MAX_DENSE_EXCLUSION_SITES)?;
    let states = 1usize << n;
    let mut q = DMatrix::zeros(states, states);
    for s in 0..states {
        for &(i, j, w) in bonds {
            let t = swap_bits(s, i as usize, j as usize);
            if t != s {
                q[(s, t)] += w;
                q[(s, s)] -= w;
            }
        }
    }
    Ok(q)
}

/// Law at time `t` of the exclusion process started from configuration `init`,
/// computed by uniformization on the `2^n` state space.
pub fn exclusion_transient(
    bonds: &[(u32, u32, f64)],
    n: usize,
    init: usize,
    t: f64,
) -> Result<Vec<f64>> {
    check_sites(n, MAX_EXCLUSION_SITES)?;
    let states = 1usize << n;
    if init >= states {
        return Err(Error::invalid("initial configuration out of range"));
    }
    let rate: f64 = bonds.iter().map(|b| b.2).sum();
    let mut p = vec![0.0; states];
    p[init] = 1.0;
    let mu = rate * t;
    if mu == 0.0 {
        return Ok(p);
    }
    // forward equation: p ← p (I + Q / rate); every bond rings at rate w
    let step = |v: &[f64]| {
        let mut out = vec![0.0; states];
        for (s, &mass) in v.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for &(i, j, w) in bonds {
                out[swap_bits(s, i as usize, j as usize)] += mass * w / rate;
            }
        }
        out
    };
    let mut out = vec![0.0; states];
    let mut v = p;
    let mut log_w = -mu;
    let mut k = 0usize;
    loop {
        let w = log_w.exp();
        out.iter_mut().zip(&v).for_each(|(o, x)| *o += w * x);
        if poisson_tail_below(mu, k, w, 1e-15) {
            break;
        }
        v = step(&v);
        k += 1;
        log_w += mu.ln() - (k as f64).ln();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::label_components;
    use crate::env::{sample_field, FieldLaw};

    #[test]
    fn two_site_walk_closed_form() {
        // single bond of weight c: P_t(x, x) = (1 + e^{-2ct}) / 2
        let mut w = vec![0.0; 2 * 9];
        w[0] = 0.7;
        let f = crate::env::ConductanceField::from_weights(2, 3, 1.0, w).unwrap();
        let lab = label_components(&f);
        let g = ClusterGraph::new(&f, &lab).unwrap();
        let p = walk_transition(&g, 1.0, 0.9);
        let stay = 0.5 * (1.0 + (-2.0f64 * 0.7 * 0.9).exp());
        assert!((p[(0, 0)] - stay).abs() < 1e-13);
        assert!((p[(0, 1)] - (1.0 - stay)).abs() < 1e-13);
    }

    #[test]
    fn exclusion_transient_matches_dense_exponential() {
        let f = sample_field(&FieldLaw::IidUniform { lo: 0.2, hi: 1.0 }, 2, 2, 1.0, 1).unwrap();
        let lab = label_components(&f);
        let g = ClusterGraph::new(&f, &lab).unwrap();
        let q = exclusion_generator(g.bonds(), g.len()).unwrap();
        let init = 0b0011;
        let dense = expm(&q, 0.8);
        let series = exclusion_transient(g.bonds(), g.len(), init, 0.8).unwrap();
        for s in 0..16 {
            assert!((dense[(init, s)] - series[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn size_limits_enforced() {
        assert!(exclusion_generator(&[], MAX_DENSE_EXCLUSION_SITES + 1).is_err());
        assert!(exclusion_transient(&[], MAX_EXCLUSION_SITES + 1, 0, 1.0).is_err());
    }

    fn four_site_graph() -> ClusterGraph {
        // path 0-1-2-3 along axis 0 of a 4 x 4 torus, unequal weights
        let mut w = vec![0.0; 2 * 16];
        w[0] = 0.3;
        w[4 * 2] = 0.9;
        w[8 * 2] = 0.5;
        let f = crate::env::ConductanceField::from_weights(2, 4, 1.0, w).unwrap();
        let lab = label_components(&f);
        let g = ClusterGraph::new(&f, &lab).unwrap();
        assert_eq!(g.len(), 4);
        g
    }

    #[test]
    fn exclusion_generator_reversible_for_product_measures() {
        let g = four_site_graph();
        let q = exclusion_generator(g.bonds(), 4).unwrap();
        for theta in [0.2f64, 0.5, 0.7] {
            let pi = |s: usize| {
                let k = s.count_ones() as i32;
                theta.powi(k) * (1.0 - theta).powi(4 - k)
            };
            for s in 0..16 {
                for t in 0..16 {
                    assert!((pi(s) * q[(s, t)] - pi(t) * q[(t, s)]).abs() < 1e-12);
                }
            }
        }
        for s in 0..16 {
            let row: f64 = q.row(s).sum();
            assert!(row.abs() < 1e-12);
        }
    }

    #[test]
    fn generator_of_occupation_is_walk_generator() {
        let g = four_site_graph();
        let q = exclusion_generator(g.bonds(), 4).unwrap();
        let bit = |s: usize, x: usize| ((s >> x) & 1) as f64;
        for s in 0..16 {
            for x in 0..4 {
                let sep: f64 = (0..16).map(|t| q[(s, t)] * bit(t, x)).sum();
                let walk: f64 = g
                    .edges(x)
                    .iter()
                    .map(|e| e.rate * (bit(s, e.to as usize) - bit(s, x)))
                    .sum();
                assert!((sep - walk).abs() < 1e-12);
            }
        }
    }
}
