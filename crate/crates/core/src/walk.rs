//! Random walk among random conductances on the giant cluster.
//!
//! The walk at `z` waits an exponential time of rate `λ_ω(z) = Σ_y ω(z, y)`
//! and then jumps to `y` with probability `ω(z, y) / λ_ω(z)`. Diffusive
//! rescaling uses `ε = 1 / L`, so `ε·giant` tiles the unit torus and the
//! rescaled generator is `ε^{-2}` times the cluster Laplacian.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{check_compatible, ClusterLabeling};
use crate::env::ConductanceField;
use crate::error::{Error, Result};
use crate::graph::ClusterGraph;
use crate::numeric::{dot, sum, MeanStderr};
use crate::pde::{sample_on_cluster, GridField};
use crate::solver::{cg_solve, CgOptions, Gauge, MaskedLaplacian};
use crate::streams::CounterStreams;

/// Lattice spacing relating sites `x` to continuum points `εx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsScale {
    epsilon: f64,
}

impl EpsScale {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::invalid(format!(
                "epsilon must lie in (0, 1], got {epsilon}"
            )));
        }
        Ok(EpsScale { epsilon })
    }

    /// `ε = 1 / L` for the unit-side torus.
    pub fn for_side(side: usize) -> Self {
        EpsScale {
            epsilon: 1.0 / side as f64,
        }
    }

    #[inline]
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Microscopic time `ε^{-2} t`.
    pub fn micro_time(&self, t: f64) -> f64 {
        t / (self.epsilon * self.epsilon)
    }

    /// Weight `ε^d` of one site in the rescaled counting measure.
    pub fn site_weight(&self, dim: usize) -> f64 {
        self.epsilon.powi(dim as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkTrajectory {
    /// Compact index of the start site.
    pub start: usize,
    /// `(time, compact site)` after each jump.
    pub events: Vec<(f64, usize)>,
    pub terminal_time: f64,
    /// Unwrapped lattice displacement at the terminal time.
    pub displacement: Vec<i64>,
}

impl WalkTrajectory {
    pub fn position(&self) -> usize {
        self.events.last().map(|e| e.1).unwrap_or(self.start)
    }

    pub fn n_jumps(&self) -> usize {
        self.events.len()
    }
}

#[inline]
fn jump<R: Rng + ?Sized>(graph: &ClusterGraph, z: usize, rng: &mut R) -> usize {
    let edges = graph.edges(z);
    let mut u = rng.random::<f64>() * graph.total_rate(z);
    for (k, e) in edges.iter().enumerate() {
        if u < e.rate {
            return k;
        }
        u -= e.rate;
    }
    edges.len() - 1
}

/// Exact continuous-time walk from compact site `start` up to time `t_end`.
pub fn simulate_walk<R: Rng + ?Sized>(
    graph: &ClusterGraph,
    start: usize,
    t_end: f64,
    rng: &mut R,
) -> Result<WalkTrajectory> {
    if start >= graph.len() {
        return Err(Error::invalid(format!(
            "start site {start} is not in the giant cluster"
        )));
    }
    if !(t_end > 0.0) {
        return Err(Error::invalid(format!(
            "terminal time must be positive, got {t_end}"
        )));
    }
    assert!(
        graph.total_rate(start) > 0.0,
        "giant site without positive bond"
    );
    let mut z = start;
    let mut t = 0.0;
    let mut events = Vec::new();
    let mut displacement = vec![0i64; graph.dim()];
    loop {
        let hold: f64 = Exp1.sample(rng);
        t += hold / graph.total_rate(z);
        if t > t_end {
            break;
        }
        let e = graph.edges(z)[jump(graph, z, rng)];
        displacement[e.axis as usize] += e.sign as i64;
        z = e.to as usize;
        events.push((t, z));
    }
    Ok(WalkTrajectory {
        start,
        events,
        terminal_time: t_end,
        displacement,
    })
}

/// Endpoint of a walk without recording the trajectory.
#[inline]
pub(crate) fn walk_endpoint<R: Rng + ?Sized>(
    graph: &ClusterGraph,
    start: usize,
    t_end: f64,
    rng: &mut R,
) -> usize {
    let mut z = start;
    let mut t = 0.0;
    loop {
        let hold: f64 = Exp1.sample(rng);
        t += hold / graph.total_rate(z);
        if t > t_end {
            return z;
        }
        z = graph.edges(z)[jump(graph, z, rng)].to as usize;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemigroupEstimate {
    /// Lattice site of the probe.
    pub site: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of `P^ε_t f(εx)` at each probe site.
///
/// Walker `w` of probe `p` draws from the stream `(seed, p · n_walkers + w)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_semigroup(
    field: &ConductanceField,
    labeling: &ClusterLabeling,
    eps: EpsScale,
    f: &GridField,
    t: f64,
    n_walkers: usize,
    probe_sites: &[usize],
    seed: u64,
) -> Result<Vec<SemigroupEstimate>> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!("time must be positive, got {t}")));
    }
    if n_walkers == 0 {
        return Err(Error::invalid("n_walkers must be at least 1"));
    }
    let graph = ClusterGraph::new(field, labeling)?;
    let values = sample_on_cluster(f, eps, labeling)?;
    let probes = probe_sites
        .iter()
        .map(|&s| {
            labeling.giant_index(s).ok_or_else(|| {
                Error::invalid(format!("probe site {s} is not in the giant cluster"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let t_micro = eps.micro_time(t);
    let streams = CounterStreams::new(seed, "semigroup-walkers");
    Ok(probes
        .par_iter()
        .enumerate()
        .map(|(p, &start)| {
            let samples: Vec<f64> = (0..n_walkers)
                .map(|w| {
                    let mut rng = streams.at((p * n_walkers + w) as u64);
                    values[walk_endpoint(&graph, start, t_micro, &mut rng)]
                })
                .collect();
            let s = MeanStderr::of(&samples);
            SemigroupEstimate {
                site: labeling.giant_sites()[start],
                mean: s.mean,
                stderr: s.stderr,
            }
        })
        .collect())
}

/// `exp(t · scale · L_ω) g` on the giant by uniformization, for compact `g`.
///
/// The Poisson series is truncated once the remaining weight is below 1e-15.
pub fn semigroup_series(graph: &ClusterGraph, scale: f64, g: &[f64], t: f64) -> Result<Vec<f64>> {
    if g.len() != graph.len() {
        return Err(Error::DimensionMismatch {
            expected: graph.len(),
            actual: g.len(),
        });
    }
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("time must be nonnegative, got {t}")));
    }
    let rate = graph.max_rate() * scale;
    let mu = rate * t;
    if mu == 0.0 {
        return Ok(g.to_vec());
    }
    let step = |v: &[f64]| -> Vec<f64> {
        (0..graph.len())
            .into_par_iter()
            .map(|i| {
                let flow: f64 = graph
                    .edges(i)
                    .iter()
                    .map(|e| e.rate * (v[e.to as usize] - v[i]))
                    .sum();
                v[i] + scale * flow / rate
            })
            .collect()
    };
    let mut out = vec![0.0; g.len()];
    let mut v = g.to_vec();
    let mut log_w = -mu;
    let mut k = 0usize;
    loop {
        let w = log_w.exp();
        if w > 0.0 {
            out.iter_mut().zip(&v).for_each(|(o, x)| *o += w * x);
        }
        if poisson_tail_below(mu, k, w, 1e-15) {
            break;
        }
        if k as f64 > 10.0 * mu + 1000.0 {
            return Err(Error::NotConverged {
                iterations: k,
                residual: w,
            });
        }
        v = step(&v);
        k += 1;
        log_w += mu.ln() - (k as f64).ln();
    }
    Ok(out)
}

/// Whether the Poisson(`mu`) mass beyond term `k` (with weight `w_k`) is below `tol`.
///
/// Past term `k` successive terms shrink by at least `mu / (k + 1)`, so the
/// tail is bounded by a geometric series.
pub(crate) fn poisson_tail_below(mu: f64, k: usize, w_k: f64, tol: f64) -> bool {
    let ratio = mu / (k as f64 + 1.0);
    ratio < 1.0 && w_k * ratio / (1.0 - ratio) < tol
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolventSolution {
    /// Compact, indexed by giant site ordinal.
    pub u: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `(λ - ε^{-2} L_ω) u = f(ε·)` on the giant.
pub fn solve_resolvent_discrete(
    field: &ConductanceField,
    labeling: &ClusterLabeling,
    eps: EpsScale,
    lambda: f64,
    f: &GridField,
    opts: CgOptions,
) -> Result<ResolventSolution> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    check_compatible(field, labeling)?;
    let rhs = sample_on_cluster(f, eps, labeling)?;
    solve_resolvent_compact(field, labeling, eps, lambda, &rhs, opts)
}

pub fn solve_resolvent_compact(
    field: &ConductanceField,
    labeling: &ClusterLabeling,
    eps: EpsScale,
    lambda: f64,
    rhs: &[f64],
    opts: CgOptions,
) -> Result<ResolventSolution> {
    let e2 = eps.epsilon() * eps.epsilon();
    let lap = MaskedLaplacian::new(field, labeling, 1.0 / e2)?;
    if rhs.len() != lap.len() {
        return Err(Error::DimensionMismatch {
            expected: lap.len(),
            actual: rhs.len(),
        });
    }
    let out = cg_solve(
        |g, out| {
            lap.apply_into(g, out).expect("compact vector length");
            out.iter_mut()
                .zip(g)
                .for_each(|(o, x)| *o = lambda * x - *o);
        },
        rhs,
        opts.with_gauge(Gauge::None),
    )?
    .into_converged()?;
    Ok(ResolventSolution {
        residual: out.relative_residual(),
        iterations: out.iterations,
        u: out.x,
    })
}

/// `ε^d Σ_{x ∈ giant} (u_ε(x) - u0(εx))²`.
pub fn homogenization_error(
    u_eps: &[f64],
    u0: &GridField,
    eps: EpsScale,
    labeling: &ClusterLabeling,
) -> Result<f64> {
    let sampled = sample_on_cluster(u0, eps, labeling)?;
    if sampled.len() != u_eps.len() {
        return Err(Error::DimensionMismatch {
            expected: sampled.len(),
            actual: u_eps.len(),
        });
    }
    let sq: Vec<f64> = u_eps
        .iter()
        .zip(&sampled)
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(eps.site_weight(labeling.torus().dim()) * sum(&sq))
}

/// `ε^d Σ_x a(x) b(x)` over the giant: the `L²(μ^ε_ω)` inner product.
pub fn weighted_inner(a: &[f64], b: &[f64], eps: EpsScale, dim: usize) -> f64 {
    eps.site_weight(dim) * dot(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::label_components;
    use crate::env::{sample_field, FieldLaw};
    use crate::pde::{FieldTag, TrigPolynomial};
    use crate::streams::stream;

    fn ones(side: usize) -> (ConductanceField, ClusterLabeling) {
        let f = sample_field(&FieldLaw::Constant { c: 1.0 }, 2, side, 1.0, 0).unwrap();
        let lab = label_components(&f);
        (f, lab)
    }

    #[test]
    fn eps_validation() {
        assert!(EpsScale::new(0.0).is_err());
        assert!(EpsScale::new(1.5).is_err());
        assert_eq!(EpsScale::for_side(16).micro_time(0.25), 64.0);
    }

    #[test]
    fn trajectory_invariants() {
        let f = sample_field(&FieldLaw::Bernoulli { p: 0.7, value: 1.0 }, 2, 16, 1.0, 4).unwrap();
        let lab = label_components(&f);
        let g = ClusterGraph::new(&f, &lab).unwrap();
        let mut rng = stream(1, "test", 0);
        let traj = simulate_walk(&g, 0, 50.0, &mut rng).unwrap();
        let mut prev = (0.0, traj.start);
        for &(t, z) in &traj.events {
            assert!(t > prev.0 && t <= 50.0);
            assert!(g.edges(prev.1).iter().any(|e| e.to as usize == z));
            prev = (t, z);
        }
        assert!(simulate_walk(&g, g.len(), 1.0, &mut rng).is_err());
        assert!(simulate_walk(&g, 0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn jump_count_and_msd_on_constant_field() {
        let (f, lab) = ones(64);
        let g = ClusterGraph::new(&f, &lab).unwrap();
        let t_end = 2.0;
        let runs = 10_000;
        let mut jumps = Vec::new();
        let mut sq = Vec::new();
        for r in 0..runs {
            let mut rng = stream(7, "msd", r);
            let traj = simulate_walk(&g, 100, t_end, &mut rng).unwrap();
            jumps.push(traj.n_jumps() as f64);
            sq.push(traj.displacement.iter().map(|d| (d * d) as f64).sum());
        }
        // Poisson(4T) jump count; |X|² has mean 4T and variance 16T² + 4T
        let j = MeanStderr::of(&jumps);
        assert!((j.mean - 4.0 * t_end).abs() <= 3.0 * (4.0 * t_end / runs as f64).sqrt());
        let m = MeanStderr::of(&sq);
        let sigma = ((16.0 * t_end * t_end + 4.0 * t_end) / runs as f64).sqrt();
        assert!((m.mean - 4.0 * t_end).abs() <= 3.0 * sigma, "{m:?}");
    }

    #[test]
    fn constant_function_is_conserved() {
        let (f, lab) = ones(8);
        let one = crate::pde::GridField::constant(2, 8, 1.0, FieldTag::TestFunction).unwrap();
        let est = mc_semigroup(&f, &lab, EpsScale::for_side(8), &one, 0.1, 50, &[0, 9], 3).unwrap();
        for e in est {
            assert_eq!(e.mean, 1.0);
            assert_eq!(e.stderr, 0.0);
        }
    }

    #[test]
    fn short_time_is_identity() {
        let (f, lab) = ones(8);
        let phi = TrigPolynomial::cosine(1.0, vec![1, 0])
            .to_grid(2, 16, FieldTag::TestFunction)
            .unwrap();
        let eps = EpsScale::for_side(8);
        let est = mc_semigroup(&f, &lab, eps, &phi, 1e-6, 200, &[0, 18, 40], 5).unwrap();
        let exact = sample_on_cluster(&phi, eps, &lab).unwrap();
        for e in est {
            let x = lab.giant_index(e.site).unwrap();
            assert!((e.mean - exact[x]).abs() <= 3.0 * e.stderr + 1e-12);
        }
    }

    #[test]
    fn resolvent_constant_and_large_lambda() {
        let f = sample_field(&FieldLaw::IidUniform { lo: 0.2, hi: 1.0 }, 2, 8, 1.0, 2).unwrap();
        let lab = label_components(&f);
        let eps = EpsScale::for_side(8);
        let c = crate::pde::GridField::constant(2, 8, 3.0, FieldTag::TestFunction).unwrap();
        let sol = solve_resolvent_discrete(&f, &lab, eps, 2.0, &c, CgOptions::default()).unwrap();
        assert!(sol.u.iter().all(|u| (u - 1.5).abs() < 1e-12));

        let phi = TrigPolynomial::cosine(1.0, vec![1, 1]).plus(TrigPolynomial::constant(2.0));
        let g = phi.to_grid(2, 8, FieldTag::TestFunction).unwrap();
        let lam = 1e6;
        let sol = solve_resolvent_discrete(&f, &lab, eps, lam, &g, CgOptions::default()).unwrap();
        let rhs = sample_on_cluster(&g, eps, &lab).unwrap();
        for (u, r) in sol.u.iter().zip(&rhs) {
            assert!((u - r / lam).abs() <= 1e-4 * (r / lam).abs());
        }
        assert!(solve_resolvent_discrete(&f, &lab, eps, 0.0, &g, CgOptions::default()).is_err());
    }

    #[test]
    fn homogenization_error_examples() {
        let (_, lab) = ones(8);
        let eps = EpsScale::for_side(8);
        let u0 = TrigPolynomial::cosine(1.0, vec![0, 1])
            .to_grid(2, 16, FieldTag::Solution)
            .unwrap();
        let exact = sample_on_cluster(&u0, eps, &lab).unwrap();
        assert_eq!(homogenization_error(&exact, &u0, eps, &lab).unwrap(), 0.0);
        let shifted: Vec<f64> = exact.iter().map(|v| v + 0.5).collect();
        let err = homogenization_error(&shifted, &u0, eps, &lab).unwrap();
        assert!((err - 0.25 * lab.m_hat()).abs() < 1e-12);
    }

    #[test]
    fn series_matches_constant_and_mass() {
        let f = sample_field(&FieldLaw::IidUniform { lo: 0.1, hi: 1.0 }, 2, 6, 1.0, 8).unwrap();
        let lab = label_components(&f);
        let g = ClusterGraph::new(&f, &lab).unwrap();
        let ones = vec![1.0; g.len()];
        let out = semigroup_series(&g, 1.0, &ones, 3.0).unwrap();
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-13));
        let mut delta = vec![0.0; g.len()];
        delta[3] = 1.0;
        let out = semigroup_series(&g, 1.0, &delta, 2.0).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_tail_bound_is_conservative() {
        let mu: f64 = 50.0;
        let terms: Vec<f64> = (0..400)
            .scan(-mu, |lw, k| {
                let w = lw.exp();
                *lw += mu.ln() - ((k + 1) as f64).ln();
                Some(w)
            })
            .collect();
        let k = (0..400)
            .find(|&k| poisson_tail_below(mu, k, terms[k], 1e-15))
            .unwrap();
        let tail: f64 = terms[k + 1..].iter().sum();
        assert!(tail < 1e-15);
        assert!(k < 150);
    }
}
