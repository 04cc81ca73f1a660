//! Shared numerical kernels: the masked weighted Laplacian, conjugate
//! gradients with an optional mean-zero gauge, and Walker/Vose alias tables.
//!
//! Site-indexed vectors here are *compact*: entry `i` belongs to the `i`-th
//! giant site of the labeling.

use rand::Rng;
use rayon::prelude::*;

use crate::cluster::{check_compatible, ClusterLabeling};
use crate::env::ConductanceField;
use crate::error::{Error, Result};
use crate::numeric::{dot, norm, sum};

const PAR_THRESHOLD: usize = 4096;

/// Generator `scale * Σ_e ω(x, x±e) (g(x±e) - g(x))` restricted to the mask.
#[derive(Debug, Clone, Copy)]
pub struct MaskedLaplacian<'a> {
    field: &'a ConductanceField,
    labeling: &'a ClusterLabeling,
    scale: f64,
}

impl<'a> MaskedLaplacian<'a> {
    pub fn new(
        field: &'a ConductanceField,
        labeling: &'a ClusterLabeling,
        scale: f64,
    ) -> Result<Self> {
        check_compatible(field, labeling)?;
        Ok(MaskedLaplacian {
            field,
            labeling,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.labeling.giant_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    fn row(&self, i: usize, g: &[f64]) -> f64 {
        let torus = self.field.torus();
        let x = self.labeling.giant_sites()[i];
        let gx = g[i];
        let mut acc = 0.0;
        for axis in 0..torus.dim() {
            if let Some(j) = self.labeling.giant_index(torus.forward(x, axis)) {
                acc += self.field.weight(x, axis) * (g[j] - gx);
            }
            let z = torus.backward(x, axis);
            if let Some(k) = self.labeling.giant_index(z) {
                acc += self.field.weight(z, axis) * (g[k] - gx);
            }
        }
        self.scale * acc
    }

    pub fn apply_into(&self, g: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.len();
        for len in [g.len(), out.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        if n >= PAR_THRESHOLD {
            out.par_iter_mut()
                .enumerate()
                .for_each(|(i, o)| *o = self.row(i, g));
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.row(i, g);
            }
        }
        Ok(())
    }

    pub fn apply(&self, g: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.apply_into(g, &mut out)?;
        Ok(out)
    }

    /// `scale * Σ_{bonds inside the mask} ω(b) (g(y) - g(x))²`, summed once
    /// per undirected bond; equals `<g, -Lap g>`.
    pub fn dirichlet_energy(&self, g: &[f64]) -> Result<f64> {
        if g.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: g.len(),
            });
        }
        let torus = self.field.torus();
        let terms: Vec<f64> = self
            .labeling
            .giant_sites()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let mut acc = 0.0;
                for axis in 0..torus.dim() {
                    if let Some(j) = self.labeling.giant_index(torus.forward(x, axis)) {
                        let d = g[j] - g[i];
                        acc += self.field.weight(x, axis) * d * d;
                    }
                }
                acc
            })
            .collect();
        Ok(self.scale * sum(&terms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    None,
    MeanZero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub gauge: Gauge,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: 1e-10,
            max_iter: 20_000,
            gauge: Gauge::None,
        }
    }
}

impl CgOptions {
    pub fn with_gauge(mut self, gauge: Gauge) -> Self {
        self.gauge = gauge;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    /// `‖A x - b‖₂`, recomputed from the returned iterate.
    pub residual_norm: f64,
    pub rhs_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl CgOutcome {
    pub fn relative_residual(&self) -> f64 {
        if self.rhs_norm > 0.0 {
            self.residual_norm / self.rhs_norm
        } else {
            self.residual_norm
        }
    }

    /// Turns a non-converged outcome into an error.
    pub fn into_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                residual: self.relative_residual(),
            })
        }
    }
}

fn project_mean_zero(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let m = sum(v) / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    if y.len() >= PAR_THRESHOLD {
        y.par_iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
    } else {
        y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
    }
}

/// Conjugate gradients for a symmetric positive (semi)definite operator.
///
/// With [`Gauge::MeanZero`] the right side must sum to zero (relative to
/// `Σ|b|`, tolerance 1e-12) and every iterate is projected onto mean-zero
/// vectors. Non-convergence is reported through `converged = false` with the
/// best iterate seen.
pub fn cg_solve<F>(apply: F, b: &[f64], opts: CgOptions) -> Result<CgOutcome>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut rhs = b.to_vec();
    if opts.gauge == Gauge::MeanZero {
        let total = sum(b);
        let scale: f64 = sum(&b.iter().map(|v| v.abs()).collect::<Vec<_>>());
        if total.abs() > 1e-12 * scale {
            return Err(Error::GaugeViolation {
                mean: total / n.max(1) as f64,
            });
        }
        project_mean_zero(&mut rhs);
    }
    let b_norm = norm(&rhs);
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            residual_norm: 0.0,
            rhs_norm: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let target = opts.tol * b_norm;

    let mut x = vec![0.0; n];
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut best = (rr.sqrt(), x.clone());
    let mut iterations = 0;

    let true_residual = |x: &[f64], out: &mut Vec<f64>| {
        let mut ax = vec![0.0; n];
        apply(x, &mut ax);
        out.clear();
        out.extend(rhs.iter().zip(&ax).map(|(b, a)| b - a));
        if opts.gauge == Gauge::MeanZero {
            project_mean_zero(out);
        }
    };

    while iterations < opts.max_iter {
        apply(&p, &mut ap);
        if opts.gauge == Gauge::MeanZero {
            project_mean_zero(&mut ap);
        }
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        if opts.gauge == Gauge::MeanZero {
            project_mean_zero(&mut x);
            project_mean_zero(&mut r);
        }
        iterations += 1;
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() < best.0 {
            best = (rr_new.sqrt(), x.clone());
        }
        if rr_new.sqrt() <= target {
            // confirm against the true residual; restart from it if drifted
            true_residual(&x, &mut r);
            let rr_true = dot(&r, &r);
            if rr_true.sqrt() <= target {
                break;
            }
            rr = rr_true;
            p.copy_from_slice(&r);
            continue;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        if n >= PAR_THRESHOLD {
            p.par_iter_mut()
                .zip(&r)
                .for_each(|(p, r)| *p = r + beta * *p);
        } else {
            p.iter_mut().zip(&r).for_each(|(p, r)| *p = r + beta * *p);
        }
    }

    let mut res = Vec::with_capacity(n);
    true_residual(&x, &mut res);
    let mut residual_norm = norm(&res);
    if residual_norm > target {
        true_residual(&best.1, &mut res);
        let best_norm = norm(&res);
        if best_norm < residual_norm {
            x = best.1;
            residual_norm = best_norm;
        }
    }
    Ok(CgOutcome {
        x,
        residual_norm,
        rhs_norm: b_norm,
        iterations,
        converged: residual_norm <= target,
    })
}

/// Walker/Vose alias table over `n` categories.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "alias weights must be finite and nonnegative",
            ));
        }
        let total = sum(weights);
        if weights.is_empty() || total <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        let n = weights.len();
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![0.0; n];
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
        }
        Ok(AliasTable { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }

    /// Exact probability of each category encoded in the table.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut p: Vec<f64> = self.prob.iter().map(|q| q / n).collect();
        for (i, q) in self.prob.iter().enumerate() {
            p[self.alias[i] as usize] += (1.0 - q) / n;
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::label_components;
    use crate::env::{sample_field, FieldLaw};
    use crate::lattice::Torus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(side: usize) -> ConductanceField {
        sample_field(&FieldLaw::Constant { c: 1.0 }, 2, side, 1.0, 0).unwrap()
    }

    #[test]
    fn constants_in_kernel() {
        let f = sample_field(&FieldLaw::IidUniform { lo: 0.1, hi: 1.0 }, 2, 8, 1.0, 1).unwrap();
        let lab = label_components(&f);
        let lap = MaskedLaplacian::new(&f, &lab, 3.0).unwrap();
        let out = lap.apply(&vec![2.5; lap.len()]).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn point_indicator_on_4x4() {
        let f = ones(4);
        let lab = label_components(&f);
        let lap = MaskedLaplacian::new(&f, &lab, 2.0).unwrap();
        let t = f.torus();
        let x = t.site(&[1, 2]);
        let mut g = vec![0.0; 16];
        g[x] = 1.0;
        let out = lap.apply(&g).unwrap();
        assert_eq!(out[x], -8.0);
        let nbrs: Vec<usize> = (0..2)
            .flat_map(|a| [t.forward(x, a), t.backward(x, a)])
            .collect();
        for (s, &value) in out.iter().enumerate() {
            let expected = if s == x {
                -8.0
            } else if nbrs.contains(&s) {
                2.0
            } else {
                0.0
            };
            assert_eq!(value, expected, "site {s}");
        }
    }

    #[test]
    fn bonds_leaving_mask_are_ignored() {
        let f = ones(4);
        let t = *f.torus();
        let mut mask = vec![false; 16];
        mask[t.site(&[0, 0])] = true;
        mask[t.site(&[0, 1])] = true;
        let lab = ClusterLabeling::from_mask(t, &mask).unwrap();
        let lap = MaskedLaplacian::new(&f, &lab, 1.0).unwrap();
        let out = lap.apply(&[1.0, 0.0]).unwrap();
        assert_eq!(out, vec![-1.0, 1.0]);
        assert!(lap.apply(&[1.0]).is_err());
    }

    #[test]
    fn identity_solves_in_one_step() {
        let b = vec![1.0, -2.0, 3.0];
        let out = cg_solve(|x, y| y.copy_from_slice(x), &b, CgOptions::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert_eq!(out.x, b);
    }

    #[test]
    fn gauge_rejects_nonzero_mean() {
        let f = ones(4);
        let lab = label_components(&f);
        let lap = MaskedLaplacian::new(&f, &lab, 1.0).unwrap();
        let res = cg_solve(
            |x, y| lap.apply_into(x, y).unwrap(),
            &[1.0; 16],
            CgOptions::default().with_gauge(Gauge::MeanZero),
        );
        assert!(matches!(res, Err(Error::GaugeViolation { .. })));
    }

    #[test]
    fn non_convergence_is_flagged() {
        let f = ones(16);
        let lab = label_components(&f);
        let lap = MaskedLaplacian::new(&f, &lab, -1.0).unwrap();
        let mut b = vec![0.0; 256];
        b[0] = 1.0;
        b[100] = -1.0;
        let opts = CgOptions {
            tol: 1e-12,
            max_iter: 2,
            gauge: Gauge::MeanZero,
        };
        let out = cg_solve(|x, y| lap.apply_into(x, y).unwrap(), &b, opts).unwrap();
        assert!(!out.converged);
        assert!(matches!(
            out.into_converged(),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn alias_probabilities_exact() {
        let w = [1.0, 3.0, 0.0, 6.0];
        let t = AliasTable::new(&w).unwrap();
        for (p, q) in t.probabilities().iter().zip([0.1, 0.3, 0.0, 0.6]) {
            assert!((p - q).abs() < 1e-15);
        }
        assert!(matches!(
            AliasTable::new(&[0.0, 0.0]),
            Err(Error::ZeroWeights)
        ));
        assert!(AliasTable::new(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn alias_zero_weight_never_drawn() {
        let t = AliasTable::new(&[0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..10_000).all(|_| t.sample(&mut rng) == 1));
    }

    #[test]
    fn alias_frequencies_within_three_sigma() {
        let n = 100_000;
        for w in [[1.0, 1.0], [1.0, 3.0]] {
            let t = AliasTable::new(&w).unwrap();
            let p1 = w[1] / (w[0] + w[1]);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let hits = (0..n).filter(|_| t.sample(&mut rng) == 1).count() as f64;
            let sigma = (p1 * (1.0 - p1) / n as f64).sqrt();
            assert!((hits / n as f64 - p1).abs() <= 3.0 * sigma, "{w:?}");
        }
    }

    #[test]
    fn dirichlet_energy_of_indicator() {
        let f = ones(4);
        let lab = label_components(&f);
        let lap = MaskedLaplacian::new(&f, &lab, 1.0).unwrap();
        let mut g = vec![0.0; 16];
        g[Torus::new(2, 4).unwrap().site(&[2, 2])] = 1.0;
        assert_eq!(lap.dirichlet_energy(&g).unwrap(), 4.0);
    }
}
