//! Finite-volume corrector problem and the effective diffusion matrix.
//!
//! For a direction `ξ` the corrector `ψ` minimizes
//!
//! ```text
//! E_L(ψ) = Σ_{x ∈ Λ_L} Σ_{e} ω(x, x+e) 1[x, x+e ∈ giant] (ξ_e + ψ(x+e) - ψ(x))²
//! ```
//!
//! over mean-zero functions on the giant. Then `(ξ, D̂ ξ) = 2 E_L(ψ*) / L^d`
//! and `𝒟̂ = D̂ / (2 m̂)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::cluster::{check_compatible, label_components, replica_seed, ClusterLabeling};
use crate::env::{sample_field, ConductanceField, FieldLaw};
use crate::error::{Error, Result};
use crate::numeric::{sum, MeanStderr};
use crate::solver::{cg_solve, CgOptions, Gauge, MaskedLaplacian};

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorSolution {
    pub direction: Vec<f64>,
    /// Compact, indexed by giant site ordinal.
    pub psi: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub dirichlet_energy: f64,
}

/// `E_L(ψ)` for direction `xi`.
pub fn corrector_energy(
    field: &ConductanceField,
    labeling: &ClusterLabeling,
    xi: &[f64],
    psi: &[f64],
) -> f64 {
    let torus = field.torus();
    let terms: Vec<f64> = labeling
        .giant_sites()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut acc = 0.0;
            for (axis, &xe) in xi.iter().enumerate() {
                if let Some(j) = labeling.giant_index(torus.forward(x, axis)) {
                    let g = xe + psi[j] - psi[i];
                    acc += field.weight(x, axis) * g * g;
                }
            }
            acc
        })
        .collect();
    sum(&terms)
}

/// Divergence of the drift `ξ` on the giant: the right side of `-Lap ψ = b`.
fn drift_divergence(field: &ConductanceField, labeling: &ClusterLabeling, xi: &[f64]) -> Vec<f64> {
    let torus = field.torus();
    labeling
        .giant_sites()
        .iter()
        .map(|&x| {
            let mut acc = 0.0;
            for (axis, &xe) in xi.iter().enumerate() {
                if labeling.in_giant(torus.forward(x, axis)) {
                    acc += field.weight(x, axis) * xe;
                }
                let z = torus.backward(x, axis);
                if labeling.in_giant(z) {
                    acc -= field.weight(z, axis) * xe;
                }
            }
            acc
        })
        .collect()
}

pub fn solve_corrector(
    field: &ConductanceField,
    labeling: &ClusterLabeling,
    xi: &[f64],
    opts: CgOptions,
) -> Result<CorrectorSolution> {
    check_compatible(field, labeling)?;
    if xi.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            actual: xi.len(),
        });
    }
    if labeling.giant_size() == 0 {
        return Err(Error::EmptyGiant);
    }
    let lap = MaskedLaplacian::new(field, labeling, -1.0)?;
    let b = drift_divergence(field, labeling, xi);
    let out = cg_solve(
        |g, out| lap.apply_into(g, out).expect("compact vector length"),
        &b,
        opts.with_gauge(Gauge::MeanZero),
    )?
    .into_converged()?;
    let dirichlet_energy = corrector_energy(field, labeling, xi, &out.x);
    Ok(CorrectorSolution {
        direction: xi.to_vec(),
        residual: out.relative_residual(),
        iterations: out.iterations,
        psi: out.x,
        dirichlet_energy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionEstimate {
    pub d_hat: DMatrix<f64>,
    pub m_hat: f64,
    pub dcal_hat: DMatrix<f64>,
    pub side: usize,
    pub seed: Option<u64>,
    /// Largest relative CG residual over all direction solves.
    pub max_residual: f64,
    pub cg_iters: usize,
}

impl DiffusionEstimate {
    pub fn dim(&self) -> usize {
        self.d_hat.nrows()
    }

    /// Checks symmetry, the trial-function bounds and the `D̂ = 2 m̂ 𝒟̂` relation.
    pub fn check_invariants(&self, cap: f64) -> std::result::Result<(), String> {
        check_matrix_invariants(&self.d_hat, &self.dcal_hat, self.m_hat, cap)
    }
}

pub fn check_matrix_invariants(
    d_hat: &DMatrix<f64>,
    dcal_hat: &DMatrix<f64>,
    m_hat: f64,
    cap: f64,
) -> std::result::Result<(), String> {
    let d = d_hat.nrows();
    let scale = d_hat.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for i in 0..d {
        for j in 0..d {
            if (d_hat[(i, j)] - d_hat[(j, i)]).abs() > 1e-12 * scale {
                return Err(format!("D_hat not symmetric at ({}, {})", i + 1, j + 1));
            }
            if m_hat > 0.0 {
                let expect = d_hat[(i, j)] / (2.0 * m_hat);
                if (dcal_hat[(i, j)] - expect).abs() > 1e-12 * expect.abs().max(1e-300) {
                    return Err(format!(
                        "Dcal_hat != D_hat/(2 m_hat) at ({}, {})",
                        i + 1,
                        j + 1
                    ));
                }
            }
        }
        let q = d_hat[(i, i)];
        if q < -1e-12 * scale || q > 2.0 * cap * d as f64 * (1.0 + 1e-12) {
            return Err(format!("D_hat diagonal entry {q} out of [0, 2 c0 d]"));
        }
    }
    if !(0.0..=1.0).contains(&m_hat) {
        return Err(format!("m_hat {m_hat} outside [0, 1]"));
    }
    Ok(())
}

pub fn estimate_d(
    field: &ConductanceField,
    labeling: &ClusterLabeling,
    opts: CgOptions,
) -> Result<DiffusionEstimate> {
    check_compatible(field, labeling)?;
    if labeling.giant_size() == 0 {
        return Err(Error::EmptyGiant);
    }
    let d = field.dim();
    let volume = field.torus().n_sites() as f64;

    // axis directions first, then e_i ± e_j for i < j
    let mut directions: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|k| if k == i { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            pairs.push((i, j));
            for sign in [1.0, -1.0] {
                let mut xi = vec![0.0; d];
                xi[i] = 1.0;
                xi[j] = sign;
                directions.push(xi);
            }
        }
    }

    let solutions = directions
        .par_iter()
        .map(|xi| solve_corrector(field, labeling, xi, opts))
        .collect::<Result<Vec<_>>>()?;
    let quad: Vec<f64> = solutions
        .iter()
        .map(|s| 2.0 * s.dirichlet_energy / volume)
        .collect();

    let mut d_hat = DMatrix::zeros(d, d);
    for i in 0..d {
        d_hat[(i, i)] = quad[i];
    }
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let v = (quad[d + 2 * k] - quad[d + 2 * k + 1]) / 4.0;
        d_hat[(i, j)] = v;
        d_hat[(j, i)] = v;
    }
    let m_hat = labeling.m_hat();
    let dcal_hat = &d_hat / (2.0 * m_hat);
    Ok(DiffusionEstimate {
        d_hat,
        m_hat,
        dcal_hat,
        side: field.side(),
        seed: field.provenance().map(|p| p.seed),
        max_residual: solutions.iter().map(|s| s.residual).fold(0.0, f64::max),
        cg_iters: solutions.iter().map(|s| s.iterations).sum(),
    })
}

/// Per-side aggregate of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SideSummary {
    pub side: usize,
    pub m_hat: MeanStderr,
    /// Row-major `d × d` entries of `𝒟̂`.
    pub dcal: Vec<MeanStderr>,
}

impl SideSummary {
    pub fn dcal_entry(&self, i: usize, j: usize) -> MeanStderr {
        let d = (self.dcal.len() as f64).sqrt() as usize;
        self.dcal[i * d + j]
    }

    pub fn dcal_mean(&self) -> DMatrix<f64> {
        let d = (self.dcal.len() as f64).sqrt() as usize;
        DMatrix::from_fn(d, d, |i, j| self.dcal[i * d + j].mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub law: FieldLaw,
    pub estimates: Vec<DiffusionEstimate>,
    pub summaries: Vec<SideSummary>,
}

/// Finite-size study: `n_seeds` replicas at each side. Replica `i` uses the
/// field seed `replica_seed(seed, i)` at every side.
pub fn sweep_d(
    law: &FieldLaw,
    dim: usize,
    cap: f64,
    sides: &[usize],
    n_seeds: usize,
    seed: u64,
    opts: CgOptions,
) -> Result<SweepTable> {
    if sides.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sides must be strictly increasing"));
    }
    if n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be at least 1"));
    }
    let mut estimates = Vec::new();
    let mut summaries = Vec::new();
    for &side in sides {
        let batch = (0..n_seeds)
            .into_par_iter()
            .map(|i| {
                let field = sample_field(law, dim, side, cap, replica_seed(seed, i))?;
                let labeling = label_components(&field);
                estimate_d(&field, &labeling, opts)
            })
            .collect::<Result<Vec<_>>>()?;
        let m: Vec<f64> = batch.iter().map(|e| e.m_hat).collect();
        let dcal = (0..dim * dim)
            .map(|k| {
                let vals: Vec<f64> = batch
                    .iter()
                    .map(|e| e.dcal_hat[(k / dim, k % dim)])
                    .collect();
                MeanStderr::of(&vals)
            })
            .collect();
        summaries.push(SideSummary {
            side,
            m_hat: MeanStderr::of(&m),
            dcal,
        });
        estimates.extend(batch);
    }
    Ok(SweepTable {
        law: law.clone(),
        estimates,
        summaries,
    })
}

/// Column names of the corrector CSV for dimension `d`.
pub fn csv_header(d: usize) -> Vec<String> {
    let mut h = vec!["law".into(), "L".into(), "seed".into(), "m_hat".into()];
    for prefix in ["D", "Dcal"] {
        for i in 1..=d {
            for j in 1..=d {
                h.push(format!("{prefix}{i}{j}"));
            }
        }
    }
    h.push("residual".into());
    h.push("cg_iters".into());
    h
}

pub fn csv_record(law: &FieldLaw, e: &DiffusionEstimate) -> Vec<String> {
    let d = e.dim();
    let mut r = vec![
        serde_json::to_string(law).unwrap_or_default(),
        e.side.to_string(),
        e.seed.map(|s| s.to_string()).unwrap_or_default(),
        format!("{:e}", e.m_hat),
    ];
    for m in [&e.d_hat, &e.dcal_hat] {
        for i in 0..d {
            for j in 0..d {
                r.push(format!("{:e}", m[(i, j)]));
            }
        }
    }
    r.push(format!("{:e}", e.max_residual));
    r.push(e.cg_iters.to_string());
    r
}

/// Per-side summary row for the sweep CSV.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    #[serde(rename = "L")]
    pub side: usize,
    pub n: usize,
    pub m_hat: f64,
    pub m_hat_stderr: f64,
    pub entry: String,
    pub dcal_mean: f64,
    pub dcal_stderr: f64,
}

pub fn summary_rows(table: &SweepTable) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for s in &table.summaries {
        let d = (s.dcal.len() as f64).sqrt() as usize;
        for (k, v) in s.dcal.iter().enumerate() {
            rows.push(SummaryRow {
                side: s.side,
                n: v.n,
                m_hat: s.m_hat.mean,
                m_hat_stderr: s.m_hat.stderr,
                entry: format!("Dcal{}{}", k / d + 1, k % d + 1),
                dcal_mean: v.mean,
                dcal_stderr: v.stderr,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::AxisRule;

    fn layered(axes: Vec<AxisRule>, side: usize) -> (ConductanceField, ClusterLabeling) {
        let f = sample_field(&FieldLaw::Layered { axes }, 2, side, 3.0, 0).unwrap();
        let lab = label_components(&f);
        (f, lab)
    }

    #[test]
    fn constant_field_has_zero_corrector() {
        let f = sample_field(&FieldLaw::Constant { c: 1.0 }, 2, 8, 1.0, 0).unwrap();
        let lab = label_components(&f);
        let xi = [0.6, 0.8];
        let sol = solve_corrector(&f, &lab, &xi, CgOptions::default()).unwrap();
        assert!(sol.psi.iter().all(|p| p.abs() < 1e-12));
        assert!((sol.dirichlet_energy - 64.0).abs() < 1e-10);
        let est = estimate_d(&f, &lab, CgOptions::default()).unwrap();
        assert!((est.d_hat.clone() - DMatrix::identity(2, 2) * 2.0).amax() < 1e-10);
        assert!((est.dcal_hat.clone() - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn rows_parallel_to_drift() {
        // horizontal bonds 1 / 3 on alternating rows, vertical bonds 2
        let (f, lab) = layered(
            vec![
                AxisRule {
                    along: 1,
                    values: vec![1.0, 3.0],
                },
                AxisRule::constant(1, 2.0),
            ],
            8,
        );
        let sol = solve_corrector(&f, &lab, &[1.0, 0.0], CgOptions::default()).unwrap();
        assert!(sol.psi.iter().all(|p| p.abs() < 1e-12));
        assert!((sol.dirichlet_energy - 64.0 * 2.0).abs() < 1e-10);
    }

    #[test]
    fn series_layers_give_harmonic_mean() {
        // vertical bonds 1 / 3 on alternating rows, horizontal bonds 1
        let (f, lab) = layered(
            vec![
                AxisRule::constant(0, 1.0),
                AxisRule {
                    along: 1,
                    values: vec![1.0, 3.0],
                },
            ],
            8,
        );
        let sol = solve_corrector(&f, &lab, &[0.0, 1.0], CgOptions::default()).unwrap();
        assert!((sol.dirichlet_energy / 64.0 - 1.5).abs() < 1e-10);
        let t = f.torus();
        for (i, &x) in lab.giant_sites().iter().enumerate() {
            let y = t.forward(x, 0);
            assert!((sol.psi[i] - sol.psi[lab.giant_index(y).unwrap()]).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_giant_rejected() {
        let f = sample_field(&FieldLaw::Constant { c: 0.0 }, 2, 4, 1.0, 0).unwrap();
        let lab = label_components(&f);
        assert!(matches!(
            solve_corrector(&f, &lab, &[1.0, 0.0], CgOptions::default()),
            Err(Error::EmptyGiant)
        ));
        assert!(matches!(
            estimate_d(&f, &lab, CgOptions::default()),
            Err(Error::EmptyGiant)
        ));
    }

    #[test]
    fn csv_header_layout() {
        assert_eq!(
            csv_header(2),
            vec![
                "law", "L", "seed", "m_hat", "D11", "D12", "D21", "D22", "Dcal11", "Dcal12",
                "Dcal21", "Dcal22", "residual", "cg_iters"
            ]
        );
    }

    #[test]
    fn sweep_constant_law_is_flat() {
        let t = sweep_d(
            &FieldLaw::Constant { c: 1.0 },
            2,
            1.0,
            &[4, 8],
            3,
            1,
            CgOptions::default(),
        )
        .unwrap();
        assert_eq!(t.estimates.len(), 6);
        for s in &t.summaries {
            assert!(s.dcal.iter().all(|v| v.stderr == 0.0));
            assert!((s.dcal_entry(0, 0).mean - 1.0).abs() < 1e-10);
        }
        assert!(sweep_d(
            &FieldLaw::Constant { c: 1.0 },
            2,
            1.0,
            &[8, 4],
            1,
            0,
            CgOptions::default()
        )
        .is_err());
    }
}
