//! Simple exclusion process among random conductances on the giant cluster.
//!
//! Realized with one global exponential clock of rate `R = Σ_b ω(b)` over the
//! giant bonds; at each ring a bond is chosen with probability `ω(b) / R`
//! (alias table) and the occupancies of its endpoints are exchanged. Rings on
//! bonds with equal occupancies are kept as no-op events.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{check_compatible, ClusterLabeling};
use crate::env::ConductanceField;
use crate::error::{Error, Result};
use crate::graph::ClusterGraph;
use crate::numeric::{dot, MeanStderr};
use crate::pde::{heat_evolve, sample_on_cluster, DiffusionMatrix, FieldTag, GridField};
use crate::solver::AliasTable;
use crate::streams::stream;
use crate::walk::{mc_semigroup, semigroup_series, EpsScale};

/// Occupation bits over the giant, in compact site order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyConfig {
    bits: Vec<u64>,
    n_sites: usize,
    particle_count: usize,
    time_stamp_bits: u64,
}

impl OccupancyConfig {
    pub fn empty(n_sites: usize) -> Self {
        OccupancyConfig {
            bits: vec![0; n_sites.div_ceil(64)],
            n_sites,
            particle_count: 0,
            time_stamp_bits: 0f64.to_bits(),
        }
    }

    pub fn from_occupied(
        n_sites: usize,
        occupied: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let mut c = OccupancyConfig::empty(n_sites);
        for i in occupied {
            if i >= n_sites {
                return Err(Error::invalid(format!(
                    "site {i} outside configuration of {n_sites}"
                )));
            }
            if !c.get(i) {
                c.bits[i / 64] |= 1 << (i % 64);
                c.particle_count += 1;
            }
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.n_sites
    }

    pub fn is_empty(&self) -> bool {
        self.n_sites == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.bits[i / 64] >> (i % 64)) & 1 == 1
    }

    /// Exchanges the occupancies of `i` and `j`.
    #[inline]
    pub fn swap(&mut self, i: usize, j: usize) {
        if self.get(i) != self.get(j) {
            self.bits[i / 64] ^= 1 << (i % 64);
            self.bits[j / 64] ^= 1 << (j % 64);
        }
    }

    pub fn particle_count(&self) -> usize {
        self.particle_count
    }

    pub fn time_stamp(&self) -> f64 {
        f64::from_bits(self.time_stamp_bits)
    }

    fn set_time(&mut self, t: f64) {
        self.time_stamp_bits = t.to_bits();
    }

    /// Recounts the set bits.
    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        (0..self.n_sites)
            .map(|i| if self.get(i) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Configuration as an integer (bit `i` = site `i`); only for `n ≤ 64`.
    pub fn state_index(&self) -> Option<usize> {
        (self.n_sites <= 64 && self.n_sites < usize::BITS as usize).then(|| self.bits[0] as usize)
    }
}

/// Global clock over the giant bonds.
#[derive(Debug, Clone)]
pub struct ClockSchedule {
    bonds: Vec<(u32, u32)>,
    alias: Option<AliasTable>,
    total_rate: f64,
}

impl ClockSchedule {
    pub fn new(graph: &ClusterGraph) -> Result<Self> {
        let bonds: Vec<(u32, u32)> = graph.bonds().iter().map(|b| (b.0, b.1)).collect();
        let weights: Vec<f64> = graph.bonds().iter().map(|b| b.2).collect();
        let total_rate = crate::numeric::sum(&weights);
        let alias = if bonds.is_empty() {
            None
        } else {
            Some(AliasTable::new(&weights)?)
        };
        Ok(ClockSchedule {
            bonds,
            alias,
            total_rate,
        })
    }

    pub fn from_field(field: &ConductanceField, labeling: &ClusterLabeling) -> Result<Self> {
        ClockSchedule::new(&ClusterGraph::new(field, labeling)?)
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    pub fn n_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// Exact probability of selecting each bond.
    pub fn selection_probabilities(&self) -> Vec<f64> {
        self.alias
            .as_ref()
            .map(|a| a.probabilities())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    /// Sites where `ρ₀(εx) > m̂` forced the occupation probability to 1.
    pub clamped_sites: usize,
    pub max_probability: f64,
}

/// Product Bernoulli measure with `P(η_x = 1) = ρ₀(εx) / m̂`.
pub fn init_product_measure<R: Rng + ?Sized>(
    labeling: &ClusterLabeling,
    rho0: &GridField,
    m_hat: f64,
    eps: EpsScale,
    rng: &mut R,
) -> Result<(OccupancyConfig, InitReport)> {
    if !(m_hat > 0.0) {
        return Err(Error::invalid("m_hat must be positive"));
    }
    let profile = sample_on_cluster(rho0, eps, labeling)?;
    let mut report = InitReport::default();
    let mut occupied = Vec::new();
    for (i, &rho) in profile.iter().enumerate() {
        let mut p = rho / m_hat;
        if p > 1.0 {
            report.clamped_sites += 1;
            p = 1.0;
        }
        if p < 0.0 {
            return Err(Error::invalid(format!(
                "negative density {rho} at giant site {i}"
            )));
        }
        report.max_probability = report.max_probability.max(p);
        // draw unconditionally so the stream position does not depend on p
        let u: f64 = rng.random();
        if u < p {
            occupied.push(i);
        }
    }
    if report.clamped_sites > 0 {
        warn!(
            "initial profile exceeds m_hat = {m_hat} at {} sites; probabilities clamped to 1",
            report.clamped_sites
        );
    }
    Ok((
        OccupancyConfig::from_occupied(profile.len(), occupied)?,
        report,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionRun {
    /// One configuration per requested record time.
    pub snapshots: Vec<OccupancyConfig>,
    pub events: u64,
    /// Set when the giant has no bonds and the dynamics is frozen.
    pub frozen: bool,
}

/// Exact kinetic Monte Carlo of the exclusion process up to micro time `t_micro`.
pub fn simulate_exclusion<R: Rng + ?Sized>(
    schedule: &ClockSchedule,
    eta0: &OccupancyConfig,
    t_micro: f64,
    record_times: &[f64],
    rng: &mut R,
) -> Result<ExclusionRun> {
    if !(t_micro >= 0.0) {
        return Err(Error::invalid(format!(
            "time must be nonnegative, got {t_micro}"
        )));
    }
    if record_times.windows(2).any(|w| w[0] > w[1])
        || record_times.iter().any(|&t| !(0.0..=t_micro).contains(&t))
    {
        return Err(Error::invalid("record times must be sorted within [0, T]"));
    }
    let mut eta = eta0.clone();
    let count0 = eta0.particle_count();
    let mut snapshots = Vec::with_capacity(record_times.len());
    let snapshot = |eta: &OccupancyConfig, t: f64, out: &mut Vec<OccupancyConfig>| {
        let mut s = eta.clone();
        s.set_time(t);
        assert_eq!(s.count_ones(), count0, "particle number changed");
        out.push(s);
    };

    let Some(alias) = schedule.alias.as_ref() else {
        if t_micro > 0.0 {
            warn!("exclusion requested on a giant without bonds; configuration is frozen");
        }
        for &t in record_times {
            snapshot(&eta, t, &mut snapshots);
        }
        return Ok(ExclusionRun {
            snapshots,
            events: 0,
            frozen: t_micro > 0.0,
        });
    };

    let rate = schedule.total_rate;
    let mut t = 0.0;
    let mut next = 0;
    let mut events = 0u64;
    loop {
        let dt: f64 = Exp1.sample(rng);
        let t_next = t + dt / rate;
        while next < record_times.len() && record_times[next] < t_next {
            snapshot(&eta, record_times[next], &mut snapshots);
            next += 1;
        }
        if t_next > t_micro {
            break;
        }
        let (i, j) = schedule.bonds[alias.sample(rng)];
        eta.swap(i as usize, j as usize);
        events += 1;
        t = t_next;
    }
    Ok(ExclusionRun {
        snapshots,
        events,
        frozen: false,
    })
}

/// Block density estimator on a `cells^d` grid: cell value is
/// `ε^d · (particles in cell) / (cell volume)`. Node `j` of the returned grid
/// holds the average over the cell `[j/c, (j+1)/c)`.
pub fn empirical_profile(
    eta: &OccupancyConfig,
    labeling: &ClusterLabeling,
    eps: EpsScale,
    cells_per_axis: usize,
) -> Result<GridField> {
    let torus = labeling.torus();
    let (d, side) = (torus.dim(), torus.side());
    if cells_per_axis == 0 || side % cells_per_axis != 0 {
        return Err(Error::invalid(format!(
            "{cells_per_axis} cells do not divide side {side}"
        )));
    }
    if eta.len() != labeling.giant_size() {
        return Err(Error::DimensionMismatch {
            expected: labeling.giant_size(),
            actual: eta.len(),
        });
    }
    let block = side / cells_per_axis;
    let mut counts = vec![0.0; cells_per_axis.pow(d as u32)];
    for (i, &x) in labeling.giant_sites().iter().enumerate() {
        if eta.get(i) {
            let cell = (0..d).fold(0, |acc, a| acc * cells_per_axis + torus.coord(x, a) / block);
            counts[cell] += 1.0;
        }
    }
    let cell_volume = (1.0 / cells_per_axis as f64).powi(d as i32);
    let w = eps.site_weight(d) / cell_volume;
    counts.iter_mut().for_each(|c| *c *= w);
    GridField::new(d, cells_per_axis, counts, FieldTag::Density)
}

/// Empirical pairing `ε^d Σ_x φ(εx) η_x` for compact samples `phi`.
pub fn pairing(eta: &OccupancyConfig, phi: &[f64], eps: EpsScale, dim: usize) -> f64 {
    eps.site_weight(dim) * dot(&eta.as_f64(), phi)
}

/// A named test function for pairing checks.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub name: String,
    pub grid: GridField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingStat {
    pub name: String,
    /// `∫ φ ρ dx` from the continuum reference.
    pub reference: f64,
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    /// `mean - reference`; the finite-ε bias plus statistical error.
    pub bias: f64,
    /// Exact expectation of the pairing given the environment,
    /// `ε^d Σ_x φ(εx) (P^ε_t p₀)(x)` with `p₀` the initial occupation probabilities.
    pub quenched_mean: f64,
    /// `quenched_mean - reference`: the part of the bias due to the finite
    /// environment and lattice, which run-to-run noise cannot cover.
    pub environment_bias: f64,
    pub pass: bool,
}

impl PairingStat {
    fn new(name: &str, reference: f64, quenched_mean: f64, per_run: Vec<f64>) -> Self {
        let s = MeanStderr::of(&per_run);
        let bias = s.mean - reference;
        PairingStat {
            name: name.to_string(),
            reference,
            pass: within_three_sigma(bias, s.stderr),
            per_run,
            mean: s.mean,
            stderr: s.stderr,
            bias,
            quenched_mean,
            environment_bias: quenched_mean - reference,
        }
    }

    /// `(mean - quenched_mean) / stderr`: the purely statistical deviation.
    pub fn statistical_z(&self) -> f64 {
        let d = self.mean - self.quenched_mean;
        if self.stderr > 0.0 {
            d / self.stderr
        } else if d.abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// `|x| ≤ 3σ`, with a 1e-12 floor for deterministic quantities.
pub fn within_three_sigma(x: f64, sigma: f64) -> bool {
    x.abs() <= 3.0 * sigma + 1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationAudit {
    pub initial_counts: Vec<usize>,
    /// Runs in which some snapshot had a different particle count.
    pub violations: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydroReport {
    pub epsilon: f64,
    pub t_macro: f64,
    pub t_micro: f64,
    pub n_runs: usize,
    pub m_hat: f64,
    pub diffusion: Vec<Vec<f64>>,
    pub initial: Vec<PairingStat>,
    pub final_: Vec<PairingStat>,
    /// Mean over runs of `Σ_cells |ρ̂ - ρ̄| · cell volume`.
    pub profile_l1_error: f64,
    pub cells_per_axis: usize,
    /// Cell averages of the reference solution at `t_macro`.
    pub reference_profile: Vec<f64>,
    /// Empirical profile averaged over runs.
    pub mean_profile: Vec<f64>,
    pub conservation: ConservationAudit,
    pub clamped_sites: usize,
    pub mean_events: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct HydroSetup<'a> {
    pub field: &'a ConductanceField,
    pub labeling: &'a ClusterLabeling,
    pub dcal: &'a DiffusionMatrix,
    pub rho0: &'a GridField,
    pub t_macro: f64,
    pub eps: EpsScale,
    pub n_runs: usize,
    pub battery: &'a [TestFunction],
    pub cells_per_axis: usize,
    pub seed: u64,
}

/// Hydrodynamic-limit experiment: exclusion from the product measure of `ρ₀`
/// run to micro time `ε^{-2} t`, compared with the heat equation solution.
pub fn hydro_experiment(setup: &HydroSetup<'_>) -> Result<HydroReport> {
    let HydroSetup {
        field,
        labeling,
        dcal,
        rho0,
        t_macro,
        eps,
        n_runs,
        battery,
        cells_per_axis,
        seed,
    } = *setup;
    check_compatible(field, labeling)?;
    if labeling.giant_size() == 0 {
        return Err(Error::EmptyGiant);
    }
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be at least 1"));
    }
    if !(t_macro >= 0.0) {
        return Err(Error::invalid("t_macro must be nonnegative"));
    }
    let dim = field.dim();
    let m_hat = labeling.m_hat();
    let t_micro = eps.micro_time(t_macro);
    let rho_t = heat_evolve(rho0, dcal, t_macro)?;

    let phis: Vec<Vec<f64>> = battery
        .iter()
        .map(|tf| sample_on_cluster(&tf.grid, eps, labeling))
        .collect::<Result<_>>()?;
    let refs = |rho: &GridField| -> Result<Vec<f64>> {
        battery
            .iter()
            .map(|tf| grid_pairing(&tf.grid, rho))
            .collect()
    };
    let ref0 = refs(rho0)?;
    let ref_t = refs(&rho_t)?;

    // first moments of the exclusion process solve the one-particle equation
    let graph = ClusterGraph::new(field, labeling)?;
    let p0: Vec<f64> = sample_on_cluster(rho0, eps, labeling)?
        .into_iter()
        .map(|r| (r / m_hat).clamp(0.0, 1.0))
        .collect();
    let scale = 1.0 / (eps.epsilon() * eps.epsilon());
    let p_t = semigroup_series(&graph, scale, &p0, t_macro)?;
    let q0: Vec<f64> = phis
        .iter()
        .map(|p| eps.site_weight(dim) * dot(p, &p0))
        .collect();
    let q_t: Vec<f64> = phis
        .iter()
        .map(|p| eps.site_weight(dim) * dot(p, &p_t))
        .collect();
    let schedule = ClockSchedule::new(&graph)?;
    let reference_profile = cell_average(&rho_t, cells_per_axis)?;

    struct RunOut {
        initial: Vec<f64>,
        fin: Vec<f64>,
        profile: Vec<f64>,
        count0: usize,
        conserved: bool,
        clamped: usize,
        events: u64,
    }
    let runs = (0..n_runs)
        .into_par_iter()
        .map(|r| -> Result<RunOut> {
            let mut rng = stream(seed, "hydro-run", r as u64);
            let (eta0, init) = init_product_measure(labeling, rho0, m_hat, eps, &mut rng)?;
            let run = simulate_exclusion(&schedule, &eta0, t_micro, &[t_micro], &mut rng)?;
            let eta_t = &run.snapshots[0];
            let profile = empirical_profile(eta_t, labeling, eps, cells_per_axis)?;
            Ok(RunOut {
                initial: phis.iter().map(|p| pairing(&eta0, p, eps, dim)).collect(),
                fin: phis.iter().map(|p| pairing(eta_t, p, eps, dim)).collect(),
                profile: profile.values().to_vec(),
                count0: eta0.particle_count(),
                conserved: run
                    .snapshots
                    .iter()
                    .all(|s| s.count_ones() == eta0.particle_count()),
                clamped: init.clamped_sites,
                events: run.events,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let stats =
        |pick: &dyn Fn(&RunOut) -> &Vec<f64>, refs: &[f64], quenched: &[f64]| -> Vec<PairingStat> {
            battery
                .iter()
                .enumerate()
                .map(|(k, tf)| {
                    PairingStat::new(
                        &tf.name,
                        refs[k],
                        quenched[k],
                        runs.iter().map(|r| pick(r)[k]).collect(),
                    )
                })
                .collect()
        };
    let initial = stats(&|r| &r.initial, &ref0, &q0);
    let final_ = stats(&|r| &r.fin, &ref_t, &q_t);

    let cell_vol = (1.0 / cells_per_axis as f64).powi(dim as i32);
    let l1: Vec<f64> = runs
        .iter()
        .map(|r| {
            r.profile
                .iter()
                .zip(&reference_profile)
                .map(|(a, b)| (a - b).abs() * cell_vol)
                .sum()
        })
        .collect();
    let mut mean_profile = vec![0.0; reference_profile.len()];
    for r in &runs {
        mean_profile
            .iter_mut()
            .zip(&r.profile)
            .for_each(|(m, v)| *m += v / n_runs as f64);
    }
    let violations = runs.iter().filter(|r| !r.conserved).count();
    let conservation = ConservationAudit {
        initial_counts: runs.iter().map(|r| r.count0).collect(),
        violations,
        pass: violations == 0,
    };
    let pass = conservation.pass && final_.iter().all(|s| s.pass);
    Ok(HydroReport {
        epsilon: eps.epsilon(),
        t_macro,
        t_micro,
        n_runs,
        m_hat,
        diffusion: matrix_rows(dcal),
        initial,
        final_,
        profile_l1_error: crate::numeric::mean(&l1),
        cells_per_axis,
        reference_profile,
        mean_profile,
        conservation,
        clamped_sites: runs.iter().map(|r| r.clamped).max().unwrap_or(0),
        mean_events: runs.iter().map(|r| r.events as f64).sum::<f64>() / n_runs as f64,
        pass,
    })
}

fn matrix_rows(d: &DiffusionMatrix) -> Vec<Vec<f64>> {
    let m = d.matrix();
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// `∫ φ ρ dx`, resampling `φ` onto `ρ`'s grid when the resolutions differ.
fn grid_pairing(phi: &GridField, rho: &GridField) -> Result<f64> {
    if phi.resolution() == rho.resolution() {
        return phi.pairing(rho);
    }
    let resampled = GridField::from_fn(rho.dim(), rho.resolution(), FieldTag::TestFunction, |x| {
        phi.interpolate(x)
    })?;
    resampled.pairing(rho)
}

/// Block averages of `g` over `cells^d` equal cells.
fn cell_average(g: &GridField, cells: usize) -> Result<Vec<f64>> {
    let (d, n) = (g.dim(), g.resolution());
    if cells == 0 || n % cells != 0 {
        return Err(Error::invalid(format!(
            "reference grid {n} is not a multiple of {cells} cells"
        )));
    }
    let block = n / cells;
    let mut out = vec![0.0; cells.pow(d as u32)];
    for (idx, v) in g.values().iter().enumerate() {
        let mut rem = idx;
        let mut cell = 0;
        let mut mult = 1;
        for _ in 0..d {
            cell += (rem % n) / block * mult;
            mult *= cells;
            rem /= n;
        }
        out[cell] += v;
    }
    let per = (block.pow(d as u32)) as f64;
    out.iter_mut().for_each(|v| *v /= per);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SemigroupMethod {
    /// Uniformization series of the rescaled generator.
    Exact,
    MonteCarlo {
        n_walkers: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceStat {
    pub name: String,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub mean_difference: f64,
    pub stderr: f64,
    pub max_abs_difference: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingCheckReport {
    pub epsilon: f64,
    pub t_macro: f64,
    pub n_runs: usize,
    pub method: SemigroupMethod,
    pub stats: Vec<DifferenceStat>,
    pub particle_conservation: bool,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct PairingSetup<'a> {
    pub field: &'a ConductanceField,
    pub labeling: &'a ClusterLabeling,
    pub eps: EpsScale,
    pub rho0: &'a GridField,
    pub battery: &'a [TestFunction],
    pub t_macro: f64,
    pub n_runs: usize,
    pub method: SemigroupMethod,
    pub seed: u64,
}

/// Compares `ε^d Σ φ(εx) η_x(ε^{-2}t)` with `ε^d Σ η_x(0) P^ε_t φ(εx)`.
pub fn hydro_pairing_check(setup: &PairingSetup<'_>) -> Result<PairingCheckReport> {
    let PairingSetup {
        field,
        labeling,
        eps,
        rho0,
        battery,
        t_macro,
        n_runs,
        method,
        seed,
    } = *setup;
    check_compatible(field, labeling)?;
    if labeling.giant_size() == 0 {
        return Err(Error::EmptyGiant);
    }
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be at least 1"));
    }
    let dim = field.dim();
    let graph = ClusterGraph::new(field, labeling)?;
    let schedule = ClockSchedule::new(&graph)?;
    let t_micro = eps.micro_time(t_macro);
    let scale = 1.0 / (eps.epsilon() * eps.epsilon());

    let mut phis = Vec::new();
    let mut evolved = Vec::new();
    for tf in battery {
        let phi = sample_on_cluster(&tf.grid, eps, labeling)?;
        let p = if t_macro == 0.0 {
            phi.clone()
        } else {
            match method {
                SemigroupMethod::Exact => semigroup_series(&graph, scale, &phi, t_macro)?,
                SemigroupMethod::MonteCarlo { n_walkers } => mc_semigroup(
                    field,
                    labeling,
                    eps,
                    &tf.grid,
                    t_macro,
                    n_walkers,
                    labeling.giant_sites(),
                    crate::streams::derive_seed(seed, "pairing-semigroup", 0),
                )?
                .into_iter()
                .map(|e| e.mean)
                .collect(),
            }
        };
        phis.push(phi);
        evolved.push(p);
    }

    let m_hat = labeling.m_hat();
    let runs = (0..n_runs)
        .into_par_iter()
        .map(|r| -> Result<(Vec<f64>, Vec<f64>, bool)> {
            let mut rng = stream(seed, "pairing-run", r as u64);
            let (eta0, _) = init_product_measure(labeling, rho0, m_hat, eps, &mut rng)?;
            let run = simulate_exclusion(&schedule, &eta0, t_micro, &[t_micro], &mut rng)?;
            let eta_t = &run.snapshots[0];
            let lhs = phis.iter().map(|p| pairing(eta_t, p, eps, dim)).collect();
            let rhs = evolved
                .iter()
                .map(|p| pairing(&eta0, p, eps, dim))
                .collect();
            Ok((lhs, rhs, eta_t.count_ones() == eta0.particle_count()))
        })
        .collect::<Result<Vec<_>>>()?;

    let stats: Vec<DifferenceStat> = battery
        .iter()
        .enumerate()
        .map(|(k, tf)| {
            let lhs: Vec<f64> = runs.iter().map(|r| r.0[k]).collect();
            let rhs: Vec<f64> = runs.iter().map(|r| r.1[k]).collect();
            let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            let s = MeanStderr::of(&diff);
            DifferenceStat {
                name: tf.name.clone(),
                mean_difference: s.mean,
                stderr: s.stderr,
                max_abs_difference: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
                pass: within_three_sigma(s.mean, s.stderr),
                lhs,
                rhs,
            }
        })
        .collect();
    let particle_conservation = runs.iter().all(|r| r.2);
    Ok(PairingCheckReport {
        epsilon: eps.epsilon(),
        t_macro,
        n_runs,
        method,
        pass: particle_conservation && stats.iter().all(|s| s.pass),
        stats,
        particle_conservation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::label_components;
    use crate::env::{sample_field, FieldLaw};
    use crate::pde::TrigPolynomial;

    fn ones(side: usize) -> (ConductanceField, ClusterLabeling) {
        let f = sample_field(&FieldLaw::Constant { c: 1.0 }, 2, side, 1.0, 0).unwrap();
        let lab = label_components(&f);
        (f, lab)
    }

    #[test]
    fn bitset_swap_and_count() {
        let mut c = OccupancyConfig::from_occupied(130, [0, 64, 129]).unwrap();
        assert_eq!(c.particle_count(), 3);
        c.swap(0, 1);
        c.swap(64, 65);
        c.swap(129, 128);
        assert!(c.get(1) && c.get(65) && c.get(128) && !c.get(0));
        assert_eq!(c.count_ones(), 3);
        c.swap(1, 65);
        assert_eq!(c.count_ones(), 3);
        assert!(OccupancyConfig::from_occupied(4, [4]).is_err());
    }

    #[test]
    fn product_measure_extremes() {
        let (_, lab) = ones(8);
        let eps = EpsScale::for_side(8);
        let mut rng = stream(0, "t", 0);
        let zero = GridField::constant(2, 8, 0.0, FieldTag::Density).unwrap();
        let (c, r) = init_product_measure(&lab, &zero, 1.0, eps, &mut rng).unwrap();
        assert_eq!(c.particle_count(), 0);
        assert_eq!(r.clamped_sites, 0);
        let full = GridField::constant(2, 8, 1.0, FieldTag::Density).unwrap();
        let (c, _) = init_product_measure(&lab, &full, 1.0, eps, &mut rng).unwrap();
        assert_eq!(c.particle_count(), 64);
        let over = GridField::constant(2, 8, 1.2, FieldTag::Density).unwrap();
        let (c, r) = init_product_measure(&lab, &over, 1.0, eps, &mut rng).unwrap();
        assert_eq!(c.particle_count(), 64);
        assert_eq!(r.clamped_sites, 64);
    }

    #[test]
    fn full_configuration_is_invariant() {
        let (f, lab) = ones(8);
        let sched = ClockSchedule::from_field(&f, &lab).unwrap();
        let full = OccupancyConfig::from_occupied(64, 0..64).unwrap();
        let mut rng = stream(1, "t", 0);
        let run = simulate_exclusion(&sched, &full, 5.0, &[1.0, 5.0], &mut rng).unwrap();
        assert!(run.events > 0);
        for s in &run.snapshots {
            assert_eq!(s.count_ones(), 64);
        }
        assert_eq!(run.snapshots[1].time_stamp(), 5.0);
    }

    #[test]
    fn record_times_validated() {
        let (f, lab) = ones(4);
        let sched = ClockSchedule::from_field(&f, &lab).unwrap();
        let c = OccupancyConfig::empty(16);
        let mut rng = stream(1, "t", 0);
        assert!(simulate_exclusion(&sched, &c, 1.0, &[0.5, 0.2], &mut rng).is_err());
        assert!(simulate_exclusion(&sched, &c, 1.0, &[2.0], &mut rng).is_err());
    }

    #[test]
    fn frozen_when_no_bonds() {
        let mut w = vec![0.0; 2 * 16];
        w[0] = 1.0;
        let f = ConductanceField::from_weights(2, 4, 1.0, w).unwrap();
        let mask = vec![true; 1]
            .into_iter()
            .chain(vec![false; 15])
            .collect::<Vec<_>>();
        let lab = ClusterLabeling::from_mask(*f.torus(), &mask).unwrap();
        let sched = ClockSchedule::from_field(&f, &lab).unwrap();
        assert_eq!(sched.n_bonds(), 0);
        let c = OccupancyConfig::from_occupied(1, [0]).unwrap();
        let mut rng = stream(1, "t", 0);
        let run = simulate_exclusion(&sched, &c, 1.0, &[1.0], &mut rng).unwrap();
        assert!(run.frozen);
        assert_eq!(run.snapshots[0], {
            let mut c = c.clone();
            c.set_time(1.0);
            c
        });
    }

    #[test]
    fn empirical_profile_examples() {
        let (_, lab) = ones(8);
        let eps = EpsScale::for_side(8);
        let empty = OccupancyConfig::empty(64);
        assert!(empirical_profile(&empty, &lab, eps, 4)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let full = OccupancyConfig::from_occupied(64, 0..64).unwrap();
        let p = empirical_profile(&full, &lab, eps, 4).unwrap();
        assert!(p.values().iter().all(|&v| (v - 1.0).abs() < 1e-14));
        assert!(empirical_profile(&full, &lab, eps, 3).is_err());
    }

    #[test]
    fn doubling_rates_doubles_clock() {
        let f = sample_field(&FieldLaw::IidUniform { lo: 0.1, hi: 0.5 }, 2, 8, 1.0, 3).unwrap();
        let w2: Vec<f64> = f.weights().iter().map(|w| 2.0 * w).collect();
        let g = ConductanceField::from_weights(2, 8, 1.0, w2).unwrap();
        let (la, lb) = (label_components(&f), label_components(&g));
        let a = ClockSchedule::from_field(&f, &la).unwrap();
        let b = ClockSchedule::from_field(&g, &lb).unwrap();
        assert_eq!(b.total_rate(), 2.0 * a.total_rate());

        // mean inter-event time halves
        let c = OccupancyConfig::from_occupied(64, 0..32).unwrap();
        let t = 200.0;
        let ra = simulate_exclusion(&a, &c, t, &[], &mut stream(2, "a", 0)).unwrap();
        let rb = simulate_exclusion(&b, &c, t, &[], &mut stream(2, "b", 0)).unwrap();
        let (ea, eb) = (ra.events as f64, rb.events as f64);
        // Poisson counts: E = R t
        assert!((ea - a.total_rate() * t).abs() <= 3.0 * (a.total_rate() * t).sqrt());
        assert!((eb - b.total_rate() * t).abs() <= 3.0 * (b.total_rate() * t).sqrt());
    }

    #[test]
    fn pairing_check_at_time_zero_is_exact() {
        let (f, lab) = ones(8);
        let eps = EpsScale::for_side(8);
        let rho0 = GridField::constant(2, 8, 0.5, FieldTag::Density).unwrap();
        let battery = vec![TestFunction {
            name: "cos".into(),
            grid: TrigPolynomial::cosine(1.0, vec![1, 0])
                .to_grid(2, 8, FieldTag::TestFunction)
                .unwrap(),
        }];
        let rep = hydro_pairing_check(&PairingSetup {
            field: &f,
            labeling: &lab,
            eps,
            rho0: &rho0,
            battery: &battery,
            t_macro: 0.0,
            n_runs: 4,
            method: SemigroupMethod::Exact,
            seed: 1,
        })
        .unwrap();
        assert!(rep.pass);
        for s in &rep.stats {
            assert_eq!(s.lhs, s.rhs);
        }
    }

    #[test]
    fn hydro_at_time_zero_reduces_to_initial_check() {
        let (f, lab) = ones(16);
        let eps = EpsScale::for_side(16);
        let rho0 = TrigPolynomial::constant(0.5)
            .plus(TrigPolynomial::cosine(0.4, vec![1, 0]))
            .to_grid(2, 16, FieldTag::Density)
            .unwrap();
        let battery = vec![TestFunction {
            name: "one".into(),
            grid: GridField::constant(2, 16, 1.0, FieldTag::TestFunction).unwrap(),
        }];
        let dm = DiffusionMatrix::identity(2);
        let rep = hydro_experiment(&HydroSetup {
            field: &f,
            labeling: &lab,
            dcal: &dm,
            rho0: &rho0,
            t_macro: 0.0,
            eps,
            n_runs: 8,
            battery: &battery,
            cells_per_axis: 4,
            seed: 9,
        })
        .unwrap();
        assert_eq!(rep.initial[0].per_run, rep.final_[0].per_run);
        assert!(rep.conservation.pass);
        // ε^d Σ (0.5 + 0.4 cos) over a full period is exactly 0.5
        assert!((rep.initial[0].quenched_mean - 0.5).abs() < 1e-12);
        assert!(rep.initial[0].environment_bias.abs() < 1e-12);
    }
}
