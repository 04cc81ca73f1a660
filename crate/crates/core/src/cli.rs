//! Experiment orchestration: runs a configured experiment, writes its outputs
//! and a manifest, and verifies existing output directories.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cluster::{estimate_m, label_components, replica_seed, ClusterLabeling};
use crate::config::{
    matrix_from_rows, DiffusionSpec, ExperimentConfig, ExperimentKind, NamedFunction,
};
use crate::corrector::{check_matrix_invariants, csv_header, csv_record, summary_rows, sweep_d};
use crate::env::{read_field, sample_field, write_field, ConductanceField, FieldLaw};
use crate::error::{Error, Result};
use crate::exclusion::{
    hydro_experiment, hydro_pairing_check, HydroSetup, PairingSetup, TestFunction,
};
use crate::graph::ClusterGraph;
use crate::io::{atomic_write, csv_bytes, hex_digest, read_json, sha256_file, write_json};
use crate::numeric::MeanStderr;
use crate::pde::{
    heat_evolve, resolvent_continuum, sample_on_cluster, DiffusionMatrix, FieldTag, GridField,
};
use crate::solver::CgOptions;
use crate::streams::{derive_seed, stream};
use crate::walk::{
    homogenization_error, mc_semigroup, semigroup_series, solve_resolvent_discrete, EpsScale,
};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const NOT_CONVERGED: i32 = 3;
    pub const VERIFY_FAILED: i32 = 4;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidParameter(_)
        | Error::Validation(_)
        | Error::DimensionMismatch { .. }
        | Error::GaugeViolation { .. }
        | Error::NotPositiveDefinite
        | Error::EmptyGiant => exit::VALIDATION,
        Error::NotConverged { .. } => exit::NOT_CONVERGED,
        _ => exit::FAILURE,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::InvalidParameter(_) => "invalid_parameter",
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::Format { .. } => "format",
        Error::Validation(_) => "validation",
        Error::EmptyGiant => "empty_giant",
        Error::GaugeViolation { .. } => "gauge_violation",
        Error::NotConverged { .. } => "not_converged",
        Error::ZeroWeights => "zero_weights",
        Error::NotPositiveDefinite => "not_positive_definite",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

/// Structured diagnostic for an error.
pub fn diagnostic(err: &Error) -> serde_json::Value {
    let mut v = json!({
        "status": "error",
        "kind": error_kind(err),
        "exit_code": exit_code(err),
        "message": err.to_string(),
    });
    if let Error::NotConverged {
        iterations,
        residual,
    } = err
    {
        v["iterations"] = json!(iterations);
        v["residual"] = json!(residual);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputRole {
    Field,
    FieldMetadata,
    CorrectorTable,
    ClusterTable,
    Table,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the manifest directory.
    pub path: String,
    pub role: OutputRole,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub path: String,
    pub side: usize,
    pub seed: u64,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, outcome: std::result::Result<(), String>) -> Self {
        let (pass, detail) = match outcome {
            Ok(()) => (true, String::new()),
            Err(e) => (false, e),
        };
        Check {
            name: name.into(),
            pass,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<OutputFile>,
    pub fields: Vec<FieldRecord>,
    pub invariants: Vec<Check>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn invariants_hold(&self) -> bool {
        self.invariants.iter().all(|c| c.pass)
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(tol) = self.tol {
            cfg.tolerances.cg_tol = tol;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = Some(out.to_string_lossy().into_owned());
        }
        cfg.validate()
    }
}

/// Loads, overrides and runs a config file; returns the manifest and its path.
pub fn run(config_path: &Path, overrides: &Overrides) -> Result<(Manifest, PathBuf)> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    let out = cfg
        .output
        .dir
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("pchm-{}", cfg.kind.name())));
    let manifest = run_experiment(&cfg, &out)?;
    Ok((manifest, out.join(MANIFEST_FILE)))
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    outputs: Vec<OutputFile>,
    fields: Vec<FieldRecord>,
    invariants: Vec<Check>,
}

impl Ctx<'_> {
    fn write(&mut self, name: &str, role: OutputRole, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.dir.join(name), bytes)?;
        self.outputs.push(OutputFile {
            path: name.to_string(),
            role,
            sha256: hex_digest(bytes),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, OutputRole::Report, &bytes)
    }

    fn emit_field(&mut self, field: &ConductanceField, replica: usize, seed: u64) -> Result<()> {
        if !self.cfg.output.write_fields {
            return Ok(());
        }
        let name = format!("field_L{}_r{replica}.pchm", field.side());
        let path = self.dir.join(&name);
        write_field(field, &path)?;
        let meta = crate::env::manifest_path(&path);
        let meta_name = meta.file_name().unwrap().to_string_lossy().into_owned();
        self.outputs.push(OutputFile {
            path: name.clone(),
            role: OutputRole::Field,
            sha256: sha256_file(&path)?,
        });
        self.outputs.push(OutputFile {
            path: meta_name,
            role: OutputRole::FieldMetadata,
            sha256: sha256_file(&meta)?,
        });
        self.fields.push(FieldRecord {
            path: name,
            side: field.side(),
            seed,
            checksum: field.checksum(),
        });
        Ok(())
    }

    fn sample(&self, side: usize, replica: usize) -> Result<(ConductanceField, u64)> {
        let f = &self.cfg.field;
        let seed = replica_seed(self.cfg.seed, replica);
        Ok((sample_field(&f.law, f.dim, side, f.cap, seed)?, seed))
    }
}

/// Runs `cfg` and writes all outputs plus `manifest.json` into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ctx = Ctx {
        cfg,
        dir,
        outputs: Vec::new(),
        fields: Vec::new(),
        invariants: Vec::new(),
    };
    let summary = match cfg.kind {
        ExperimentKind::GenEnv => gen_env(&mut ctx)?,
        ExperimentKind::ClusterStats => cluster_stats(&mut ctx)?,
        ExperimentKind::Corrector => corrector(&mut ctx)?,
        ExperimentKind::Resolvent => resolvent(&mut ctx)?,
        ExperimentKind::Walk => walk(&mut ctx)?,
        ExperimentKind::Exclusion => exclusion(&mut ctx)?,
        ExperimentKind::Hydro => hydro(&mut ctx)?,
    };
    let manifest = Manifest {
        tool: "pchm".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        outputs: ctx.outputs,
        fields: ctx.fields,
        invariants: ctx.invariants,
        summary,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Serialize)]
struct FieldRow {
    #[serde(rename = "L")]
    side: usize,
    replica: usize,
    seed: u64,
    checksum: u64,
    m_hat: f64,
    giant_size: usize,
}

fn gen_env(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let mut rows = Vec::new();
    for &side in &ctx.cfg.field.sides {
        for r in 0..ctx.cfg.field.replicas {
            let (field, seed) = ctx.sample(side, r)?;
            let lab = label_components(&field);
            ctx.emit_field(&field, r, seed)?;
            rows.push(FieldRow {
                side,
                replica: r,
                seed,
                checksum: field.checksum(),
                m_hat: lab.m_hat(),
                giant_size: lab.giant_size(),
            });
        }
    }
    ctx.write("fields.csv", OutputRole::Table, &csv_bytes(&rows)?)?;
    Ok(json!({ "n_fields": rows.len() }))
}

fn cluster_stats(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let f = &ctx.cfg.field;
    let mut rows = Vec::new();
    let mut per_side = Vec::new();
    for &side in &f.sides {
        let est = estimate_m(&f.law, f.dim, side, f.cap, f.replicas, ctx.cfg.seed)?;
        per_side.push(json!({
            "L": side,
            "m_hat": est.m_hat.mean,
            "m_hat_stderr": est.m_hat.stderr,
            "n": est.m_hat.n,
        }));
        rows.extend(est.rows);
    }
    for (i, side) in f.sides.iter().enumerate() {
        for r in 0..f.replicas {
            if ctx.cfg.output.write_fields {
                let (field, seed) = ctx.sample(*side, r)?;
                debug_assert_eq!(seed, rows[i * f.replicas + r].seed);
                ctx.emit_field(&field, r, seed)?;
            }
        }
    }
    let check = check_cluster_rows(&rows, f.dim);
    ctx.invariants.push(Check::new("cluster_rows", check));
    ctx.write("clusters.csv", OutputRole::ClusterTable, &csv_bytes(&rows)?)?;
    Ok(json!({ "sides": per_side }))
}

fn check_cluster_rows(
    rows: &[crate::cluster::ClusterRow],
    dim: usize,
) -> std::result::Result<(), String> {
    for r in rows {
        let n = r.side.pow(dim as u32);
        if !(0.0..=1.0).contains(&r.m_hat) || r.giant_size > n {
            return Err(format!(
                "row seed {} has m_hat {} outside [0, 1]",
                r.seed, r.m_hat
            ));
        }
        if (r.m_hat * n as f64 - r.giant_size as f64).abs() > 1e-9 {
            return Err(format!(
                "row seed {}: m_hat inconsistent with giant size",
                r.seed
            ));
        }
    }
    Ok(())
}

fn corrector(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let f = &ctx.cfg.field;
    let table = sweep_d(
        &f.law,
        f.dim,
        f.cap,
        &f.sides,
        f.replicas,
        ctx.cfg.seed,
        ctx.cfg.tolerances.cg(),
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header(f.dim))?;
    for e in &table.estimates {
        w.write_record(csv_record(&f.law, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
    ctx.write("corrector.csv", OutputRole::CorrectorTable, &bytes)?;
    ctx.write(
        "corrector_summary.csv",
        OutputRole::Table,
        &csv_bytes(&summary_rows(&table))?,
    )?;
    let outcome = table.estimates.iter().try_for_each(|e| {
        e.check_invariants(f.cap)
            .map_err(|m| format!("L={} seed {:?}: {m}", e.side, e.seed))
    });
    ctx.invariants.push(Check::new("diffusion_matrix", outcome));
    for &side in &f.sides {
        for r in 0..f.replicas {
            if ctx.cfg.output.write_fields {
                let (field, seed) = ctx.sample(side, r)?;
                ctx.emit_field(&field, r, seed)?;
            }
        }
    }
    let sides: Vec<_> = table
        .summaries
        .iter()
        .map(|s| {
            json!({
                "L": s.side,
                "m_hat": s.m_hat.mean,
                "dcal_mean": matrix_json(&s.dcal_mean()),
                "dcal_stderr": s.dcal.iter().map(|v| v.stderr).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({ "sides": sides }))
}

fn matrix_json(m: &DMatrix<f64>) -> serde_json::Value {
    json!((0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>())
        .collect::<Vec<_>>())
}

/// Resolves the diffusion matrix of the continuum reference.
pub fn resolve_diffusion(
    spec: &DiffusionSpec,
    law: &FieldLaw,
    dim: usize,
    cap: f64,
    seed: u64,
    opts: CgOptions,
) -> Result<DiffusionMatrix> {
    match spec {
        DiffusionSpec::Identity => Ok(DiffusionMatrix::identity(dim)),
        DiffusionSpec::Matrix { rows } => DiffusionMatrix::new(matrix_from_rows(rows, dim)?),
        DiffusionSpec::Estimate { side, replicas } => {
            let table = sweep_d(law, dim, cap, &[*side], *replicas, seed, opts)?;
            let m = table.summaries[0].dcal_mean();
            DiffusionMatrix::new((&m + m.transpose()) * 0.5)
        }
    }
}

fn grid_for(side: usize, grid: Option<usize>) -> usize {
    grid.unwrap_or_else(|| side.next_power_of_two().max(2))
}

fn l2_norm(g: &GridField) -> Result<f64> {
    Ok(g.pairing(g)?.sqrt())
}

#[derive(Serialize)]
struct ResolventRow {
    #[serde(rename = "L")]
    side: usize,
    epsilon: f64,
    replica: usize,
    seed: u64,
    error: f64,
    relative_error: f64,
    residual: f64,
    iterations: usize,
}

fn resolvent(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let sec = cfg.resolvent.as_ref().expect("validated");
    let f = &cfg.field;
    let opts = cfg.tolerances.cg();
    let dmat = resolve_diffusion(&sec.diffusion, &f.law, f.dim, f.cap, cfg.seed, opts)?;
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for &side in &f.sides {
        let n = grid_for(side, sec.grid);
        let fg = sec.f.to_grid(f.dim, n, FieldTag::TestFunction)?;
        let norm = l2_norm(&fg)?;
        let u0 = resolvent_continuum(&fg, &dmat, sec.lambda)?;
        let eps = EpsScale::for_side(side);
        let mut errs = Vec::new();
        for r in 0..f.replicas {
            let (field, seed) = ctx.sample(side, r)?;
            let lab = label_components(&field);
            let sol = solve_resolvent_discrete(&field, &lab, eps, sec.lambda, &fg, opts)?;
            let err = homogenization_error(&sol.u, &u0, eps, &lab)?.sqrt();
            errs.push(err);
            rows.push(ResolventRow {
                side,
                epsilon: eps.epsilon(),
                replica: r,
                seed,
                error: err,
                relative_error: err / norm,
                residual: sol.residual,
                iterations: sol.iterations,
            });
            ctx.emit_field(&field, r, seed)?;
        }
        let s = MeanStderr::of(&errs);
        means.push(json!({ "L": side, "epsilon": eps.epsilon(), "error": s.mean, "stderr": s.stderr, "relative_error": s.mean / norm }));
    }
    ctx.write("resolvent.csv", OutputRole::Table, &csv_bytes(&rows)?)?;
    let errors: Vec<f64> = means.iter().map(|m| m["error"].as_f64().unwrap()).collect();
    Ok(json!({
        "lambda": sec.lambda,
        "diffusion": matrix_json(dmat.matrix()),
        "sides": means,
        "strictly_decreasing": errors.windows(2).all(|w| w[1] < w[0]),
    }))
}

/// Monte Carlo semigroup versus the lattice series and the continuum heat flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkComparison {
    pub sites: Vec<usize>,
    pub mc: Vec<f64>,
    pub stderr: Vec<f64>,
    pub lattice: Vec<f64>,
    pub continuum: Vec<f64>,
    /// Root mean square over probes of `mc - continuum`.
    pub discrepancy: f64,
    pub lattice_discrepancy: f64,
    /// `3 sqrt(mean σ²) + 0.02 ‖f‖`.
    pub envelope: f64,
    pub f_norm: f64,
    pub pass: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn walk_comparison(
    field: &ConductanceField,
    labeling: &ClusterLabeling,
    f: &GridField,
    dmat: &DiffusionMatrix,
    t: f64,
    n_walkers: usize,
    n_probes: usize,
    seed: u64,
) -> Result<WalkComparison> {
    let giant = labeling.giant_sites();
    if n_probes > giant.len() {
        return Err(Error::Validation(format!(
            "{n_probes} probes requested but the giant has {} sites",
            giant.len()
        )));
    }
    let eps = EpsScale::for_side(field.side());
    let mut rng = stream(seed, "walk-probes", 0);
    let mut picks = sample(&mut rng, giant.len(), n_probes).into_vec();
    picks.sort_unstable();
    let sites: Vec<usize> = picks.iter().map(|&i| giant[i]).collect();
    let est = mc_semigroup(
        field,
        labeling,
        eps,
        f,
        t,
        n_walkers,
        &sites,
        derive_seed(seed, "walk", 0),
    )?;
    let graph = ClusterGraph::new(field, labeling)?;
    let scale = 1.0 / (eps.epsilon() * eps.epsilon());
    let series = semigroup_series(&graph, scale, &sample_on_cluster(f, eps, labeling)?, t)?;
    let cont = sample_on_cluster(&heat_evolve(f, dmat, t)?, eps, labeling)?;
    let lattice: Vec<f64> = picks.iter().map(|&i| series[i]).collect();
    let continuum: Vec<f64> = picks.iter().map(|&i| cont[i]).collect();
    let mc: Vec<f64> = est.iter().map(|e| e.mean).collect();
    let stderr: Vec<f64> = est.iter().map(|e| e.stderr).collect();
    let rms = |a: &[f64], b: &[f64]| {
        (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
    };
    let discrepancy = rms(&mc, &continuum);
    let lattice_discrepancy = rms(&mc, &lattice);
    let sigma = (stderr.iter().map(|s| s * s).sum::<f64>() / stderr.len() as f64).sqrt();
    let f_norm = l2_norm(f)?;
    let envelope = 3.0 * sigma + 0.02 * f_norm;
    Ok(WalkComparison {
        sites,
        mc,
        stderr,
        lattice,
        continuum,
        discrepancy,
        lattice_discrepancy,
        envelope,
        f_norm,
        pass: discrepancy <= envelope,
    })
}

#[derive(Serialize)]
struct WalkRow {
    site: usize,
    mc: f64,
    stderr: f64,
    lattice: f64,
    continuum: f64,
}

fn walk(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let sec = cfg.walk.as_ref().expect("validated");
    let f = &cfg.field;
    let side = f.sides[0];
    let dmat = resolve_diffusion(
        &sec.diffusion,
        &f.law,
        f.dim,
        f.cap,
        cfg.seed,
        cfg.tolerances.cg(),
    )?;
    let (field, seed) = ctx.sample(side, 0)?;
    let lab = label_components(&field);
    let fg = sec
        .f
        .to_grid(f.dim, grid_for(side, sec.grid), FieldTag::TestFunction)?;
    let cmp = walk_comparison(
        &field,
        &lab,
        &fg,
        &dmat,
        sec.t,
        sec.n_walkers,
        sec.n_probes,
        cfg.seed,
    )?;
    let rows: Vec<WalkRow> = (0..cmp.sites.len())
        .map(|i| WalkRow {
            site: cmp.sites[i],
            mc: cmp.mc[i],
            stderr: cmp.stderr[i],
            lattice: cmp.lattice[i],
            continuum: cmp.continuum[i],
        })
        .collect();
    ctx.write("walk.csv", OutputRole::Table, &csv_bytes(&rows)?)?;
    ctx.emit_field(&field, 0, seed)?;
    Ok(json!({
        "t": sec.t,
        "epsilon": 1.0 / side as f64,
        "discrepancy": cmp.discrepancy,
        "lattice_discrepancy": cmp.lattice_discrepancy,
        "envelope": cmp.envelope,
        "pass": cmp.pass,
    }))
}

fn battery(list: &[NamedFunction], dim: usize, n: usize) -> Result<Vec<TestFunction>> {
    list.iter()
        .map(|tf| {
            Ok(TestFunction {
                name: tf.name.clone(),
                grid: tf.f.to_grid(dim, n, FieldTag::TestFunction)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct PairingRow<'a> {
    function: &'a str,
    run: usize,
    lhs: f64,
    rhs: f64,
    difference: f64,
}

fn exclusion(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let sec = cfg.exclusion.as_ref().expect("validated");
    let f = &cfg.field;
    let side = f.sides[0];
    let n = grid_for(side, sec.grid);
    let (field, seed) = ctx.sample(side, 0)?;
    let lab = label_components(&field);
    let rho0 = sec.rho0.to_grid(f.dim, n, FieldTag::Density)?;
    let tests = battery(&sec.battery, f.dim, n)?;
    let report = hydro_pairing_check(&PairingSetup {
        field: &field,
        labeling: &lab,
        eps: EpsScale::for_side(side),
        rho0: &rho0,
        battery: &tests,
        t_macro: sec.t,
        n_runs: sec.n_runs,
        method: sec.method,
        seed: cfg.seed,
    })?;
    let rows: Vec<PairingRow> = report
        .stats
        .iter()
        .flat_map(|s| {
            (0..s.lhs.len()).map(move |r| PairingRow {
                function: &s.name,
                run: r,
                lhs: s.lhs[r],
                rhs: s.rhs[r],
                difference: s.lhs[r] - s.rhs[r],
            })
        })
        .collect();
    ctx.write("pairings.csv", OutputRole::Table, &csv_bytes(&rows)?)?;
    ctx.write_json("exclusion_report.json", &report)?;
    ctx.invariants.push(Check::new(
        "particle_conservation",
        if report.particle_conservation {
            Ok(())
        } else {
            Err("particle number changed in some run".into())
        },
    ));
    ctx.emit_field(&field, 0, seed)?;
    Ok(
        json!({ "pass": report.pass, "stats": report.stats.iter().map(|s| json!({
        "name": s.name, "mean_difference": s.mean_difference, "stderr": s.stderr, "pass": s.pass
    })).collect::<Vec<_>>() }),
    )
}

#[derive(Serialize)]
struct ProfileRow {
    cell: usize,
    reference: f64,
    empirical_mean: f64,
}

fn hydro(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let sec = cfg.hydro.as_ref().expect("validated");
    let f = &cfg.field;
    let side = f.sides[0];
    let n = grid_for(side, sec.grid);
    let dmat = resolve_diffusion(
        &sec.diffusion,
        &f.law,
        f.dim,
        f.cap,
        cfg.seed,
        cfg.tolerances.cg(),
    )?;
    let (field, seed) = ctx.sample(side, 0)?;
    let lab = label_components(&field);
    let rho0 = sec.rho0.to_grid(f.dim, n, FieldTag::Density)?;
    let tests = battery(&sec.battery, f.dim, n)?;
    let report = hydro_experiment(&HydroSetup {
        field: &field,
        labeling: &lab,
        dcal: &dmat,
        rho0: &rho0,
        t_macro: sec.t,
        eps: EpsScale::for_side(side),
        n_runs: sec.n_runs,
        battery: &tests,
        cells_per_axis: sec.cells_per_axis,
        seed: cfg.seed,
    })?;
    let rows: Vec<ProfileRow> = (0..report.reference_profile.len())
        .map(|c| ProfileRow {
            cell: c,
            reference: report.reference_profile[c],
            empirical_mean: report.mean_profile[c],
        })
        .collect();
    ctx.write("profile.csv", OutputRole::Table, &csv_bytes(&rows)?)?;
    ctx.write_json("hydro_report.json", &report)?;
    ctx.invariants.push(Check::new(
        "conservation_audit",
        if report.conservation.pass {
            Ok(())
        } else {
            Err(format!(
                "{} runs changed particle number",
                report.conservation.violations
            ))
        },
    ));
    ctx.emit_field(&field, 0, seed)?;
    Ok(json!({
        "pass": report.pass,
        "conservation_pass": report.conservation.pass,
        "profile_l1_error": report.profile_l1_error,
        "clamped_sites": report.clamped_sites,
        "final": report.final_.iter().map(|s| json!({
            "name": s.name, "reference": s.reference, "mean": s.mean, "stderr": s.stderr, "bias": s.bias, "pass": s.pass
        })).collect::<Vec<_>>(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub manifest: String,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Re-hashes every output listed in a manifest, re-reads field dumps,
/// regenerates seeded fields and re-checks table invariants.
pub fn verify(manifest_path: &Path) -> Result<VerifyReport> {
    let manifest: Manifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let cfg = &manifest.config;
    let mut checks = Vec::new();
    for out in &manifest.outputs {
        let path = dir.join(&out.path);
        let outcome = match sha256_file(&path) {
            Ok(h) if h == out.sha256 => Ok(()),
            Ok(_) => Err("sha256 mismatch".to_string()),
            Err(e) => Err(e.to_string()),
        };
        checks.push(Check::new(format!("sha256:{}", out.path), outcome));
        if out.role == OutputRole::CorrectorTable {
            checks.push(Check::new(
                format!("invariants:{}", out.path),
                recheck_corrector_csv(&path, cfg.field.dim, cfg.field.cap),
            ));
        }
        if out.role == OutputRole::ClusterTable {
            let outcome =
                read_rows(&path).and_then(|rows| check_cluster_rows(&rows, cfg.field.dim));
            checks.push(Check::new(format!("invariants:{}", out.path), outcome));
        }
    }
    for rec in &manifest.fields {
        let path = dir.join(&rec.path);
        let outcome = read_field(&path)
            .map_err(|e| e.to_string())
            .and_then(|field| {
                if field.checksum() != rec.checksum {
                    return Err(format!(
                        "checksum {} != recorded {}",
                        field.checksum(),
                        rec.checksum
                    ));
                }
                let again = sample_field(
                    &cfg.field.law,
                    cfg.field.dim,
                    rec.side,
                    cfg.field.cap,
                    rec.seed,
                )
                .map_err(|e| e.to_string())?;
                if again.weights() != field.weights() {
                    return Err("field does not match its law and seed".into());
                }
                Ok(())
            });
        checks.push(Check::new(format!("field:{}", rec.path), outcome));
    }
    for inv in &manifest.invariants {
        checks.push(Check::new(
            format!("recorded:{}", inv.name),
            if inv.pass {
                Ok(())
            } else {
                Err(inv.detail.clone())
            },
        ));
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport {
        manifest: manifest_path.display().to_string(),
        checks,
        pass,
    })
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<Vec<T>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| e.to_string())
}

fn recheck_corrector_csv(path: &Path, dim: usize, cap: f64) -> std::result::Result<(), String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(String::from)
        .collect();
    if header != csv_header(dim) {
        return Err("unexpected corrector table header".into());
    }
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let num = |name: &str| -> std::result::Result<f64, String> {
            rec[col(name)]
                .parse::<f64>()
                .map_err(|e| format!("row {row} column {name}: {e}"))
        };
        let m_hat = num("m_hat")?;
        let mut d = DMatrix::zeros(dim, dim);
        let mut dc = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                d[(i, j)] = num(&format!("D{}{}", i + 1, j + 1))?;
                dc[(i, j)] = num(&format!("Dcal{}{}", i + 1, j + 1))?;
            }
        }
        check_matrix_invariants(&d, &dc, m_hat, cap).map_err(|m| format!("row {row}: {m}"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Validation("x".into())), exit::VALIDATION);
        assert_eq!(
            exit_code(&Error::NotConverged {
                iterations: 1,
                residual: 1.0
            }),
            exit::NOT_CONVERGED
        );
        assert_eq!(exit_code(&Error::ZeroWeights), exit::FAILURE);
        let d = diagnostic(&Error::Validation("bad".into()));
        assert_eq!(d["kind"], "validation");
        assert_eq!(d["exit_code"], 2);
    }

    #[test]
    fn grid_defaults_to_power_of_two() {
        assert_eq!(grid_for(16, None), 16);
        assert_eq!(grid_for(12, None), 16);
        assert_eq!(grid_for(12, Some(64)), 64);
    }
}
