//! Experiment configuration files (TOML). Unknown keys are rejected everywhere.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::env::FieldLaw;
use crate::error::{Error, Result};
use crate::exclusion::SemigroupMethod;
use crate::pde::TrigPolynomial;
use crate::solver::CgOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    GenEnv,
    ClusterStats,
    Corrector,
    Resolvent,
    Walk,
    Exclusion,
    Hydro,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GenEnv => "gen_env",
            ExperimentKind::ClusterStats => "cluster_stats",
            ExperimentKind::Corrector => "corrector",
            ExperimentKind::Resolvent => "resolvent",
            ExperimentKind::Walk => "walk",
            ExperimentKind::Exclusion => "exclusion",
            ExperimentKind::Hydro => "hydro",
        }
    }
}

fn one() -> usize {
    1
}

fn unit_cap() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub law: FieldLaw,
    pub dim: usize,
    #[serde(default = "unit_cap")]
    pub cap: f64,
    /// Torus sides; experiments at a single scale use each entry in turn
    /// where that makes sense, otherwise exactly one entry is required.
    pub sides: Vec<usize>,
    #[serde(default = "one")]
    pub replicas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedFunction {
    pub name: String,
    pub f: TrigPolynomial,
}

/// Where the continuum reference takes its diffusion matrix from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    Identity,
    Matrix {
        rows: Vec<Vec<f64>>,
    },
    /// Mean `𝒟̂` over `replicas` corrector solves of the configured law at `side`.
    Estimate {
        side: usize,
        replicas: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventSection {
    pub lambda: f64,
    pub f: TrigPolynomial,
    pub diffusion: DiffusionSpec,
    /// Continuum grid resolution; defaults to the smallest power of two ≥ each side.
    #[serde(default)]
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkSection {
    pub t: f64,
    pub n_walkers: usize,
    pub n_probes: usize,
    pub f: TrigPolynomial,
    pub diffusion: DiffusionSpec,
    #[serde(default)]
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusionSection {
    pub t: f64,
    pub n_runs: usize,
    pub rho0: TrigPolynomial,
    pub battery: Vec<NamedFunction>,
    pub method: SemigroupMethod,
    #[serde(default)]
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydroSection {
    pub t: f64,
    pub n_runs: usize,
    pub rho0: TrigPolynomial,
    pub battery: Vec<NamedFunction>,
    pub diffusion: DiffusionSpec,
    pub cells_per_axis: usize,
    #[serde(default)]
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        let d = CgOptions::default();
        Tolerances {
            cg_tol: d.tol,
            cg_max_iter: d.max_iter,
        }
    }
}

impl Tolerances {
    pub fn cg(&self) -> CgOptions {
        CgOptions {
            tol: self.cg_tol,
            max_iter: self.cg_max_iter,
            ..CgOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<String>,
    /// Write binary dumps of every sampled field.
    #[serde(default = "yes")]
    pub write_fields: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            write_fields: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub field: FieldSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolvent: Option<ResolventSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk: Option<WalkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion: Option<ExclusionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hydro: Option<HydroSection>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSection,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn check_time(t: f64, strict: bool) -> Result<()> {
    if !t.is_finite() || t < 0.0 || (strict && t == 0.0) {
        return Err(invalid(format!(
            "time must be {}, got {t}",
            if strict { "positive" } else { "nonnegative" }
        )));
    }
    Ok(())
}

fn check_grid(grid: Option<usize>) -> Result<()> {
    match grid {
        Some(n) if n < 2 || !n.is_power_of_two() => Err(invalid(format!(
            "grid resolution {n} must be a power of two ≥ 2"
        ))),
        _ => Ok(()),
    }
}

fn check_battery(battery: &[NamedFunction], dim: usize) -> Result<()> {
    if battery.is_empty() {
        return Err(invalid("test-function battery is empty"));
    }
    for tf in battery {
        tf.f.validate(dim)
            .map_err(|e| invalid(format!("{}: {e}", tf.name)))?;
    }
    Ok(())
}

impl DiffusionSpec {
    fn validate(&self, field: &FieldSpec) -> Result<()> {
        match self {
            DiffusionSpec::Identity => Ok(()),
            DiffusionSpec::Matrix { rows } => {
                let m = matrix_from_rows(rows, field.dim)?;
                crate::pde::DiffusionMatrix::new(m)
                    .map(|_| ())
                    .map_err(|e| invalid(e.to_string()))
            }
            DiffusionSpec::Estimate { side, replicas } => {
                if *replicas == 0 {
                    return Err(invalid("diffusion estimate needs at least one replica"));
                }
                field
                    .law
                    .validate(field.dim, *side, field.cap)
                    .map_err(|e| invalid(e.to_string()))
            }
        }
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(invalid(format!("diffusion matrix must be {dim} x {dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.field;
        if f.sides.is_empty() {
            return Err(invalid("field.sides is empty"));
        }
        if f.replicas == 0 {
            return Err(invalid("field.replicas must be at least 1"));
        }
        if !(f.cap > 0.0 && f.cap.is_finite()) {
            return Err(invalid(format!("cap must be positive, got {}", f.cap)));
        }
        for &side in &f.sides {
            f.law
                .validate(f.dim, side, f.cap)
                .map_err(|e| invalid(e.to_string()))?;
            if side < 2 || f.dim < 2 {
                return Err(invalid("need dim ≥ 2 and every side ≥ 2"));
            }
        }
        if !(self.tolerances.cg_tol > 0.0) || self.tolerances.cg_max_iter == 0 {
            return Err(invalid("tolerances must be positive"));
        }
        let missing = |s: &str| {
            invalid(format!(
                "kind {} requires a [{s}] section",
                self.kind.name()
            ))
        };
        let single_side = || {
            if f.sides.len() != 1 {
                Err(invalid(format!(
                    "kind {} takes exactly one side",
                    self.kind.name()
                )))
            } else {
                Ok(())
            }
        };
        match self.kind {
            ExperimentKind::GenEnv | ExperimentKind::ClusterStats => {}
            ExperimentKind::Corrector => {
                if f.sides.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid("corrector sides must be strictly increasing"));
                }
            }
            ExperimentKind::Resolvent => {
                let r = self
                    .resolvent
                    .as_ref()
                    .ok_or_else(|| missing("resolvent"))?;
                if !(r.lambda > 0.0 && r.lambda.is_finite()) {
                    return Err(invalid(format!(
                        "resolvent lambda must be positive, got {}",
                        r.lambda
                    )));
                }
                r.f.validate(f.dim).map_err(|e| invalid(e.to_string()))?;
                r.diffusion.validate(f)?;
                check_grid(r.grid)?;
            }
            ExperimentKind::Walk => {
                single_side()?;
                let w = self.walk.as_ref().ok_or_else(|| missing("walk"))?;
                check_time(w.t, true)?;
                if w.n_walkers == 0 || w.n_probes == 0 {
                    return Err(invalid("walk needs positive n_walkers and n_probes"));
                }
                w.f.validate(f.dim).map_err(|e| invalid(e.to_string()))?;
                w.diffusion.validate(f)?;
                check_grid(w.grid)?;
            }
            ExperimentKind::Exclusion => {
                single_side()?;
                let x = self
                    .exclusion
                    .as_ref()
                    .ok_or_else(|| missing("exclusion"))?;
                check_time(x.t, false)?;
                if x.n_runs == 0 {
                    return Err(invalid("exclusion needs n_runs ≥ 1"));
                }
                if let SemigroupMethod::MonteCarlo { n_walkers: 0 } = x.method {
                    return Err(invalid("monte_carlo method needs n_walkers ≥ 1"));
                }
                x.rho0.validate(f.dim).map_err(|e| invalid(e.to_string()))?;
                check_battery(&x.battery, f.dim)?;
                check_grid(x.grid)?;
            }
            ExperimentKind::Hydro => {
                single_side()?;
                let h = self.hydro.as_ref().ok_or_else(|| missing("hydro"))?;
                check_time(h.t, false)?;
                if h.n_runs == 0 {
                    return Err(invalid("hydro needs n_runs ≥ 1"));
                }
                if h.cells_per_axis == 0 || !f.sides[0].is_multiple_of(h.cells_per_axis) {
                    return Err(invalid(format!(
                        "cells_per_axis {} must divide side {}",
                        h.cells_per_axis, f.sides[0]
                    )));
                }
                h.rho0.validate(f.dim).map_err(|e| invalid(e.to_string()))?;
                check_battery(&h.battery, f.dim)?;
                h.diffusion.validate(f)?;
                check_grid(h.grid)?;
                if let Some(n) = h.grid {
                    if n % h.cells_per_axis != 0 {
                        return Err(invalid("grid must be a multiple of cells_per_axis"));
                    }
                }
            }
        }
        Ok(())
    }
}
