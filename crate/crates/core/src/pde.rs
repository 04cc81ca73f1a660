//! Continuum references on the unit torus `[0, 1)^d`.
//!
//! Both the heat semigroup `exp(t ∇·(𝒟∇))` and the resolvent
//! `(λ - ∇·(𝒟∇))^{-1}` are diagonal in Fourier space, so they are applied as
//! exact multipliers on the grid's discrete Fourier coefficients.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterLabeling;
use crate::error::{Error, Result};
use crate::io;
use crate::walk::EpsScale;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldTag {
    Density,
    TestFunction,
    Solution,
}

/// Real values on the `N^d` nodes `j / N` of the unit torus, row-major with
/// the first coordinate slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    dim: usize,
    n: usize,
    values: Vec<f64>,
    tag: FieldTag,
}

impl GridField {
    pub fn new(dim: usize, n: usize, values: Vec<f64>, tag: FieldTag) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("grid dimension must be positive"));
        }
        if !n.is_power_of_two() || n < 2 {
            return Err(Error::invalid(format!(
                "grid resolution {n} is not a power of two"
            )));
        }
        let len = n.pow(dim as u32);
        if values.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("grid values must be finite".into()));
        }
        Ok(GridField {
            dim,
            n,
            values,
            tag,
        })
    }

    pub fn from_fn(dim: usize, n: usize, tag: FieldTag, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let len = n
            .checked_pow(dim as u32)
            .ok_or_else(|| Error::invalid("grid too large"))?;
        let mut point = vec![0.0; dim];
        let values = (0..len)
            .map(|idx| {
                let mut rem = idx;
                for a in (0..dim).rev() {
                    point[a] = (rem % n) as f64 / n as f64;
                    rem /= n;
                }
                f(&point)
            })
            .collect();
        GridField::new(dim, n, values, tag)
    }

    pub fn constant(dim: usize, n: usize, value: f64, tag: FieldTag) -> Result<Self> {
        GridField::from_fn(dim, n, tag, |_| value)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tag(&self) -> FieldTag {
        self.tag
    }

    pub fn with_tag(mut self, tag: FieldTag) -> Self {
        self.tag = tag;
        self
    }

    /// Mean over nodes; the periodic trapezoid rule for `∫ g dx`.
    pub fn integral(&self) -> f64 {
        crate::numeric::mean(&self.values)
    }

    /// `∫ self · other dx` by the periodic trapezoid rule.
    pub fn pairing(&self, other: &GridField) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(crate::numeric::dot(&self.values, &other.values) / self.values.len() as f64)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_same_grid(&self, other: &GridField) -> Result<()> {
        if self.dim != other.dim || self.n != other.n {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        Ok(())
    }

    /// Multilinear interpolation at a point of the torus (coordinates taken mod 1).
    pub fn interpolate(&self, point: &[f64]) -> f64 {
        debug_assert_eq!(point.len(), self.dim);
        let n = self.n;
        let mut base = vec![0usize; self.dim];
        let mut frac = vec![0.0; self.dim];
        for a in 0..self.dim {
            let u = point[a].rem_euclid(1.0) * n as f64;
            let i = u.floor();
            frac[a] = u - i;
            base[a] = (i as usize) % n;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..self.dim {
                let up = (corner >> a) & 1 == 1;
                w *= if up { frac[a] } else { 1.0 - frac[a] };
                idx = idx * n + if up { (base[a] + 1) % n } else { base[a] };
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        acc
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = GridHeader {
            d: self.dim,
            n: self.n,
            tag: self.tag,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path, e))?;
        let header: GridHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad grid header: {e}"),
            })?;
        let mut payload = Vec::new();
        reader
            .read_to_end(&mut payload)
            .map_err(|e| Error::io(path, e))?;
        if payload.len() % 8 != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "payload is not a whole number of f64 values".into(),
            });
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        GridField::new(header.d, header.n, values, header.tag)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridHeader {
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    tag: FieldTag,
}

pub fn write_grid(field: &GridField, path: &Path) -> Result<()> {
    io::atomic_write(path, &field.to_bytes()?)
}

pub fn read_grid(path: &Path) -> Result<GridField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    GridField::from_bytes(&bytes, path)
}

/// One term `amplitude · cos(2π k·x + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub amplitude: f64,
    pub freq: Vec<i64>,
    #[serde(default)]
    pub phase: f64,
}

/// Trigonometric polynomial on the unit torus; used for initial profiles and
/// test functions, which keeps them band-limited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigPolynomial {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub modes: Vec<Mode>,
}

impl TrigPolynomial {
    pub fn constant(c: f64) -> Self {
        TrigPolynomial {
            constant: c,
            modes: vec![],
        }
    }

    pub fn cosine(amplitude: f64, freq: Vec<i64>) -> Self {
        TrigPolynomial {
            constant: 0.0,
            modes: vec![Mode {
                amplitude,
                freq,
                phase: 0.0,
            }],
        }
    }

    pub fn sine(amplitude: f64, freq: Vec<i64>) -> Self {
        TrigPolynomial {
            constant: 0.0,
            modes: vec![Mode {
                amplitude,
                freq,
                phase: -PI / 2.0,
            }],
        }
    }

    pub fn plus(mut self, other: TrigPolynomial) -> Self {
        self.constant += other.constant;
        self.modes.extend(other.modes);
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant
            + self
                .modes
                .iter()
                .map(|m| {
                    let arg: f64 = m.freq.iter().zip(x).map(|(k, xi)| *k as f64 * xi).sum();
                    m.amplitude * (2.0 * PI * arg + m.phase).cos()
                })
                .sum::<f64>()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(m) = self.modes.iter().find(|m| m.freq.len() != dim) {
            return Err(Error::invalid(format!(
                "mode frequency {:?} does not have {dim} components",
                m.freq
            )));
        }
        Ok(())
    }

    pub fn max_frequency(&self) -> i64 {
        self.modes
            .iter()
            .flat_map(|m| m.freq.iter().map(|k| k.abs()))
            .max()
            .unwrap_or(0)
    }

    pub fn to_grid(&self, dim: usize, n: usize, tag: FieldTag) -> Result<GridField> {
        self.validate(dim)?;
        GridField::from_fn(dim, n, tag, |x| self.eval(x))
    }
}

/// Symmetric positive definite `d × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionMatrix(DMatrix<f64>);

impl DiffusionMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::invalid("diffusion matrix must be square"));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if (&m - m.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite);
        }
        if m.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(DiffusionMatrix(m))
    }

    pub fn identity(dim: usize) -> Self {
        DiffusionMatrix(DMatrix::identity(dim, dim))
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        DiffusionMatrix::new(DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(
            values,
        )))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `k·𝒟k` for the wave vector `k = 2π n`.
    pub fn symbol(&self, n: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += n[i] * self.0[(i, j)] * n[j];
            }
        }
        4.0 * PI * PI * acc
    }
}

fn fft_axes(data: &mut [Complex<f64>], dim: usize, n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let total = data.len();
    for axis in 0..dim {
        let stride = n.pow((dim - 1 - axis) as u32);
        let block = stride * n;
        // each block of `block` contiguous entries holds `stride` lines along `axis`
        data.par_chunks_mut(block).for_each(|chunk| {
            let mut line = vec![Complex::new(0.0, 0.0); n];
            for offset in 0..stride {
                for k in 0..n {
                    line[k] = chunk[offset + k * stride];
                }
                fft.process(&mut line);
                for k in 0..n {
                    chunk[offset + k * stride] = line[k];
                }
            }
        });
        debug_assert_eq!(total % block, 0);
    }
}

/// Applies the Fourier multiplier `mult(n)` (signed integer frequencies) to `g`.
fn apply_multiplier(
    g: &GridField,
    mult: impl Fn(&[f64]) -> f64 + Sync,
    tag: FieldTag,
) -> GridField {
    let (dim, n) = (g.dim, g.n);
    let mut data: Vec<Complex<f64>> = g.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_axes(&mut data, dim, n, false);
    let norm = 1.0 / data.len() as f64;
    data.par_iter_mut().enumerate().for_each(|(idx, c)| {
        let mut freq = vec![0.0; dim];
        let mut rem = idx;
        for a in (0..dim).rev() {
            let k = rem % n;
            rem /= n;
            freq[a] = if k <= n / 2 {
                k as f64
            } else {
                k as f64 - n as f64
            };
        }
        *c *= mult(&freq) * norm;
    });
    fft_axes(&mut data, dim, n, true);
    GridField {
        dim,
        n,
        values: data.into_iter().map(|c| c.re).collect(),
        tag,
    }
}

pub fn heat_evolve(rho0: &GridField, dmat: &DiffusionMatrix, t: f64) -> Result<GridField> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("time must be nonnegative, got {t}")));
    }
    check_dims(rho0, dmat)?;
    if t == 0.0 {
        return Ok(rho0.clone());
    }
    Ok(apply_multiplier(
        rho0,
        |k| (-t * dmat.symbol(k)).exp(),
        rho0.tag,
    ))
}

pub fn resolvent_continuum(
    f: &GridField,
    dmat: &DiffusionMatrix,
    lambda: f64,
) -> Result<GridField> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    check_dims(f, dmat)?;
    Ok(apply_multiplier(
        f,
        |k| 1.0 / (lambda + dmat.symbol(k)),
        FieldTag::Solution,
    ))
}

fn check_dims(g: &GridField, dmat: &DiffusionMatrix) -> Result<()> {
    if g.dim != dmat.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim,
            actual: dmat.dim(),
        });
    }
    Ok(())
}

/// Values of `g` at the points `εx` for the giant sites `x`, in compact order.
pub fn sample_on_cluster(
    g: &GridField,
    eps: EpsScale,
    labeling: &ClusterLabeling,
) -> Result<Vec<f64>> {
    let torus = labeling.torus();
    if g.dim != torus.dim() {
        return Err(Error::DimensionMismatch {
            expected: torus.dim(),
            actual: g.dim,
        });
    }
    let e = eps.epsilon();
    Ok(labeling
        .giant_sites()
        .par_iter()
        .map(|&x| {
            let p: Vec<f64> = (0..torus.dim())
                .map(|a| e * torus.coord(x, a) as f64)
                .collect();
            g.interpolate(&p)
        })
        .collect())
}
