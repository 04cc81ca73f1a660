//! Conductance fields on the periodic box.
//!
//! One `f64` is stored per undirected bond `{x, x + e}`, so the symmetry
//! `ω(x, y) = ω(y, x)` holds by construction.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::lattice::Torus;
use crate::streams::CounterStreams;

pub const FIELD_MAGIC: &[u8; 4] = b"PCHM";
pub const FIELD_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 8;

/// Law of the positive part of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PositiveLaw {
    Uniform { lo: f64, hi: f64 },
    Constant { c: f64 },
}

/// Bond `{x, x + e_axis}` gets `values[x_along mod values.len()]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisRule {
    pub along: usize,
    pub values: Vec<f64>,
}

impl AxisRule {
    pub fn constant(axis: usize, value: f64) -> Self {
        AxisRule {
            along: axis,
            values: vec![value],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldLaw {
    IidUniform {
        lo: f64,
        hi: f64,
    },
    /// Weight `value` with probability `p`, else 0.
    Bernoulli {
        p: f64,
        value: f64,
    },
    IidMixture {
        p_zero: f64,
        positive: PositiveLaw,
    },
    /// One rule per axis, in axis order.
    Layered {
        axes: Vec<AxisRule>,
    },
    Constant {
        c: f64,
    },
}

impl FieldLaw {
    pub fn validate(&self, dim: usize, side: usize, cap: f64) -> Result<()> {
        let in_cap = |name: &str, v: f64| {
            if v.is_finite() && (0.0..=cap).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [0, {cap}]")))
            }
        };
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} is not a probability")))
            }
        };
        match self {
            FieldLaw::IidUniform { lo, hi } => {
                in_cap("lo", *lo)?;
                in_cap("hi", *hi)?;
                if lo > hi {
                    return Err(Error::invalid(format!(
                        "uniform bounds reversed: {lo} > {hi}"
                    )));
                }
            }
            FieldLaw::Bernoulli { p, value } => {
                prob("p", *p)?;
                in_cap("value", *value)?;
            }
            FieldLaw::IidMixture { p_zero, positive } => {
                prob("p_zero", *p_zero)?;
                match positive {
                    PositiveLaw::Uniform { lo, hi } => {
                        in_cap("lo", *lo)?;
                        in_cap("hi", *hi)?;
                        if lo > hi {
                            return Err(Error::invalid("uniform bounds reversed"));
                        }
                    }
                    PositiveLaw::Constant { c } => in_cap("c", *c)?,
                }
            }
            FieldLaw::Layered { axes } => {
                if axes.len() != dim {
                    return Err(Error::invalid(format!(
                        "layered law has {} axis rules for dimension {dim}",
                        axes.len()
                    )));
                }
                for rule in axes {
                    if rule.along >= dim {
                        return Err(Error::invalid(format!(
                            "layer axis {} >= dimension",
                            rule.along
                        )));
                    }
                    if rule.values.is_empty() || !side.is_multiple_of(rule.values.len()) {
                        return Err(Error::invalid(format!(
                            "layer period {} does not divide side {side}",
                            rule.values.len()
                        )));
                    }
                    for &v in &rule.values {
                        in_cap("layer value", v)?;
                    }
                }
            }
            FieldLaw::Constant { c } => in_cap("c", *c)?,
        }
        Ok(())
    }

    fn is_deterministic(&self) -> bool {
        matches!(self, FieldLaw::Layered { .. } | FieldLaw::Constant { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub law: FieldLaw,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConductanceField {
    torus: Torus,
    cap: f64,
    weights: Vec<f64>,
    provenance: Option<Provenance>,
}

impl ConductanceField {
    /// Builds a field from explicit per-bond weights in `(site, axis)` order.
    pub fn from_weights(dim: usize, side: usize, cap: f64, weights: Vec<f64>) -> Result<Self> {
        let torus = Torus::new(dim, side)?;
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::invalid(format!("cap must be positive, got {cap}")));
        }
        if weights.len() != torus.n_bonds() {
            return Err(Error::DimensionMismatch {
                expected: torus.n_bonds(),
                actual: weights.len(),
            });
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(0.0..=cap).contains(*w))
        {
            return Err(Error::Validation(format!(
                "weight {w} at bond {i} outside [0, {cap}]"
            )));
        }
        Ok(ConductanceField {
            torus,
            cap,
            weights,
            provenance: None,
        })
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn dim(&self) -> usize {
        self.torus.dim()
    }

    pub fn side(&self) -> usize {
        self.torus.side()
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// Conductance of the bond `{site, site + e_axis}`.
    #[inline]
    pub fn weight(&self, site: usize, axis: usize) -> f64 {
        self.weights[self.torus.bond_index(site, axis)]
    }

    /// Raw-bit checksum used in the binary footer.
    pub fn checksum(&self) -> u64 {
        weight_checksum(&self.weights)
    }
}

fn weight_checksum(weights: &[f64]) -> u64 {
    weights
        .iter()
        .fold(0u64, |acc, w| acc.wrapping_add(w.to_bits()))
}

pub fn sample_field(
    law: &FieldLaw,
    dim: usize,
    side: usize,
    cap: f64,
    seed: u64,
) -> Result<ConductanceField> {
    let torus = Torus::new(dim, side)?;
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Error::invalid(format!("cap must be positive, got {cap}")));
    }
    law.validate(dim, side, cap)?;

    let streams = CounterStreams::new(seed, "conductance-field");
    let weights: Vec<f64> = (0..torus.n_bonds())
        .into_par_iter()
        .map(|bond| {
            if law.is_deterministic() {
                deterministic_weight(law, &torus, bond)
            } else {
                random_weight(law, &mut streams.at(bond as u64))
            }
        })
        .collect();

    Ok(ConductanceField {
        torus,
        cap,
        weights,
        provenance: Some(Provenance {
            law: law.clone(),
            seed,
        }),
    })
}

fn deterministic_weight(law: &FieldLaw, torus: &Torus, bond: usize) -> f64 {
    let (site, axis) = (bond / torus.dim(), bond % torus.dim());
    match law {
        FieldLaw::Constant { c } => *c,
        FieldLaw::Layered { axes } => {
            let rule = &axes[axis];
            rule.values[torus.coord(site, rule.along) % rule.values.len()]
        }
        _ => unreachable!("random law routed to deterministic path"),
    }
}

fn random_weight<R: Rng>(law: &FieldLaw, rng: &mut R) -> f64 {
    match law {
        FieldLaw::IidUniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        FieldLaw::Bernoulli { p, value } => {
            if rng.random::<f64>() < *p {
                *value
            } else {
                0.0
            }
        }
        FieldLaw::IidMixture { p_zero, positive } => {
            let zero = rng.random::<f64>() < *p_zero;
            let w = match positive {
                PositiveLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
                PositiveLaw::Constant { c } => *c,
            };
            if zero {
                0.0
            } else {
                w
            }
        }
        FieldLaw::Layered { .. } | FieldLaw::Constant { .. } => {
            unreachable!("deterministic law routed to random path")
        }
    }
}

/// Binary field `1[ω(b) > c]`.
pub fn threshold_indicator(field: &ConductanceField, c: f64) -> Result<ConductanceField> {
    if !(0.0..=field.cap).contains(&c) {
        return Err(Error::invalid(format!(
            "threshold {c} outside [0, {}]",
            field.cap
        )));
    }
    let weights = field
        .weights
        .iter()
        .map(|&w| if w > c { 1.0 } else { 0.0 })
        .collect();
    Ok(ConductanceField {
        torus: field.torus,
        cap: 1.0,
        weights,
        provenance: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldManifest {
    pub format: String,
    pub version: u16,
    pub dim: usize,
    pub side: usize,
    pub cap: f64,
    pub checksum: u64,
    pub law: Option<FieldLaw>,
    pub seed: Option<u64>,
}

/// Path of the JSON metadata file that accompanies a binary dump.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

pub fn encode_field(field: &ConductanceField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * field.weights.len() + 8);
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    out.extend_from_slice(&(field.dim() as u16).to_le_bytes());
    out.extend_from_slice(&(field.side() as u32).to_le_bytes());
    out.extend_from_slice(&field.cap.to_le_bytes());
    for w in &field.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&field.checksum().to_le_bytes());
    out
}

pub fn decode_field(bytes: &[u8], path: &Path) -> Result<ConductanceField> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN + 8 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FIELD_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FIELD_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let dim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let side = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cap = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let torus = Torus::new(dim, side).map_err(|e| fail(e.to_string()))?;
    let n = torus.n_bonds();
    let expected = HEADER_LEN + 8 * n + 8;
    if bytes.len() != expected {
        return Err(fail(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let weights: Vec<f64> = bytes[HEADER_LEN..HEADER_LEN + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
    if stored != weight_checksum(&weights) {
        return Err(fail("checksum mismatch".into()));
    }
    ConductanceField::from_weights(dim, side, cap, weights)
}

/// Writes the binary dump and its sibling JSON manifest.
pub fn write_field(field: &ConductanceField, path: &Path) -> Result<()> {
    io::atomic_write(path, &encode_field(field))?;
    let manifest = FieldManifest {
        format: "PCHM".into(),
        version: FIELD_VERSION,
        dim: field.dim(),
        side: field.side(),
        cap: field.cap,
        checksum: field.checksum(),
        law: field.provenance.as_ref().map(|p| p.law.clone()),
        seed: field.provenance.as_ref().map(|p| p.seed),
    };
    io::write_json(&manifest_path(path), &manifest)
}

/// Reads a binary dump; law and seed are restored from the sibling manifest when present.
pub fn read_field(path: &Path) -> Result<ConductanceField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut field = decode_field(&bytes, path)?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let m: FieldManifest = io::read_json(&mpath)?;
        if m.dim != field.dim() || m.side != field.side() || m.cap != field.cap {
            return Err(Error::Format {
                path: mpath,
                reason: "manifest disagrees with binary header".into(),
            });
        }
        if let (Some(law), Some(seed)) = (m.law, m.seed) {
            field.provenance = Some(Provenance { law, seed });
        }
    }
    Ok(field)
}
