//! C ABI over the `pchm` library.
//!
//! Objects are opaque heap handles released with the matching `*_free`
//! function. Every fallible call returns a [`PchmStatus`]; on failure the
//! message is kept per thread and read with [`pchm_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nalgebra::DMatrix;
use pchm::cluster::{label_components, ClusterLabeling};
use pchm::corrector::estimate_d;
use pchm::env::{read_field, sample_field, write_field, ConductanceField, FieldLaw};
use pchm::pde::{heat_evolve, DiffusionMatrix, FieldTag, GridField};
use pchm::solver::CgOptions;
use pchm::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PchmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    NotConverged = 4,
    Io = 5,
    Format = 6,
    EmptyGiant = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// A conductance field on a periodic box.
pub struct PchmField(ConductanceField);

/// Connected components of a field and its giant cluster.
pub struct PchmLabeling(ClusterLabeling);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> PchmStatus {
    match err {
        Error::InvalidParameter(_)
        | Error::DimensionMismatch { .. }
        | Error::GaugeViolation { .. } => PchmStatus::InvalidArgument,
        Error::Validation(_) | Error::NotPositiveDefinite | Error::ZeroWeights => {
            PchmStatus::Validation
        }
        Error::NotConverged { .. } => PchmStatus::NotConverged,
        Error::Io { .. } => PchmStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Csv(_) => PchmStatus::Format,
        Error::EmptyGiant => PchmStatus::EmptyGiant,
    }
}

fn fail(status: PchmStatus, msg: impl Into<String>) -> PchmStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), PchmStatus>) -> PchmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PchmStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(PchmStatus::Internal, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, PchmStatus>;
}

impl<T> OrStatus<T> for pchm::Result<T> {
    fn or_status(self) -> Result<T, PchmStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, PchmStatus> {
    if p.is_null() {
        return Err(fail(PchmStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PchmStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, PchmStatus> {
    p.as_ref()
        .ok_or_else(|| fail(PchmStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, PchmStatus> {
    p.as_mut()
        .ok_or_else(|| fail(PchmStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], PchmStatus> {
    if p.is_null() {
        return Err(fail(PchmStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(
    p: *mut f64,
    len: usize,
    need: usize,
    name: &str,
) -> Result<&'a mut [f64], PchmStatus> {
    if p.is_null() {
        return Err(fail(PchmStatus::NullPointer, format!("{name} is null")));
    }
    if len < need {
        return Err(fail(
            PchmStatus::BufferTooSmall,
            format!("{name} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pchm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pchm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Samples a field from a JSON law such as `{"kind":"bernoulli","p":0.7,"value":1.0}`.
///
/// # Safety
/// `law_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pchm_field_sample(
    law_json: *const c_char,
    dim: u32,
    side: u32,
    cap: f64,
    seed: u64,
    out: *mut *mut PchmField,
) -> PchmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let text = str_arg(law_json, "law_json")?;
        let law: FieldLaw =
            serde_json::from_str(text).map_err(|e| fail(PchmStatus::Format, e.to_string()))?;
        let field = sample_field(&law, dim as usize, side as usize, cap, seed).or_status()?;
        *out = Box::into_raw(Box::new(PchmField(field)));
        Ok(())
    })
}

/// Builds a field from `d · L^d` weights in site-major, axis-minor order.
///
/// # Safety
/// `weights` must point to `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pchm_field_from_weights(
    dim: u32,
    side: u32,
    cap: f64,
    weights: *const f64,
    len: usize,
    out: *mut *mut PchmField,
) -> PchmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let w = slice_arg(weights, len, "weights")?;
        let field = ConductanceField::from_weights(dim as usize, side as usize, cap, w.to_vec())
            .or_status()?;
        *out = Box::into_raw(Box::new(PchmField(field)));
        Ok(())
    })
}

/// Reads a binary field dump (and its metadata file, if present).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pchm_field_read(
    path: *const c_char,
    out: *mut *mut PchmField,
) -> PchmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let field = read_field(&path).or_status()?;
        *out = Box::into_raw(Box::new(PchmField(field)));
        Ok(())
    })
}

/// Writes a binary field dump plus its metadata file.
///
/// # Safety
/// `field` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pchm_field_write(
    field: *const PchmField,
    path: *const c_char,
) -> PchmStatus {
    guard(|| {
        let field = ref_arg(field, "field")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        write_field(&field.0, &path).or_status()
    })
}

/// # Safety
/// `field` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pchm_field_free(field: *mut PchmField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Dimension and side of a field.
///
/// # Safety
/// `field` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pchm_field_shape(
    field: *const PchmField,
    dim: *mut u32,
    side: *mut u32,
) -> PchmStatus {
    guard(|| {
        let field = ref_arg(field, "field")?;
        *out_arg(dim, "dim")? = field.0.dim() as u32;
        *out_arg(side, "side")? = field.0.side() as u32;
        Ok(())
    })
}

/// Number of weights, `d · L^d`.
///
/// # Safety
/// `field` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pchm_field_len(field: *const PchmField) -> usize {
    field.as_ref().map(|f| f.0.weights().len()).unwrap_or(0)
}

/// Copies the weights into `out`, which must hold at least [`pchm_field_len`] values.
///
/// # Safety
/// `field` must be a live handle; `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pchm_field_weights(
    field: *const PchmField,
    out: *mut f64,
    len: usize,
) -> PchmStatus {
    guard(|| {
        let field = ref_arg(field, "field")?;
        let w = field.0.weights();
        slice_out(out, len, w.len(), "out")?.copy_from_slice(w);
        Ok(())
    })
}

/// Sum of the raw weight bits modulo 2^64, as stored in the dump footer.
///
/// # Safety
/// `field` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pchm_field_checksum(field: *const PchmField, out: *mut u64) -> PchmStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(field, "field")?.0.checksum();
        Ok(())
    })
}

/// Labels connected components of the positive-weight graph.
///
/// # Safety
/// `field` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pchm_label_components(
    field: *const PchmField,
    out: *mut *mut PchmLabeling,
) -> PchmStatus {
    guard(|| {
        let field = ref_arg(field, "field")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(PchmLabeling(label_components(&field.0))));
        Ok(())
    })
}

/// # Safety
/// `labeling` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pchm_labeling_free(labeling: *mut PchmLabeling) {
    if !labeling.is_null() {
        drop(Box::from_raw(labeling));
    }
}

/// Giant-cluster fraction and size.
///
/// # Safety
/// `labeling` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pchm_labeling_giant(
    labeling: *const PchmLabeling,
    m_hat: *mut f64,
    giant_size: *mut usize,
) -> PchmStatus {
    guard(|| {
        let lab = ref_arg(labeling, "labeling")?;
        *out_arg(m_hat, "m_hat")? = lab.0.m_hat();
        *out_arg(giant_size, "giant_size")? = lab.0.giant_size();
        Ok(())
    })
}

/// Solves the corrector problem and writes `D̂` and `𝒟̂ = D̂ / (2 m̂)` as
/// row-major `d × d` arrays. `tol <= 0` selects the default tolerance.
///
/// # Safety
/// Handles must be live and belong together; `d_hat` and `dcal_hat` must
/// hold `len ≥ d²` values; `m_hat` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pchm_estimate_diffusion(
    field: *const PchmField,
    labeling: *const PchmLabeling,
    tol: f64,
    d_hat: *mut f64,
    dcal_hat: *mut f64,
    len: usize,
    m_hat: *mut f64,
) -> PchmStatus {
    guard(|| {
        let field = ref_arg(field, "field")?;
        let lab = ref_arg(labeling, "labeling")?;
        let mut opts = CgOptions::default();
        if tol > 0.0 {
            opts.tol = tol;
        }
        let est = estimate_d(&field.0, &lab.0, opts).or_status()?;
        let d = est.dim();
        let d_out = slice_out(d_hat, len, d * d, "d_hat")?;
        for i in 0..d {
            for j in 0..d {
                d_out[i * d + j] = est.d_hat[(i, j)];
            }
        }
        let c_out = slice_out(dcal_hat, len, d * d, "dcal_hat")?;
        for i in 0..d {
            for j in 0..d {
                c_out[i * d + j] = est.dcal_hat[(i, j)];
            }
        }
        *out_arg(m_hat, "m_hat")? = est.m_hat;
        Ok(())
    })
}

/// Evolves `values` (an `n^dim` grid on the unit torus, first coordinate
/// slowest) under the heat equation with row-major diffusion matrix `dcal`
/// for time `t`, writing the result to `out`.
///
/// # Safety
/// `values` and `out` must hold `len = n^dim` values; `dcal` must hold `dim²`.
#[no_mangle]
pub unsafe extern "C" fn pchm_heat_evolve(
    dim: u32,
    n: u32,
    values: *const f64,
    len: usize,
    dcal: *const f64,
    t: f64,
    out: *mut f64,
) -> PchmStatus {
    guard(|| {
        let d = dim as usize;
        let v = slice_arg(values, len, "values")?;
        let m = slice_arg(dcal, d * d, "dcal")?;
        let grid = GridField::new(d, n as usize, v.to_vec(), FieldTag::Density).or_status()?;
        let dm = DiffusionMatrix::new(DMatrix::from_row_slice(d, d, m)).or_status()?;
        let evolved = heat_evolve(&grid, &dm, t).or_status()?;
        slice_out(out, len, evolved.values().len(), "out")?.copy_from_slice(evolved.values());
        Ok(())
    })
}
