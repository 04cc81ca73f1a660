use std::ffi::{CStr, CString};
use std::ptr;

use pchm_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        pchm_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn sample(law: &str, side: u32, seed: u64) -> *mut PchmField {
    let law = CString::new(law).unwrap();
    let mut f = ptr::null_mut();
    let s = unsafe { pchm_field_sample(law.as_ptr(), 2, side, 1.0, seed, &mut f) };
    assert_eq!(s, PchmStatus::Ok, "{}", last_error());
    f
}

#[test]
fn constant_field_identity_through_the_abi() {
    let f = sample(r#"{"kind":"constant","c":1.0}"#, 16, 0);
    let mut lab = ptr::null_mut();
    unsafe {
        assert_eq!(pchm_label_components(f, &mut lab), PchmStatus::Ok);
        let (mut m, mut size) = (0.0, 0usize);
        assert_eq!(pchm_labeling_giant(lab, &mut m, &mut size), PchmStatus::Ok);
        assert_eq!((m, size), (1.0, 256));
        let (mut d, mut dc) = ([0.0; 4], [0.0; 4]);
        let s = pchm_estimate_diffusion(f, lab, 0.0, d.as_mut_ptr(), dc.as_mut_ptr(), 4, &mut m);
        assert_eq!(s, PchmStatus::Ok);
        for (k, (a, b)) in d.iter().zip(&dc).enumerate() {
            let eye = if k % 3 == 0 { 1.0 } else { 0.0 };
            assert!((a - 2.0 * eye).abs() < 1e-10);
            assert!((b - eye).abs() < 1e-10);
        }
        pchm_labeling_free(lab);
        pchm_field_free(f);
    }
}

#[test]
fn weights_round_trip_and_checksum() {
    let f = sample(r#"{"kind":"iid_uniform","lo":0.1,"hi":0.9}"#, 8, 42);
    unsafe {
        let n = pchm_field_len(f);
        assert_eq!(n, 2 * 64);
        let mut w = vec![0.0; n];
        assert_eq!(pchm_field_weights(f, w.as_mut_ptr(), n), PchmStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(
            pchm_field_from_weights(2, 8, 1.0, w.as_ptr(), n, &mut g),
            PchmStatus::Ok
        );
        let (mut a, mut b) = (0u64, 0u64);
        pchm_field_checksum(f, &mut a);
        pchm_field_checksum(g, &mut b);
        assert_eq!(a, b);
        let (mut d, mut l) = (0u32, 0u32);
        assert_eq!(pchm_field_shape(g, &mut d, &mut l), PchmStatus::Ok);
        assert_eq!((d, l), (2, 8));
        let mut small = vec![0.0; 3];
        assert_eq!(
            pchm_field_weights(f, small.as_mut_ptr(), 3),
            PchmStatus::BufferTooSmall
        );
        pchm_field_free(f);
        pchm_field_free(g);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("f.pchm").to_str().unwrap()).unwrap();
    let f = sample(r#"{"kind":"bernoulli","p":0.6,"value":1.0}"#, 8, 7);
    unsafe {
        assert_eq!(pchm_field_write(f, path.as_ptr()), PchmStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(pchm_field_read(path.as_ptr(), &mut g), PchmStatus::Ok);
        let (mut a, mut b) = (0u64, 0u64);
        pchm_field_checksum(f, &mut a);
        pchm_field_checksum(g, &mut b);
        assert_eq!(a, b);
        pchm_field_free(f);
        pchm_field_free(g);
        let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(pchm_field_read(missing.as_ptr(), &mut h), PchmStatus::Io);
        assert!(h.is_null());
    }
}

#[test]
fn errors_are_reported() {
    let bad = CString::new(r#"{"kind":"bernoulli","p":1.5,"value":1.0}"#).unwrap();
    let junk = CString::new("not json").unwrap();
    let mut f = ptr::null_mut();
    unsafe {
        assert_eq!(
            pchm_field_sample(bad.as_ptr(), 2, 8, 1.0, 0, &mut f),
            PchmStatus::InvalidArgument
        );
        assert!(last_error().contains("probability"));
        assert_eq!(
            pchm_field_sample(junk.as_ptr(), 2, 8, 1.0, 0, &mut f),
            PchmStatus::Format
        );
        assert_eq!(
            pchm_field_sample(ptr::null(), 2, 8, 1.0, 0, &mut f),
            PchmStatus::NullPointer
        );
        assert_eq!(
            pchm_label_components(ptr::null(), &mut ptr::null_mut()),
            PchmStatus::NullPointer
        );
        pchm_field_free(ptr::null_mut());
        assert_eq!(
            pchm_last_error_message(ptr::null_mut(), 0),
            last_error().len()
        );
    }
    let empty = sample(r#"{"kind":"constant","c":0.0}"#, 4, 0);
    let mut lab = ptr::null_mut();
    unsafe {
        pchm_label_components(empty, &mut lab);
        let (mut d, mut m) = ([0.0; 4], 0.0);
        let s = pchm_estimate_diffusion(empty, lab, 0.0, d.as_mut_ptr(), d.as_mut_ptr(), 4, &mut m);
        assert_eq!(s, PchmStatus::EmptyGiant);
        pchm_labeling_free(lab);
        pchm_field_free(empty);
    }
}

#[test]
fn heat_evolve_decays_a_mode() {
    let n = 16usize;
    let values: Vec<f64> = (0..n * n)
        .map(|k| (2.0 * std::f64::consts::PI * (k / n) as f64 / n as f64).cos())
        .collect();
    let dcal = [1.0, 0.0, 0.0, 1.0];
    let mut out = vec![0.0; n * n];
    let t = 0.01;
    let s = unsafe {
        pchm_heat_evolve(
            2,
            n as u32,
            values.as_ptr(),
            n * n,
            dcal.as_ptr(),
            t,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(s, PchmStatus::Ok);
    let decay = (-4.0 * std::f64::consts::PI.powi(2) * t).exp();
    for (a, b) in out.iter().zip(&values) {
        assert!((a - decay * b).abs() < 1e-12);
    }
    let bad = [1.0, 2.0, 2.0, 1.0];
    let s = unsafe {
        pchm_heat_evolve(
            2,
            n as u32,
            values.as_ptr(),
            n * n,
            bad.as_ptr(),
            t,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(s, PchmStatus::Validation);
}

#[test]
fn header_declares_the_api() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pchm.h")).unwrap();
    for name in [
        "PchmStatus",
        "PCHM_STATUS_OK",
        "typedef struct PchmField PchmField",
        "pchm_field_sample",
        "pchm_estimate_diffusion",
        "pchm_heat_evolve",
        "pchm_last_error_message",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
    let v = unsafe { CStr::from_ptr(pchm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
