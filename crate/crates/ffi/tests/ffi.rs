use std::ffi::CStr;
use std::ptr;

use bglab_ffi::*;

fn make(dim: usize, eps: f64, x: &[f64], v: &[f64]) -> (BglabStatus, *mut BglabConfiguration) {
    let mut out = ptr::null_mut();
    let st = unsafe { bglab_configuration_new(dim, eps, x.len() / dim, x.as_ptr(), v.as_ptr(), &mut out) };
    (st, out)
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe { bglab_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn head_on_pair_round_trip() {
    let (st, c) = make(2, 0.1, &[0.0, 0.0, 0.3, 0.0], &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(st, BglabStatus::Ok);
    let (mut count, mut dim) = (0, 0);
    assert_eq!(unsafe { bglab_configuration_shape(c, &mut count, &mut dim) }, BglabStatus::Ok);
    assert_eq!((count, dim), (2, 2));

    let mut moved = ptr::null_mut();
    let mut events = 0;
    assert_eq!(unsafe { bglab_flow(c, 1.0, &mut moved, &mut events) }, BglabStatus::Ok);
    assert_eq!(events, 1);
    let (mut e0, mut e1) = (0.0, 0.0);
    unsafe {
        bglab_configuration_energy(c, &mut e0);
        bglab_configuration_energy(moved, &mut e1);
    }
    assert_eq!(e0, e1);
    let mut x = [0.0; 4];
    let mut v = [0.0; 4];
    assert_eq!(unsafe { bglab_configuration_state(moved, x.as_mut_ptr(), v.as_mut_ptr(), 4) }, BglabStatus::Ok);
    // Velocities exchanged at the contact.
    assert_eq!(v, [0.0, 0.0, 1.0, 0.0]);
    assert_eq!(unsafe { bglab_configuration_state(moved, x.as_mut_ptr(), v.as_mut_ptr(), 3) }, BglabStatus::InvalidArgument);

    let mut value = 0u64;
    let mut divisible = false;
    assert_eq!(unsafe { bglab_hat_value(1, 10, 1.0, c, &mut value, &mut divisible) }, BglabStatus::Ok);
    assert_eq!(value, 36);
    assert!(divisible);
    let mut member = false;
    assert_eq!(unsafe { bglab_singular_membership(c, 1, 1.0, 10, &mut member) }, BglabStatus::Ok);
    assert!(member);
    unsafe {
        bglab_configuration_free(c);
        bglab_configuration_free(moved);
    }
}

#[test]
fn errors_are_reported() {
    let (st, c) = make(2, 0.5, &[0.0, 0.0, 0.1, 0.0], &[0.0; 4]);
    assert_eq!(st, BglabStatus::InvalidArgument);
    assert!(c.is_null());
    assert!(!last_error().is_empty());
    let mut out = ptr::null_mut();
    let st = unsafe { bglab_configuration_new(2, 0.1, 1, ptr::null(), ptr::null(), &mut out) };
    assert_eq!(st, BglabStatus::NullPointer);
    let mut e = 0.0;
    assert_eq!(unsafe { bglab_configuration_energy(ptr::null(), &mut e) }, BglabStatus::NullPointer);
    let needed = unsafe { bglab_last_error(ptr::null_mut(), 0) };
    assert!(needed > 0);
    unsafe { bglab_configuration_free(ptr::null_mut()) };
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(bglab_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/bglab.h")).unwrap();
    for name in ["bglab_configuration_new", "bglab_flow", "bglab_hat_value", "bglab_last_error", "typedef struct BglabConfiguration BglabConfiguration"] {
        assert!(header.contains(name), "{name}");
    }
    let Ok(status) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99", "-Wall", "-Werror"]).arg(dir.join("include/bglab.h")).status() else {
        return;
    };
    assert!(status.success());
}
