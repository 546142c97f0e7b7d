//! C ABI for the hard-sphere laboratory.
//!
//! Configurations cross the boundary as opaque handles. Every function
//! returns a [`BglabStatus`]; on failure the message is kept per thread and
//! read back with [`bglab_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use bglab::dual::{evaluate_hat, singular_membership};
use bglab::dynamics::{flow, Configuration};
use bglab::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BglabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Degenerate = 3,
    Runaway = 4,
    Overflow = 5,
    Other = 6,
    Panic = 7,
}

/// Opaque hard-sphere configuration.
pub struct BglabConfiguration {
    inner: Configuration,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> BglabStatus {
    match err {
        Error::InvalidArgument(_) | Error::LevelCap { .. } | Error::Parse(_) | Error::Config(_) => BglabStatus::InvalidArgument,
        Error::Degenerate(_) | Error::IllConditioned(_) => BglabStatus::Degenerate,
        Error::Runaway(_) => BglabStatus::Runaway,
        Error::Overflow => BglabStatus::Overflow,
        _ => BglabStatus::Other,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F>(f: F) -> BglabStatus
where
    F: FnOnce() -> Result<(), (BglabStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BglabStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            BglabStatus::Panic
        }
    }
}

fn lift(err: Error) -> (BglabStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (BglabStatus, String) {
    (BglabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn handle<'a>(ptr: *const BglabConfiguration) -> Result<&'a Configuration, (BglabStatus, String)> {
    // SAFETY: the caller passes a handle from bglab_configuration_new or null.
    unsafe { ptr.as_ref() }.map(|h| &h.inner).ok_or_else(|| null("configuration"))
}

/// Creates a configuration of `count` spheres in dimension `dim` from
/// row-major `count * dim` position and velocity arrays.
///
/// # Safety
/// `positions` and `velocities` must point to `count * dim` doubles; `out`
/// must be writable. The handle is released with
/// [`bglab_configuration_free`].
#[no_mangle]
pub unsafe extern "C" fn bglab_configuration_new(
    dim: usize,
    diameter: f64,
    count: usize,
    positions: *const f64,
    velocities: *const f64,
    out: *mut *mut BglabConfiguration,
) -> BglabStatus {
    guard(|| {
        if positions.is_null() || velocities.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let n = count.checked_mul(dim).ok_or((BglabStatus::InvalidArgument, "size overflow".to_string()))?;
        // SAFETY: lengths are the caller's contract.
        let (x, v) = unsafe { (std::slice::from_raw_parts(positions, n).to_vec(), std::slice::from_raw_parts(velocities, n).to_vec()) };
        let inner = Configuration::new(dim, diameter, x, v).map_err(lift)?;
        // SAFETY: out checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(BglabConfiguration { inner })) };
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `config` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bglab_configuration_free(config: *mut BglabConfiguration) {
    if !config.is_null() {
        // SAFETY: ownership returns from C.
        drop(unsafe { Box::from_raw(config) });
    }
}

/// Number of spheres and dimension.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn bglab_configuration_shape(config: *const BglabConfiguration, count: *mut usize, dim: *mut usize) -> BglabStatus {
    guard(|| {
        let c = unsafe { handle(config) }?;
        if count.is_null() || dim.is_null() {
            return Err(null("output"));
        }
        // SAFETY: checked non-null.
        unsafe {
            *count = c.count();
            *dim = c.dim();
        }
        Ok(())
    })
}

/// Kinetic energy `sum |v_i|^2 / 2`.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn bglab_configuration_energy(config: *const BglabConfiguration, out: *mut f64) -> BglabStatus {
    guard(|| {
        let c = unsafe { handle(config) }?;
        if out.is_null() {
            return Err(null("output"));
        }
        // SAFETY: checked non-null.
        unsafe { *out = c.energy() };
        Ok(())
    })
}

/// Copies positions and velocities into caller buffers of `len` doubles each.
///
/// # Safety
/// Buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bglab_configuration_state(config: *const BglabConfiguration, positions: *mut f64, velocities: *mut f64, len: usize) -> BglabStatus {
    guard(|| {
        let c = unsafe { handle(config) }?;
        if positions.is_null() || velocities.is_null() {
            return Err(null("buffer"));
        }
        let n = c.positions().len();
        if len < n {
            return Err((BglabStatus::InvalidArgument, format!("buffers hold {len} doubles, need {n}")));
        }
        // SAFETY: capacity checked against the caller's length.
        unsafe {
            std::ptr::copy_nonoverlapping(c.positions().as_ptr(), positions, n);
            std::ptr::copy_nonoverlapping(c.velocities().as_ptr(), velocities, n);
        }
        Ok(())
    })
}

/// Flows for `duration` (negative runs backward) and returns a new handle
/// with the number of collisions.
///
/// # Safety
/// Pointers must be valid; `out` receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn bglab_flow(config: *const BglabConfiguration, duration: f64, out: *mut *mut BglabConfiguration, events: *mut usize) -> BglabStatus {
    guard(|| {
        let c = unsafe { handle(config) }?;
        if out.is_null() || events.is_null() {
            return Err(null("output"));
        }
        let r = flow(c, duration).map_err(lift)?;
        // SAFETY: checked non-null.
        unsafe {
            *events = r.events.len();
            *out = Box::into_raw(Box::new(BglabConfiguration { inner: r.final_state }));
        }
        Ok(())
    })
}

/// Comparison hierarchy `phi_hat_{N,j}^(s)(t, Z)` with `s` the handle's
/// count. `value` receives the exact integer (Overflow if it exceeds 64
/// bits), `divisible` whether it is the coefficient times
/// `(N-j)..(N-s+1)`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bglab_hat_value(j: usize, n: u64, t: f64, config: *const BglabConfiguration, value: *mut u64, divisible: *mut bool) -> BglabStatus {
    guard(|| {
        let c = unsafe { handle(config) }?;
        if value.is_null() || divisible.is_null() {
            return Err(null("output"));
        }
        let h = evaluate_hat(j, n, t, c).map_err(lift)?;
        let v = u64::try_from(h.value).map_err(|_| lift(Error::Overflow))?;
        // SAFETY: checked non-null.
        unsafe {
            *value = v;
            *divisible = h.is_consistent();
        }
        Ok(())
    })
}

/// Membership of the handle in the singular set with `k` reductions over
/// `[0, t]`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bglab_singular_membership(config: *const BglabConfiguration, k: usize, t: f64, n: u64, member: *mut bool) -> BglabStatus {
    guard(|| {
        let c = unsafe { handle(config) }?;
        if member.is_null() {
            return Err(null("output"));
        }
        let m = singular_membership(c, k, t, n).map_err(lift)?;
        // SAFETY: checked non-null.
        unsafe { *member = m };
        Ok(())
    })
}

/// Copies the last error message of this thread, NUL-terminated and
/// truncated to `len`; returns the full length without the terminator.
///
/// # Safety
/// `buf` must hold `len` bytes or be null (to query the length).
#[no_mangle]
pub unsafe extern "C" fn bglab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: at most len bytes written.
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bglab_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_status_codes() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, BglabStatus::Panic);
        let n = unsafe { bglab_last_error(std::ptr::null_mut(), 0) };
        assert_eq!(n, "panic: boom".len());
        assert_eq!(guard(|| Ok(())), BglabStatus::Ok);
        assert_eq!(unsafe { bglab_last_error(std::ptr::null_mut(), 0) }, 0);
    }
}
