//! C ABI over the tamper-proofing toolkit.
//!
//! The surface follows the usual embedding conventions: an opaque guard
//! handle, integer status codes, out-parameters for results, and a
//! generated header (`include/smcguard.h`, regenerated by the build
//! script). Every entry point catches panics and maps them to
//! `SMCG_STATUS_INTERNAL`.

use smcguard::guard::{Action, Guard, GuardError, GuardPolicy, PolicyAction, RegionRef, UnitId};
use smcguard::oracle::{
    checksum_region, reachable_ops, ChecksumState, ModificationSite, OpSelector, OracleError,
    Region,
};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmcgStatus {
    Ok = 0,
    NullArgument = 1,
    UnalignedRegion = 2,
    InvalidSelector = 3,
    ExecDenied = 4,
    UnsupportedHost = 5,
    UnknownUnit = 6,
    NoTable = 7,
    KernelFault = 8,
    OracleMismatch = 9,
    InvalidArgument = 10,
    Internal = 11,
}

/// Verification verdict as plain C data.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SmcgVerdict {
    pub checksum_ok: u8,
    pub timing_ok: u8,
    pub verdict: u8,
    /// Action: 0 continue, 1 warn, 2 fatal, 3 recover.
    pub action: u8,
    pub score: u64,
    pub consecutive_failures: u32,
}

/// Opaque guard handle.
pub struct SmcgGuard {
    inner: Guard,
}

fn status_of(err: &GuardError) -> SmcgStatus {
    match err {
        GuardError::InvalidRegion(_) => SmcgStatus::UnalignedRegion,
        GuardError::UnknownUnit(_) => SmcgStatus::UnknownUnit,
        GuardError::NoTable => SmcgStatus::NoTable,
        GuardError::EmptyInits | GuardError::BadPolicy(_) => SmcgStatus::InvalidArgument,
        GuardError::OracleMismatch { .. } => SmcgStatus::OracleMismatch,
        GuardError::KernelFault => SmcgStatus::KernelFault,
        GuardError::Kernel(k) => match k {
            smcguard::kernels::KernelError::UnsupportedHost => SmcgStatus::UnsupportedHost,
            smcguard::kernels::KernelError::Exec(_) => SmcgStatus::ExecDenied,
            smcguard::kernels::KernelError::UnalignedData(_) => SmcgStatus::UnalignedRegion,
            _ => SmcgStatus::Internal,
        },
        GuardError::Clock(_) => SmcgStatus::Internal,
        GuardError::Oracle(o) => match o {
            OracleError::UnalignedRegion(_) => SmcgStatus::UnalignedRegion,
            OracleError::InvalidSelector(_) => SmcgStatus::InvalidSelector,
            _ => SmcgStatus::Internal,
        },
    }
}

fn guarded<F: FnOnce() -> SmcgStatus>(f: F) -> SmcgStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(SmcgStatus::Internal)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn smcg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Single-site reference checksum over `data..data+len`.
///
/// `site_byte_offset` is the region-relative offset of the mutable opcode
/// byte, or negative when the site lies outside the region. On success the
/// final sum and selector are stored through the out-pointers.
///
/// # Safety
///
/// `data` must point to `len` readable bytes; out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn smcg_checksum(
    data: *const u8,
    len: usize,
    site_byte_offset: i64,
    init_selector: u8,
    init_sum: u64,
    out_sum: *mut u64,
    out_selector: *mut u8,
) -> SmcgStatus {
    guarded(|| {
        if data.is_null() || out_sum.is_null() || out_selector.is_null() {
            return SmcgStatus::NullArgument;
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let region = match Region::new(bytes) {
            Ok(r) => r,
            Err(_) => return SmcgStatus::UnalignedRegion,
        };
        let op = match OpSelector::from_bits(init_selector) {
            Ok(op) => op,
            Err(_) => return SmcgStatus::InvalidSelector,
        };
        let site = if site_byte_offset >= 0 {
            Some(ModificationSite::for_byte_offset(site_byte_offset as usize))
        } else {
            None
        };
        let state = checksum_region(region, site, ChecksumState::new(init_sum, op));
        *out_sum = state.sum;
        *out_selector = state.op.bits();
        SmcgStatus::Ok
    })
}

/// Bitmask of selectors reachable from `init` under the field-bit toggles
/// (bit `n` set means selector `n` is reachable).
///
/// # Safety
///
/// `out_mask` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smcg_reachable_ops(init: u8, out_mask: *mut u8) -> SmcgStatus {
    guarded(|| {
        if out_mask.is_null() {
            return SmcgStatus::NullArgument;
        }
        match reachable_ops(init) {
            Ok(set) => {
                let mut mask = 0u8;
                for op in set {
                    mask |= 1 << op.bits();
                }
                *out_mask = mask;
                SmcgStatus::Ok
            }
            Err(_) => SmcgStatus::InvalidSelector,
        }
    })
}

/// Create a guard. `k_threshold` is the consecutive-failure limit;
/// `window_low`/`window_high` scale the calibrated q01/q99 into the
/// accepted score window; `action` is the escalation (1 warn, 2 fatal,
/// 3 recover).
#[no_mangle]
pub extern "C" fn smcg_guard_new(
    k_threshold: u32,
    window_low: f64,
    window_high: f64,
    action: u8,
) -> *mut SmcgGuard {
    let action = match action {
        1 => PolicyAction::Warn,
        3 => PolicyAction::Recover,
        _ => PolicyAction::Fatal,
    };
    let policy = GuardPolicy {
        k_threshold: k_threshold.max(1),
        action,
        window: (window_low, window_high),
        ..GuardPolicy::default()
    };
    Box::into_raw(Box::new(SmcgGuard {
        inner: Guard::new(policy),
    }))
}

/// Destroy a guard created by `smcg_guard_new`.
///
/// # Safety
///
/// `guard` must be a pointer from `smcg_guard_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smcg_guard_free(guard: *mut SmcgGuard) {
    if !guard.is_null() {
        drop(Box::from_raw(guard));
    }
}

/// Register a static checksum unit over `base..base+len`.
///
/// # Safety
///
/// The region must stay readable (and quiescent during verifies) for the
/// guard's lifetime; `out_unit` must be valid.
#[no_mangle]
pub unsafe extern "C" fn smcg_guard_register_static(
    guard: *mut SmcgGuard,
    base: *const u8,
    len: usize,
    out_unit: *mut u64,
) -> SmcgStatus {
    guarded(|| {
        let Some(guard) = guard.as_mut() else {
            return SmcgStatus::NullArgument;
        };
        if out_unit.is_null() {
            return SmcgStatus::NullArgument;
        }
        let region = match RegionRef::new(base, len) {
            Ok(r) => r,
            Err(e) => return status_of(&e),
        };
        match guard.inner.register_static_unit(region) {
            Ok(id) => {
                *out_unit = id.0 as u64;
                SmcgStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Precompute validation states for all four reachable selectors and
/// calibrate the unit's timing windows.
///
/// # Safety
///
/// `guard` must be a live guard handle.
#[no_mangle]
pub unsafe extern "C" fn smcg_guard_precompute(guard: *mut SmcgGuard, unit: u64) -> SmcgStatus {
    guarded(|| {
        let Some(guard) = guard.as_mut() else {
            return SmcgStatus::NullArgument;
        };
        match guard
            .inner
            .precompute_states(UnitId(unit as usize), &OpSelector::ALL)
        {
            Ok(()) => SmcgStatus::Ok,
            Err(e) => status_of(&e),
        }
    })
}

/// Evaluate the predicate for query `t` and store the verdict.
///
/// # Safety
///
/// `guard` must be a live guard handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smcg_guard_verify(
    guard: *mut SmcgGuard,
    unit: u64,
    t: u64,
    out: *mut SmcgVerdict,
) -> SmcgStatus {
    guarded(|| {
        let Some(guard) = guard.as_mut() else {
            return SmcgStatus::NullArgument;
        };
        if out.is_null() {
            return SmcgStatus::NullArgument;
        }
        match guard.inner.verify(UnitId(unit as usize), t) {
            Ok(result) => {
                let action = match smcguard::guard::policy_update(&result, guard.inner.policy()) {
                    Action::Continue => 0,
                    Action::Warn => 1,
                    Action::Fatal => 2,
                    Action::Recover => 3,
                };
                *out = SmcgVerdict {
                    checksum_ok: result.checksum_ok as u8,
                    timing_ok: result.timing_ok as u8,
                    verdict: result.verdict as u8,
                    action,
                    score: result.score,
                    consecutive_failures: result.consecutive_failures,
                };
                SmcgStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Restore a unit's kernel to its canonical bytes and clear its failure
/// counter.
///
/// # Safety
///
/// `guard` must be a live guard handle.
#[no_mangle]
pub unsafe extern "C" fn smcg_guard_reset(guard: *mut SmcgGuard, unit: u64) -> SmcgStatus {
    guarded(|| {
        let Some(guard) = guard.as_mut() else {
            return SmcgStatus::NullArgument;
        };
        match guard.inner.reset(UnitId(unit as usize)) {
            Ok(()) => SmcgStatus::Ok,
            Err(e) => status_of(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_nul_terminated() {
        let p = smcg_version();
        assert!(!p.is_null());
        let s = unsafe { std::ffi::CStr::from_ptr(p) };
        assert_eq!(s.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn checksum_round_trip() {
        let data: Vec<u8> = (0..64u8).collect();
        let mut sum = 0u64;
        let mut sel = 0xFFu8;
        let status = unsafe {
            smcg_checksum(data.as_ptr(), data.len(), -1, 0, 0, &mut sum, &mut sel)
        };
        assert_eq!(status, SmcgStatus::Ok);
        let expect = checksum_region(
            Region::new(&data).unwrap(),
            None,
            ChecksumState::default(),
        );
        assert_eq!(sum, expect.sum);
        assert_eq!(sel, expect.op.bits());
    }

    #[test]
    fn checksum_rejects_bad_input() {
        let data = [0u8; 9];
        let mut sum = 0u64;
        let mut sel = 0u8;
        unsafe {
            assert_eq!(
                smcg_checksum(data.as_ptr(), 9, -1, 0, 0, &mut sum, &mut sel),
                SmcgStatus::UnalignedRegion
            );
            assert_eq!(
                smcg_checksum(data.as_ptr(), 8, -1, 2, 0, &mut sum, &mut sel),
                SmcgStatus::InvalidSelector
            );
            assert_eq!(
                smcg_checksum(std::ptr::null(), 8, -1, 0, 0, &mut sum, &mut sel),
                SmcgStatus::NullArgument
            );
        }
    }

    #[test]
    fn reachable_mask_is_the_selector_set() {
        let mut mask = 0u8;
        unsafe {
            assert_eq!(smcg_reachable_ops(0, &mut mask), SmcgStatus::Ok);
        }
        assert_eq!(mask, 0b0011_0011);
        unsafe {
            assert_eq!(smcg_reachable_ops(2, &mut mask), SmcgStatus::InvalidSelector);
        }
    }

    #[test]
    fn guard_lifecycle_over_c_abi() {
        let data: Vec<u8> = (0..128u8).map(|i| i.wrapping_mul(13)).collect();
        let guard = smcg_guard_new(3, 0.0, 1e9, 2);
        assert!(!guard.is_null());
        unsafe {
            let mut unit = u64::MAX;
            assert_eq!(
                smcg_guard_register_static(guard, data.as_ptr(), data.len(), &mut unit),
                SmcgStatus::Ok
            );
            assert_eq!(smcg_guard_precompute(guard, unit), SmcgStatus::Ok);

            let mut verdict = std::mem::zeroed::<SmcgVerdict>();
            assert_eq!(smcg_guard_verify(guard, unit, 0, &mut verdict), SmcgStatus::Ok);
            assert_eq!(verdict.checksum_ok, 1);
            assert_eq!(verdict.verdict, 1);
            assert_eq!(verdict.action, 0);

            assert_eq!(smcg_guard_reset(guard, unit), SmcgStatus::Ok);
            assert_eq!(
                smcg_guard_verify(guard, 99, 0, &mut verdict),
                SmcgStatus::UnknownUnit
            );
            smcg_guard_free(guard);
        }
    }
}
