//! Machine-clear event counting through the OS performance-event interface.
//!
//! Self-modifying stores that hit in-flight instructions squash the
//! pipeline; each vendor exposes a dedicated event for it. Counting those
//! events is a tuning and measurement aid only — the guard itself never
//! needs counter access, so every error here is surfaced as a reason to
//! skip, not to fail.

use crate::cpu::Vendor;
use std::os::unix::io::RawFd;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PmcError {
    #[error("cpu vendor is not recognized as Intel or AMD")]
    UnknownVendor,
    #[error(
        "perf_event_open denied (errno {errno}); grant access by lowering \
         kernel.perf_event_paranoid or granting CAP_PERFMON"
    )]
    PermissionDenied { errno: i32 },
    #[error("performance counters are unsupported here (errno {errno})")]
    Unsupported { errno: i32 },
    #[error("counter read failed (errno {errno})")]
    ReadFailed { errno: i32 },
}

/// Model-specific register addresses kept as documentation of the raw
/// counter plumbing; all access in this crate goes through the OS instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsrReference {
    pub global_control: u32,
    pub event_select0: u32,
    pub counter0: u32,
}

/// Vendor-specific event describing a pipeline clear caused by a write to
/// code that is already in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmcEventSpec {
    pub vendor: Vendor,
    pub event_code: u8,
    pub umask: u8,
    pub name: &'static str,
    pub msr: MsrReference,
}

impl SmcEventSpec {
    /// Raw perf event config: umask in bits `[8:15]`, event code in `[0:7]`.
    pub fn raw_config(&self) -> u64 {
        ((self.umask as u64) << 8) | self.event_code as u64
    }
}

/// Event constants per vendor.
pub fn event_spec(vendor: Vendor) -> SmcEventSpec {
    match vendor {
        Vendor::Intel => SmcEventSpec {
            vendor,
            event_code: 0xC3,
            umask: 0x4,
            name: "MACHINE_CLEARS.SMC",
            msr: MsrReference {
                global_control: 0x38F,
                event_select0: 0x186,
                counter0: 0xC1,
            },
        },
        Vendor::Amd => SmcEventSpec {
            vendor,
            event_code: 0x21,
            umask: 0x0,
            name: "PIPELINE_RESTART_DUE_TO_SELF_MODIFYING_CODE",
            msr: MsrReference {
                global_control: 0xC000_0301,
                event_select0: 0xC001_0000,
                counter0: 0xC001_0004,
            },
        },
    }
}

/// Event spec for the host CPU.
pub fn host_event_spec() -> Result<SmcEventSpec, PmcError> {
    let vendor = crate::cpu::vendor().ok_or(PmcError::UnknownVendor)?;
    Ok(event_spec(vendor))
}

// The libc crate does not carry the perf ABI; the layout below matches the
// kernel's struct perf_event_attr (v8, 136 bytes).
#[repr(C)]
#[derive(Clone, Copy)]
struct PerfEventAttr {
    type_: u32,
    size: u32,
    config: u64,
    sample_period_or_freq: u64,
    sample_type: u64,
    read_format: u64,
    flags: u64,
    wakeup: u32,
    bp_type: u32,
    config1: u64,
    config2: u64,
    branch_sample_type: u64,
    sample_regs_user: u64,
    sample_stack_user: u32,
    clockid: i32,
    sample_regs_intr: u64,
    aux_watermark: u32,
    sample_max_stack: u16,
    reserved2: u16,
    aux_sample_size: u32,
    reserved3: u32,
    sig_data: u64,
    config3: u64,
}

const PERF_TYPE_RAW: u32 = 4;
const FLAG_DISABLED: u64 = 1;
const FLAG_EXCLUDE_KERNEL: u64 = 1 << 5;
const FLAG_EXCLUDE_HV: u64 = 1 << 6;
const IOC_ENABLE: libc::c_ulong = 0x2400;
const IOC_DISABLE: libc::c_ulong = 0x2401;
const IOC_RESET: libc::c_ulong = 0x2403;
#[cfg(target_arch = "x86_64")]
const SYS_PERF_EVENT_OPEN: libc::c_long = 298;

/// A thread-scoped event counter. Owned by the opening thread; closed on
/// drop or explicitly.
#[derive(Debug)]
pub struct Counter {
    fd: RawFd,
    spec: SmcEventSpec,
}

/// Open a user-mode counter for `spec` on the calling thread.
pub fn open_counter(spec: &SmcEventSpec) -> Result<Counter, PmcError> {
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = spec;
        return Err(PmcError::Unsupported { errno: 0 });
    }
    #[cfg(target_arch = "x86_64")]
    {
        let mut attr: PerfEventAttr = unsafe { std::mem::zeroed() };
        attr.type_ = PERF_TYPE_RAW;
        attr.size = std::mem::size_of::<PerfEventAttr>() as u32;
        attr.config = spec.raw_config();
        attr.flags = FLAG_DISABLED | FLAG_EXCLUDE_KERNEL | FLAG_EXCLUDE_HV;
        let fd = unsafe {
            libc::syscall(
                SYS_PERF_EVENT_OPEN,
                &attr as *const PerfEventAttr,
                0 as libc::pid_t,
                -1 as libc::c_int,
                -1 as libc::c_int,
                0 as libc::c_ulong,
            )
        } as RawFd;
        if fd < 0 {
            let errno = std::io::Error::last_os_error().raw_os_error().unwrap_or(0);
            return Err(match errno {
                libc::EACCES | libc::EPERM => PmcError::PermissionDenied { errno },
                _ => PmcError::Unsupported { errno },
            });
        }
        Ok(Counter { fd, spec: *spec })
    }
}

impl Counter {
    pub fn spec(&self) -> &SmcEventSpec {
        &self.spec
    }

    pub fn reset(&self) -> Result<(), PmcError> {
        self.ioctl(IOC_RESET)
    }

    pub fn enable(&self) -> Result<(), PmcError> {
        self.ioctl(IOC_ENABLE)
    }

    pub fn disable(&self) -> Result<(), PmcError> {
        self.ioctl(IOC_DISABLE)
    }

    fn ioctl(&self, op: libc::c_ulong) -> Result<(), PmcError> {
        let rc = unsafe { libc::ioctl(self.fd, op, 0) };
        if rc < 0 {
            return Err(PmcError::ReadFailed { errno: errno() });
        }
        Ok(())
    }

    /// Events accumulated since open (or the last reset).
    pub fn read(&self) -> Result<u64, PmcError> {
        let mut value = 0u64;
        let n = unsafe {
            libc::read(self.fd, &mut value as *mut u64 as *mut libc::c_void, 8)
        };
        if n != 8 {
            return Err(PmcError::ReadFailed { errno: errno() });
        }
        Ok(value)
    }

    pub fn close(mut self) {
        self.close_fd();
    }

    fn close_fd(&mut self) {
        if self.fd >= 0 {
            unsafe { libc::close(self.fd) };
            self.fd = -1;
        }
    }
}

impl Drop for Counter {
    fn drop(&mut self) {
        self.close_fd();
    }
}

/// Count events of `spec` around `workload`.
pub fn count_events(spec: &SmcEventSpec, mut workload: impl FnMut()) -> Result<u64, PmcError> {
    let counter = open_counter(spec)?;
    counter.reset()?;
    counter.enable()?;
    workload();
    counter.disable()?;
    counter.read()
}

/// Whether machine-clear counting works here; used to skip, never to fail.
pub fn probe() -> Result<(), PmcError> {
    let spec = host_event_spec()?;
    let counter = open_counter(&spec)?;
    counter.close();
    Ok(())
}

fn errno() -> i32 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vendor_event_constants() {
        let intel = event_spec(Vendor::Intel);
        assert_eq!((intel.event_code, intel.umask), (0xC3, 0x4));
        assert_eq!(intel.raw_config(), 0x04C3);
        assert_eq!(intel.name, "MACHINE_CLEARS.SMC");
        assert_eq!(intel.msr.global_control, 0x38F);
        assert_eq!(intel.msr.event_select0, 0x186);
        assert_eq!(intel.msr.counter0, 0xC1);

        let amd = event_spec(Vendor::Amd);
        assert_eq!((amd.event_code, amd.umask), (0x21, 0x0));
        assert_eq!(amd.raw_config(), 0x0021);
        assert_eq!(amd.msr.global_control, 0xC000_0301);
        assert_eq!(amd.msr.event_select0, 0xC001_0000);
        assert_eq!(amd.msr.counter0, 0xC001_0004);
    }

    #[test]
    fn counting_works_or_skips_cleanly() {
        // Hosts without PMU access must fail with a skippable error, not
        // crash.
        match probe() {
            Ok(()) => {
                let spec = host_event_spec().unwrap();
                let count = count_events(&spec, || {
                    std::hint::black_box((0..1000u64).sum::<u64>());
                })
                .unwrap();
                // A pure computation should see at most ambient noise.
                assert!(count < 1_000_000);
            }
            Err(e) => {
                eprintln!("pmc unavailable, skipping: {e}");
            }
        }
    }
}
