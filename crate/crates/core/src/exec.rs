//! Page-aligned executable memory for generated kernels.
//!
//! Kernels patch their own bytes while running, so the mapping is created
//! readable, writable, and executable for its whole lifetime instead of
//! flipping W and X. Hosts whose policy forbids RWX mappings fail fast here
//! with remediation advice.

use std::ptr::NonNull;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("allocation size must be nonzero")]
    ZeroSize,
    #[error(
        "mmap(PROT_READ|PROT_WRITE|PROT_EXEC) denied (errno {errno}); the host enforces a \
         W^X policy — review the deployment policy or allowlist this process before running \
         self-modifying kernels"
    )]
    PermissionDenied { errno: i32 },
    #[error("out of memory mapping {size} bytes")]
    OutOfMemory { size: usize },
    #[error("mmap failed (errno {errno})")]
    MapFailed { errno: i32 },
    #[error("region already released")]
    AlreadyReleased,
}

/// OS page size; constant for the life of the process.
pub fn page_size() -> usize {
    use std::sync::OnceLock;
    static PAGE: OnceLock<usize> = OnceLock::new();
    *PAGE.get_or_init(|| {
        let sz = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        assert!(sz > 0, "sysconf(_SC_PAGESIZE) failed");
        sz as usize
    })
}

/// A live RWX mapping. Contents are zero on allocation.
///
/// The region is single-writer: generation and execution of the kernel it
/// holds must stay on one thread at a time (`&mut` access enforces this in
/// safe code). Releasing twice is an error; dropping releases implicitly.
#[derive(Debug)]
pub struct ExecRegion {
    base: NonNull<u8>,
    len: usize,
    released: bool,
}

// The raw pointer is owned; sending the region to another thread is fine.
unsafe impl Send for ExecRegion {}

impl ExecRegion {
    /// Map `ceil(size / page_size)` zeroed RWX pages.
    pub fn alloc(size: usize) -> Result<ExecRegion, ExecError> {
        if size == 0 {
            return Err(ExecError::ZeroSize);
        }
        let page = page_size();
        let len = size.div_ceil(page) * page;
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE | libc::PROT_EXEC,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            let errno = std::io::Error::last_os_error().raw_os_error().unwrap_or(0);
            return Err(match errno {
                libc::EPERM | libc::EACCES => ExecError::PermissionDenied { errno },
                libc::ENOMEM => ExecError::OutOfMemory { size: len },
                _ => ExecError::MapFailed { errno },
            });
        }
        Ok(ExecRegion {
            base: NonNull::new(ptr as *mut u8).expect("mmap returned null"),
            len,
            released: false,
        })
    }

    pub fn base(&self) -> *mut u8 {
        self.base.as_ptr()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[u8] {
        unsafe { std::slice::from_raw_parts(self.base.as_ptr(), self.len) }
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        unsafe { std::slice::from_raw_parts_mut(self.base.as_ptr(), self.len) }
    }

    /// Copy `bytes` into the region at `offset`.
    pub fn write(&mut self, offset: usize, bytes: &[u8]) {
        self.as_mut_slice()[offset..offset + bytes.len()].copy_from_slice(bytes);
    }

    /// Instruction/data coherence point after writing code.
    ///
    /// x86-64 keeps instruction and data views coherent in hardware, so
    /// this is a documented no-op; the call marks the spot where a port to
    /// a weaker ISA would flush the instruction cache.
    pub fn sync_icache(&self) {}

    /// Unmap the region. Further use is a logic error; a second release
    /// reports [`ExecError::AlreadyReleased`].
    pub fn release(&mut self) -> Result<(), ExecError> {
        if self.released {
            return Err(ExecError::AlreadyReleased);
        }
        let rc = unsafe { libc::munmap(self.base.as_ptr() as *mut libc::c_void, self.len) };
        assert_eq!(rc, 0, "munmap failed");
        self.released = true;
        Ok(())
    }
}

impl Drop for ExecRegion {
    fn drop(&mut self) {
        if !self.released {
            let _ = self.release();
        }
    }
}
