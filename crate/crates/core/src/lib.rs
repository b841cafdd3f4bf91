//! Runtime tamper-proofing built on self-modifying x86-64 checksum kernels.
//!
//! The toolkit generates checksum kernels that patch their own opcode bytes
//! while executing, binds their results to calibrated clock readings, and
//! verifies both through the predicate implemented in [`guard`]. A portable
//! reference emulation of the kernel semantics lives in [`oracle`]; it is the
//! correctness authority for every native kernel and doubles as the
//! benchmark competitor in [`mod@bench`].
//!
//! Module map:
//!
//! * [`oracle`] — architecture-independent checksum semantics (single-site
//!   and multi-site emulation, selector algebra, substitution).
//! * [`x64`] — byte-exact encoder for the instruction subset the kernels use.
//! * [`layout`] — page packing for unrolled kernels and pairing rules.
//! * [`exec`] — RWX page allocation.
//! * [`kernels`] — kernel emission (static loop, unrolled block, dual-page
//!   dynamic) plus termination patching and the layout report.
//! * [`clocks`] — timer suite, serialized cycle reads, calibration stats.
//! * [`pmc`] — optional machine-clear event counting via perf.
//! * [`guard`] — checksum units, validation tables, the verify predicate.
//! * [`mod@bench`] — measurement matrix, tamper experiment, report emission.

pub mod bench;
pub mod clocks;
pub mod cpu;
pub mod exec;
pub mod guard;
pub mod kernels;
pub mod layout;
pub mod oracle;
pub mod pmc;
pub mod report;
pub mod x64;

pub use guard::{Guard, GuardPolicy, PredicateResult};
pub use oracle::{ChecksumState, OpSelector};
