//! The tamper predicate: checksum units, validation tables, and verdicts.
//!
//! A unit binds a protected byte region to a native checksum kernel. Its
//! validation table holds, for every initial selector, the final state the
//! reference emulation predicts, plus per-timer windows derived from
//! calibration. A verify pass runs the kernel once per table entry, scores
//! the whole pass on the timer selected for that query, and reports the
//! conjunction: the predicate is true only when every checksum matches and
//! the score falls inside the calibrated window.
//!
//! Running all table entries is what makes single-flip detection strong: a
//! flip that lands on a compare step of one selector chain hides from that
//! chain's sum, but the three sibling chains walk the same qword under
//! different operations and expose it.

use crate::clocks::{self, timer_for_query, ClockError, TimerId, TimerPolicy};
use crate::kernels::{BuiltKernel, KernelConfig, KernelError, KernelVariant};
use crate::oracle::{
    checksum_region, emulate_unrolled_with_sites, ChecksumState, ModificationSite, OpSelector,
    OracleError, Region,
};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GuardError {
    #[error("region rejected: {0}")]
    InvalidRegion(&'static str),
    #[error("unknown unit id {0}")]
    UnknownUnit(usize),
    #[error("unit has no validation table; precompute first")]
    NoTable,
    #[error("initial selector set is empty")]
    EmptyInits,
    #[error("policy rejected: {0}")]
    BadPolicy(&'static str),
    #[error("dry run disagrees with the reference for init {init:?}: expected sum {expected:#x}, kernel produced {got:#x}")]
    OracleMismatch { init: OpSelector, expected: u64, got: u64 },
    #[error("kernel bytes failed the integrity precheck; treated as tampering")]
    KernelFault,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Raw view of a protected region.
///
/// The guard re-reads the region on every verification, so the reference
/// deliberately erases lifetimes: tamper detection only means anything when
/// some other party may write those bytes between calls.
#[derive(Debug, Clone, Copy)]
pub struct RegionRef {
    base: *const u8,
    len: usize,
}

impl RegionRef {
    /// # Safety
    ///
    /// `base..base+len` must stay readable for the lifetime of every unit
    /// registered over it, and no writes may happen concurrently with a
    /// running `verify` on the same unit.
    pub unsafe fn new(base: *const u8, len: usize) -> Result<Self, GuardError> {
        if base.is_null() {
            return Err(GuardError::InvalidRegion("null base"));
        }
        if len == 0 {
            return Err(GuardError::InvalidRegion("empty region"));
        }
        if !len.is_multiple_of(8) {
            return Err(GuardError::InvalidRegion("length not a multiple of 8"));
        }
        Ok(RegionRef { base, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn base(&self) -> *const u8 {
        self.base
    }

    fn as_slice(&self) -> &[u8] {
        // Scoped to guard internals; liveness is the RegionRef::new
        // contract.
        unsafe { std::slice::from_raw_parts(self.base, self.len) }
    }

    fn snapshot(&self) -> Vec<u8> {
        self.as_slice().to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyAction {
    Warn,
    Fatal,
    Recover,
}

/// Action the caller should take after a verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Continue,
    Warn,
    Fatal,
    Recover,
}

#[derive(Debug, Clone)]
pub struct GuardPolicy {
    /// Consecutive failed verifications before `action` triggers.
    pub k_threshold: u32,
    pub action: PolicyAction,
    /// Multipliers over the calibrated q01/q99 forming the accepted score
    /// window.
    pub window: (f64, f64),
    /// Documented operating range (fraction of CPU) the thresholds were
    /// calibrated for. Metadata only; nothing enforces it.
    pub cpu_usage_band: (f64, f64),
    pub timers: TimerPolicy,
    /// Runs used to calibrate each timer's window.
    pub calibration_runs: usize,
}

impl Default for GuardPolicy {
    fn default() -> Self {
        GuardPolicy {
            k_threshold: 3,
            action: PolicyAction::Fatal,
            window: (0.8, 1.5),
            cpu_usage_band: (0.0, 1.0),
            timers: TimerPolicy::default(),
            calibration_runs: 400,
        }
    }
}

/// Outcome of one verification query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredicateResult {
    pub unit: UnitId,
    pub query: u64,
    pub timer: TimerId,
    pub checksum_ok: bool,
    pub timing_ok: bool,
    /// `checksum_ok && timing_ok`.
    pub verdict: bool,
    /// Duration of the verification pass in the timer's native unit.
    pub score: u64,
    pub consecutive_failures: u32,
}

impl PredicateResult {
    /// Stable single-line form for logs and the CLI.
    pub fn log_line(&self) -> String {
        format!(
            "unit={} t={} timer={} score={} checksum={} timing={} verdict={} failures={}",
            self.unit.0,
            self.query,
            self.timer.label(),
            self.score,
            self.checksum_ok,
            self.timing_ok,
            self.verdict,
            self.consecutive_failures
        )
    }
}

/// Next action under `policy` after `result`.
pub fn policy_update(result: &PredicateResult, policy: &GuardPolicy) -> Action {
    if result.verdict {
        return Action::Continue;
    }
    if result.consecutive_failures < policy.k_threshold {
        return Action::Warn;
    }
    match policy.action {
        PolicyAction::Warn => Action::Warn,
        PolicyAction::Fatal => Action::Fatal,
        PolicyAction::Recover => Action::Recover,
    }
}

/// Expected final state for one initial selector.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ExpectedFinal {
    state: ChecksumState,
    /// Final per-unit selectors for unrolled kernels; stronger than the
    /// single exit selector.
    selectors: Option<Vec<OpSelector>>,
}

/// Precomputed validation data for a unit: expected states per initial
/// selector (the iteration count is bound through the expected cursor) and
/// accepted score windows per timer.
#[derive(Debug, Clone)]
pub struct ValidationTable {
    entries: Vec<(OpSelector, ExpectedFinal)>,
    timing: BTreeMap<TimerId, (u64, u64)>,
}

impl ValidationTable {
    pub fn inits(&self) -> Vec<OpSelector> {
        self.entries.iter().map(|(op, _)| *op).collect()
    }

    pub fn window(&self, timer: TimerId) -> Option<(u64, u64)> {
        self.timing.get(&timer).copied()
    }

    pub fn expected_sum(&self, init: OpSelector) -> Option<u64> {
        self.entries
            .iter()
            .find(|(op, _)| *op == init)
            .map(|(_, e)| e.state.sum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UnitId(pub usize);

struct GuardUnit {
    region: RegionRef,
    kernel: BuiltKernel,
    /// Region-relative opcode-byte offsets per kernel site; populated only
    /// when the unit checksums its own kernel bytes.
    region_sites: Vec<Option<usize>>,
    table: Option<ValidationTable>,
    consecutive_failures: u32,
}

impl GuardUnit {
    /// Kernel-buffer integrity precheck: every byte must match the
    /// canonical emission except the two mutable field bits of each site.
    fn kernel_intact(&self) -> bool {
        let canonical = self.kernel.canonical_bytes();
        let current = self.kernel.current_bytes();
        if canonical.len() != current.len() {
            return false;
        }
        let mut mask = vec![0xFFu8; canonical.len()];
        for &site in self.kernel.site_offsets() {
            mask[site] = !0x28;
        }
        canonical
            .iter()
            .zip(current)
            .zip(&mask)
            .all(|((&a, &b), &m)| a & m == b & m)
    }

    /// Run the kernel once per table entry and compare against the
    /// expectations. The region is re-read through its raw pointer on every
    /// run — it may alias the kernel buffer in the introspective case.
    fn run_table(&mut self) -> Result<bool, GuardError> {
        let table = self.table.take().ok_or(GuardError::NoTable)?;
        let result = self.run_entries(&table);
        self.table = Some(table);
        result
    }

    fn run_entries(&mut self, table: &ValidationTable) -> Result<bool, GuardError> {
        let mut ok = true;
        for (init, expected) in &table.entries {
            let got = unsafe {
                self.kernel.run_raw(
                    self.region.base(),
                    self.region.len(),
                    ChecksumState::reset(*init),
                )?
            };
            if got != expected.state {
                ok = false;
                continue;
            }
            if let Some(selectors) = &expected.selectors {
                if self.kernel.selectors()? != *selectors {
                    ok = false;
                }
            }
        }
        Ok(ok)
    }

    fn expected_for(&self, init: OpSelector, snapshot: &[u8]) -> Result<ExpectedFinal, GuardError> {
        let region = Region::new(snapshot)?;
        let state = ChecksumState::reset(init);
        match self.kernel.variant() {
            KernelVariant::Static => {
                let site = self.region_sites[0].map(ModificationSite::for_byte_offset);
                Ok(ExpectedFinal {
                    state: checksum_region(region, site, state),
                    selectors: None,
                })
            }
            _ => {
                let layout = self
                    .kernel
                    .layout()
                    .expect("unrolled kernels carry a layout");
                let outcome = emulate_unrolled_with_sites(region, layout, &self.region_sites, state)?;
                Ok(ExpectedFinal {
                    state: outcome.state,
                    selectors: Some(outcome.selectors),
                })
            }
        }
    }
}

/// Registry of checksum units sharing one policy.
pub struct Guard {
    policy: GuardPolicy,
    units: Vec<GuardUnit>,
}

impl Guard {
    pub fn new(policy: GuardPolicy) -> Self {
        Guard {
            policy,
            units: Vec::new(),
        }
    }

    pub fn policy(&self) -> &GuardPolicy {
        &self.policy
    }

    /// Register a unit that checksums `region` with the minimal static
    /// kernel.
    pub fn register_static_unit(&mut self, region: RegionRef) -> Result<UnitId, GuardError> {
        let kernel = BuiltKernel::build(&KernelConfig::static_kernel())?;
        self.push_unit(region, kernel)
    }

    /// Register a unit that checksums `region` with a dual-page dynamic
    /// kernel.
    pub fn register_dynamic_unit(
        &mut self,
        region: RegionRef,
        page_count: usize,
    ) -> Result<UnitId, GuardError> {
        let kernel = BuiltKernel::build(&KernelConfig::dynamic(page_count))?;
        self.push_unit(region, kernel)
    }

    /// Register a static unit whose protected region is the kernel's own
    /// buffer: the checksum covers the very bytes the kernel keeps
    /// patching, so the expected values account for the live opcode field.
    pub fn register_introspective_static_unit(&mut self) -> Result<UnitId, GuardError> {
        let kernel = BuiltKernel::build(&KernelConfig::static_kernel())?;
        let (base, code_len) = kernel.buffer_range();
        let len = code_len.div_ceil(8) * 8;
        let region = unsafe { RegionRef::new(base as *const u8, len)? };
        let region_sites = kernel.site_offsets().iter().map(|&s| Some(s)).collect();
        self.units.push(GuardUnit {
            region,
            kernel,
            region_sites,
            table: None,
            consecutive_failures: 0,
        });
        Ok(UnitId(self.units.len() - 1))
    }

    fn push_unit(&mut self, region: RegionRef, kernel: BuiltKernel) -> Result<UnitId, GuardError> {
        let sites = vec![None; kernel.site_offsets().len()];
        self.units.push(GuardUnit {
            region,
            kernel,
            region_sites: sites,
            table: None,
            consecutive_failures: 0,
        });
        Ok(UnitId(self.units.len() - 1))
    }

    fn unit_mut(&mut self, id: UnitId) -> Result<&mut GuardUnit, GuardError> {
        self.units
            .get_mut(id.0)
            .ok_or(GuardError::UnknownUnit(id.0))
    }

    /// Compute expected final states for every selector in `inits` from the
    /// region's current content, verify one dry native run against them,
    /// and calibrate per-timer score windows.
    pub fn precompute_states(
        &mut self,
        id: UnitId,
        inits: &[OpSelector],
    ) -> Result<(), GuardError> {
        if inits.is_empty() {
            return Err(GuardError::EmptyInits);
        }
        if self.policy.k_threshold == 0 {
            return Err(GuardError::BadPolicy("k_threshold must be at least 1"));
        }
        if self.policy.window.0.partial_cmp(&self.policy.window.1) != Some(std::cmp::Ordering::Less) {
            return Err(GuardError::BadPolicy("window multipliers must satisfy low < high"));
        }
        let window = self.policy.window;
        let runs = self.policy.calibration_runs;
        let timers: Vec<TimerId> = self
            .policy
            .timers
            .preference
            .iter()
            .copied()
            .filter(|&t| clocks::available(t))
            .collect();
        if timers.is_empty() {
            return Err(GuardError::Clock(ClockError::NoTimerAvailable));
        }

        let unit = self
            .units
            .get_mut(id.0)
            .ok_or(GuardError::UnknownUnit(id.0))?;
        // Never execute a kernel whose bytes already diverge.
        if !unit.kernel_intact() {
            return Err(GuardError::KernelFault);
        }
        let snapshot = unit.region.snapshot();

        let mut entries = Vec::with_capacity(inits.len());
        for &init in inits {
            let expected = unit.expected_for(init, &snapshot)?;
            entries.push((init, expected));
        }

        // Dry run: a disagreement here is an environment fault, not
        // tampering.
        for (init, expected) in &entries {
            let got = unsafe {
                unit.kernel.run_raw(
                    unit.region.base(),
                    unit.region.len(),
                    ChecksumState::reset(*init),
                )?
            };
            if got != expected.state {
                return Err(GuardError::OracleMismatch {
                    init: *init,
                    expected: expected.state.sum,
                    got: got.sum,
                });
            }
        }

        unit.table = Some(ValidationTable {
            entries,
            timing: BTreeMap::new(),
        });

        // Calibrate the exact composite workload a verify pass times.
        let mut timing = BTreeMap::new();
        for timer in timers {
            let mut fault = None;
            let stats = clocks::calibrate(timer, runs, || {
                if let Err(e) = unit.run_table() {
                    fault.get_or_insert(e);
                }
            })?;
            if let Some(e) = fault {
                return Err(e);
            }
            let low = ((stats.q01 as f64) * window.0).floor().max(1.0) as u64;
            let high = ((stats.q99 as f64) * window.1).ceil() as u64;
            timing.insert(timer, (low, high.max(low)));
        }
        unit.table.as_mut().expect("just set").timing = timing;
        let op = unit.kernel.canonical_op();
        unit.kernel.reset(op);
        Ok(())
    }

    /// Evaluate the predicate for query `t`.
    ///
    /// Selects the query's timer, prechecks the kernel buffer (a tampered
    /// kernel is reported as [`GuardError::KernelFault`] and counted as a
    /// failure rather than executed), runs every table entry, and scores
    /// the pass against the timer's window.
    pub fn verify(&mut self, id: UnitId, t: u64) -> Result<PredicateResult, GuardError> {
        let timer = timer_for_query(t, &self.policy.timers)?;
        let unit = self
            .units
            .get_mut(id.0)
            .ok_or(GuardError::UnknownUnit(id.0))?;
        if unit.table.is_none() {
            return Err(GuardError::NoTable);
        }
        if !unit.kernel_intact() {
            unit.consecutive_failures += 1;
            return Err(GuardError::KernelFault);
        }

        let start = clocks::read(timer)?;
        let checksum_ok = match unit.run_table() {
            Ok(ok) => ok,
            Err(GuardError::Kernel(_)) | Err(GuardError::Oracle(_)) => {
                unit.consecutive_failures += 1;
                return Err(GuardError::KernelFault);
            }
            Err(other) => return Err(other),
        };
        let end = clocks::read(timer)?;
        let score = end.value.saturating_sub(start.value);

        let window = unit
            .table
            .as_ref()
            .and_then(|t| t.window(timer))
            // A timer outside the calibrated set scores permissively; the
            // default policy calibrates every preferred timer.
            .unwrap_or((0, u64::MAX));
        let timing_ok = score >= window.0 && score <= window.1;
        let verdict = checksum_ok && timing_ok;
        if verdict {
            unit.consecutive_failures = 0;
        } else {
            unit.consecutive_failures += 1;
        }
        Ok(PredicateResult {
            unit: id,
            query: t,
            timer,
            checksum_ok,
            timing_ok,
            verdict,
            score,
            consecutive_failures: unit.consecutive_failures,
        })
    }

    /// Restore the unit's kernel to its canonical emission and clear the
    /// failure counter.
    pub fn reset(&mut self, id: UnitId) -> Result<(), GuardError> {
        let unit = self.unit_mut(id)?;
        let op = unit.kernel.canonical_op();
        unit.kernel.reset(op);
        unit.consecutive_failures = 0;
        Ok(())
    }

    pub fn consecutive_failures(&self, id: UnitId) -> Result<u32, GuardError> {
        self.units
            .get(id.0)
            .map(|u| u.consecutive_failures)
            .ok_or(GuardError::UnknownUnit(id.0))
    }

    pub fn table(&self, id: UnitId) -> Result<Option<&ValidationTable>, GuardError> {
        self.units
            .get(id.0)
            .map(|u| u.table.as_ref())
            .ok_or(GuardError::UnknownUnit(id.0))
    }

    /// Region-relative byte offsets whose field bits legitimately change
    /// (the aliasing disclosure: flips confined to those bits are
    /// indistinguishable from the kernel's own patching).
    pub fn mutable_region_bytes(&self, id: UnitId) -> Result<Vec<usize>, GuardError> {
        self.units
            .get(id.0)
            .map(|u| u.region_sites.iter().flatten().copied().collect())
            .ok_or(GuardError::UnknownUnit(id.0))
    }

    pub fn kernel_bytes(&self, id: UnitId) -> Result<(&[u8], &[u8]), GuardError> {
        self.units
            .get(id.0)
            .map(|u| (u.kernel.canonical_bytes(), u.kernel.current_bytes()))
            .ok_or(GuardError::UnknownUnit(id.0))
    }

    /// Corrupt one kernel byte in place. Test hook for fault handling.
    #[doc(hidden)]
    pub fn tamper_kernel_for_tests(&mut self, id: UnitId, offset: usize) -> Result<(), GuardError> {
        let unit = self.unit_mut(id)?;
        let (base, _len) = unit.kernel.buffer_range();
        unsafe {
            let p = (base + offset) as *mut u8;
            p.write(p.read() ^ 0xFF);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_policy() -> GuardPolicy {
        GuardPolicy {
            // Tests run on shared machines; keep the window generous so
            // they exercise the checksum path deterministically.
            window: (0.0, 1e9),
            calibration_runs: 40,
            timers: TimerPolicy {
                preference: vec![TimerId::Monotonic],
                rotate: false,
            },
            ..GuardPolicy::default()
        }
    }

    fn region_of(data: &[u8]) -> RegionRef {
        unsafe { RegionRef::new(data.as_ptr(), data.len()).unwrap() }
    }

    #[test]
    fn region_validation() {
        let data = [0u8; 16];
        assert!(unsafe { RegionRef::new(data.as_ptr(), 16) }.is_ok());
        assert!(unsafe { RegionRef::new(data.as_ptr(), 15) }.is_err());
        assert!(unsafe { RegionRef::new(data.as_ptr(), 0) }.is_err());
        assert!(unsafe { RegionRef::new(std::ptr::null(), 8) }.is_err());
    }

    #[test]
    fn clean_verify_is_true_and_detects_flips() {
        let mut data = vec![0u8; 512];
        for (i, b) in data.iter_mut().enumerate() {
            *b = (i as u8).wrapping_mul(31).wrapping_add(7);
        }
        let mut guard = Guard::new(test_policy());
        let id = guard.register_static_unit(region_of(&data)).unwrap();
        guard.precompute_states(id, &OpSelector::ALL).unwrap();

        for t in 0..5 {
            let r = guard.verify(id, t).unwrap();
            assert!(r.checksum_ok && r.verdict, "clean run t={t}: {r:?}");
            assert_eq!(r.consecutive_failures, 0);
        }

        data[100] ^= 0x10;
        let r = guard.verify(id, 99).unwrap();
        assert!(!r.checksum_ok && !r.verdict);
        assert_eq!(r.consecutive_failures, 1);

        data[100] ^= 0x10;
        let r = guard.verify(id, 100).unwrap();
        assert!(r.verdict);
        assert_eq!(r.consecutive_failures, 0);
    }

    #[test]
    fn eight_byte_region_is_the_minimum() {
        let data = vec![7u8; 8];
        let mut guard = Guard::new(test_policy());
        let id = guard.register_static_unit(region_of(&data)).unwrap();
        guard.precompute_states(id, &[OpSelector::Add]).unwrap();
        assert!(guard.verify(id, 0).unwrap().verdict);
    }

    #[test]
    fn distinct_units_over_one_region() {
        let data = vec![3u8; 64];
        let mut guard = Guard::new(test_policy());
        let a = guard.register_static_unit(region_of(&data)).unwrap();
        let b = guard.register_static_unit(region_of(&data)).unwrap();
        assert_ne!(a, b);
        guard.precompute_states(a, &[OpSelector::Add]).unwrap();
        guard.precompute_states(b, &[OpSelector::Xor]).unwrap();
        assert!(guard.verify(a, 0).unwrap().verdict);
        assert!(guard.verify(b, 0).unwrap().verdict);
    }

    #[test]
    fn dynamic_unit_verifies() {
        let data: Vec<u8> = (0..4096u32).map(|i| (i % 251) as u8).collect();
        let mut guard = Guard::new(test_policy());
        let id = guard.register_dynamic_unit(region_of(&data), 2).unwrap();
        guard.precompute_states(id, &OpSelector::ALL).unwrap();
        assert!(guard.verify(id, 0).unwrap().verdict);
    }

    #[test]
    fn introspective_unit_checksums_its_own_kernel() {
        let mut guard = Guard::new(test_policy());
        let id = guard.register_introspective_static_unit().unwrap();
        guard.precompute_states(id, &OpSelector::ALL).unwrap();
        for t in 0..4 {
            let r = guard.verify(id, t).unwrap();
            assert!(r.verdict, "introspective t={t}: {r:?}");
        }
        // Flipping a non-site kernel byte is caught by the precheck.
        guard.tamper_kernel_for_tests(id, 3).unwrap();
        assert!(matches!(guard.verify(id, 9), Err(GuardError::KernelFault)));
        assert_eq!(guard.consecutive_failures(id).unwrap(), 1);
        // Reset restores the canonical emission.
        guard.reset(id).unwrap();
        let (canon, current) = guard.kernel_bytes(id).unwrap();
        assert_eq!(canon, current);
        assert!(guard.verify(id, 10).unwrap().verdict);
    }

    #[test]
    fn site_field_flips_are_aliases_of_self_modification() {
        // Flipping only the mutable field bits of an introspective unit's
        // site byte is indistinguishable from the kernel's own patching:
        // reset canonicalizes the byte, so the verdict stays true.
        let mut guard = Guard::new(test_policy());
        let id = guard.register_introspective_static_unit().unwrap();
        guard.precompute_states(id, &OpSelector::ALL).unwrap();
        let site = guard.mutable_region_bytes(id).unwrap()[0];
        for mask in [0x08u8, 0x20, 0x28] {
            let p = guard.units[id.0].region.base() as *mut u8;
            unsafe { *p.add(site) ^= mask };
            let r = guard.verify(id, 0).unwrap();
            assert!(r.verdict, "mask {mask:#04x}: {r:?}");
        }
    }

    #[test]
    fn precompute_records_one_entry_per_init() {
        let data = vec![1u8; 64];
        let mut guard = Guard::new(test_policy());
        let id = guard.register_static_unit(region_of(&data)).unwrap();
        guard.precompute_states(id, &[OpSelector::Sub]).unwrap();
        assert_eq!(guard.table(id).unwrap().unwrap().inits(), vec![OpSelector::Sub]);
        guard.precompute_states(id, &OpSelector::ALL).unwrap();
        assert_eq!(
            guard.table(id).unwrap().unwrap().inits(),
            OpSelector::ALL.to_vec()
        );
    }

    #[test]
    fn verify_needs_a_table() {
        let data = vec![0u8; 32];
        let mut guard = Guard::new(test_policy());
        let id = guard.register_static_unit(region_of(&data)).unwrap();
        assert!(matches!(guard.verify(id, 0), Err(GuardError::NoTable)));
        assert!(matches!(
            guard.precompute_states(id, &[]),
            Err(GuardError::EmptyInits)
        ));
        assert!(matches!(
            guard.verify(UnitId(42), 0),
            Err(GuardError::UnknownUnit(42))
        ));
    }

    #[test]
    fn verify_leaves_external_regions_untouched() {
        let data: Vec<u8> = (0..256u32).map(|i| i as u8).collect();
        let before = data.clone();
        let mut guard = Guard::new(test_policy());
        let id = guard.register_static_unit(region_of(&data)).unwrap();
        guard.precompute_states(id, &OpSelector::ALL).unwrap();
        guard.verify(id, 0).unwrap();
        assert_eq!(data, before);
    }

    #[test]
    fn introspective_writes_stay_inside_site_bytes() {
        let mut guard = Guard::new(test_policy());
        let id = guard.register_introspective_static_unit().unwrap();
        guard.precompute_states(id, &OpSelector::ALL).unwrap();
        let sites = guard.mutable_region_bytes(id).unwrap();
        assert_eq!(sites.len(), 1);
        let (canon, before) = guard.kernel_bytes(id).unwrap();
        let before = before.to_vec();
        let canon = canon.to_vec();
        guard.verify(id, 0).unwrap();
        let (_, after) = guard.kernel_bytes(id).unwrap();
        for (i, (&b, &a)) in before.iter().zip(after).enumerate() {
            if !sites.contains(&i) {
                assert_eq!(b, a, "byte {i} changed outside the site");
                assert_eq!(a, canon[i]);
            }
        }
    }

    #[test]
    fn timing_window_rejects_injected_delay() {
        let data = vec![5u8; 64];
        let mut policy = test_policy();
        policy.window = (0.0, 2.0);
        policy.calibration_runs = 200;
        let mut guard = Guard::new(policy);
        let id = guard.register_static_unit(region_of(&data)).unwrap();
        guard.precompute_states(id, &[OpSelector::Add]).unwrap();

        // Shrink the accepted window to a band the real pass cannot hit,
        // simulating a score pushed past the threshold.
        if let Some(table) = guard.units[id.0].table.as_mut() {
            for w in table.timing.values_mut() {
                *w = (0, 0);
            }
        }
        let r = guard.verify(id, 0).unwrap();
        assert!(r.checksum_ok);
        assert!(!r.timing_ok);
        assert!(!r.verdict);
        assert_eq!(r.consecutive_failures, 1);
    }

    #[test]
    fn policy_ladder() {
        let policy = GuardPolicy::default();
        let mk = |verdict, failures| PredicateResult {
            unit: UnitId(0),
            query: 0,
            timer: TimerId::Monotonic,
            checksum_ok: verdict,
            timing_ok: verdict,
            verdict,
            score: 1,
            consecutive_failures: failures,
        };
        assert_eq!(policy_update(&mk(true, 0), &policy), Action::Continue);
        assert_eq!(policy_update(&mk(false, 1), &policy), Action::Warn);
        assert_eq!(policy_update(&mk(false, 2), &policy), Action::Warn);
        assert_eq!(policy_update(&mk(false, 3), &policy), Action::Fatal);
        let recover = GuardPolicy {
            action: PolicyAction::Recover,
            ..GuardPolicy::default()
        };
        assert_eq!(policy_update(&mk(false, 5), &recover), Action::Recover);
    }

    #[test]
    fn log_line_is_stable() {
        let r = PredicateResult {
            unit: UnitId(3),
            query: 17,
            timer: TimerId::Tscp,
            checksum_ok: true,
            timing_ok: false,
            verdict: false,
            score: 123456,
            consecutive_failures: 2,
        };
        assert_eq!(
            r.log_line(),
            "unit=3 t=17 timer=TSCP score=123456 checksum=true timing=false verdict=false failures=2"
        );
    }

    #[test]
    fn tampered_kernel_never_executes() {
        // A kernel whose bytes diverge before precompute must be refused,
        // not run.
        let data = vec![9u8; 64];
        let mut guard = Guard::new(test_policy());
        let id = guard.register_static_unit(region_of(&data)).unwrap();
        guard.tamper_kernel_for_tests(id, 2).unwrap();
        assert!(matches!(
            guard.precompute_states(id, &[OpSelector::Add]),
            Err(GuardError::KernelFault)
        ));
    }
}
