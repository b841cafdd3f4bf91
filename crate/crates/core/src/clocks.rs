//! Timer suite: serialized cycle counters, OS clocks, calibration
//! statistics, and per-query timer selection.
//!
//! Timing scores are only as trustworthy as the clock behind them, so the
//! suite exposes several independent sources with one interface and leaves
//! the choice per verification query to a policy. Cycle counters are read
//! between load fences so earlier instructions retire before the read and
//! later ones cannot start early; reliability beyond that comes from
//! repetition — calibration summarizes many runs into order statistics the
//! guard thresholds against.

use std::convert::Infallible;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClockError {
    #[error("cycle counters require an x86-64 host")]
    Unsupported,
    #[error("timer {0:?} is unavailable on this host")]
    UnavailableTimer(TimerId),
    #[error("no timer in the preference list is available")]
    NoTimerAvailable,
    #[error("timer preference list is empty")]
    EmptyPreference,
    #[error("calibration needs at least one run")]
    ZeroRuns,
    #[error("thread pinning failed (errno {0})")]
    PinFailed(i32),
}

#[derive(Debug, Error)]
pub enum CalibrationError<E> {
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error("workload failed during calibration: {0}")]
    Workload(E),
}

/// Identifiers for the timer backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TimerId {
    /// Serialized time-stamp counter read (`rdtscp`, fenced).
    Tscp,
    /// Fenced plain time-stamp counter read.
    Tsc,
    /// OS monotonic clock, nanoseconds.
    Monotonic,
    /// OS monotonic clock including suspend, nanoseconds.
    Boottime,
    /// Wall-clock UTC, nanoseconds since the epoch; jumps when the system
    /// clock is set.
    RealtimeUtc,
    /// Coarse scheduler-tick clock, milliseconds.
    CoarseTick,
}

impl TimerId {
    pub const ALL: [TimerId; 6] = [
        TimerId::Tscp,
        TimerId::Tsc,
        TimerId::Monotonic,
        TimerId::Boottime,
        TimerId::RealtimeUtc,
        TimerId::CoarseTick,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TimerId::Tscp => "TSCP",
            TimerId::Tsc => "TSC",
            TimerId::Monotonic => "MONOTONIC",
            TimerId::Boottime => "BOOTTIME",
            TimerId::RealtimeUtc => "REALTIME_UTC",
            TimerId::CoarseTick => "COARSE_TICK",
        }
    }

    pub fn parse(s: &str) -> Option<TimerId> {
        TimerId::ALL
            .into_iter()
            .find(|t| t.label().eq_ignore_ascii_case(s))
    }

    /// Unit of the raw readings.
    pub fn unit(self) -> &'static str {
        match self {
            TimerId::Tscp | TimerId::Tsc => "cycles",
            TimerId::CoarseTick => "ms",
            _ => "ns",
        }
    }

    pub fn is_cycle_counter(self) -> bool {
        matches!(self, TimerId::Tscp | TimerId::Tsc)
    }
}

/// One timestamped reading with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimerSample {
    pub timer: TimerId,
    pub value: u64,
}

#[cfg(target_arch = "x86_64")]
mod tsc {
    use std::arch::x86_64::{__cpuid, __rdtscp, _mm_lfence, _rdtsc};

    pub fn has_tsc() -> bool {
        __cpuid(1).edx & (1 << 4) != 0
    }

    pub fn has_rdtscp() -> bool {
        __cpuid(0x8000_0001).edx & (1 << 27) != 0
    }

    /// Fenced counter read: earlier instructions retire before the read
    /// and later ones do not begin early.
    pub fn serialized_cycles() -> u64 {
        unsafe {
            _mm_lfence();
            let t = _rdtsc();
            _mm_lfence();
            t
        }
    }

    /// `rdtscp` waits for prior instructions itself; the trailing fence
    /// stops later instructions from hoisting above the read.
    pub fn serialized_cycles_p() -> u64 {
        unsafe {
            let mut aux = 0u32;
            let t = __rdtscp(&mut aux as *mut u32);
            _mm_lfence();
            t
        }
    }
}

/// Serialized cycle-counter read; the basis for fine-grained scores.
pub fn serialized_cycles() -> Result<u64, ClockError> {
    #[cfg(target_arch = "x86_64")]
    {
        Ok(tsc::serialized_cycles())
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        Err(ClockError::Unsupported)
    }
}

fn clock_gettime(clock: libc::clockid_t) -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    let rc = unsafe { libc::clock_gettime(clock, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime failed");
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

fn clock_available(clock: libc::clockid_t) -> bool {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    unsafe { libc::clock_getres(clock, &mut ts) == 0 }
}

/// Whether a timer backend works on this host; probed once.
pub fn available(timer: TimerId) -> bool {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[bool; 6]> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [false; 6];
        for (i, id) in TimerId::ALL.into_iter().enumerate() {
            t[i] = match id {
                #[cfg(target_arch = "x86_64")]
                TimerId::Tsc => tsc::has_tsc(),
                #[cfg(target_arch = "x86_64")]
                TimerId::Tscp => tsc::has_rdtscp(),
                #[cfg(not(target_arch = "x86_64"))]
                TimerId::Tsc | TimerId::Tscp => false,
                TimerId::Monotonic => clock_available(libc::CLOCK_MONOTONIC),
                TimerId::Boottime => clock_available(libc::CLOCK_BOOTTIME),
                TimerId::RealtimeUtc => clock_available(libc::CLOCK_REALTIME),
                TimerId::CoarseTick => clock_available(libc::CLOCK_MONOTONIC_COARSE),
            };
        }
        t
    });
    let idx = TimerId::ALL.iter().position(|t| *t == timer).unwrap();
    table[idx]
}

/// Read a timer in its native unit.
pub fn read(timer: TimerId) -> Result<TimerSample, ClockError> {
    if !available(timer) {
        return Err(ClockError::UnavailableTimer(timer));
    }
    let value = match timer {
        #[cfg(target_arch = "x86_64")]
        TimerId::Tsc => tsc::serialized_cycles(),
        #[cfg(target_arch = "x86_64")]
        TimerId::Tscp => tsc::serialized_cycles_p(),
        #[cfg(not(target_arch = "x86_64"))]
        TimerId::Tsc | TimerId::Tscp => return Err(ClockError::Unsupported),
        TimerId::Monotonic => clock_gettime(libc::CLOCK_MONOTONIC),
        TimerId::Boottime => clock_gettime(libc::CLOCK_BOOTTIME),
        TimerId::RealtimeUtc => clock_gettime(libc::CLOCK_REALTIME),
        TimerId::CoarseTick => clock_gettime(libc::CLOCK_MONOTONIC_COARSE) / 1_000_000,
    };
    Ok(TimerSample { timer, value })
}

/// Resolution metadata for a timer, in its native unit (best-effort).
pub fn resolution(timer: TimerId) -> Result<u64, ClockError> {
    if !available(timer) {
        return Err(ClockError::UnavailableTimer(timer));
    }
    let clock = match timer {
        TimerId::Tsc | TimerId::Tscp => return Ok(1),
        TimerId::Monotonic => libc::CLOCK_MONOTONIC,
        TimerId::Boottime => libc::CLOCK_BOOTTIME,
        TimerId::RealtimeUtc => libc::CLOCK_REALTIME,
        TimerId::CoarseTick => libc::CLOCK_MONOTONIC_COARSE,
    };
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    let rc = unsafe { libc::clock_getres(clock, &mut ts) };
    assert_eq!(rc, 0);
    let ns = ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64;
    Ok(match timer {
        TimerId::CoarseTick => ns / 1_000_000,
        _ => ns,
    })
}

/// Summary statistics over repeated timed runs, in the timer's native
/// unit. Quantiles are nearest-rank, so
/// `min <= q01 <= q50 <= q99 <= max` and the mean lies within `[min, max]`
/// by construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CalibrationStats {
    #[serde(serialize_with = "serialize_timer")]
    pub timer: TimerId,
    pub runs: usize,
    pub min: u64,
    pub avg: f64,
    pub max: u64,
    pub q01: u64,
    pub q50: u64,
    pub q99: u64,
}

fn serialize_timer<S: serde::Serializer>(t: &TimerId, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(t.label())
}

impl CalibrationStats {
    /// Build stats from raw samples (consumed for sorting).
    pub fn from_samples(timer: TimerId, mut samples: Vec<u64>) -> Result<Self, ClockError> {
        if samples.is_empty() {
            return Err(ClockError::ZeroRuns);
        }
        samples.sort_unstable();
        let runs = samples.len();
        let nearest_rank = |p: f64| -> u64 {
            let rank = (p * runs as f64).ceil() as usize;
            samples[rank.clamp(1, runs) - 1]
        };
        let sum: u128 = samples.iter().map(|&v| v as u128).sum();
        let stats = CalibrationStats {
            timer,
            runs,
            min: samples[0],
            avg: sum as f64 / runs as f64,
            max: samples[runs - 1],
            q01: nearest_rank(0.01),
            q50: nearest_rank(0.50),
            q99: nearest_rank(0.99),
        };
        debug_assert!(stats.ordered());
        Ok(stats)
    }

    pub fn ordered(&self) -> bool {
        self.min <= self.q01
            && self.q01 <= self.q50
            && self.q50 <= self.q99
            && self.q99 <= self.max
            && self.avg >= self.min as f64
            && self.avg <= self.max as f64
    }

    /// One-line rendering consumed by the bench report and the guard log.
    pub fn report_line(&self) -> String {
        format!(
            "timer={} runs={} min={} avg={:.1} max={} q01={} q50={} q99={}",
            self.timer.label(),
            self.runs,
            self.min,
            self.avg,
            self.max,
            self.q01,
            self.q50,
            self.q99
        )
    }
}

impl std::fmt::Display for CalibrationStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.report_line())
    }
}

/// Time `workload` `runs` times on `timer`, pinned to the current core.
/// Workload errors abort the calibration.
pub fn try_calibrate<E>(
    timer: TimerId,
    runs: usize,
    mut workload: impl FnMut() -> Result<(), E>,
) -> Result<CalibrationStats, CalibrationError<E>> {
    if runs == 0 {
        return Err(ClockError::ZeroRuns.into());
    }
    if !available(timer) {
        return Err(ClockError::UnavailableTimer(timer).into());
    }
    let _pin = pin_to_current_core();
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = read(timer).map_err(CalibrationError::Clock)?;
        workload().map_err(CalibrationError::Workload)?;
        let end = read(timer).map_err(CalibrationError::Clock)?;
        samples.push(end.value.saturating_sub(start.value));
    }
    Ok(CalibrationStats::from_samples(timer, samples)?)
}

/// [`try_calibrate`] for workloads that cannot fail.
pub fn calibrate(
    timer: TimerId,
    runs: usize,
    mut workload: impl FnMut(),
) -> Result<CalibrationStats, ClockError> {
    match try_calibrate(timer, runs, move || {
        workload();
        Ok::<(), Infallible>(())
    }) {
        Ok(stats) => Ok(stats),
        Err(CalibrationError::Clock(e)) => Err(e),
        Err(CalibrationError::Workload(never)) => match never {},
    }
}

/// Timer preference policy for [`timer_for_query`].
#[derive(Debug, Clone)]
pub struct TimerPolicy {
    /// Ordered preference; the first available wins.
    pub preference: Vec<TimerId>,
    /// Rotate across the available preferred timers per query index.
    pub rotate: bool,
}

impl Default for TimerPolicy {
    fn default() -> Self {
        TimerPolicy {
            preference: vec![TimerId::Tscp, TimerId::Monotonic, TimerId::RealtimeUtc],
            rotate: false,
        }
    }
}

/// Deterministic timer choice for query `t`: the first available preferred
/// timer, or under rotation the `t % n`-th of the available preferred set.
pub fn timer_for_query(t: u64, policy: &TimerPolicy) -> Result<TimerId, ClockError> {
    if policy.preference.is_empty() {
        return Err(ClockError::EmptyPreference);
    }
    let avail: Vec<TimerId> = policy
        .preference
        .iter()
        .copied()
        .filter(|&id| available(id))
        .collect();
    if avail.is_empty() {
        return Err(ClockError::NoTimerAvailable);
    }
    if policy.rotate {
        Ok(avail[(t % avail.len() as u64) as usize])
    } else {
        Ok(avail[0])
    }
}

/// Rough count of runs disturbed by scheduler interference:
/// `runs * (avg - min) / max`, with the fraction of `runs` alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceEstimate {
    pub disturbed_runs: f64,
    pub fraction: f64,
}

pub fn disturbance_estimate(stats: &CalibrationStats, runs: usize) -> DisturbanceEstimate {
    assert!(stats.max > 0, "disturbance estimate needs max > 0");
    let disturbed = runs as f64 * (stats.avg - stats.min as f64) / stats.max as f64;
    DisturbanceEstimate {
        disturbed_runs: disturbed,
        fraction: disturbed / runs as f64,
    }
}

/// Affinity guard; restores the previous mask when dropped.
pub struct PinGuard {
    previous: libc::cpu_set_t,
}

impl Drop for PinGuard {
    fn drop(&mut self) {
        unsafe {
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &self.previous);
        }
    }
}

/// Pin the calling thread to one core.
pub fn pin_to_core(core: usize) -> Result<PinGuard, ClockError> {
    unsafe {
        let mut previous: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut previous) != 0 {
            return Err(ClockError::PinFailed(errno()));
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(core, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(ClockError::PinFailed(errno()));
        }
        Ok(PinGuard { previous })
    }
}

/// Pin to whichever core the thread is on right now.
pub fn pin_to_current_core() -> Option<PinGuard> {
    let cpu = unsafe { libc::sched_getcpu() };
    if cpu < 0 {
        return None;
    }
    pin_to_core(cpu as usize).ok()
}

fn errno() -> i32 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
}
