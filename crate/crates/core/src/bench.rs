//! Measurement matrix and tamper experiment.
//!
//! The suite times each requested variant under each requested timer with
//! identical inputs: a seeded synthetic region checksummed from the same
//! initial state. Before anything is timed, every native kernel must agree
//! with its reference emulation — no number is reported for a variant whose
//! checksum is wrong. Single-site variants (the plain reference and the
//! static kernel) share one expected value; multi-site variants are checked
//! against the unrolled emulation of their own layout.

use crate::clocks::{
    self, disturbance_estimate, CalibrationStats, ClockError, TimerId,
};
use crate::guard::{Guard, GuardError, GuardPolicy, RegionRef};
use crate::kernels::{
    self, BuiltKernel, KernelConfig, KernelError,
};
use crate::layout::KernelLayout;
use crate::oracle::{
    checksum_region, emulate_unrolled, ChecksumState, OpSelector, OracleError, Region,
};
use crate::pmc;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("region size {0} must be a positive multiple of 8")]
    BadRegionSize(usize),
    #[error("runs must be at least 1")]
    ZeroRuns,
    #[error("no requested variant can run on this host")]
    NothingRunnable,
    #[error("checksum gate failed: {0}")]
    ChecksumMismatch(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Workload identities measured by the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Single-site reference emulation.
    Oracle,
    /// Faithful multi-site emulation of the dynamic kernel.
    OracleUnrolled,
    /// Native minimal self-patching loop.
    SmcStatic,
    /// Native unrolled block with in-block patching.
    SmcStaticUnrolled,
    /// Native dual-page kernel with cross-page patching.
    SmcDynamic,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Oracle,
        Variant::OracleUnrolled,
        Variant::SmcStatic,
        Variant::SmcStaticUnrolled,
        Variant::SmcDynamic,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Oracle => "oracle",
            Variant::OracleUnrolled => "oracle-unrolled",
            Variant::SmcStatic => "smc-static",
            Variant::SmcStaticUnrolled => "smc-static-unrolled",
            Variant::SmcDynamic => "smc-dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.label() == s)
    }

    pub fn is_native(self) -> bool {
        matches!(
            self,
            Variant::SmcStatic | Variant::SmcStaticUnrolled | Variant::SmcDynamic
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    /// Bytes checksummed per run.
    pub region_size: usize,
    pub runs: usize,
    pub timers: Vec<TimerId>,
    pub pmc: bool,
    pub seed: u64,
    /// CI mode: 200 runs, ratio thresholds relaxed by the consumers.
    pub quick: bool,
    pub pin_core: Option<usize>,
    pub raise_priority: bool,
    /// Unroll depth of the static unrolled block.
    pub block_units: usize,
    /// Pages of the dynamic kernel.
    pub page_count: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: Variant::ALL.to_vec(),
            region_size: 225_280,
            runs: 10_000,
            timers: vec![TimerId::Tscp, TimerId::Monotonic],
            pmc: false,
            seed: 1,
            quick: false,
            pin_core: None,
            raise_priority: false,
            block_units: kernels::DEFAULT_BLOCK_UNITS,
            page_count: kernels::DEFAULT_PAGE_COUNT,
        }
    }
}

impl BenchConfig {
    pub fn effective_runs(&self) -> usize {
        if self.quick {
            200
        } else {
            self.runs
        }
    }
}

/// Region contents are a pure function of the seed and size.
pub fn synth_region(size: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0u8; size];
    rng.fill_bytes(&mut data);
    data
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchCell {
    pub variant: &'static str,
    #[serde(flatten)]
    pub stats: CalibrationStats,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PmcLine {
    pub variant: &'static str,
    pub event: String,
    pub count: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RatioLine {
    pub ratio: String,
    pub value: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DisturbanceLine {
    pub variant: &'static str,
    pub timer: &'static str,
    pub disturbed_runs: f64,
    pub percent: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub env_block: String,
    pub config_line: String,
    pub cells: Vec<BenchCell>,
    pub ratios: Vec<RatioLine>,
    pub disturbance: Vec<DisturbanceLine>,
    pub pmc: Option<Vec<PmcLine>>,
    pub notices: Vec<String>,
}

impl BenchReport {
    pub fn min_of(&self, variant: Variant, timer: TimerId) -> Option<u64> {
        self.cells
            .iter()
            .find(|c| c.variant == variant.label() && c.stats.timer == timer)
            .map(|c| c.stats.min)
    }

    pub fn ratio(&self, label: &str) -> Option<f64> {
        self.ratios
            .iter()
            .find(|r| r.ratio == label)
            .map(|r| r.value)
    }
}

struct NativeSet {
    smc_static: Option<BuiltKernel>,
    smc_static_unrolled: Option<BuiltKernel>,
    smc_dynamic: Option<BuiltKernel>,
}

/// Run the measurement matrix.
pub fn run_suite(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.region_size == 0 || !cfg.region_size.is_multiple_of(8) {
        return Err(BenchError::BadRegionSize(cfg.region_size));
    }
    if cfg.effective_runs() == 0 {
        return Err(BenchError::ZeroRuns);
    }

    let mut notices = Vec::new();
    let _pin = match cfg.pin_core {
        Some(core) => Some(clocks::pin_to_core(core)?),
        None => clocks::pin_to_current_core(),
    };
    if cfg.raise_priority {
        let rc = unsafe { libc::setpriority(libc::PRIO_PROCESS, 0, -20) };
        if rc != 0 {
            notices.push("priority raise denied; continuing at normal priority".into());
        }
    }

    let data = synth_region(cfg.region_size, cfg.seed);
    let region = Region::new(&data)?;
    let init = ChecksumState::default();
    let runs = cfg.effective_runs();

    // The faithful emulation follows the dynamic kernel's geometry whether
    // or not the native kernel itself is requested.
    let dyn_layout = kernels::plan_dynamic_layout(cfg.page_count)?;

    let mut natives = NativeSet {
        smc_static: None,
        smc_static_unrolled: None,
        smc_dynamic: None,
    };
    for variant in &cfg.variants {
        if !variant.is_native() {
            continue;
        }
        let config = match variant {
            Variant::SmcStatic => KernelConfig::static_kernel(),
            Variant::SmcStaticUnrolled => KernelConfig::static_unrolled(cfg.block_units),
            Variant::SmcDynamic => KernelConfig::dynamic(cfg.page_count),
            _ => unreachable!(),
        };
        match BuiltKernel::build(&config) {
            Ok(kernel) => match variant {
                Variant::SmcStatic => natives.smc_static = Some(kernel),
                Variant::SmcStaticUnrolled => natives.smc_static_unrolled = Some(kernel),
                Variant::SmcDynamic => natives.smc_dynamic = Some(kernel),
                _ => unreachable!(),
            },
            Err(KernelError::UnsupportedHost) => {
                notices.push(format!("{}: unsupported on this host, skipped", variant.label()));
            }
            Err(e) => return Err(e.into()),
        }
    }

    // Correctness gate. Nothing is timed unless every runnable native
    // variant reproduces its reference value exactly.
    let oracle_state = checksum_region(region, None, init);
    if let Some(kernel) = natives.smc_static.as_mut() {
        let got = kernel.run(&data, init)?;
        if got != oracle_state {
            return Err(BenchError::ChecksumMismatch(format!(
                "smc-static produced {:#x}, reference says {:#x}",
                got.sum, oracle_state.sum
            )));
        }
    }
    let dyn_expected = emulate_unrolled(region, &dyn_layout, init)?;
    if let Some(kernel) = natives.smc_dynamic.as_mut() {
        let got = kernel.run(&data, init)?;
        if got != dyn_expected.state || kernel.selectors()? != dyn_expected.selectors {
            return Err(BenchError::ChecksumMismatch(format!(
                "smc-dynamic produced {:#x}, faithful emulation says {:#x}",
                got.sum, dyn_expected.state.sum
            )));
        }
    }
    if let Some(kernel) = natives.smc_static_unrolled.as_mut() {
        let block_layout = kernel.layout().expect("unrolled kernel has a layout").clone();
        let expected = emulate_unrolled(region, &block_layout, init)?;
        let got = kernel.run(&data, init)?;
        if got != expected.state {
            return Err(BenchError::ChecksumMismatch(format!(
                "smc-static-unrolled produced {:#x}, faithful emulation says {:#x}",
                got.sum, expected.state.sum
            )));
        }
    }

    // Timing matrix.
    let mut cells = Vec::new();
    for &variant in &cfg.variants {
        for &timer in &cfg.timers {
            if !clocks::available(timer) {
                notices.push(format!("timer {} unavailable, skipped", timer.label()));
                continue;
            }
            let stats = time_variant(variant, timer, runs, &data, &dyn_layout, &mut natives)?;
            match stats {
                Some(stats) => cells.push(BenchCell { variant: variant.label(), stats }),
                None => continue,
            }
        }
    }
    if cells.is_empty() {
        return Err(BenchError::NothingRunnable);
    }

    // Ratios on min-of-runs, per timer where both sides were measured.
    let min_of = |variant: Variant, timer: TimerId| {
        cells
            .iter()
            .find(|c| c.variant == variant.label() && c.stats.timer == timer)
            .map(|c| c.stats.min)
    };
    let mut ratios = Vec::new();
    let pairs = [
        (Variant::SmcStatic, Variant::Oracle, "smc-static/oracle"),
        (
            Variant::OracleUnrolled,
            Variant::SmcDynamic,
            "oracle-unrolled/smc-dynamic",
        ),
        (Variant::SmcStatic, Variant::SmcDynamic, "smc-static/smc-dynamic"),
    ];
    for &timer in &cfg.timers {
        for (num, den, label) in pairs {
            if let (Some(n), Some(d)) = (min_of(num, timer), min_of(den, timer)) {
                if d > 0 {
                    ratios.push(RatioLine {
                        ratio: format!("{label} [{}] (min)", timer.label()),
                        value: n as f64 / d as f64,
                    });
                }
            }
        }
    }

    // Disturbance estimates from the cycle-counter cells.
    let mut disturbance = Vec::new();
    for cell in &cells {
        if cell.stats.timer.is_cycle_counter() && cell.stats.max > 0 {
            let est = disturbance_estimate(&cell.stats, cell.stats.runs);
            disturbance.push(DisturbanceLine {
                variant: cell.variant,
                timer: cell.stats.timer.label(),
                disturbed_runs: est.disturbed_runs,
                percent: est.fraction * 100.0,
            });
        }
    }

    // Machine-clear counts, skipped without counter access.
    let pmc_lines = if cfg.pmc {
        match pmc_counts(cfg, runs, &data, &dyn_layout, &mut natives) {
            Ok(lines) => Some(lines),
            Err(e) => {
                notices.push(format!("pmc skipped: {e}"));
                None
            }
        }
    } else {
        None
    };

    // Environment block around the dynamic geometry (base address of the
    // dynamic kernel when built, zero otherwise).
    let (code_base, code_size) = natives
        .smc_dynamic
        .as_ref()
        .map(|k| k.buffer_range())
        .unwrap_or((0, dyn_layout.epilogue_offset + 5));
    let env_block = kernels::layout_report(&dyn_layout, &crate::cpu::detect(), code_base, code_size);
    let config_line = format!(
        "runs={} region_size={} seed={} quick={} agreed_sum={:#018x}",
        runs, cfg.region_size, cfg.seed, cfg.quick, oracle_state.sum
    );

    Ok(BenchReport {
        env_block,
        config_line,
        cells,
        ratios,
        disturbance,
        pmc: pmc_lines,
        notices,
    })
}

fn time_variant(
    variant: Variant,
    timer: TimerId,
    runs: usize,
    data: &[u8],
    dyn_layout: &KernelLayout,
    natives: &mut NativeSet,
) -> Result<Option<CalibrationStats>, BenchError> {
    let region = Region::new(data)?;
    let init = ChecksumState::default();
    let stats = match variant {
        Variant::Oracle => clocks::calibrate(timer, runs, || {
            black_box(checksum_region(region, None, init).sum);
        })?,
        Variant::OracleUnrolled => clocks::calibrate(timer, runs, || {
            black_box(
                emulate_unrolled(region, dyn_layout, init)
                    .expect("layout validated at gate time")
                    .state
                    .sum,
            );
        })?,
        Variant::SmcStatic => match natives.smc_static.as_mut() {
            Some(kernel) => time_native(kernel, timer, runs, data)?,
            None => return Ok(None),
        },
        Variant::SmcStaticUnrolled => match natives.smc_static_unrolled.as_mut() {
            Some(kernel) => time_native(kernel, timer, runs, data)?,
            None => return Ok(None),
        },
        Variant::SmcDynamic => match natives.smc_dynamic.as_mut() {
            Some(kernel) => time_native(kernel, timer, runs, data)?,
            None => return Ok(None),
        },
    };
    Ok(Some(stats))
}

fn time_native(
    kernel: &mut BuiltKernel,
    timer: TimerId,
    runs: usize,
    data: &[u8],
) -> Result<CalibrationStats, BenchError> {
    // Back-to-back runs continue from the live field state, like a deployed
    // unit between resets; a couple of warmup passes fault the pages in.
    for _ in 0..2 {
        black_box(kernel.execute(data, 0)?);
    }
    let mut fault: Option<KernelError> = None;
    let stats = clocks::calibrate(timer, runs, || match kernel.execute(data, 0) {
        Ok(sum) => {
            black_box(sum);
        }
        Err(e) => {
            fault.get_or_insert(e);
        }
    })?;
    if let Some(e) = fault {
        return Err(e.into());
    }
    Ok(stats)
}

fn pmc_counts(
    cfg: &BenchConfig,
    runs: usize,
    data: &[u8],
    dyn_layout: &KernelLayout,
    natives: &mut NativeSet,
) -> Result<Vec<PmcLine>, pmc::PmcError> {
    let spec = pmc::host_event_spec()?;
    pmc::probe()?;
    let region = Region::new(data).expect("validated");
    let init = ChecksumState::default();
    let mut lines = Vec::new();
    for &variant in &cfg.variants {
        let count = match variant {
            Variant::Oracle => pmc::count_events(&spec, || {
                for _ in 0..runs {
                    black_box(checksum_region(region, None, init).sum);
                }
            })?,
            Variant::OracleUnrolled => pmc::count_events(&spec, || {
                for _ in 0..runs {
                    black_box(emulate_unrolled(region, dyn_layout, init).map(|o| o.state.sum).ok());
                }
            })?,
            Variant::SmcStatic | Variant::SmcStaticUnrolled | Variant::SmcDynamic => {
                let kernel = match variant {
                    Variant::SmcStatic => natives.smc_static.as_mut(),
                    Variant::SmcStaticUnrolled => natives.smc_static_unrolled.as_mut(),
                    Variant::SmcDynamic => natives.smc_dynamic.as_mut(),
                    _ => unreachable!(),
                };
                let Some(kernel) = kernel else { continue };
                pmc::count_events(&spec, || {
                    for _ in 0..runs {
                        let _ = black_box(kernel.execute(data, 0));
                    }
                })?
            }
        };
        lines.push(PmcLine {
            variant: variant.label(),
            event: spec.name.to_string(),
            count,
        });
    }
    Ok(lines)
}

/// Tamper-detection statistics from randomized single-byte flips.
#[derive(Debug, Clone)]
pub struct TamperReport {
    pub flips: usize,
    pub detected: usize,
    pub detection_rate: f64,
    pub clean_runs: usize,
    pub clean_true: usize,
    /// Byte index and mask of every undetected flip (capped at 100).
    pub false_accepts: Vec<(usize, u8)>,
    /// Flips that landed entirely inside mutable field bits; aliases of
    /// legitimate self-modification, excluded from the rate.
    pub alias_skips: usize,
    /// Log line of the final clean verification.
    pub sample_log: Option<String>,
}

/// Flip seeded random single bytes of a protected region (never the
/// mutable field bits of a modification site) and report how many flips
/// the predicate catches.
pub fn tamper_experiment(cfg: &BenchConfig, flips: usize) -> Result<TamperReport, BenchError> {
    if cfg.region_size == 0 || !cfg.region_size.is_multiple_of(8) {
        return Err(BenchError::BadRegionSize(cfg.region_size));
    }
    let _pin = match cfg.pin_core {
        Some(core) => Some(clocks::pin_to_core(core)?),
        None => clocks::pin_to_current_core(),
    };

    let mut data = synth_region(cfg.region_size, cfg.seed);
    let mut guard = Guard::new(GuardPolicy {
        // The experiment measures checksum behavior; scores stay informative
        // but must not flap under harness load.
        window: (0.01, 1e6),
        calibration_runs: 100,
        ..GuardPolicy::default()
    });
    let region = unsafe { RegionRef::new(data.as_ptr(), data.len())? };
    let id = guard.register_static_unit(region)?;
    guard.precompute_states(id, &OpSelector::ALL)?;

    let site_bytes = guard.mutable_region_bytes(id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A3D_91B4_C2E5_F017);
    let mut detected = 0;
    let mut alias_skips = 0;
    let mut false_accepts = Vec::new();

    let mut trial = 0usize;
    while trial < flips {
        let idx = (rng.next_u64() % data.len() as u64) as usize;
        let mut mask = (rng.next_u64() % 255 + 1) as u8;
        if site_bytes.contains(&idx) {
            mask &= !0x28;
            if mask == 0 {
                // Indistinguishable from the kernel's own patching.
                alias_skips += 1;
                continue;
            }
        }
        data[idx] ^= mask;
        let result = guard.verify(id, trial as u64)?;
        data[idx] ^= mask;
        if result.checksum_ok {
            if false_accepts.len() < 100 {
                false_accepts.push((idx, mask));
            }
        } else {
            detected += 1;
        }
        trial += 1;
    }

    // A short clean tail confirms the unit still reports true.
    guard.reset(id)?;
    let clean_runs = 100.min(flips.max(1));
    let mut clean_true = 0;
    let mut sample_log = None;
    for t in 0..clean_runs {
        let result = guard.verify(id, t as u64)?;
        if result.checksum_ok {
            clean_true += 1;
        }
        sample_log = Some(result.log_line());
    }

    Ok(TamperReport {
        flips,
        detected,
        detection_rate: if flips == 0 { 1.0 } else { detected as f64 / flips as f64 },
        clean_runs,
        clean_true,
        false_accepts,
        alias_skips,
        sample_log,
    })
}
