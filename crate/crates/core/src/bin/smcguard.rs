//! Command-line harness: benchmark matrix, tamper experiment, layout and
//! timer inspection.

use clap::{Parser, Subcommand};
use smcguard::bench::{run_suite, tamper_experiment, BenchConfig, Variant};
use smcguard::clocks::{self, TimerId};
use smcguard::kernels;
use smcguard::report::{emit_report, ReportFormat};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "smcguard", version, about = "Self-modifying checksum kernels: benchmarks, tamper experiments, host reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the measurement matrix and print a report.
    Bench {
        /// Comma-separated subset of:
        /// oracle,oracle-unrolled,smc-static,smc-static-unrolled,smc-dynamic
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Region size in bytes (multiple of 8).
        #[arg(long, default_value_t = 225_280)]
        size: usize,
        /// Timed runs per cell.
        #[arg(long, default_value_t = 10_000)]
        runs: usize,
        /// Comma-separated timers (tscp,tsc,monotonic,boottime,realtime_utc,coarse_tick).
        #[arg(long, value_delimiter = ',')]
        timers: Vec<String>,
        /// Count machine-clear events per variant (needs counter access).
        #[arg(long)]
        pmc: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// CI mode: 200 runs; consumers relax ratio thresholds twofold.
        #[arg(long)]
        quick: bool,
        #[arg(long, value_parser = parse_format, default_value = "text")]
        report_format: ReportFormat,
        /// Pin to a specific core (defaults to the current one).
        #[arg(long)]
        pin_core: Option<usize>,
        /// Request highest process priority (best effort).
        #[arg(long)]
        priority: bool,
    },
    /// Flip random region bytes and report the detection rate.
    Tamper {
        #[arg(long, default_value_t = 10_000)]
        flips: usize,
        #[arg(long, default_value_t = 4096)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        pin_core: Option<usize>,
    },
    /// Print the host environment and dynamic-kernel layout report.
    Layout {
        #[arg(long, default_value_t = 2)]
        pages: usize,
    },
    /// Probe timer availability and calibrate the empty interval.
    Timers {
        #[arg(long, default_value_t = 1000)]
        runs: usize,
    },
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    ReportFormat::parse(s).ok_or_else(|| format!("unknown format '{s}' (text|jsonl)"))
}

fn parse_timers(raw: &[String]) -> Result<Vec<TimerId>, String> {
    if raw.is_empty() {
        return Ok(vec![TimerId::Tscp, TimerId::Monotonic]);
    }
    raw.iter()
        .map(|s| TimerId::parse(s).ok_or_else(|| format!("unknown timer '{s}'")))
        .collect()
}

fn parse_variants(raw: &[String]) -> Result<Vec<Variant>, String> {
    if raw.is_empty() {
        return Ok(Variant::ALL.to_vec());
    }
    raw.iter()
        .map(|s| Variant::parse(s).ok_or_else(|| format!("unknown variant '{s}'")))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Bench {
            variants,
            size,
            runs,
            timers,
            pmc,
            seed,
            quick,
            report_format,
            pin_core,
            priority,
        } => {
            let cfg = BenchConfig {
                variants: parse_variants(&variants)?,
                region_size: size,
                runs,
                timers: parse_timers(&timers)?,
                pmc,
                seed,
                quick,
                pin_core,
                raise_priority: priority,
                ..BenchConfig::default()
            };
            let report = run_suite(&cfg)?;
            print!("{}", emit_report(&report, report_format));
            Ok(ExitCode::SUCCESS)
        }
        Command::Tamper { flips, size, seed, pin_core } => {
            let cfg = BenchConfig {
                region_size: size,
                seed,
                pin_core,
                ..BenchConfig::default()
            };
            let report = tamper_experiment(&cfg, flips)?;
            println!(
                "flips={} detected={} detection_rate={:.4} alias_skips={}",
                report.flips, report.detected, report.detection_rate, report.alias_skips
            );
            println!("clean_runs={} clean_true={}", report.clean_runs, report.clean_true);
            if let Some(line) = &report.sample_log {
                println!("{line}");
            }
            for (idx, mask) in &report.false_accepts {
                println!("false_accept byte={idx} mask={mask:#04x}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Layout { pages } => {
            let layout = kernels::plan_dynamic_layout(pages)?;
            let cpu = smcguard::cpu::detect();
            // Report the geometry without allocating executable memory.
            print!("{}", kernels::layout_report(&layout, &cpu, 0, layout.epilogue_offset + 5));
            Ok(ExitCode::SUCCESS)
        }
        Command::Timers { runs } => {
            for timer in TimerId::ALL {
                if !clocks::available(timer) {
                    println!("timer={} unavailable", timer.label());
                    continue;
                }
                let stats = clocks::calibrate(timer, runs, || {})?;
                println!("{} unit={}", stats.report_line(), timer.unit());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
