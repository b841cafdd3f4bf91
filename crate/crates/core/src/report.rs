//! Rendering of bench reports: a human table mirroring the measurement
//! matrix, or machine-readable JSON lines. Output is a pure function of the
//! report, so identical reports serialize to identical bytes.

use crate::bench::BenchReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    JsonLines,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<ReportFormat> {
        match s {
            "text" => Some(ReportFormat::Text),
            "jsonl" | "json-lines" => Some(ReportFormat::JsonLines),
            _ => None,
        }
    }
}

pub fn emit_report(report: &BenchReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => emit_text(report),
        ReportFormat::JsonLines => emit_jsonl(report),
    }
}

fn emit_text(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str("# environment\n");
    out.push_str(&report.env_block);
    out.push_str("# configuration\n");
    out.push_str(&report.config_line);
    out.push('\n');

    // Matrix: one row per timer, avg/min/max per variant.
    let mut timers: Vec<&'static str> = Vec::new();
    let mut variants: Vec<&'static str> = Vec::new();
    for cell in &report.cells {
        let t = cell.stats.timer.label();
        if !timers.contains(&t) {
            timers.push(t);
        }
        if !variants.contains(&cell.variant) {
            variants.push(cell.variant);
        }
    }
    out.push_str("# results (avg / min / max)\n");
    let mut header = format!("{:<14}", "timer");
    for v in &variants {
        header.push_str(&format!(" | {v:<34}"));
    }
    out.push_str(&header);
    out.push('\n');
    for timer in &timers {
        let mut row = format!("{timer:<14}");
        for variant in &variants {
            let cell = report.cells.iter().find(|c| {
                c.variant == *variant && c.stats.timer.label() == *timer
            });
            match cell {
                Some(c) => row.push_str(&format!(
                    " | {:<34}",
                    format!("{:.0} / {} / {}", c.stats.avg, c.stats.min, c.stats.max)
                )),
                None => row.push_str(&format!(" | {:<34}", "-")),
            }
        }
        out.push_str(&row);
        out.push('\n');
    }

    out.push_str("# samples\n");
    for cell in &report.cells {
        out.push_str(&format!("variant={} {}\n", cell.variant, cell.stats.report_line()));
    }

    if !report.ratios.is_empty() {
        out.push_str("# ratios (min-of-runs)\n");
        for r in &report.ratios {
            out.push_str(&format!("{}: {:.2}\n", r.ratio, r.value));
        }
    }

    if !report.disturbance.is_empty() {
        out.push_str("# disturbance estimate\n");
        for d in &report.disturbance {
            out.push_str(&format!(
                "variant={} timer={} disturbed_runs={:.1} percent={:.2}\n",
                d.variant, d.timer, d.disturbed_runs, d.percent
            ));
        }
    }

    if let Some(pmc) = &report.pmc {
        out.push_str("# pmc\n");
        for line in pmc {
            out.push_str(&format!(
                "variant={} event={} count={}\n",
                line.variant, line.event, line.count
            ));
        }
    }

    if !report.notices.is_empty() {
        out.push_str("# notices\n");
        for n in &report.notices {
            out.push_str(n);
            out.push('\n');
        }
    }
    out
}

fn emit_jsonl(report: &BenchReport) -> String {
    let mut out = String::new();
    let env = serde_json::json!({ "environment": report.env_block, "configuration": report.config_line });
    out.push_str(&env.to_string());
    out.push('\n');
    for cell in &report.cells {
        out.push_str(&serde_json::to_string(cell).expect("cells serialize"));
        out.push('\n');
    }
    for ratio in &report.ratios {
        out.push_str(&serde_json::to_string(ratio).expect("ratios serialize"));
        out.push('\n');
    }
    for d in &report.disturbance {
        out.push_str(&serde_json::to_string(d).expect("disturbance serializes"));
        out.push('\n');
    }
    if let Some(pmc) = &report.pmc {
        for line in pmc {
            out.push_str(&serde_json::to_string(line).expect("pmc serializes"));
            out.push('\n');
        }
    }
    for notice in &report.notices {
        out.push_str(&serde_json::json!({ "notice": notice }).to_string());
        out.push('\n');
    }
    out
}
