//! Report rendering.

use std::fmt::Write as _;
use std::str::FromStr;

use xsim_core::metrics::{ClassMetrics, Report};

use crate::error::{Error, Result};

/// Columns of the CSV rendering, one row per class (`all`, `online`,
/// `offline`). Empty cells stand for metrics with no samples.
pub const CSV_HEADER: [&str; 13] = [
    "class",
    "requests",
    "completed",
    "failed",
    "ttft_p50_ms",
    "ttft_p95_ms",
    "ttft_p99_ms",
    "tpot_mean_ms",
    "tpot_p99_ms",
    "throughput_tokens_per_s",
    "serving_rate_rps",
    "goodput_rps",
    "slo_attainment",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

pub fn render_report(report: &Report, format: &str) -> Result<String> {
    Ok(render(report, format.parse()?))
}

pub fn render(report: &Report, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Table => render_table(report),
    }
}

fn classes(report: &Report) -> [(&'static str, &ClassMetrics); 3] {
    [
        ("all", &report.all),
        ("online", &report.online),
        ("offline", &report.offline),
    ]
}

fn cells(m: &ClassMetrics) -> [String; 12] {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    [
        m.requests.to_string(),
        m.completed.to_string(),
        m.failed.to_string(),
        opt(m.ttft_p50_ms),
        opt(m.ttft_p95_ms),
        opt(m.ttft_p99_ms),
        opt(m.tpot_mean_ms),
        opt(m.tpot_p99_ms),
        m.throughput_tokens_per_s.to_string(),
        m.serving_rate_rps.to_string(),
        m.goodput_rps.to_string(),
        m.slo_attainment.to_string(),
    ]
}

fn render_csv(report: &Report) -> String {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    for (name, m) in classes(report) {
        out.push_str(name);
        for c in cells(m) {
            out.push(',');
            out.push_str(&c);
        }
        out.push('\n');
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn render_table(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>8} {:>9} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>12} {:>9} {:>9} {:>7}",
        "class",
        "requests",
        "completed",
        "failed",
        "ttft_p50",
        "ttft_p95",
        "ttft_p99",
        "tpot_mean",
        "tpot_p99",
        "tokens/s",
        "req/s",
        "goodput",
        "slo"
    );
    for (name, m) in classes(report) {
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>9} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>12.1} {:>9.3} {:>9.3} {:>7.3}",
            name,
            m.requests,
            m.completed,
            m.failed,
            fmt_opt(m.ttft_p50_ms),
            fmt_opt(m.ttft_p95_ms),
            fmt_opt(m.ttft_p99_ms),
            fmt_opt(m.tpot_mean_ms),
            fmt_opt(m.tpot_p99_ms),
            m.throughput_tokens_per_s,
            m.serving_rate_rps,
            m.goodput_rps,
            m.slo_attainment,
        );
    }
    let c = &report.counters;
    let _ = writeln!(out, "window_ms {:.1}", report.window_ms);
    let _ = writeln!(
        out,
        "steps {} preemptions {} online_preemptions {} role_switches {} kv_transfers {} image_transfers {}",
        c.steps, c.preemptions, c.online_preemptions, c.role_switches, c.kv_transfers, c.image_transfers
    );
    let _ = writeln!(
        out,
        "offline_migrations {} faults {} recompute {} migrate {} failed {}",
        c.offline_migrations, c.faults, c.recoveries_recompute, c.recoveries_migrate, c.recoveries_failed
    );
    out
}
