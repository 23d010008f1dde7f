//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use xsim_core::kernel::{dual_stream_estimate, OverlapProfile};
use xsim_core::metrics::{compute_metrics, Report};
use xsim_core::model::TraceRecord;
use xsim_core::sim::{run, DispatchPolicy};

use crate::bench::beam_bench;
use crate::config::{load_overlap_profile, load_trace_spec, Scenario};
use crate::error::{Error, Result};
use crate::report::{render, ReportFormat};
use crate::workload::{gen_trace, load_trace_csv, save_trace_csv};

#[derive(Debug, Parser)]
#[command(
    name = "xsim",
    version,
    about = "Iteration-level simulator for disaggregated LLM serving clusters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one trace through one scenario and write the report.
    Simulate {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scenario's dispatch policy.
        #[arg(long, value_parser = parse_policy)]
        policy: Option<DispatchPolicy>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "json", value_parser = parse_format)]
        format: ReportFormat,
    },
    /// Generate a synthetic trace from a TOML spec.
    GenTrace {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several dispatch policies on the same trace and rank them.
    Compare {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., value_parser = parse_policy,
              default_values = ["slo-aware", "min-load", "round-robin"])]
        policies: Vec<DispatchPolicy>,
        /// Output format.
        #[arg(long, default_value = "table", value_parser = parse_format)]
        out: ReportFormat,
    },
    /// Print the single/dual-stream overhead breakdown.
    Profile {
        #[arg(long)]
        overlap_profile: Option<PathBuf>,
    },
    /// Check heap beam selection against brute force on random instances.
    BeamBench {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        max_width: usize,
    },
}

fn parse_policy(s: &str) -> std::result::Result<DispatchPolicy, String> {
    match s {
        "slo-aware" => Ok(DispatchPolicy::SloAware),
        "min-load" => Ok(DispatchPolicy::MinLoad),
        "round-robin" => Ok(DispatchPolicy::RoundRobin),
        _ => Err(format!(
            "unknown policy {s:?}; expected slo-aware, min-load or round-robin"
        )),
    }
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Runs the CLI against the process streams and returns the exit status.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    cli_main_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

pub fn cli_main_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|source| Error::Io {
        path: "<stdout>".into(),
        source,
    })
}

/// Simulates `trace` under `scenario`, optionally overriding the dispatch
/// policy, and computes the report against each request's own targets.
pub fn simulate(trace: &[TraceRecord], scenario: &Scenario, policy: Option<DispatchPolicy>) -> Result<Report> {
    let mut policies = scenario.policies.clone();
    if let Some(p) = policy {
        policies.dispatch = p;
    }
    let result = run(
        trace,
        &scenario.cluster_config(),
        &policies,
        &scenario.model,
        &scenario.sim,
    )?;
    Ok(compute_metrics(&result, None))
}

/// Reports in input order. Runs execute on separate threads.
pub fn compare(trace: &[TraceRecord], scenario: &Scenario, policies: &[DispatchPolicy]) -> Result<Vec<Report>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = policies
            .iter()
            .map(|p| s.spawn(move || simulate(trace, scenario, Some(*p))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread"))
            .collect()
    })
}

fn render_comparison(policies: &[DispatchPolicy], reports: &[Report], format: ReportFormat) -> String {
    let mut ranked: Vec<usize> = (0..reports.len()).collect();
    ranked.sort_by(|&a, &b| {
        let (x, y) = (&reports[a].all, &reports[b].all);
        y.serving_rate_rps
            .total_cmp(&x.serving_rate_rps)
            .then(y.slo_attainment.total_cmp(&x.slo_attainment))
            .then(a.cmp(&b))
    });
    match format {
        ReportFormat::Json => {
            let rows: Vec<serde_json::Value> = ranked
                .iter()
                .map(|&i| serde_json::json!({ "policy": policies[i].name(), "report": reports[i] }))
                .collect();
            let mut s = serde_json::to_string_pretty(&rows).expect("comparison serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s =
                String::from("rank,policy,serving_rate_rps,slo_attainment,goodput_rps,ttft_p99_ms,tpot_p99_ms\n");
            for (rank, &i) in ranked.iter().enumerate() {
                let m = &reports[i].all;
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    rank + 1,
                    policies[i].name(),
                    m.serving_rate_rps,
                    m.slo_attainment,
                    m.goodput_rps,
                    opt(m.ttft_p99_ms),
                    opt(m.tpot_p99_ms)
                ));
            }
            s
        }
        ReportFormat::Table => {
            let mut s = format!(
                "{:<5} {:<12} {:>10} {:>9} {:>9} {:>10} {:>10}\n",
                "rank", "policy", "req/s", "slo", "goodput", "ttft_p99", "tpot_p99"
            );
            let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
            for (rank, &i) in ranked.iter().enumerate() {
                let m = &reports[i].all;
                s.push_str(&format!(
                    "{:<5} {:<12} {:>10.3} {:>9.3} {:>9.3} {:>10} {:>10}\n",
                    rank + 1,
                    policies[i].name(),
                    m.serving_rate_rps,
                    m.slo_attainment,
                    m.goodput_rps,
                    opt(m.ttft_p99_ms),
                    opt(m.tpot_p99_ms)
                ));
            }
            let names: Vec<&str> = ranked.iter().map(|&i| policies[i].name()).collect();
            s.push_str(&format!("ordering: {}\n", names.join(" > ")));
            s
        }
    }
}

fn render_profile(p: &OverlapProfile) -> String {
    let e = dual_stream_estimate(p);
    let mut s = String::new();
    s.push_str(&format!("{:<28} {:>10} {:>10}\n", "", "single", "dual"));
    s.push_str(&format!(
        "{:<28} {:>10.2} {:>10.2}\n",
        "communication (ms)", p.comm_single_ms, p.comm_dual_ms
    ));
    s.push_str(&format!(
        "{:<28} {:>10.2} {:>10.2}\n",
        "computation (ms)", p.compute_single_ms, p.compute_dual_ms
    ));
    s.push_str(&format!(
        "{:<28} {:>10} {:>10.2}\n",
        "overlap ratio", "-", p.overlap_ratio
    ));
    s.push_str(&format!(
        "{:<28} {:>10.2} {:>10.2}\n",
        "exposed comm (ms)", p.comm_single_ms, e.exposed_ms
    ));
    s.push_str(&format!(
        "{:<28} {:>21.2}\n",
        "extra compute (ms)", e.compute_overhead_ms
    ));
    s.push_str(&format!(
        "{:<28} {:>21.2}\n",
        "saved per layer (ms)", e.saved_per_layer_ms
    ));
    s.push_str(&format!("{:<28} {:>21}\n", "layers", p.num_layers));
    s.push_str(&format!("{:<28} {:>21.1}\n", "total saved (ms)", e.total_saved_ms));
    s
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Simulate {
            trace,
            config,
            policy,
            out: path,
            format,
        } => {
            let scenario = Scenario::load(&config)?;
            let trace = load_trace_csv(&trace)?;
            let report = simulate(&trace, &scenario, policy)?;
            write_file(&path, &render(&report, format))
        }
        Command::GenTrace { spec, out: path } => {
            let cfg = load_trace_spec(&spec)?;
            save_trace_csv(&path, &gen_trace(&cfg)?)
        }
        Command::Compare {
            trace,
            config,
            policies,
            out: format,
        } => {
            let scenario = Scenario::load(&config)?;
            let trace = load_trace_csv(&trace)?;
            let reports = compare(&trace, &scenario, &policies)?;
            emit(out, &render_comparison(&policies, &reports, format))
        }
        Command::Profile { overlap_profile } => {
            let p = match overlap_profile {
                Some(path) => load_overlap_profile(&path)?,
                None => OverlapProfile::default(),
            };
            emit(out, &render_profile(&p))
        }
        Command::BeamBench {
            instances,
            seed,
            max_width,
        } => {
            if max_width == 0 {
                return Err(Error::Config("max_width must be at least 1".into()));
            }
            let s = beam_bench(instances, seed, max_width);
            let saving = if s.brute_force > 0 {
                1.0 - s.inspected as f64 / s.brute_force as f64
            } else {
                0.0
            };
            emit(
                out,
                &format!(
                    "instances {}\nmismatches {}\ninspected {}\nbrute_force {}\nsaving {:.1}%\nskewed strictly fewer {}/{}\n",
                    s.instances,
                    s.mismatches,
                    s.inspected,
                    s.brute_force,
                    saving * 100.0,
                    s.skewed_strictly_fewer,
                    s.skewed
                ),
            )?;
            if s.mismatches > 0 {
                return Err(Error::Check(format!(
                    "{} instances disagree with brute force",
                    s.mismatches
                )));
            }
            Ok(())
        }
    }
}
