use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn xsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xsim")).args(args).output().unwrap()
}

fn s(p: PathBuf) -> String {
    p.to_str().unwrap().to_owned()
}

#[test]
fn simulate_writes_a_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path().join("r.json"));
    let o = xsim(&[
        "simulate",
        "--trace",
        &s(scenarios().join("bursty.csv")),
        "--config",
        &s(scenarios().join("bursty.toml")),
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v["all"]["completed"].as_u64().unwrap() > 0);
    assert!(v["window_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn compare_ranks_three_policies() {
    let o = xsim(&[
        "compare",
        "--trace",
        &s(scenarios().join("bursty.csv")),
        "--config",
        &s(scenarios().join("bursty.toml")),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with(['1', '2', '3'])).collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(text.lines().any(|l| l.starts_with("ordering: ")), "{text}");
}

#[test]
fn malformed_trace_row_exits_3_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    std::fs::write(
        &trace,
        "arrival_ms,class,modality,input_tokens,image_units,output_tokens,slo_ttft_ms,slo_tpot_ms\n\
         1.0,online,text,100,0,10,2000,100\n\
         2.0,online,text,-5,0,10,2000,100\n",
    )
    .unwrap();
    let o = xsim(&[
        "simulate",
        "--trace",
        &s(trace),
        "--config",
        &s(scenarios().join("bursty.toml")),
        "--out",
        &s(dir.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn missing_trace_exits_3() {
    let o = xsim(&[
        "simulate",
        "--trace",
        "/nonexistent/trace.csv",
        "--config",
        &s(scenarios().join("bursty.toml")),
        "--out",
        "/tmp/unused.json",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_config_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[sim]\nheartbeat_ms = \"often\"\n").unwrap();
    let trace = s(scenarios().join("bursty.csv"));
    let out = s(dir.path().join("r.json"));
    let o = xsim(&["simulate", "--trace", &trace, "--config", &s(cfg), "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let o = xsim(&[
        "simulate",
        "--trace",
        &trace,
        "--config",
        &s(scenarios().join("bursty.toml")),
        "--out",
        &out,
        "--format",
        "yaml",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(xsim(&["compare", "--policies", "fastest"]).status.code(), Some(2));
}

#[test]
fn gen_trace_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = s(scenarios().join("bursty.trace.toml"));
    let a = s(dir.path().join("a.csv"));
    let b = s(dir.path().join("b.csv"));
    assert_eq!(
        xsim(&["gen-trace", "--spec", &spec, "--out", &a]).status.code(),
        Some(0)
    );
    assert_eq!(
        xsim(&["gen-trace", "--spec", &spec, "--out", &b]).status.code(),
        Some(0)
    );
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(scenarios().join("bursty.csv")).unwrap()
    );
}

#[test]
fn profile_prints_the_overhead_breakdown() {
    let o = xsim(&["profile"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.contains("2.48") && text.contains("2.82") && text.contains("172.0"),
        "{text}"
    );
}

#[test]
fn beam_bench_reports_no_mismatches() {
    let o = xsim(&["beam-bench", "--instances", "200", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8(o.stdout).unwrap().contains("mismatches 0"));
}
