use proptest::prelude::*;
use xsim::report::{render, ReportFormat};
use xsim::workload::{gen_trace, read_trace_csv, write_trace_csv, Burst, LengthDist, TraceConfig};
use xsim_core::metrics::{compute_metrics, Report};
use xsim_core::model::ModelProfile;
use xsim_core::pd::PoolTag;
use xsim_core::sim::{run, ClusterConfig, Policies, SimConfig};

fn arb_config() -> impl Strategy<Value = TraceConfig> {
    (
        any::<u64>(),
        1usize..120,
        0.5f64..50.0,
        any::<bool>(),
        (1u32..500, 0u32..2000),
        0.0f64..=1.0,
        0.0f64..=1.0,
    )
        .prop_map(|(seed, count, rate_rps, bursty, (lo, extra), off, mm)| TraceConfig {
            seed,
            count,
            rate_rps,
            burst: if bursty {
                Burst::TwoState {
                    high_rate_rps: rate_rps * 3.0,
                    low_rate_rps: rate_rps / 2.0,
                    mean_dwell_ms: 500.0,
                }
            } else {
                Burst::None
            },
            input: LengthDist::Uniform { lo, hi: lo + extra },
            output: LengthDist::Lognormal {
                mu: 4.0,
                sigma: 0.8,
                cap: 512,
            },
            images: LengthDist::Uniform { lo: 1, hi: 4 },
            offline_fraction: off,
            multimodal_fraction: mm,
            ..TraceConfig::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_traces_are_sorted_and_survive_csv(cfg in arb_config()) {
        let t = gen_trace(&cfg).unwrap();
        prop_assert_eq!(t.len(), cfg.count);
        prop_assert!(t.windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms));
        prop_assert_eq!(gen_trace(&cfg).unwrap(), t.clone());
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &t).unwrap();
        prop_assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn json_report_round_trips(cfg in arb_config()) {
        let t = gen_trace(&TraceConfig { count: cfg.count.min(40), ..cfg }).unwrap();
        let cluster = ClusterConfig::uniform(&[PoolTag::P, PoolTag::D, PoolTag::D], 200_000, 2048);
        let r = run(&t, &cluster, &Policies::default(), &ModelProfile::default(), &SimConfig::default()).unwrap();
        let report = compute_metrics(&r, None);
        let back: Report = serde_json::from_str(&render(&report, ReportFormat::Json)).unwrap();
        prop_assert_eq!(back, report.clone());
        let csv = render(&report, ReportFormat::Csv);
        prop_assert_eq!(csv.lines().count(), 4);
    }
}
