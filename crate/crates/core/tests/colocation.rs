use proptest::prelude::*;
use xsim_core::metrics::ttft_ms;
use xsim_core::model::{estimate_chunk_time, Modality, ModelProfile, RequestClass, RequestState, TraceRecord};
use xsim_core::pd::PoolTag;
use xsim_core::sim::{run, step_duration, ClusterConfig, ColocMode, Policies, SimConfig};

const BUDGET: u32 = 1024;

fn record(class: RequestClass, arrival_ms: f64, input: u32, output: u32) -> TraceRecord {
    let slo = if class == RequestClass::Online { 1.0 } else { 1e6 };
    TraceRecord {
        arrival_ms,
        class,
        modality: Modality::Text,
        input_tokens: input,
        image_units: 0,
        output_tokens: output,
        slo_ttft_ms: 2000.0 * slo,
        slo_tpot_ms: 100.0 * slo,
    }
}

fn cluster() -> ClusterConfig {
    ClusterConfig::uniform(&[PoolTag::P, PoolTag::P, PoolTag::D, PoolTag::D], 1_000_000, BUDGET)
}

fn policies() -> Policies {
    Policies {
        coloc: ColocMode::Colocation,
        ..Policies::default()
    }
}

fn online_ttfts(trace: &[TraceRecord]) -> Vec<f64> {
    let r = run(
        trace,
        &cluster(),
        &policies(),
        &ModelProfile::default(),
        &SimConfig::default(),
    )
    .unwrap();
    r.check_invariants().unwrap();
    let mut v: Vec<(f64, f64)> = r
        .requests
        .iter()
        .filter(|x| x.class == RequestClass::Online)
        .map(|x| (x.arrival_ms, ttft_ms(x).expect("online request finished")))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v.into_iter().map(|x| x.1).collect()
}

fn arb_mix() -> impl Strategy<Value = (Vec<TraceRecord>, Vec<TraceRecord>)> {
    (
        prop::collection::vec((0.0f64..400.0, 16u32..600, 1u32..30), 1..12),
        prop::collection::vec((0.0f64..200.0, 200u32..4000, 1u32..60), 0..16),
    )
        .prop_map(|(on, off)| {
            let mut t = 0.0;
            let online = on
                .into_iter()
                .map(|(gap, i, o)| {
                    t += gap;
                    record(RequestClass::Online, t, i, o)
                })
                .collect();
            let mut t = 0.0;
            let offline = off
                .into_iter()
                .map(|(gap, i, o)| {
                    t += gap;
                    record(RequestClass::Offline, t, i, o)
                })
                .collect();
            (online, offline)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn offline_work_delays_online_ttft_by_at_most_one_step((online, offline) in arb_mix()) {
        let p = ModelProfile::default();
        let longest = offline.iter().map(|r| r.input_tokens).max().unwrap_or(0);
        let chunk = estimate_chunk_time(longest.saturating_sub(BUDGET), BUDGET, &p) + p.prefill_c;
        // One step: the longest offline chunk plus decodes capped at the TPOT target.
        let bound = step_duration(chunk + 100.0, &p, &SimConfig::default()) + 1e-3;
        let alone = online_ttfts(&online);
        let mut mixed = online.clone();
        mixed.extend(offline);
        mixed.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
        let together = online_ttfts(&mixed);
        for (a, b) in alone.iter().zip(&together) {
            prop_assert!(b - a <= bound, "ttft {a} -> {b}, bound {bound}");
        }
    }

    #[test]
    fn offline_requests_finish_when_the_horizon_allows((online, offline) in arb_mix()) {
        let mut mixed = online;
        mixed.extend(offline);
        mixed.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
        for coloc in [ColocMode::StaticPd, ColocMode::OnlinePriority, ColocMode::Colocation] {
            let pol = Policies { coloc, ..Policies::default() };
            let r = run(&mixed, &cluster(), &pol, &ModelProfile::default(), &SimConfig::default()).unwrap();
            prop_assert!(r.requests.iter().all(|x| x.state == RequestState::Complete), "{:?}", coloc);
        }
    }
}
