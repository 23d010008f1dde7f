//! Latency and throughput metrics computed from a [`SimResult`].

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{RequestClass, RequestState, SLOTargets};
use crate::sim::{Counters, RequestRecord, SimResult};

pub const REPORT_SCHEMA: &str = "xsim.report/1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub requests: u64,
    pub completed: u64,
    pub failed: u64,
    /// `None` when no request completed.
    pub ttft_p50_ms: Option<f64>,
    pub ttft_p95_ms: Option<f64>,
    pub ttft_p99_ms: Option<f64>,
    pub tpot_mean_ms: Option<f64>,
    pub tpot_p99_ms: Option<f64>,
    pub throughput_tokens_per_s: f64,
    pub serving_rate_rps: f64,
    pub goodput_rps: f64,
    pub slo_attainment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    /// First arrival to last completion.
    pub window_ms: f64,
    pub all: ClassMetrics,
    pub online: ClassMetrics,
    pub offline: ClassMetrics,
    pub counters: Counters,
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = libm::ceil(pct / 100.0 * sorted.len() as f64) as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn ttft_ms(r: &RequestRecord) -> Option<f64> {
    r.first_token_ms.map(|t| t - r.arrival_ms)
}

/// Mean inter-token time after the first token; `None` below two tokens.
pub fn tpot_ms(r: &RequestRecord) -> Option<f64> {
    match (r.first_token_ms, r.finish_ms) {
        (Some(f), Some(e)) if r.tokens_generated >= 2 => Some((e - f) / (r.tokens_generated - 1) as f64),
        _ => None,
    }
}

fn meets_slo(r: &RequestRecord, slo: Option<&SLOTargets>) -> bool {
    if r.state != RequestState::Complete {
        return false;
    }
    let (ttft_target, tpot_target) = match slo {
        Some(s) => (s.ttft_ms, s.tpot_ms),
        None => (r.slo_ttft_ms, r.slo_tpot_ms),
    };
    ttft_ms(r).is_some_and(|t| t <= ttft_target) && tpot_ms(r).is_none_or(|t| t <= tpot_target)
}

fn class_metrics<'a>(
    records: impl Iterator<Item = &'a RequestRecord>,
    window_ms: f64,
    slo: Option<&SLOTargets>,
) -> ClassMetrics {
    let mut m = ClassMetrics::default();
    let mut ttfts = Vec::new();
    let mut tpots = Vec::new();
    let mut tokens = 0u64;
    let mut good = 0u64;
    for r in records {
        m.requests += 1;
        match r.state {
            RequestState::Complete => {
                m.completed += 1;
                tokens += r.tokens_generated as u64;
                if let Some(t) = ttft_ms(r) {
                    ttfts.push(t);
                }
                if let Some(t) = tpot_ms(r) {
                    tpots.push(t);
                }
                if meets_slo(r, slo) {
                    good += 1;
                }
            }
            RequestState::Failed => m.failed += 1,
            _ => {}
        }
    }
    ttfts.sort_by(f64::total_cmp);
    tpots.sort_by(f64::total_cmp);
    m.ttft_p50_ms = nearest_rank(&ttfts, 50.0);
    m.ttft_p95_ms = nearest_rank(&ttfts, 95.0);
    m.ttft_p99_ms = nearest_rank(&ttfts, 99.0);
    m.tpot_p99_ms = nearest_rank(&tpots, 99.0);
    m.tpot_mean_ms = (!tpots.is_empty()).then(|| tpots.iter().sum::<f64>() / tpots.len() as f64);
    if window_ms > 0.0 {
        let secs = window_ms / 1000.0;
        m.throughput_tokens_per_s = tokens as f64 / secs;
        m.serving_rate_rps = m.completed as f64 / secs;
        m.goodput_rps = good as f64 / secs;
    }
    if m.requests > 0 {
        m.slo_attainment = good as f64 / m.requests as f64;
    }
    m
}

/// Per-class report. `slo` overrides the per-request targets when given.
pub fn compute_metrics(result: &SimResult, slo: Option<&SLOTargets>) -> Report {
    let first = result.requests.iter().map(|r| r.arrival_ms).min_by(f64::total_cmp);
    let last = result
        .requests
        .iter()
        .filter_map(|r| r.finish_ms)
        .max_by(f64::total_cmp);
    let window_ms = match (first, last) {
        (Some(a), Some(b)) if b > a => b - a,
        _ => 0.0,
    };
    let of = |class: Option<RequestClass>| {
        class_metrics(
            result
                .requests
                .iter()
                .filter(move |r| class.is_none_or(|c| r.class == c)),
            window_ms,
            slo,
        )
    };
    Report {
        schema: String::from(REPORT_SCHEMA),
        window_ms,
        all: of(None),
        online: of(Some(RequestClass::Online)),
        offline: of(Some(RequestClass::Offline)),
        counters: result.counters.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Modality;
    use alloc::vec;

    fn rec(id: u64, arrival: f64, first: f64, finish: f64, tokens: u32) -> RequestRecord {
        RequestRecord {
            id,
            class: RequestClass::Online,
            modality: Modality::Text,
            arrival_ms: arrival,
            input_tokens: 100,
            image_units: 0,
            output_tokens: tokens,
            tokens_generated: tokens,
            slo_ttft_ms: 2000.0,
            slo_tpot_ms: 100.0,
            state: RequestState::Complete,
            first_token_ms: Some(first),
            finish_ms: Some(finish),
            token_times_ms: vec![],
        }
    }

    fn result(requests: Vec<RequestRecord>) -> SimResult {
        SimResult {
            requests,
            ..SimResult::empty()
        }
    }

    #[test]
    fn single_request() {
        let r = rec(0, 0.0, 100.0, 1100.0, 11);
        assert_eq!(ttft_ms(&r), Some(100.0));
        assert_eq!(tpot_ms(&r), Some(100.0));
        let rep = compute_metrics(&result(vec![r]), None);
        assert_eq!(rep.all.ttft_p50_ms, Some(100.0));
        assert_eq!(rep.all.slo_attainment, 1.0);
    }

    #[test]
    fn empty_flags() {
        let rep = compute_metrics(&result(vec![]), None);
        assert_eq!(rep.all.slo_attainment, 0.0);
        assert_eq!(rep.all.ttft_p99_ms, None);
    }

    #[test]
    fn goodput_counting() {
        // 10 requests over 10 s; 3 miss the TTFT target.
        let mut rs = Vec::new();
        for i in 0..10u64 {
            let ttft = if i < 3 { 5000.0 } else { 100.0 };
            let a = i as f64 * 100.0;
            rs.push(rec(i, a, a + ttft, a + ttft + 100.0, 2));
        }
        rs[0].finish_ms = Some(10_000.0);
        let rep = compute_metrics(&result(rs), None);
        assert!((rep.window_ms - 10_000.0).abs() < 1e-9);
        assert!((rep.all.goodput_rps - 0.7).abs() < 1e-12);
        assert!(rep.all.goodput_rps <= rep.all.serving_rate_rps);
    }

    #[test]
    fn nearest_rank_rule() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(nearest_rank(&v, 50.0), Some(2.0));
        assert_eq!(nearest_rank(&v, 99.0), Some(4.0));
        assert_eq!(nearest_rank(&v, 0.0), Some(1.0));
    }
}
