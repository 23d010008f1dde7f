//! Hybrid encode/prefill/decode disaggregation for multimodal requests.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::compute_metrics;
use crate::model::{estimate_decode_step_time, estimate_encode_time, InstanceId, ModelProfile, TraceRecord};
use crate::pd::{fill_chunks, predict_ttft, BatchPlan, DecodeItem, EncodeWork, InstanceView, PoolTag, PrefillItem};
use crate::sim::{run, ClusterConfig, EpdMode, Policies, SimConfig};

/// Requests used when choosing a strategy.
pub const PROFILING_WINDOW: usize = 100;
pub const DEFAULT_TOKENS_PER_IMAGE: u32 = 256;

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EPDStrategy {
    /// Encode, prefill and decode each on their own pool.
    E_P_D,
    /// Encode fused with prefill on the P pool.
    EP_D,
    /// Encode fused with decode on the D pool.
    ED_P,
}

impl EPDStrategy {
    pub const ALL: [EPDStrategy; 3] = [EPDStrategy::E_P_D, EPDStrategy::EP_D, EPDStrategy::ED_P];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EPDLimits {
    pub max_encode_batch: u32,
    pub token_budget: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileBounds {
    pub max_encode_batch: u32,
    pub max_token_budget: u32,
    /// Resident KV assumed while profiling the decode budget.
    pub decode_kv_tokens: u64,
    pub graph_mode: bool,
}

impl Default for ProfileBounds {
    fn default() -> Self {
        ProfileBounds {
            max_encode_batch: 64,
            max_token_budget: 8192,
            decode_kv_tokens: 0,
            graph_mode: false,
        }
    }
}

/// Largest `b` in `0..=upper` with `cost(b) < limit`, for `cost`
/// non-decreasing. Returns 0 when even `cost(1)` reaches the limit.
pub fn max_below(upper: u32, limit: f64, cost: impl Fn(u32) -> f64) -> u32 {
    let (mut lo, mut hi) = (0u32, upper);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if cost(mid) < limit {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Profiles the encode batch cap and token budget so that either batch alone
/// stays strictly under the TPOT target.
pub fn profile_limits(profile: &ModelProfile, tpot_slo_ms: f64, bounds: &ProfileBounds) -> EPDLimits {
    let max_encode_batch = max_below(bounds.max_encode_batch, tpot_slo_ms, |b| {
        estimate_encode_time(b, profile)
    });
    let token_budget = max_below(bounds.max_token_budget, tpot_slo_ms, |b| {
        estimate_decode_step_time(b.max(1), bounds.decode_kv_tokens, profile, bounds.graph_mode)
            .unwrap_or(f64::INFINITY)
    });
    EPDLimits {
        max_encode_batch,
        token_budget,
    }
}

/// Stage-ordered batch assembly: running decodes, then prefill work with
/// in-progress prompts first, and encodes only when no prompt waits for
/// prefill. Without stage ordering everything pending goes in at once.
pub fn assemble_batch(
    decodes: &[DecodeItem],
    prefills: &[PrefillItem],
    encodes: &[EncodeWork],
    limits: &EPDLimits,
    kv_free_tokens: u64,
    stage_ordered: bool,
) -> BatchPlan {
    let mut plan = BatchPlan::default();
    for d in decodes {
        plan.decodes.push(d.id);
        plan.decode_tokens += d.step_tokens;
    }
    if !stage_ordered {
        fill_chunks(prefills, u32::MAX, kv_free_tokens, &mut plan);
        plan.encodes.extend_from_slice(encodes);
        return plan;
    }
    if !prefills.is_empty() {
        let mut ordered: Vec<PrefillItem> = prefills.iter().filter(|p| p.context > 0).copied().collect();
        ordered.extend(prefills.iter().filter(|p| p.context == 0));
        let budget = limits.token_budget.saturating_sub(plan.decode_tokens);
        fill_chunks(&ordered, budget, kv_free_tokens, &mut plan);
        return plan;
    }
    let mut room = limits.max_encode_batch;
    for e in encodes {
        if room == 0 {
            break;
        }
        let take = e.images.min(room);
        if take > 0 {
            plan.encodes.push(EncodeWork { id: e.id, images: take });
            room -= take;
        }
    }
    plan
}

/// Where each phase of a multimodal request runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub strategy: EPDStrategy,
    pub encode: InstanceId,
    pub encode_pool: PoolTag,
    pub prefill: InstanceId,
    pub prefill_pool: PoolTag,
    /// Fixed decode instance, or `None` to let decode dispatch choose.
    pub decode: Option<InstanceId>,
    pub decode_pool: PoolTag,
}

fn lightest_encoder<'a>(views: impl Iterator<Item = &'a InstanceView>) -> Option<&'a InstanceView> {
    views.min_by_key(|v| (v.queued_encode_units, v.stats.running_tokens, v.id))
}

/// Places the phases of a multimodal request. A strategy whose pool is empty
/// falls back to the separate-pool layout on whatever pools exist.
pub fn dispatch_multimodal(
    prompt_tokens: u32,
    image_units: u32,
    strategy: EPDStrategy,
    views: &[InstanceView],
    profile: &ModelProfile,
) -> Option<Placement> {
    let healthy = || views.iter().filter(|v| v.healthy);
    let best_prefill = |extra_ms: &dyn Fn(&InstanceView) -> f64| {
        healthy()
            .filter(|v| v.pool.prefill_duty())
            .map(|v| (v, predict_ttft(prompt_tokens, &v.queued_prefill, profile) + extra_ms(v)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)))
            .map(|(v, _)| v)
    };
    let prefill = best_prefill(&|_| 0.0)?;
    let separate = |enc: Option<&InstanceView>| {
        let enc = enc.unwrap_or(prefill);
        Placement {
            strategy: EPDStrategy::E_P_D,
            encode: enc.id,
            encode_pool: enc.pool,
            prefill: prefill.id,
            prefill_pool: prefill.pool,
            decode: None,
            decode_pool: PoolTag::D,
        }
    };
    match strategy {
        EPDStrategy::E_P_D => Some(separate(lightest_encoder(healthy().filter(|v| v.pool == PoolTag::E)))),
        EPDStrategy::EP_D => {
            let fused = best_prefill(&|v| estimate_encode_time(v.queued_encode_units + image_units, profile))?;
            Some(Placement {
                strategy,
                encode: fused.id,
                encode_pool: fused.pool,
                prefill: fused.id,
                prefill_pool: fused.pool,
                decode: None,
                decode_pool: PoolTag::D,
            })
        }
        EPDStrategy::ED_P => match lightest_encoder(healthy().filter(|v| v.pool.decode_duty())) {
            Some(d) => Some(Placement {
                strategy,
                encode: d.id,
                encode_pool: d.pool,
                prefill: prefill.id,
                prefill_pool: prefill.pool,
                decode: Some(d.id),
                decode_pool: d.pool,
            }),
            None => Some(separate(lightest_encoder(healthy().filter(|v| v.pool == PoolTag::E)))),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub strategy: EPDStrategy,
    pub goodput_rps: f64,
    pub migrations: u64,
}

/// The default profiling sample: the first [`PROFILING_WINDOW`] requests.
pub fn profiling_sample(trace: &[TraceRecord]) -> &[TraceRecord] {
    &trace[..trace.len().min(PROFILING_WINDOW)]
}

/// Simulates `sample` under each strategy and keeps the one with the highest
/// goodput; ties go to fewer inter-instance transfers, then to the earlier
/// strategy in [`EPDStrategy::ALL`].
pub fn select_strategy(
    sample: &[TraceRecord],
    cluster: &ClusterConfig,
    policies: &Policies,
    profile: &ModelProfile,
    sim_config: &SimConfig,
) -> Result<(EPDStrategy, Vec<StrategyScore>)> {
    let mut scores = Vec::with_capacity(3);
    for s in EPDStrategy::ALL {
        let pol = Policies {
            epd: EpdMode::Hybrid(s),
            ..policies.clone()
        };
        let result = run(sample, cluster, &pol, profile, sim_config)?;
        let report = compute_metrics(&result, None);
        scores.push(StrategyScore {
            strategy: s,
            goodput_rps: report.all.goodput_rps,
            migrations: result.counters.kv_transfers + result.counters.image_transfers,
        });
    }
    let best = scores
        .iter()
        .min_by(|a, b| {
            b.goodput_rps
                .total_cmp(&a.goodput_rps)
                .then(a.migrations.cmp(&b.migrations))
                .then(a.strategy.cmp(&b.strategy))
        })
        .map(|s| s.strategy)
        .unwrap_or(EPDStrategy::E_P_D);
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn enc_prof(ms: f64) -> ModelProfile {
        ModelProfile {
            encode_per_image_ms: ms,
            ..ModelProfile::default()
        }
    }

    #[test]
    fn encode_limit_examples() {
        let b = ProfileBounds::default();
        assert_eq!(profile_limits(&enc_prof(10.0), 100.0, &b).max_encode_batch, 9);
        assert_eq!(profile_limits(&enc_prof(200.0), 100.0, &b).max_encode_batch, 0);
    }

    #[test]
    fn token_budget_is_strict() {
        let p = ModelProfile::default();
        let b = ProfileBounds::default();
        let lim = profile_limits(&p, 100.0, &b);
        let t = |n: u32| estimate_decode_step_time(n, 0, &p, false).unwrap();
        assert!(t(lim.token_budget) < 100.0);
        assert!(t(lim.token_budget + 1) >= 100.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn binary_search_matches_scan(steps in proptest::collection::vec(0.0f64..5.0, 1..40), limit in 0.0f64..60.0) {
            let mut table = vec![0.0];
            for s in &steps {
                let last = *table.last().unwrap();
                table.push(last + s);
            }
            let upper = steps.len() as u32;
            let cost = |b: u32| table[b as usize];
            let scan = (1..=upper).take_while(|b| cost(*b) < limit).last().unwrap_or(0);
            prop_assert_eq!(max_below(upper, limit, cost), scan);
        }
    }

    #[test]
    fn stage_order_examples() {
        let decodes = [
            DecodeItem { id: 1, step_tokens: 1 },
            DecodeItem { id: 2, step_tokens: 1 },
        ];
        let prefills = [PrefillItem {
            id: 3,
            context: 200,
            remaining: 200,
        }];
        let encodes = [
            EncodeWork { id: 4, images: 1 },
            EncodeWork { id: 5, images: 1 },
            EncodeWork { id: 6, images: 1 },
        ];
        let lim = EPDLimits {
            max_encode_batch: 4,
            token_budget: 512,
        };
        let plan = assemble_batch(&decodes, &prefills, &encodes, &lim, u64::MAX, true);
        assert_eq!(plan.decodes, vec![1, 2]);
        assert_eq!(plan.chunk_tokens(), 200);
        assert!(plan.encodes.is_empty());

        let plan = assemble_batch(&decodes, &[], &[], &lim, u64::MAX, true);
        assert_eq!(plan.decodes.len(), 2);
        assert!(plan.chunks.is_empty() && plan.encodes.is_empty());

        let five: Vec<_> = (0..5).map(|i| EncodeWork { id: i, images: 1 }).collect();
        let plan = assemble_batch(&[], &[], &five, &lim, u64::MAX, true);
        assert_eq!(plan.encode_images(), 4);

        let plan = assemble_batch(&decodes, &prefills, &five, &lim, u64::MAX, false);
        assert_eq!(plan.encode_images(), 5);
        assert_eq!(plan.chunk_tokens(), 200);
    }

    fn views() -> Vec<InstanceView> {
        vec![
            InstanceView::new(0, PoolTag::E, 100_000, 512),
            InstanceView::new(1, PoolTag::P, 100_000, 512),
            InstanceView::new(2, PoolTag::D, 100_000, 512),
        ]
    }

    #[test]
    fn placement_rules() {
        let p = ModelProfile::default();
        let v = views();
        let ep = dispatch_multimodal(600, 1, EPDStrategy::EP_D, &v, &p).unwrap();
        assert_eq!(ep.encode, ep.prefill);
        let epd = dispatch_multimodal(600, 1, EPDStrategy::E_P_D, &v, &p).unwrap();
        assert_eq!(
            (epd.encode_pool, epd.prefill_pool, epd.decode_pool),
            (PoolTag::E, PoolTag::P, PoolTag::D)
        );
        let no_e: Vec<_> = v.iter().filter(|x| x.pool != PoolTag::E).cloned().collect();
        let ed = dispatch_multimodal(600, 1, EPDStrategy::ED_P, &no_e, &p).unwrap();
        assert_eq!(ed.encode, 2);
        assert_eq!(ed.decode, Some(2));
        assert_eq!(ed.prefill, 1);
        let fallback = dispatch_multimodal(600, 1, EPDStrategy::E_P_D, &no_e, &p).unwrap();
        assert_eq!(fallback.encode, 1);
    }
}
