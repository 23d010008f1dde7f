//! Dynamic prefill/decode disaggregation: elastic pools, TTFT prediction,
//! SLO-aware dispatch, role switching and per-instance batch construction.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    estimate_chunk_time, estimate_decode_step_time, estimate_prefill_time, InstanceId, ModelProfile, RequestId,
};

/// Pool membership of an instance. `PtoD` instances were prefill instances
/// now serving decode; `DtoP` the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PoolTag {
    P,
    D,
    PtoD,
    DtoP,
    E,
}

impl PoolTag {
    pub fn prefill_duty(self) -> bool {
        matches!(self, PoolTag::P | PoolTag::DtoP)
    }

    pub fn decode_duty(self) -> bool {
        matches!(self, PoolTag::D | PoolTag::PtoD)
    }
}

const STATS_WINDOW: usize = 64;
const EMA_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub running_tokens: u64,
    pub queued_prefill_tokens: u64,
    pub kv_used_tokens: u64,
    pub ttft_samples: VecDeque<f64>,
    pub tpot_samples: VecDeque<f64>,
    pub token_interval_ema_ms: Option<f64>,
    pub idle_ms: f64,
}

fn push_window(w: &mut VecDeque<f64>, v: f64) {
    if w.len() == STATS_WINDOW {
        w.pop_front();
    }
    w.push_back(v);
}

impl InstanceStats {
    pub fn record_ttft(&mut self, ms: f64) {
        push_window(&mut self.ttft_samples, ms);
    }

    pub fn record_tpot(&mut self, ms: f64) {
        push_window(&mut self.tpot_samples, ms);
    }

    /// Folds one token-emission interval into the EMA.
    pub fn record_token_interval(&mut self, ms: f64) {
        self.token_interval_ema_ms = Some(match self.token_interval_ema_ms {
            None => ms,
            Some(prev) => prev + EMA_WEIGHT * (ms - prev),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PDConfig {
    pub min_decode_instances: u32,
    pub decode_capacity_headroom: f64,
    pub idle_prefill_threshold_ms: f64,
    pub switch_cooldown_ms: f64,
    /// Share of a prefill instance's token budget its retained decodes may use.
    pub origin_decode_fraction: f64,
}

impl Default for PDConfig {
    fn default() -> Self {
        PDConfig {
            min_decode_instances: 2,
            decode_capacity_headroom: 0.1,
            idle_prefill_threshold_ms: 2000.0,
            switch_cooldown_ms: 500.0,
            origin_decode_fraction: 0.25,
        }
    }
}

impl PDConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_decode_instances < 2 {
            return Err(Error::InvalidConfig("min_decode_instances must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.decode_capacity_headroom) || !(0.0..=1.0).contains(&self.origin_decode_fraction)
        {
            return Err(Error::InvalidConfig("PD fractions must lie in [0, 1]"));
        }
        if self.idle_prefill_threshold_ms < 0.0 || self.switch_cooldown_ms < 0.0 {
            return Err(Error::InvalidConfig("PD thresholds must be non-negative"));
        }
        Ok(())
    }
}

/// Scheduler-side snapshot of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceView {
    pub id: InstanceId,
    pub pool: PoolTag,
    pub healthy: bool,
    pub kv_capacity_tokens: u64,
    pub token_budget: u32,
    /// Remaining prompt tokens of each queued prefill, in queue order.
    pub queued_prefill: Vec<u32>,
    pub queued_encode_units: u32,
    pub stats: InstanceStats,
    pub last_switch_ms: Option<f64>,
}

impl InstanceView {
    pub fn new(id: InstanceId, pool: PoolTag, kv_capacity_tokens: u64, token_budget: u32) -> Self {
        InstanceView {
            id,
            pool,
            healthy: true,
            kv_capacity_tokens,
            token_budget,
            queued_prefill: Vec::new(),
            queued_encode_units: 0,
            stats: InstanceStats::default(),
            last_switch_ms: None,
        }
    }

    pub fn load_tokens(&self) -> u64 {
        self.stats.running_tokens + self.queued_prefill.iter().map(|t| *t as u64).sum::<u64>()
    }
}

/// Queueing delay of everything ahead plus the request's own prefill.
pub fn predict_ttft(input_tokens: u32, queued_prefill: &[u32], profile: &ModelProfile) -> f64 {
    queued_prefill
        .iter()
        .map(|l| estimate_prefill_time(*l, profile))
        .sum::<f64>()
        + estimate_prefill_time(input_tokens, profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrefillDispatch {
    Assign(InstanceId),
    NeedRoleSwitch,
}

fn best_by_ttft<'a>(
    input_tokens: u32,
    views: impl Iterator<Item = &'a InstanceView>,
    profile: &ModelProfile,
) -> Option<(InstanceId, f64)> {
    views
        .map(|v| (v.id, predict_ttft(input_tokens, &v.queued_prefill, profile)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Greedy SLO-aware placement: lightest predicted TTFT in `P`, then in
/// `DtoP`; if neither meets the target a role switch is needed.
pub fn dispatch_prefill(
    input_tokens: u32,
    views: &[InstanceView],
    slo_ttft_ms: f64,
    profile: &ModelProfile,
) -> Result<PrefillDispatch> {
    if !views.iter().any(|v| v.healthy) {
        return Err(Error::NoCapacity);
    }
    for pool in [PoolTag::P, PoolTag::DtoP] {
        let pool_views = views.iter().filter(|v| v.healthy && v.pool == pool);
        if let Some((id, ttft)) = best_by_ttft(input_tokens, pool_views, profile) {
            if ttft <= slo_ttft_ms {
                return Ok(PrefillDispatch::Assign(id));
            }
        }
    }
    Ok(PrefillDispatch::NeedRoleSwitch)
}

/// Placement when no instance meets the target: minimum predicted TTFT over
/// prefill-duty instances, or over every healthy instance if none exist.
pub fn best_effort_prefill(input_tokens: u32, views: &[InstanceView], profile: &ModelProfile) -> Option<InstanceId> {
    best_by_ttft(
        input_tokens,
        views.iter().filter(|v| v.healthy && v.pool.prefill_duty()),
        profile,
    )
    .or_else(|| best_by_ttft(input_tokens, views.iter().filter(|v| v.healthy), profile))
    .map(|(id, _)| id)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeNeed {
    /// KV tokens the request brings (already resident on the origin).
    pub kv_tokens: u64,
    /// Batch tokens one decode step of this request consumes.
    pub step_tokens: u32,
    pub origin: Option<InstanceId>,
    pub slo_tpot_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeDispatch {
    Assign(InstanceId),
    Wait,
}

/// Step time of a prefill-duty instance running `decode_tokens` of decode
/// next to a prefill chunk that fills the rest of its budget.
pub fn mixed_step_ms(decode_tokens: u64, kv_tokens: u64, token_budget: u32, profile: &ModelProfile) -> f64 {
    let chunk = (token_budget as u64).saturating_sub(decode_tokens) as u32;
    let prefill = if chunk > 0 {
        estimate_chunk_time(0, chunk, profile) + profile.prefill_c
    } else {
        0.0
    };
    let decode = estimate_decode_step_time(decode_tokens.max(1) as u32, kv_tokens, profile, false).unwrap_or(0.0);
    prefill + decode
}

/// Keeps the request on its origin when that avoids a KV transfer without
/// crowding the origin; otherwise picks the decode instance with the fewest
/// running tokens that still fits.
///
/// A prefill-duty origin keeps the request only within
/// `origin_decode_fraction` of its budget and only while a step mixing its
/// decodes with a full prefill chunk stays within the request's TPOT target.
pub fn dispatch_decode(
    need: &DecodeNeed,
    views: &[InstanceView],
    profile: &ModelProfile,
    cfg: &PDConfig,
) -> DecodeDispatch {
    if let Some(origin) = need.origin.and_then(|o| views.iter().find(|v| v.id == o)) {
        let running = origin.stats.running_tokens + need.step_tokens as u64;
        let fits = if origin.pool.decode_duty() {
            running <= origin.token_budget as u64
        } else {
            running as f64 <= origin.token_budget as f64 * cfg.origin_decode_fraction
                && mixed_step_ms(running, origin.stats.kv_used_tokens, origin.token_budget, profile) <= need.slo_tpot_ms
        };
        if origin.healthy && origin.stats.kv_used_tokens <= origin.kv_capacity_tokens && fits {
            return DecodeDispatch::Assign(origin.id);
        }
    }
    views
        .iter()
        .filter(|v| v.healthy && v.pool.decode_duty() && Some(v.id) != need.origin)
        .filter(|v| {
            v.stats.kv_used_tokens + need.kv_tokens <= v.kv_capacity_tokens
                && v.stats.running_tokens + need.step_tokens as u64 <= v.token_budget as u64
        })
        .min_by_key(|v| (v.stats.running_tokens, v.id))
        .map_or(DecodeDispatch::Wait, |v| DecodeDispatch::Assign(v.id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleChange {
    pub instance: InstanceId,
    pub from: PoolTag,
    pub to: PoolTag,
}

/// Heartbeat role rebalancing.
///
/// Prefill pressure returns a `PtoD` instance to prefill (else lends a `D`
/// instance as `DtoP`) while keeping the decode floor. Decode pressure pulls
/// back a `DtoP` instance (else lends an idle `P` instance as `PtoD`), always
/// leaving at least one prefill-duty instance. At most one change per
/// direction per call; instances inside their cooldown are skipped.
pub fn maybe_switch_roles(
    views: &[InstanceView],
    prefill_pressure: bool,
    slo_tpot_ms: f64,
    cfg: &PDConfig,
    now_ms: f64,
) -> Vec<RoleChange> {
    let cooled = |v: &InstanceView| v.healthy && v.last_switch_ms.is_none_or(|t| now_ms - t >= cfg.switch_cooldown_ms);
    let mut decode_count = views.iter().filter(|v| v.healthy && v.pool.decode_duty()).count() as u32;
    let mut prefill_count = views.iter().filter(|v| v.healthy && v.pool.prefill_duty()).count() as u32;
    let mut changes: Vec<RoleChange> = Vec::new();
    let lightest = |pool: PoolTag, extra: &dyn Fn(&InstanceView) -> bool| {
        views
            .iter()
            .filter(|v| v.pool == pool && cooled(v) && extra(v))
            .min_by_key(|v| (v.load_tokens(), v.id))
    };

    if prefill_pressure && decode_count > cfg.min_decode_instances {
        let pick = lightest(PoolTag::PtoD, &|_| true)
            .map(|v| (v, PoolTag::P))
            .or_else(|| lightest(PoolTag::D, &|_| true).map(|v| (v, PoolTag::DtoP)));
        if let Some((v, to)) = pick {
            changes.push(RoleChange {
                instance: v.id,
                from: v.pool,
                to,
            });
            decode_count -= 1;
            prefill_count += 1;
        }
    }
    let _ = decode_count;

    let kv_short = views.iter().any(|v| {
        v.healthy
            && v.pool.decode_duty()
            && v.kv_capacity_tokens > 0
            && v.stats.kv_used_tokens as f64 / v.kv_capacity_tokens as f64 > 1.0 - cfg.decode_capacity_headroom
    });
    let slow = views
        .iter()
        .any(|v| v.healthy && v.pool.decode_duty() && v.stats.token_interval_ema_ms.is_some_and(|e| e > slo_tpot_ms));
    let decode_work = views
        .iter()
        .any(|v| v.healthy && v.pool.decode_duty() && v.stats.running_tokens > 0);
    let idle_p = |v: &InstanceView| v.stats.idle_ms >= cfg.idle_prefill_threshold_ms && v.queued_prefill.is_empty();
    let idle_trigger = decode_work && views.iter().any(|v| v.healthy && v.pool == PoolTag::P && idle_p(v));

    if (kv_short || slow || idle_trigger) && prefill_count > 1 {
        let switched = |v: &InstanceView| !changes.iter().any(|c| c.instance == v.id);
        let pick = lightest(PoolTag::DtoP, &switched)
            .map(|v| (v, PoolTag::D))
            .or_else(|| lightest(PoolTag::P, &|v| switched(v) && idle_p(v)).map(|v| (v, PoolTag::PtoD)));
        if let Some((v, to)) = pick {
            changes.push(RoleChange {
                instance: v.id,
                from: v.pool,
                to,
            });
        }
    }
    changes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeItem {
    pub id: RequestId,
    pub step_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillItem {
    pub id: RequestId,
    /// Tokens already prefilled.
    pub context: u32,
    pub remaining: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: RequestId,
    pub context: u32,
    pub tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeWork {
    pub id: RequestId,
    pub images: u32,
}

/// One iteration's worth of work for an instance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    /// Incoming migrations drained from the migration queue.
    pub transfers: Vec<RequestId>,
    pub decodes: Vec<RequestId>,
    pub decode_tokens: u32,
    pub chunks: Vec<Chunk>,
    pub encodes: Vec<EncodeWork>,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.decodes.is_empty() && self.chunks.is_empty() && self.encodes.is_empty()
    }

    pub fn chunk_tokens(&self) -> u32 {
        self.chunks.iter().map(|c| c.tokens).sum()
    }

    pub fn encode_images(&self) -> u32 {
        self.encodes.iter().map(|e| e.images).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalLimits {
    pub token_budget: u32,
    pub kv_free_tokens: u64,
}

pub(crate) fn fill_chunks(prefills: &[PrefillItem], mut budget: u32, mut kv_free: u64, plan: &mut BatchPlan) {
    for p in prefills {
        if budget == 0 || kv_free == 0 {
            break;
        }
        let s = budget.min(p.remaining).min(kv_free.min(u32::MAX as u64) as u32);
        if s == 0 {
            continue;
        }
        plan.chunks.push(Chunk {
            id: p.id,
            context: p.context,
            tokens: s,
        });
        budget -= s;
        kv_free -= s as u64;
    }
}

/// Builds the next batch: migrations first, then every resident decode, then
/// chunked prefill in queue order up to the remaining token budget. Decodes
/// are never dropped to make room for prefill.
pub fn local_schedule(
    migration_queue: &[RequestId],
    decodes: &[DecodeItem],
    prefills: &[PrefillItem],
    limits: &LocalLimits,
) -> BatchPlan {
    let mut plan = BatchPlan {
        transfers: migration_queue.to_vec(),
        ..BatchPlan::default()
    };
    for d in decodes {
        plan.decodes.push(d.id);
        plan.decode_tokens += d.step_tokens;
    }
    let budget = limits.token_budget.saturating_sub(plan.decode_tokens);
    fill_chunks(prefills, budget, limits.kv_free_tokens, &mut plan);
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn prof() -> ModelProfile {
        ModelProfile {
            prefill_a: 1e-6,
            prefill_b: 0.1,
            prefill_c: 10.0,
            ..ModelProfile::default()
        }
    }

    fn view(id: InstanceId, pool: PoolTag, queue: Vec<u32>) -> InstanceView {
        InstanceView {
            queued_prefill: queue,
            ..InstanceView::new(id, pool, 100_000, 512)
        }
    }

    #[test]
    fn predict_examples() {
        let p = prof();
        assert!((predict_ttft(1000, &[], &p) - 111.0).abs() < 1e-9);
        assert!((predict_ttft(1000, &[1000], &p) - 222.0).abs() < 1e-9);
    }

    #[test]
    fn dispatch_prefill_paths() {
        let p = prof();
        let views = vec![view(1, PoolTag::P, vec![]), view(2, PoolTag::P, vec![1000])];
        assert_eq!(
            dispatch_prefill(1000, &views, 150.0, &p).unwrap(),
            PrefillDispatch::Assign(1)
        );

        let views = vec![
            view(1, PoolTag::P, vec![1000]),
            view(2, PoolTag::P, vec![1000]),
            view(3, PoolTag::DtoP, vec![]),
        ];
        assert_eq!(
            dispatch_prefill(1000, &views, 150.0, &p).unwrap(),
            PrefillDispatch::Assign(3)
        );
        assert_eq!(
            dispatch_prefill(1000, &views, 50.0, &p).unwrap(),
            PrefillDispatch::NeedRoleSwitch
        );

        let mut sick = views.clone();
        sick.iter_mut().for_each(|v| v.healthy = false);
        assert_eq!(dispatch_prefill(1000, &sick, 50.0, &p), Err(Error::NoCapacity));
    }

    #[test]
    fn dispatch_decode_paths() {
        let cfg = PDConfig::default();
        let p = prof();
        let mut origin = view(0, PoolTag::P, vec![]);
        let need = DecodeNeed {
            kv_tokens: 1000,
            step_tokens: 1,
            origin: Some(0),
            slo_tpot_ms: 1000.0,
        };
        assert_eq!(
            dispatch_decode(&need, &[origin.clone()], &p, &cfg),
            DecodeDispatch::Assign(0)
        );
        let tight = DecodeNeed {
            slo_tpot_ms: 20.0,
            ..need
        };
        assert_eq!(
            dispatch_decode(&tight, &[origin.clone()], &p, &cfg),
            DecodeDispatch::Wait
        );

        origin.stats.running_tokens = 512;
        let mut d1 = view(1, PoolTag::D, vec![]);
        d1.stats.running_tokens = 500;
        let mut d2 = view(2, PoolTag::D, vec![]);
        d2.stats.running_tokens = 300;
        let views = vec![origin.clone(), d1.clone(), d2.clone()];
        assert_eq!(dispatch_decode(&need, &views, &p, &cfg), DecodeDispatch::Assign(2));

        d1.stats.kv_used_tokens = 99_500;
        d2.stats.kv_used_tokens = 99_500;
        assert_eq!(
            dispatch_decode(&need, &[origin, d1, d2], &p, &cfg),
            DecodeDispatch::Wait
        );
    }

    #[test]
    fn role_switch_floor() {
        let cfg = PDConfig::default();
        let views = vec![
            view(0, PoolTag::P, vec![]),
            view(1, PoolTag::D, vec![]),
            view(2, PoolTag::PtoD, vec![]),
        ];
        assert!(maybe_switch_roles(&views, true, 100.0, &cfg, 0.0).is_empty());
    }

    #[test]
    fn role_switch_lightest_ptod() {
        let cfg = PDConfig::default();
        let mut i4 = view(4, PoolTag::PtoD, vec![]);
        i4.stats.running_tokens = 100;
        let mut i5 = view(5, PoolTag::PtoD, vec![]);
        i5.stats.running_tokens = 50;
        let views = vec![
            view(0, PoolTag::P, vec![]),
            view(1, PoolTag::D, vec![]),
            view(2, PoolTag::D, vec![]),
            i4,
            i5,
        ];
        let ch = maybe_switch_roles(&views, true, 100.0, &cfg, 0.0);
        assert_eq!(
            ch,
            vec![RoleChange {
                instance: 5,
                from: PoolTag::PtoD,
                to: PoolTag::P
            }]
        );
    }

    #[test]
    fn role_switch_idle_prefill_to_decode() {
        let cfg = PDConfig::default();
        let mut idle = view(0, PoolTag::P, vec![]);
        idle.stats.idle_ms = 10_000.0;
        let busy = view(1, PoolTag::P, vec![2000]);
        let mut d = view(2, PoolTag::D, vec![]);
        d.stats.token_interval_ema_ms = Some(150.0);
        d.stats.running_tokens = 40;
        let views = vec![idle, busy, d, view(3, PoolTag::D, vec![])];
        let ch = maybe_switch_roles(&views, false, 100.0, &cfg, 0.0);
        assert_eq!(
            ch,
            vec![RoleChange {
                instance: 0,
                from: PoolTag::P,
                to: PoolTag::PtoD
            }]
        );
    }

    #[test]
    fn role_switch_cooldown() {
        let cfg = PDConfig::default();
        let mut i5 = view(5, PoolTag::PtoD, vec![]);
        i5.last_switch_ms = Some(900.0);
        let views = vec![
            view(0, PoolTag::P, vec![]),
            view(1, PoolTag::D, vec![]),
            view(2, PoolTag::D, vec![]),
            i5,
        ];
        assert!(maybe_switch_roles(&views, true, 100.0, &cfg, 1000.0)
            .iter()
            .all(|c| c.instance != 5));
    }

    #[test]
    fn local_schedule_budget() {
        let decodes: Vec<_> = (0..100).map(|i| DecodeItem { id: i, step_tokens: 1 }).collect();
        let prefills = [PrefillItem {
            id: 500,
            context: 0,
            remaining: 1000,
        }];
        let limits = LocalLimits {
            token_budget: 512,
            kv_free_tokens: u64::MAX,
        };
        let plan = local_schedule(&[], &decodes, &prefills, &limits);
        assert_eq!(plan.decodes.len(), 100);
        assert_eq!(
            plan.chunks,
            vec![Chunk {
                id: 500,
                context: 0,
                tokens: 412
            }]
        );

        let plan = local_schedule(&[], &[], &prefills, &limits);
        assert_eq!(plan.chunk_tokens(), 512);

        let small = LocalLimits {
            token_budget: 50,
            kv_free_tokens: u64::MAX,
        };
        let plan = local_schedule(&[7], &decodes, &prefills, &small);
        assert_eq!(plan.decodes.len(), 100);
        assert!(plan.chunks.is_empty());
        assert_eq!(plan.transfers, vec![7]);
    }
}
