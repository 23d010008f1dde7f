//! Online/offline co-location: pool classification, roofline-balanced
//! offline admission, chunk-boundary preemption and offline decode
//! migration.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{estimate_decode_step_time, ModelProfile, RequestClass, RequestId};
use crate::pd::{InstanceView, PoolTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    LatencyRelaxed,
    LatencyStrict,
}

impl From<PoolTag> for PoolKind {
    fn from(tag: PoolTag) -> Self {
        if tag.decode_duty() {
            PoolKind::LatencyStrict
        } else {
            PoolKind::LatencyRelaxed
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColocConfig {
    /// Idle time after which a relaxed instance may take offline decodes.
    pub idle_threshold_ms: f64,
}

impl Default for ColocConfig {
    fn default() -> Self {
        ColocConfig {
            idle_threshold_ms: 200.0,
        }
    }
}

/// Roofline utilizations of a decode batch, normalized so the binding
/// resource sits at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSnapshot {
    pub compute_util: f64,
    pub memory_util: f64,
}

impl UtilizationSnapshot {
    pub fn of(batch_tokens: u64, kv_tokens: u64, profile: &ModelProfile) -> Self {
        let compute = profile.decode_alpha * batch_tokens as f64;
        let memory = profile.decode_beta * kv_tokens as f64;
        let base = compute.max(memory);
        if base <= 0.0 {
            return UtilizationSnapshot {
                compute_util: 0.0,
                memory_util: 0.0,
            };
        }
        UtilizationSnapshot {
            compute_util: compute / base,
            memory_util: memory / base,
        }
    }

    pub fn imbalance(&self) -> f64 {
        libm::fabs(self.compute_util - self.memory_util)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfflineCandidate {
    pub id: RequestId,
    pub step_tokens: u32,
    pub kv_tokens: u64,
}

/// Greedily admits the offline decode that best balances compute against
/// memory, as long as the step stays within the TPOT target and balance
/// improves. An empty current batch counts as maximally unbalanced.
pub fn select_offline_for_batch(
    candidates: &[OfflineCandidate],
    batch_tokens: u64,
    kv_tokens: u64,
    profile: &ModelProfile,
    graph_mode: bool,
    tpot_slo_ms: f64,
) -> Vec<RequestId> {
    let mut admitted = Vec::new();
    let mut taken = alloc::vec![false; candidates.len()];
    let (mut bt, mut kv) = (batch_tokens, kv_tokens);
    loop {
        let current = if bt == 0 {
            f64::INFINITY
        } else {
            UtilizationSnapshot::of(bt, kv, profile).imbalance()
        };
        let best = candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .filter_map(|(i, c)| {
                let nbt = bt + c.step_tokens as u64;
                let nkv = kv + c.kv_tokens;
                let step = estimate_decode_step_time(nbt.max(1) as u32, nkv, profile, graph_mode).ok()?;
                if step > tpot_slo_ms {
                    return None;
                }
                Some((i, UtilizationSnapshot::of(nbt, nkv, profile).imbalance()))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(candidates[a.0].id.cmp(&candidates[b.0].id)));
        match best {
            Some((i, imb)) if imb < current => {
                taken[i] = true;
                admitted.push(candidates[i].id);
                bt += candidates[i].step_tokens as u64;
                kv += candidates[i].kv_tokens;
            }
            _ => break,
        }
    }
    admitted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedPrefill {
    pub id: RequestId,
    pub class: RequestClass,
    /// Prompt tokens already computed.
    pub context: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreemptOutcome {
    /// New prefill queue order.
    pub order: Vec<RequestId>,
    /// Offline requests stopped at the current chunk boundary; their
    /// computed context is kept.
    pub interrupted: Vec<RequestId>,
    /// When the online request can start.
    pub online_start_ms: f64,
}

/// Puts an arriving online request ahead of all offline prefill work. The
/// running chunk is never cut short, so the online request starts when it
/// ends.
pub fn preempt(queue: &[QueuedPrefill], arriving_online: RequestId, chunk_end_ms: f64) -> PreemptOutcome {
    let mut order: Vec<RequestId> = queue
        .iter()
        .filter(|q| q.class == RequestClass::Online)
        .map(|q| q.id)
        .collect();
    order.push(arriving_online);
    order.extend(queue.iter().filter(|q| q.class == RequestClass::Offline).map(|q| q.id));
    let interrupted = queue
        .iter()
        .filter(|q| q.class == RequestClass::Offline && q.context > 0)
        .map(|q| q.id)
        .collect();
    PreemptOutcome {
        order,
        interrupted,
        online_start_ms: chunk_end_ms,
    }
}

/// Transfer time for moving an offline decode onto an idle relaxed
/// instance, or `None` when the target is busy or lacks KV room.
pub fn migrate_offline_decode(
    kv_tokens: u64,
    target: &InstanceView,
    cfg: &ColocConfig,
    bandwidth_tokens_per_ms: f64,
) -> Option<f64> {
    if !target.healthy || target.stats.idle_ms < cfg.idle_threshold_ms {
        return None;
    }
    if target.stats.kv_used_tokens + kv_tokens > target.kv_capacity_tokens {
        return None;
    }
    Some(kv_tokens as f64 / bandwidth_tokens_per_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn prof() -> ModelProfile {
        ModelProfile {
            decode_alpha: 0.01,
            decode_beta: 1e-4,
            launch_overhead_ms: 1.0,
            ..ModelProfile::default()
        }
    }

    #[test]
    fn admits_compute_heavy_into_memory_bound() {
        let p = prof();
        // 10 tokens over 50k KV: memory-bound.
        let before = UtilizationSnapshot::of(10, 50_000, &p).imbalance();
        let cands = [
            OfflineCandidate {
                id: 1,
                step_tokens: 1,
                kv_tokens: 40_000,
            },
            OfflineCandidate {
                id: 2,
                step_tokens: 1,
                kv_tokens: 100,
            },
        ];
        let got = select_offline_for_batch(&cands, 10, 50_000, &p, false, 100.0);
        assert_eq!(got.first(), Some(&2));
        let after = UtilizationSnapshot::of(11, 50_100, &p).imbalance();
        assert!(after < before);
    }

    #[test]
    fn tpot_limit_binds() {
        let p = prof();
        // 5 + 1 launch = 6 ms already.
        let cands = [OfflineCandidate {
            id: 1,
            step_tokens: 1,
            kv_tokens: 10,
        }];
        assert!(select_offline_for_batch(&cands, 10, 50_000, &p, false, 6.0).is_empty());
        assert!(select_offline_for_batch(&[], 10, 50_000, &p, false, 100.0).is_empty());
    }

    #[test]
    fn preemption_order() {
        let q = [
            QueuedPrefill {
                id: 1,
                class: RequestClass::Offline,
                context: 512,
            },
            QueuedPrefill {
                id: 2,
                class: RequestClass::Offline,
                context: 0,
            },
        ];
        let out = preempt(&q, 9, 3.0);
        assert_eq!(out.order, vec![9, 1, 2]);
        assert_eq!(out.interrupted, vec![1]);
        assert_eq!(out.online_start_ms, 3.0);
        let online = [QueuedPrefill {
            id: 4,
            class: RequestClass::Online,
            context: 10,
        }];
        assert!(preempt(&online, 9, 3.0).interrupted.is_empty());
    }

    #[test]
    fn offline_migration_cost() {
        let mut v = InstanceView::new(0, PoolTag::P, 100_000, 512);
        v.stats.idle_ms = 500.0;
        let cfg = ColocConfig::default();
        assert_eq!(migrate_offline_decode(2048, &v, &cfg, 1024.0), Some(2.0));
        v.stats.kv_used_tokens = 99_000;
        assert_eq!(migrate_offline_decode(2048, &v, &cfg, 1024.0), None);
    }
}
