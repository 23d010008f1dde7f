//! Multi-level KV cache (HBM > DRAM > SSD), prefix matching, cache-aware
//! routing and fault-recovery planning.
//!
//! Blocks are identified by a hash chain over fixed-size token chunks, so two
//! prompts share a block exactly when they share the whole prefix up to and
//! including that block. Every block resident in HBM is also resident in
//! DRAM.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{estimate_prefill_time, InstanceId, ModelProfile, RequestClass, RequestId};
use crate::pd::predict_ttft;

pub const DEFAULT_BLOCK_SIZE: u32 = 16;

pub type BlockHash = u64;

/// Hash chain over the whole blocks of `tokens`.
pub fn block_hashes(tokens: &[u32], block_size: u32) -> Vec<BlockHash> {
    let bs = block_size.max(1) as usize;
    let mut parent: u64 = 0;
    tokens
        .chunks_exact(bs)
        .map(|chunk| {
            let mut h = fnv::FnvHasher::default();
            h.write_u64(parent);
            for t in chunk {
                h.write_u32(*t);
            }
            parent = h.finish();
            parent
        })
        .collect()
}

/// Tokens covered by the longest run of leading blocks present in `cached`.
pub fn prefix_match(tokens: &[u32], cached: &BTreeSet<BlockHash>, block_size: u32) -> u32 {
    let blocks = block_hashes(tokens, block_size)
        .into_iter()
        .take_while(|h| cached.contains(h))
        .count();
    blocks as u32 * block_size
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    Hbm,
    Dram,
    Ssd,
}

impl Tier {
    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct TierState {
    capacity_blocks: u64,
    /// hash → last-use tick
    blocks: BTreeMap<BlockHash, u64>,
    /// last-use tick → hash
    lru: BTreeMap<u64, BlockHash>,
}

impl TierState {
    fn contains(&self, h: BlockHash) -> bool {
        self.blocks.contains_key(&h)
    }

    fn touch(&mut self, h: BlockHash, tick: u64) {
        if let Some(old) = self.blocks.insert(h, tick) {
            self.lru.remove(&old);
        }
        self.lru.insert(tick, h);
    }

    fn remove(&mut self, h: BlockHash) -> bool {
        match self.blocks.remove(&h) {
            Some(t) => {
                self.lru.remove(&t);
                true
            }
            None => false,
        }
    }

    fn victim(&self) -> Option<BlockHash> {
        self.lru.values().next().copied()
    }

    fn is_full(&self) -> bool {
        self.blocks.len() as u64 >= self.capacity_blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCapacities {
    pub hbm_tokens: u64,
    pub dram_tokens: u64,
    pub ssd_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residency {
    pub inserted: Vec<(BlockHash, Tier)>,
    pub evicted: Vec<(BlockHash, Tier)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GetOutcome {
    pub hbm_hits: u32,
    pub dram_hits: u32,
    pub ssd_hits: u32,
    pub misses: u32,
}

/// Per-instance tiered block store with LRU eviction per tier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieredStore {
    block_size: u32,
    tiers: [TierState; 3],
    tick: u64,
}

impl TieredStore {
    pub fn new(block_size: u32, caps: TierCapacities) -> Self {
        let bs = block_size.max(1) as u64;
        let tier = |tokens: u64| TierState {
            capacity_blocks: tokens / bs,
            ..TierState::default()
        };
        TieredStore {
            block_size: block_size.max(1),
            tiers: [tier(caps.hbm_tokens), tier(caps.dram_tokens), tier(caps.ssd_tokens)],
            tick: 0,
        }
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn contains(&self, h: BlockHash, tier: Tier) -> bool {
        self.tiers[tier.idx()].contains(h)
    }

    pub fn occupancy_tokens(&self, tier: Tier) -> u64 {
        self.tiers[tier.idx()].blocks.len() as u64 * self.block_size as u64
    }

    pub fn capacity_tokens(&self, tier: Tier) -> u64 {
        self.tiers[tier.idx()].capacity_blocks * self.block_size as u64
    }

    pub fn resident(&self, tier: Tier) -> impl Iterator<Item = BlockHash> + '_ {
        self.tiers[tier.idx()].blocks.keys().copied()
    }

    /// Every block held in any tier.
    pub fn advertise(&self) -> BTreeSet<BlockHash> {
        self.tiers.iter().flat_map(|t| t.blocks.keys().copied()).collect()
    }

    /// Blocks that survive the loss of accelerator memory.
    pub fn host_resident(&self, h: BlockHash) -> bool {
        self.contains(h, Tier::Dram) || self.contains(h, Tier::Ssd)
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    fn insert_ssd(&mut self, h: BlockHash, out: &mut Residency) {
        let tick = self.next_tick();
        let ssd = &mut self.tiers[Tier::Ssd.idx()];
        if ssd.capacity_blocks == 0 {
            return;
        }
        if !ssd.contains(h) && ssd.is_full() {
            if let Some(v) = ssd.victim() {
                ssd.remove(v);
                out.evicted.push((v, Tier::Ssd));
            }
        }
        if !ssd.contains(h) {
            out.inserted.push((h, Tier::Ssd));
        }
        ssd.touch(h, tick);
    }

    fn insert_dram(&mut self, h: BlockHash, out: &mut Residency) {
        let tick = self.next_tick();
        if !self.tiers[Tier::Dram.idx()].contains(h) && self.tiers[Tier::Dram.idx()].is_full() {
            if let Some(v) = self.tiers[Tier::Dram.idx()].victim() {
                // Inclusion: the HBM copy goes first, then the DRAM copy is
                // demoted to SSD.
                if self.tiers[Tier::Hbm.idx()].remove(v) {
                    out.evicted.push((v, Tier::Hbm));
                }
                self.tiers[Tier::Dram.idx()].remove(v);
                out.evicted.push((v, Tier::Dram));
                self.insert_ssd(v, out);
            }
        }
        let dram = &mut self.tiers[Tier::Dram.idx()];
        if !dram.contains(h) {
            out.inserted.push((h, Tier::Dram));
        }
        dram.touch(h, tick);
    }

    fn insert_hbm(&mut self, h: BlockHash, out: &mut Residency) {
        self.insert_dram(h, out);
        let tick = self.next_tick();
        let hbm = &mut self.tiers[Tier::Hbm.idx()];
        if hbm.capacity_blocks == 0 {
            return;
        }
        if !hbm.contains(h) && hbm.is_full() {
            if let Some(v) = hbm.victim() {
                hbm.remove(v);
                out.evicted.push((v, Tier::Hbm));
            }
        }
        if !hbm.contains(h) {
            out.inserted.push((h, Tier::Hbm));
        }
        hbm.touch(h, tick);
    }

    /// Writes blocks into `tier`. HBM writes go through to DRAM.
    pub fn put_blocks(&mut self, blocks: &[BlockHash], tier: Tier) -> Result<Residency> {
        let cap = self.tiers[tier.idx()].capacity_blocks * self.block_size as u64;
        if cap < self.block_size as u64 {
            return Err(Error::BlockTooLarge {
                block: self.block_size as u64,
                capacity: cap,
            });
        }
        if tier == Tier::Hbm && self.tiers[Tier::Dram.idx()].capacity_blocks == 0 {
            return Err(Error::BlockTooLarge {
                block: self.block_size as u64,
                capacity: 0,
            });
        }
        let mut out = Residency::default();
        for h in blocks {
            match tier {
                Tier::Hbm => self.insert_hbm(*h, &mut out),
                Tier::Dram => self.insert_dram(*h, &mut out),
                Tier::Ssd => self.insert_ssd(*h, &mut out),
            }
        }
        Ok(out)
    }

    /// Looks blocks up, refreshing LRU order and promoting: SSD hits move
    /// into DRAM, and with `for_compute` every hit ends up in HBM.
    pub fn get_blocks(&mut self, hashes: &[BlockHash], for_compute: bool) -> (GetOutcome, Residency) {
        let mut outcome = GetOutcome::default();
        let mut res = Residency::default();
        for h in hashes {
            let h = *h;
            if self.contains(h, Tier::Hbm) {
                outcome.hbm_hits += 1;
                let tick = self.next_tick();
                self.tiers[Tier::Hbm.idx()].touch(h, tick);
                let tick = self.next_tick();
                self.tiers[Tier::Dram.idx()].touch(h, tick);
            } else if self.contains(h, Tier::Dram) {
                outcome.dram_hits += 1;
                if for_compute && self.tiers[Tier::Hbm.idx()].capacity_blocks > 0 {
                    self.insert_hbm(h, &mut res);
                } else {
                    let tick = self.next_tick();
                    self.tiers[Tier::Dram.idx()].touch(h, tick);
                }
            } else if self.contains(h, Tier::Ssd) {
                outcome.ssd_hits += 1;
                if self.tiers[Tier::Dram.idx()].capacity_blocks > 0 {
                    if for_compute && self.tiers[Tier::Hbm.idx()].capacity_blocks > 0 {
                        self.insert_hbm(h, &mut res);
                    } else {
                        self.insert_dram(h, &mut res);
                    }
                }
            } else {
                outcome.misses += 1;
            }
        }
        (outcome, res)
    }

    /// Drops every HBM block, as when the accelerator fails.
    pub fn drop_tier(&mut self, tier: Tier) {
        let t = &mut self.tiers[tier.idx()];
        t.blocks.clear();
        t.lru.clear();
        if tier == Tier::Dram {
            let h = &mut self.tiers[Tier::Hbm.idx()];
            h.blocks.clear();
            h.lru.clear();
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let hbm = &self.tiers[Tier::Hbm.idx()];
        let dram = &self.tiers[Tier::Dram.idx()];
        if hbm.blocks.keys().any(|h| !dram.contains(*h)) {
            return Err(Error::InvariantViolated("HBM block missing from DRAM"));
        }
        for t in &self.tiers {
            if t.blocks.len() as u64 > t.capacity_blocks {
                return Err(Error::InvariantViolated("tier over capacity"));
            }
            if t.blocks.len() != t.lru.len() {
                return Err(Error::InvariantViolated("LRU index out of sync"));
            }
        }
        Ok(())
    }
}

/// Cluster-wide view of advertised blocks, refreshed only at heartbeats.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalCacheIndex {
    entries: BTreeMap<InstanceId, BTreeSet<BlockHash>>,
    synced_ms: BTreeMap<InstanceId, u64>,
    last_sync_ms: Option<u64>,
}

impl GlobalCacheIndex {
    pub fn blocks(&self, instance: InstanceId) -> Option<&BTreeSet<BlockHash>> {
        self.entries.get(&instance)
    }

    pub fn instances(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.entries.keys().copied()
    }

    pub fn last_sync_ms(&self) -> Option<u64> {
        self.last_sync_ms
    }

    /// Replaces the index with each healthy instance's current
    /// advertisement. Unhealthy instances are dropped.
    pub fn heartbeat_sync(
        &mut self,
        adverts: impl IntoIterator<Item = (InstanceId, bool, BTreeSet<BlockHash>)>,
        now_ms: u64,
    ) {
        self.entries.clear();
        self.synced_ms.clear();
        for (id, healthy, blocks) in adverts {
            if healthy {
                self.entries.insert(id, blocks);
                self.synced_ms.insert(id, now_ms);
            }
        }
        self.last_sync_ms = Some(now_ms);
    }
}

/// What the router needs to know about one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteCandidate {
    pub id: InstanceId,
    pub healthy: bool,
    /// Prompt lengths still waiting for prefill on the instance.
    pub queued_prefill: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub instance: InstanceId,
    pub matched_tokens: u32,
    pub reuse: f64,
    pub est_ttft_ms: f64,
}

/// Per-candidate estimate used by [`route_request`].
pub fn route_estimate(
    tokens: &[u32],
    candidate: &RouteCandidate,
    index: &GlobalCacheIndex,
    profile: &ModelProfile,
    block_size: u32,
) -> RouteDecision {
    let empty = BTreeSet::new();
    let cached = index.blocks(candidate.id).unwrap_or(&empty);
    let input = tokens.len() as u32;
    let matched = prefix_match(tokens, cached, block_size).min(input);
    let effective = input - matched;
    RouteDecision {
        instance: candidate.id,
        matched_tokens: matched,
        reuse: if input == 0 { 0.0 } else { matched as f64 / input as f64 },
        est_ttft_ms: predict_ttft(effective, &candidate.queued_prefill, profile),
    }
}

/// Cache-aware instance choice: lowest estimated TTFT with the cached prefix
/// discounted, then higher reuse, then lower id.
pub fn route_request(
    tokens: &[u32],
    candidates: &[RouteCandidate],
    index: &GlobalCacheIndex,
    profile: &ModelProfile,
    block_size: u32,
) -> Result<RouteDecision> {
    candidates
        .iter()
        .filter(|c| c.healthy)
        .map(|c| route_estimate(tokens, c, index, profile, block_size))
        .min_by(|a, b| {
            a.est_ttft_ms
                .total_cmp(&b.est_ttft_ms)
                .then(b.reuse.total_cmp(&a.reuse))
                .then(a.instance.cmp(&b.instance))
        })
        .ok_or(Error::NoCapacity)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub bytes_per_token: f64,
    pub bandwidth_bytes_per_ms: f64,
    pub setup_ms: f64,
    /// Time for a failed instance to rejoin its pool.
    pub recovery_ms: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            // 61 layers of compressed MLA KV at fp16.
            bytes_per_token: 70_272.0,
            // 25 GB/s host link.
            bandwidth_bytes_per_ms: 25.0e6,
            setup_ms: 5.0,
            recovery_ms: 1000.0,
        }
    }
}

impl RecoveryConfig {
    pub fn migrate_cost_ms(&self, prefix_tokens: u32) -> f64 {
        prefix_tokens as f64 * self.bytes_per_token / self.bandwidth_bytes_per_ms + self.setup_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidentRequest {
    pub id: RequestId,
    pub class: RequestClass,
    /// Context tokens whose KV has to be restored.
    pub prefix_tokens: u32,
    /// Token content for cache-aware target selection; may be empty.
    pub tokens: Vec<u32>,
    /// A DRAM or SSD copy of the KV survived the failure.
    pub replica: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RecoveryAction {
    Recompute { target: InstanceId },
    Migrate { target: InstanceId },
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryDecision {
    pub request: RequestId,
    pub action: RecoveryAction,
    pub recompute_cost_ms: f64,
    /// `None` when no replica survived.
    pub migrate_cost_ms: Option<f64>,
}

/// Decides per request whether to rebuild KV by recomputation or to migrate
/// a surviving replica, whichever is cheaper. Online requests are planned
/// first; each recompute adds its prefix to the target's queue so later
/// decisions see the extra load.
pub fn plan_fault_recovery(
    failed: InstanceId,
    resident: &[ResidentRequest],
    candidates: &[RouteCandidate],
    index: &GlobalCacheIndex,
    profile: &ModelProfile,
    cfg: &RecoveryConfig,
    block_size: u32,
) -> Vec<RecoveryDecision> {
    let mut pool: Vec<RouteCandidate> = candidates
        .iter()
        .filter(|c| c.id != failed && c.healthy)
        .cloned()
        .collect();
    let mut order: Vec<&ResidentRequest> = resident.iter().collect();
    order.sort_by_key(|r| (r.class, r.id));

    let mut out = Vec::with_capacity(order.len());
    for r in order {
        let recompute_cost = estimate_prefill_time(r.prefix_tokens, profile);
        let migrate_cost = r.replica.then(|| cfg.migrate_cost_ms(r.prefix_tokens));
        let target = if r.tokens.is_empty() {
            // No token content: route on queue state alone.
            pool.iter()
                .map(|c| (c.id, predict_ttft(r.prefix_tokens, &c.queued_prefill, profile)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(id, _)| id)
        } else {
            route_request(&r.tokens, &pool, index, profile, block_size)
                .ok()
                .map(|d| d.instance)
        };
        let action = match target {
            None => RecoveryAction::Failed,
            Some(t) => match migrate_cost {
                Some(m) if m < recompute_cost => RecoveryAction::Migrate { target: t },
                _ => {
                    if let Some(c) = pool.iter_mut().find(|c| c.id == t) {
                        c.queued_prefill.push(r.prefix_tokens);
                    }
                    RecoveryAction::Recompute { target: t }
                }
            },
        };
        out.push(RecoveryDecision {
            request: r.id,
            action,
            recompute_cost_ms: recompute_cost,
            migrate_cost_ms: migrate_cost,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn caps(h: u64, d: u64, s: u64) -> TierCapacities {
        TierCapacities {
            hbm_tokens: h,
            dram_tokens: d,
            ssd_tokens: s,
        }
    }

    #[test]
    fn prefix_match_examples() {
        let tokens: Vec<u32> = (0..64).collect();
        assert_eq!(prefix_match(&tokens, &BTreeSet::new(), 16), 0);
        let cached: BTreeSet<_> = block_hashes(&tokens, 16).into_iter().collect();
        assert_eq!(prefix_match(&tokens, &cached, 16), 64);
        // 40 shared tokens, then divergence.
        let mut other: Vec<u32> = (0..40).collect();
        other.extend(1000..1024);
        assert_eq!(prefix_match(&other, &cached, 16), 32);
    }

    #[test]
    fn hashes_depend_on_prefix() {
        let a = block_hashes(&[1, 2, 3, 4], 2);
        let b = block_hashes(&[9, 9, 3, 4], 2);
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn hbm_writes_through() {
        let mut s = TieredStore::new(16, caps(64, 128, 256));
        s.put_blocks(&[7], Tier::Hbm).unwrap();
        assert!(s.contains(7, Tier::Hbm));
        assert!(s.contains(7, Tier::Dram));
    }

    #[test]
    fn dram_eviction_removes_hbm_copy() {
        let mut s = TieredStore::new(16, caps(32, 32, 64));
        s.put_blocks(&[1, 2], Tier::Hbm).unwrap();
        let res = s.put_blocks(&[3], Tier::Dram).unwrap();
        assert!(res.evicted.contains(&(1, Tier::Hbm)));
        assert!(res.evicted.contains(&(1, Tier::Dram)));
        assert!(!s.contains(1, Tier::Hbm));
        assert!(!s.contains(1, Tier::Dram));
        assert!(s.contains(1, Tier::Ssd));
        s.check_invariants().unwrap();
    }

    #[test]
    fn ssd_promotion() {
        let mut s = TieredStore::new(16, caps(32, 64, 64));
        s.put_blocks(&[5], Tier::Ssd).unwrap();
        let (o, _) = s.get_blocks(&[5], false);
        assert_eq!(o.ssd_hits, 1);
        assert!(s.contains(5, Tier::Dram));
        assert!(!s.contains(5, Tier::Hbm));
        s.put_blocks(&[6], Tier::Ssd).unwrap();
        s.get_blocks(&[6], true);
        assert!(s.contains(6, Tier::Hbm) && s.contains(6, Tier::Dram));
        let (o, _) = s.get_blocks(&[99], true);
        assert_eq!(o.misses, 1);
    }

    #[test]
    fn oversized_block_rejected() {
        let mut s = TieredStore::new(16, caps(8, 64, 0));
        assert!(matches!(
            s.put_blocks(&[1], Tier::Hbm),
            Err(Error::BlockTooLarge { .. })
        ));
        assert!(matches!(
            s.put_blocks(&[1], Tier::Ssd),
            Err(Error::BlockTooLarge { .. })
        ));
    }

    #[test]
    fn heartbeat_staleness() {
        let mut idx = GlobalCacheIndex::default();
        let mut store = TieredStore::new(16, caps(1024, 1024, 0));
        idx.heartbeat_sync([(0, true, store.advertise())], 0);
        store.put_blocks(&[42], Tier::Hbm).unwrap();
        // t=50: not yet visible.
        assert!(!idx.blocks(0).unwrap().contains(&42));
        idx.heartbeat_sync([(0, true, store.advertise())], 100);
        assert!(idx.blocks(0).unwrap().contains(&42));
        let snapshot = idx.clone();
        idx.heartbeat_sync([(0, true, store.advertise())], 200);
        assert_eq!(idx.blocks(0), snapshot.blocks(0));
        // Fault before the next beat: entries disappear at that beat.
        idx.heartbeat_sync([(0, false, store.advertise())], 300);
        assert!(idx.blocks(0).is_none());
    }

    fn prof(a: f64, b: f64, c: f64) -> ModelProfile {
        ModelProfile {
            prefill_a: a,
            prefill_b: b,
            prefill_c: c,
            ..ModelProfile::default()
        }
    }

    #[test]
    fn routing_latency_beats_reuse() {
        let p = prof(1e-5, 0.05, 5.0);
        let tokens: Vec<u32> = (0..2048).collect();
        let mut idx = GlobalCacheIndex::default();
        let half: BTreeSet<_> = block_hashes(&tokens[..1024], 16).into_iter().collect();
        idx.heartbeat_sync([(0, true, half), (1, true, BTreeSet::new())], 0);
        let cands = [
            RouteCandidate {
                id: 0,
                healthy: true,
                queued_prefill: vec![4096, 4096],
            },
            RouteCandidate {
                id: 1,
                healthy: true,
                queued_prefill: vec![],
            },
        ];
        let a = route_estimate(&tokens, &cands[0], &idx, &p, 16);
        let b = route_estimate(&tokens, &cands[1], &idx, &p, 16);
        assert!(b.est_ttft_ms < a.est_ttft_ms);
        assert_eq!(route_request(&tokens, &cands, &idx, &p, 16).unwrap().instance, 1);
    }

    #[test]
    fn routing_reuse_with_equal_queues() {
        let p = prof(1e-5, 0.05, 5.0);
        let tokens: Vec<u32> = (0..1024).collect();
        let mut idx = GlobalCacheIndex::default();
        let half: BTreeSet<_> = block_hashes(&tokens[..512], 16).into_iter().collect();
        idx.heartbeat_sync([(3, true, BTreeSet::new()), (7, true, half)], 0);
        let cands = [
            RouteCandidate {
                id: 3,
                healthy: true,
                queued_prefill: vec![100],
            },
            RouteCandidate {
                id: 7,
                healthy: true,
                queued_prefill: vec![100],
            },
        ];
        let d = route_request(&tokens, &cands, &idx, &p, 16).unwrap();
        assert_eq!(d.instance, 7);
        assert_eq!(d.matched_tokens, 512);
        let single = [cands[0].clone()];
        assert_eq!(route_request(&tokens, &single, &idx, &p, 16).unwrap().instance, 3);
        let sick = [RouteCandidate {
            healthy: false,
            ..cands[0].clone()
        }];
        assert_eq!(route_request(&tokens, &sick, &idx, &p, 16), Err(Error::NoCapacity));
    }

    #[test]
    fn recovery_choices() {
        let p = prof(1e-6, 0.01, 0.0);
        let cfg = RecoveryConfig::default();
        let idx = GlobalCacheIndex::default();
        let cands = [
            RouteCandidate {
                id: 0,
                healthy: false,
                queued_prefill: vec![],
            },
            RouteCandidate {
                id: 1,
                healthy: true,
                queued_prefill: vec![],
            },
        ];
        let rs = [
            ResidentRequest {
                id: 1,
                class: RequestClass::Offline,
                prefix_tokens: 256,
                tokens: vec![],
                replica: true,
            },
            ResidentRequest {
                id: 2,
                class: RequestClass::Online,
                prefix_tokens: 32_768,
                tokens: vec![],
                replica: true,
            },
            ResidentRequest {
                id: 3,
                class: RequestClass::Online,
                prefix_tokens: 32_768,
                tokens: vec![],
                replica: false,
            },
        ];
        let plan = plan_fault_recovery(0, &rs, &cands, &idx, &p, &cfg, 16);
        // Online first.
        assert_eq!(plan.iter().map(|d| d.request).collect::<Vec<_>>(), vec![2, 3, 1]);
        assert_eq!(plan[0].action, RecoveryAction::Migrate { target: 1 });
        assert_eq!(plan[1].action, RecoveryAction::Recompute { target: 1 });
        assert_eq!(plan[2].action, RecoveryAction::Recompute { target: 1 });
        for d in &plan {
            let chosen = match d.action {
                RecoveryAction::Migrate { .. } => d.migrate_cost_ms.unwrap(),
                _ => d.recompute_cost_ms,
            };
            if let Some(m) = d.migrate_cost_ms {
                assert!(chosen <= m.min(d.recompute_cost_ms) + 1e-12 || d.recompute_cost_ms <= m);
            }
        }
        let none = plan_fault_recovery(0, &rs[..1], &cands[..1], &idx, &p, &cfg, 16);
        assert_eq!(none[0].action, RecoveryAction::Failed);
    }
}
