//! Data-parallel and expert-parallel load balancing.
//!
//! Three layers of DP balancing: request placement on the DP group with the
//! most free KV space, inter-group migration at batch/sequence/MLA-block
//! granularity, and intra-kernel splitting of long sequences across cores.
//! Expert balancing replicates hot experts and publishes the new routing
//! table through a double buffer.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelProfile;

pub type GroupId = u32;

pub const DEFAULT_MIGRATION_THRESHOLD: u64 = 2048;
pub const DEFAULT_BLOCK_SIZE: u64 = 16;
pub const DEFAULT_IMBALANCE_TRIGGER: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpSequence {
    pub id: u64,
    pub batch: u32,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DPGroup {
    pub id: GroupId,
    pub capacity_tokens: u64,
    pub sequences: Vec<DpSequence>,
}

impl DPGroup {
    pub fn token_load(&self) -> u64 {
        self.sequences.iter().map(|s| s.tokens).sum()
    }

    pub fn kv_free_tokens(&self) -> u64 {
        self.capacity_tokens.saturating_sub(self.token_load())
    }
}

/// Group with the most free KV space that can hold `need_tokens`; `None`
/// means the request stays queued.
pub fn assign_dp_group(need_tokens: u64, groups: &[DPGroup]) -> Option<GroupId> {
    groups
        .iter()
        .filter(|g| g.kv_free_tokens() >= need_tokens)
        .max_by(|a, b| a.kv_free_tokens().cmp(&b.kv_free_tokens()).then(b.id.cmp(&a.id)))
        .map(|g| g.id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    Batch,
    Sequence,
    MLABlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub src: GroupId,
    pub dst: GroupId,
    pub granularity: Granularity,
    pub moved_tokens: u64,
    pub est_saving_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationOutcome {
    pub plans: Vec<MigrationPlan>,
    pub groups: Vec<DPGroup>,
}

impl MigrationOutcome {
    pub fn loads(&self) -> Vec<u64> {
        self.groups.iter().map(DPGroup::token_load).collect()
    }
}

/// Attention time saved by evening out `moved_tokens` across all layers.
pub fn migration_saving_us(moved_tokens: u64, profile: &ModelProfile) -> f64 {
    profile.attn_gamma_us_per_token_layer * moved_tokens as f64 * profile.num_layers as f64
}

/// Moves work from the most to the least loaded group until the load gap is
/// within `threshold_tokens` or nothing movable fits.
///
/// Each move transfers at most half the gap, so the source never drops below
/// the destination. Preference: largest whole batch, then largest whole
/// sequence, then a slice of the largest sequence rounded down to
/// `block_size`.
pub fn plan_migration(
    groups: &[DPGroup],
    threshold_tokens: u64,
    block_size: u64,
    profile: &ModelProfile,
) -> MigrationOutcome {
    let mut groups = groups.to_vec();
    let mut plans = Vec::new();
    let block = block_size.max(1);
    if groups.len() < 2 {
        return MigrationOutcome { plans, groups };
    }
    let mut next_seq_id = groups
        .iter()
        .flat_map(|g| g.sequences.iter().map(|s| s.id))
        .max()
        .map_or(0, |m| m + 1);
    loop {
        let (src, dst) = extremes(&groups);
        let gap = groups[src].token_load() - groups[dst].token_load();
        if gap <= threshold_tokens {
            break;
        }
        let limit = (gap / 2).min(groups[dst].kv_free_tokens());
        let Some((granularity, moved)) = pick_unit(&groups[src], limit, block) else {
            break;
        };
        let src_id = groups[src].id;
        let dst_id = groups[dst].id;
        let dst_batch = groups[dst].sequences.iter().map(|s| s.batch).max().map_or(0, |b| b + 1);
        let mut moving: Vec<DpSequence> = Vec::new();
        match moved {
            Unit::Batch(batch) => {
                let (go, stay): (Vec<_>, Vec<_>) = groups[src].sequences.drain(..).partition(|s| s.batch == batch);
                groups[src].sequences = stay;
                moving = go;
            }
            Unit::Sequence(idx) => moving.push(groups[src].sequences.remove(idx)),
            Unit::Slice(idx, tokens) => {
                groups[src].sequences[idx].tokens -= tokens;
                moving.push(DpSequence {
                    id: next_seq_id,
                    batch: 0,
                    tokens,
                });
                next_seq_id += 1;
            }
        }
        let moved_tokens: u64 = moving.iter().map(|s| s.tokens).sum();
        for mut s in moving {
            s.batch = dst_batch;
            groups[dst].sequences.push(s);
        }
        plans.push(MigrationPlan {
            src: src_id,
            dst: dst_id,
            granularity,
            moved_tokens,
            est_saving_us: migration_saving_us(moved_tokens, profile),
        });
    }
    MigrationOutcome { plans, groups }
}

enum Unit {
    Batch(u32),
    Sequence(usize),
    Slice(usize, u64),
}

fn extremes(groups: &[DPGroup]) -> (usize, usize) {
    let mut src = 0;
    let mut dst = 0;
    for (i, g) in groups.iter().enumerate() {
        let load = g.token_load();
        if load > groups[src].token_load() {
            src = i;
        }
        if load < groups[dst].token_load() {
            dst = i;
        }
    }
    (src, dst)
}

fn pick_unit(src: &DPGroup, limit: u64, block: u64) -> Option<(Granularity, Unit)> {
    if limit == 0 {
        return None;
    }
    let mut batches: BTreeMap<u32, u64> = BTreeMap::new();
    for s in &src.sequences {
        *batches.entry(s.batch).or_default() += s.tokens;
    }
    // A batch only counts as a distinct unit when it holds several sequences.
    let batch_pick = batches
        .iter()
        .filter(|(b, t)| **t <= limit && **t > 0 && src.sequences.iter().filter(|s| s.batch == **b).count() > 1)
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)));
    if let Some((b, _)) = batch_pick {
        return Some((Granularity::Batch, Unit::Batch(*b)));
    }
    let seq_pick = src
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.tokens <= limit && s.tokens > 0)
        .max_by(|a, b| a.1.tokens.cmp(&b.1.tokens).then(b.0.cmp(&a.0)));
    if let Some((i, _)) = seq_pick {
        return Some((Granularity::Sequence, Unit::Sequence(i)));
    }
    let slice = limit / block * block;
    if slice == 0 {
        return None;
    }
    let (i, _) = src
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.tokens > slice)
        .max_by(|a, b| a.1.tokens.cmp(&b.1.tokens).then(b.0.cmp(&a.0)))?;
    Some((Granularity::MLABlock, Unit::Slice(i, slice)))
}

/// A contiguous token range of one sequence placed on a core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub sequence: usize,
    pub start: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoreLoad {
    pub pieces: Vec<Piece>,
    pub load: u64,
}

/// Longest-first placement onto the least-loaded core, splitting any
/// sequence that would push a core past `ceil(total / num_cores)`.
///
/// The maximum core load is exactly `ceil(total / num_cores)`.
pub fn split_kernel_load(sequences: &[u64], num_cores: usize) -> Vec<CoreLoad> {
    let cores_n = num_cores.max(1);
    let mut cores = vec![CoreLoad::default(); cores_n];
    let total: u64 = sequences.iter().sum();
    let cap = total.div_ceil(cores_n as u64);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by(|a, b| sequences[*b].cmp(&sequences[*a]).then(a.cmp(b)));
    for idx in order {
        let mut start = 0;
        let mut remaining = sequences[idx];
        while remaining > 0 {
            let (c, _) = cores
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.load.cmp(&b.1.load).then(a.0.cmp(&b.0)))
                .expect("at least one core");
            let room = cap - cores[c].load;
            let len = remaining.min(room);
            debug_assert!(len > 0, "least-loaded core is below the cap while work remains");
            cores[c].pieces.push(Piece {
                sequence: idx,
                start,
                len,
            });
            cores[c].load += len;
            start += len;
            remaining -= len;
        }
    }
    cores
}

/// Per-expert token counts over one reporting window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLoadRecorder {
    loads: Vec<u64>,
}

impl ExpertLoadRecorder {
    pub fn new(num_experts: usize) -> Self {
        ExpertLoadRecorder {
            loads: vec![0; num_experts],
        }
    }

    /// Accumulates `(expert, tokens)` routing decisions.
    pub fn eplb_update(&mut self, token_routes: &[(usize, u64)]) -> &[u64] {
        for (expert, tokens) in token_routes {
            if let Some(l) = self.loads.get_mut(*expert) {
                *l += tokens;
            }
        }
        &self.loads
    }

    pub fn loads(&self) -> &[u64] {
        &self.loads
    }

    /// Returns the window's counts and starts a new window at zero.
    pub fn take_window(&mut self) -> Vec<u64> {
        let n = self.loads.len();
        core::mem::replace(&mut self.loads, vec![0; n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    /// Per expert: `(device, weight)` replicas.
    pub experts: Vec<Vec<(u32, f64)>>,
    pub version: u64,
}

impl RoutingTable {
    /// Expert `e` on device `e mod num_devices`.
    pub fn one_per_device(num_experts: usize, num_devices: u32) -> Self {
        RoutingTable {
            experts: (0..num_experts)
                .map(|e| vec![(e as u32 % num_devices.max(1), 1.0)])
                .collect(),
            version: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for replicas in &self.experts {
            if replicas.is_empty() {
                return Err(Error::InvariantViolated("expert without replica"));
            }
            let sum: f64 = replicas.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvariantViolated("replica weights do not sum to one"));
            }
        }
        Ok(())
    }

    pub fn device_loads(&self, loads: &[u64], num_devices: u32) -> Vec<f64> {
        let mut dev = vec![0.0; num_devices as usize];
        for (e, replicas) in self.experts.iter().enumerate() {
            let l = loads.get(e).copied().unwrap_or(0) as f64;
            for (d, w) in replicas {
                dev[*d as usize] += l * w;
            }
        }
        dev
    }

    pub fn max_device_load(&self, loads: &[u64], num_devices: u32) -> f64 {
        self.device_loads(loads, num_devices).into_iter().fold(0.0, f64::max)
    }

    /// Stable digest of the table content, used to detect torn reads.
    pub fn digest(&self) -> u64 {
        use core::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write_u64(self.version);
        for replicas in &self.experts {
            h.write_usize(replicas.len());
            for (d, w) in replicas {
                h.write_u32(*d);
                h.write_u64(w.to_bits());
            }
        }
        h.finish()
    }
}

/// Enumeration budget for the exact replica search.
pub const EXACT_PLAN_LIMIT: u128 = 100_000;

fn table_from_hosts(hosts: &[Vec<u32>], version: u64) -> RoutingTable {
    RoutingTable {
        experts: hosts
            .iter()
            .map(|hs| {
                let w = 1.0 / hs.len() as f64;
                hs.iter().map(|d| (*d, w)).collect()
            })
            .collect(),
        version,
    }
}

fn hosts_max_load(loads: &[u64], hosts: &[Vec<u32>], num_devices: u32) -> f64 {
    let mut dev = vec![0.0; num_devices as usize];
    for (e, hs) in hosts.iter().enumerate() {
        let share = loads[e] as f64 / hs.len() as f64;
        for d in hs {
            dev[*d as usize] += share;
        }
    }
    dev.into_iter().fold(0.0, f64::max)
}

fn binomial_sum(n: u128, k: u128) -> u128 {
    let mut total: u128 = 0;
    let mut c: u128 = 1;
    for i in 0..=k.min(n) {
        if i > 0 {
            c = c.saturating_mul(n - i + 1) / i;
        }
        total = total.saturating_add(c);
    }
    total
}

/// Adds up to `replica_budget` replicas so that the maximum device load is as
/// small as possible, starting from one expert per device.
///
/// Small instances are solved exactly; larger ones use
/// [`eplb_plan_greedy`]. Weights are split evenly across replicas, and the
/// result never raises the maximum device load.
pub fn eplb_plan(loads: &[u64], num_devices: u32, replica_budget: usize) -> RoutingTable {
    let base = RoutingTable::one_per_device(loads.len(), num_devices);
    if replica_budget == 0 || num_devices <= 1 || loads.is_empty() {
        return base;
    }
    let slots = (loads.len() as u128) * (num_devices as u128 - 1);
    if binomial_sum(slots, replica_budget as u128) <= EXACT_PLAN_LIMIT {
        eplb_plan_exact(loads, num_devices, replica_budget)
    } else {
        eplb_plan_greedy(loads, num_devices, replica_budget)
    }
}

fn eplb_plan_exact(loads: &[u64], num_devices: u32, budget: usize) -> RoutingTable {
    let initial: Vec<Vec<u32>> = (0..loads.len()).map(|e| vec![e as u32 % num_devices]).collect();
    let slots: Vec<(usize, u32)> = (0..loads.len())
        .flat_map(|e| (0..num_devices).map(move |d| (e, d)))
        .filter(|(e, d)| *d != *e as u32 % num_devices)
        .collect();
    let mut best_hosts = initial.clone();
    let mut best = hosts_max_load(loads, &initial, num_devices);

    fn rec(
        start: usize,
        left: usize,
        slots: &[(usize, u32)],
        hosts: &mut Vec<Vec<u32>>,
        loads: &[u64],
        num_devices: u32,
        best: &mut f64,
        best_hosts: &mut Vec<Vec<u32>>,
    ) {
        for i in start..slots.len() {
            let (e, d) = slots[i];
            hosts[e].push(d);
            let m = hosts_max_load(loads, hosts, num_devices);
            if m < *best {
                *best = m;
                *best_hosts = hosts.clone();
            }
            if left > 1 {
                rec(i + 1, left - 1, slots, hosts, loads, num_devices, best, best_hosts);
            }
            hosts[e].pop();
        }
    }
    let mut hosts = initial;
    rec(
        0,
        budget,
        &slots,
        &mut hosts,
        loads,
        num_devices,
        &mut best,
        &mut best_hosts,
    );
    for hs in &mut best_hosts {
        hs.sort_unstable();
    }
    table_from_hosts(&best_hosts, 0)
}

/// Replicates the hottest effective expert (load / replicas) onto the least
/// loaded device not already hosting it, skipping moves that would raise
/// the maximum device load.
pub fn eplb_plan_greedy(loads: &[u64], num_devices: u32, replica_budget: usize) -> RoutingTable {
    let mut hosts: Vec<Vec<u32>> = (0..loads.len()).map(|e| vec![e as u32 % num_devices.max(1)]).collect();
    let mut current = hosts_max_load(loads, &hosts, num_devices.max(1));
    for _ in 0..replica_budget {
        let mut order: Vec<usize> = (0..loads.len()).collect();
        order.sort_by(|a, b| {
            let ea = loads[*a] as f64 / hosts[*a].len() as f64;
            let eb = loads[*b] as f64 / hosts[*b].len() as f64;
            eb.total_cmp(&ea).then(a.cmp(b))
        });
        let mut placed = false;
        for e in order {
            let dev = table_from_hosts(&hosts, 0).device_loads(loads, num_devices);
            let target = (0..num_devices)
                .filter(|d| !hosts[e].contains(d))
                .min_by(|a, b| dev[*a as usize].total_cmp(&dev[*b as usize]).then(a.cmp(b)));
            let Some(d) = target else { continue };
            hosts[e].push(d);
            let m = hosts_max_load(loads, &hosts, num_devices);
            if m <= current {
                current = m;
                placed = true;
                break;
            }
            hosts[e].pop();
        }
        if !placed {
            break;
        }
    }
    table_from_hosts(&hosts, 0)
}

/// Whether device loads are skewed enough to re-plan (max / mean > ratio).
pub fn should_replan(device_loads: &[f64], ratio: f64) -> bool {
    if device_loads.is_empty() {
        return false;
    }
    let mean = device_loads.iter().sum::<f64>() / device_loads.len() as f64;
    let max = device_loads.iter().copied().fold(0.0, f64::max);
    mean > 0.0 && max / mean > ratio
}

/// Active/staged pair of values with an all-workers-ready switch.
///
/// Readers only ever see the active slot. The committer stages into the spare
/// slot and flips the active index once every worker has reported ready, so
/// a reader observes either the old version or the new one in full.
#[derive(Debug, Clone)]
pub struct DoubleBuffer<T> {
    slots: [T; 2],
    active: usize,
    version: u64,
    staged: bool,
    ready: Vec<bool>,
}

impl<T: Clone> DoubleBuffer<T> {
    pub fn new(initial: T, workers: usize) -> Self {
        DoubleBuffer {
            slots: [initial.clone(), initial],
            active: 0,
            version: 0,
            staged: false,
            ready: vec![false; workers],
        }
    }

    pub fn read(&self) -> (u64, &T) {
        (self.version, &self.slots[self.active])
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Writes `next` into the spare slot and clears readiness.
    pub fn stage(&mut self, next: T) {
        self.slots[1 - self.active] = next;
        self.staged = true;
        self.ready.iter_mut().for_each(|r| *r = false);
    }

    pub fn mark_ready(&mut self, worker: usize) {
        if let Some(r) = self.ready.get_mut(worker) {
            *r = true;
        }
    }

    pub fn all_ready(&self) -> bool {
        self.ready.iter().all(|r| *r)
    }

    /// Switches to the staged value when every worker is ready. Returns
    /// whether a switch happened.
    pub fn try_commit(&mut self) -> bool {
        if !self.staged || !self.all_ready() {
            return false;
        }
        self.active = 1 - self.active;
        self.version += 1;
        self.staged = false;
        true
    }
}

/// Stages `staged_table`, records the given readiness flags and commits if
/// all workers are ready.
pub fn eplb_commit(
    buffer: &mut DoubleBuffer<RoutingTable>,
    mut staged_table: RoutingTable,
    worker_ready: &[bool],
) -> Result<bool> {
    staged_table.validate()?;
    staged_table.version = buffer.version() + 1;
    buffer.stage(staged_table);
    for (w, r) in worker_ready.iter().enumerate() {
        if *r {
            buffer.mark_ready(w);
        }
    }
    Ok(buffer.try_commit())
}
