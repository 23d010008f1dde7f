use alloc::collections::{BinaryHeap, VecDeque};
use alloc::vec::Vec;
use core::cmp::Reverse;

use crate::coloc::{
    migrate_offline_decode, preempt, select_offline_for_batch, OfflineCandidate, PoolKind, QueuedPrefill,
    UtilizationSnapshot,
};
use crate::epd::{assemble_batch, dispatch_multimodal, profile_limits, EPDLimits, EPDStrategy, ProfileBounds};
use crate::error::{Error, Result};
use crate::kvcache::{plan_fault_recovery, GlobalCacheIndex, RecoveryAction, ResidentRequest, RouteCandidate};
use crate::model::{
    estimate_encode_time, expected_tokens_per_step, InstanceId, Modality, ModelProfile, Request, RequestClass,
    RequestId, RequestState, TraceRecord,
};
use crate::pd::{
    best_effort_prefill, dispatch_decode, dispatch_prefill, local_schedule, maybe_switch_roles, predict_ttft,
    BatchPlan, DecodeDispatch, DecodeItem, DecodeNeed, EncodeWork, InstanceStats, InstanceView, LocalLimits, PoolTag,
    PrefillDispatch, PrefillItem,
};

use super::{
    step_duration, ClusterConfig, ColocMode, Counters, DispatchPolicy, EpdMode, InstanceRecord, Policies,
    RequestRecord, RunMetadata, SimConfig, SimResult, StepWork, RESULT_SCHEMA,
};

const STALL_HEARTBEATS: u32 = 20;
const OFFLINE_MOVES_PER_BEAT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Arrival,
    StepComplete,
    TransferComplete,
    Heartbeat,
    Fault,
    Recover,
    RoleSwitch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Payload {
    None,
    Generation(u64),
    Target(InstanceId),
    Role(PoolTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    t: u64,
    kind: Kind,
    id: u64,
    seq: u64,
    payload: Payload,
}

fn to_us(ms: f64) -> u64 {
    let us = libm::round(ms * 1000.0);
    if us <= 0.0 {
        0
    } else {
        us as u64
    }
}

fn to_ms(us: u64) -> f64 {
    us as f64 / 1000.0
}

struct Rt {
    req: Request,
    /// Prefill target; grows to the whole context on recompute.
    prompt: u32,
    prefilled: u32,
    images_left: u32,
    /// Instance whose queues hold the request and which is charged its KV.
    loc: Option<InstanceId>,
    prefill_inst: Option<InstanceId>,
    fixed_decode: Option<InstanceId>,
    kv: u64,
    credit: f64,
    last_token_us: Option<u64>,
    token_times: Vec<f64>,
}

impl Rt {
    fn prefill_done(&self) -> bool {
        self.images_left == 0 && self.prefilled >= self.prompt
    }
}

struct Inst {
    pool: PoolTag,
    initial_pool: PoolTag,
    healthy: bool,
    kv_cap: u64,
    budget: u32,
    kv_used: u64,
    prefill_q: Vec<RequestId>,
    encode_q: Vec<RequestId>,
    decodes: Vec<RequestId>,
    migration_q: VecDeque<RequestId>,
    link_free_us: u64,
    busy: bool,
    generation: u64,
    plan: Option<BatchPlan>,
    step_start_us: u64,
    busy_us: u64,
    steps: u64,
    last_busy_end_us: u64,
    last_switch_ms: Option<f64>,
    stats: InstanceStats,
    down_since_us: Option<u64>,
    downtime_us: u64,
}

/// Event-loop state for one simulation run.
pub struct Simulator<'a> {
    profile: &'a ModelProfile,
    cfg: &'a SimConfig,
    pol: Policies,
    limits: EPDLimits,
    rts: Vec<Rt>,
    insts: Vec<Inst>,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: u64,
    counters: Counters,
    unfinished: usize,
    arrivals_left: usize,
    in_flight: usize,
    recovering: usize,
    prefill_pressure: bool,
    decode_wait: Vec<RequestId>,
    rr_prefill: usize,
    rr_decode: usize,
    heartbeat_armed: bool,
    stall_beats: u32,
}

/// Schedules a fault on `instance` at `time_ms`.
pub fn inject_fault(sim: &mut Simulator<'_>, time_ms: f64, instance: InstanceId) -> Result<()> {
    sim.schedule_fault(time_ms, instance)
}

impl<'a> Simulator<'a> {
    pub fn new(
        trace: &[TraceRecord],
        cluster: &ClusterConfig,
        policies: &Policies,
        profile: &'a ModelProfile,
        cfg: &'a SimConfig,
    ) -> Result<Self> {
        cluster.validate()?;
        cfg.validate()?;
        profile.validate()?;
        policies.pd.validate()?;
        for r in trace {
            r.validate()?;
        }
        let mut order: Vec<&TraceRecord> = trace.iter().collect();
        order.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));

        let limits = policies.epd_limits.unwrap_or_else(|| {
            profile_limits(
                profile,
                policies.slo.tpot_ms,
                &ProfileBounds {
                    graph_mode: cfg.features.graph_mode,
                    ..ProfileBounds::default()
                },
            )
        });
        // The encode pool serves as prefill or decode under the fused
        // strategies and when encoding is not disaggregated.
        let e_role = match policies.epd {
            EpdMode::Hybrid(EPDStrategy::E_P_D) => PoolTag::E,
            EpdMode::Hybrid(EPDStrategy::ED_P) => PoolTag::D,
            EpdMode::Hybrid(EPDStrategy::EP_D) | EpdMode::Fused => PoolTag::P,
        };
        let insts = cluster
            .instances
            .iter()
            .map(|c| {
                let pool = if c.pool == PoolTag::E { e_role } else { c.pool };
                Inst {
                    pool,
                    initial_pool: pool,
                    healthy: true,
                    kv_cap: c.kv_capacity_tokens,
                    budget: c.token_budget,
                    kv_used: 0,
                    prefill_q: Vec::new(),
                    encode_q: Vec::new(),
                    decodes: Vec::new(),
                    migration_q: VecDeque::new(),
                    link_free_us: 0,
                    busy: false,
                    generation: 0,
                    plan: None,
                    step_start_us: 0,
                    busy_us: 0,
                    steps: 0,
                    last_busy_end_us: 0,
                    last_switch_ms: None,
                    stats: InstanceStats::default(),
                    down_since_us: None,
                    downtime_us: 0,
                }
            })
            .collect();

        let tpi = cfg.tokens_per_image;
        let rts: Vec<Rt> = order
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let req = r.to_request(i as RequestId);
                Rt {
                    prompt: req.prompt_tokens(tpi),
                    prefilled: 0,
                    images_left: req.image_units,
                    loc: None,
                    prefill_inst: None,
                    fixed_decode: None,
                    kv: 0,
                    credit: 0.0,
                    last_token_us: None,
                    token_times: Vec::new(),
                    req,
                }
            })
            .collect();

        let mut sim = Simulator {
            profile,
            cfg,
            pol: policies.clone(),
            limits,
            unfinished: rts.len(),
            arrivals_left: rts.len(),
            rts,
            insts,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            counters: Counters::default(),
            in_flight: 0,
            recovering: 0,
            prefill_pressure: false,
            decode_wait: Vec::new(),
            rr_prefill: 0,
            rr_decode: 0,
            heartbeat_armed: false,
            stall_beats: 0,
        };
        for i in 0..sim.rts.len() {
            let t = to_us(sim.rts[i].req.arrival_ms);
            sim.push(t, Kind::Arrival, i as u64, Payload::None);
        }
        if let Some(first) = sim.rts.first() {
            let t = to_us(first.req.arrival_ms) + to_us(cfg.heartbeat_ms);
            sim.push(t, Kind::Heartbeat, 0, Payload::None);
            sim.heartbeat_armed = true;
        }
        Ok(sim)
    }

    pub fn schedule_fault(&mut self, time_ms: f64, instance: InstanceId) -> Result<()> {
        if instance as usize >= self.insts.len() {
            return Err(Error::UnknownInstance(instance));
        }
        self.push(to_us(time_ms), Kind::Fault, instance as u64, Payload::None);
        Ok(())
    }

    fn push(&mut self, t: u64, kind: Kind, id: u64, payload: Payload) {
        self.seq += 1;
        self.heap.push(Reverse(Event {
            t,
            kind,
            id,
            seq: self.seq,
            payload,
        }));
    }

    pub fn run_to_end(mut self) -> SimResult {
        let horizon = self.cfg.horizon_ms.map(to_us);
        while let Some(Reverse(ev)) = self.heap.pop() {
            if horizon.is_some_and(|h| ev.t > h) {
                break;
            }
            self.now = ev.t;
            match ev.kind {
                Kind::Arrival => self.on_arrival(ev.id as RequestId),
                Kind::StepComplete => {
                    if let Payload::Generation(g) = ev.payload {
                        self.on_step_complete(ev.id as usize, g);
                    }
                }
                Kind::TransferComplete => {
                    if let Payload::Target(t) = ev.payload {
                        self.on_transfer_complete(ev.id as RequestId, t);
                    }
                }
                Kind::Heartbeat => {
                    if !self.on_heartbeat() {
                        break;
                    }
                }
                Kind::Fault => self.on_fault(ev.id as usize),
                Kind::Recover => self.on_recover(ev.id as usize),
                Kind::RoleSwitch => {
                    if let Payload::Role(to) = ev.payload {
                        self.on_role_switch(ev.id as usize, to);
                    }
                }
            }
        }
        self.finish()
    }

    // ---- views -------------------------------------------------------

    fn priority_mode(&self) -> bool {
        matches!(self.pol.coloc, ColocMode::OnlinePriority | ColocMode::Colocation)
    }

    fn step_tokens(&self) -> u32 {
        if self.cfg.features.mtp {
            self.profile.mtp_draft_len + 1
        } else {
            1
        }
    }

    fn view(&self, i: usize, class: RequestClass) -> InstanceView {
        let inst = &self.insts[i];
        let only_online = class == RequestClass::Online && self.priority_mode();
        let queued_prefill: Vec<u32> = inst
            .prefill_q
            .iter()
            .map(|r| &self.rts[*r as usize])
            .filter(|r| !only_online || r.req.class == RequestClass::Online)
            .map(|r| r.prompt - r.prefilled.min(r.prompt))
            .collect();
        let mut stats = inst.stats.clone();
        stats.running_tokens = (inst.decodes.len() as u64) * self.step_tokens() as u64;
        stats.queued_prefill_tokens = queued_prefill.iter().map(|t| *t as u64).sum();
        stats.kv_used_tokens = inst.kv_used;
        stats.idle_ms = if inst.busy {
            0.0
        } else {
            to_ms(self.now.saturating_sub(inst.last_busy_end_us))
        };
        InstanceView {
            id: i as InstanceId,
            pool: inst.pool,
            healthy: inst.healthy,
            kv_capacity_tokens: inst.kv_cap,
            token_budget: inst.budget,
            queued_prefill,
            queued_encode_units: inst.encode_q.iter().map(|r| self.rts[*r as usize].images_left).sum(),
            stats,
            last_switch_ms: inst.last_switch_ms,
        }
    }

    fn views(&self, class: RequestClass) -> Vec<InstanceView> {
        (0..self.insts.len()).map(|i| self.view(i, class)).collect()
    }

    fn set_state(&mut self, rid: RequestId, st: RequestState) {
        let r = &mut self.rts[rid as usize].req;
        let ok = r.transition(st).is_ok();
        debug_assert!(ok, "illegal transition {:?} -> {:?}", r.state, st);
        if !ok {
            r.state = st;
        }
    }

    // ---- arrival and dispatch ------------------------------------------

    fn on_arrival(&mut self, rid: RequestId) {
        self.arrivals_left -= 1;
        self.dispatch_new(rid);
    }

    fn dispatch_new(&mut self, rid: RequestId) {
        let r = &self.rts[rid as usize];
        if r.images_left > 0 && r.req.modality == Modality::Multimodal {
            self.dispatch_multimodal(rid);
        } else {
            match self.choose_prefill(rid) {
                Some(i) => {
                    self.enqueue_prefill(i, rid);
                    self.try_start(i as usize);
                }
                None => self.fail_request(rid),
            }
        }
    }

    fn choose_prefill(&mut self, rid: RequestId) -> Option<InstanceId> {
        let r = &self.rts[rid as usize];
        let class = r.req.class;
        let remaining = r.prompt - r.prefilled.min(r.prompt);
        let slo = r.req.slo_ttft_ms;
        let views = self.views(class);
        let healthy_prefill: Vec<&InstanceView> = views.iter().filter(|v| v.healthy && v.pool.prefill_duty()).collect();
        match self.pol.dispatch {
            DispatchPolicy::SloAware => {
                if class == RequestClass::Offline {
                    return best_effort_prefill(remaining, &views, self.profile);
                }
                match dispatch_prefill(remaining, &views, slo, self.profile) {
                    Ok(PrefillDispatch::Assign(i)) => Some(i),
                    Ok(PrefillDispatch::NeedRoleSwitch) => {
                        self.prefill_pressure = true;
                        best_effort_prefill(remaining, &views, self.profile)
                    }
                    Err(_) => None,
                }
            }
            DispatchPolicy::MinLoad => healthy_prefill
                .iter()
                .min_by_key(|v| (v.load_tokens(), v.id))
                .map(|v| v.id)
                .or_else(|| best_effort_prefill(remaining, &views, self.profile)),
            DispatchPolicy::RoundRobin => {
                if healthy_prefill.is_empty() {
                    return best_effort_prefill(remaining, &views, self.profile);
                }
                let v = healthy_prefill[self.rr_prefill % healthy_prefill.len()];
                self.rr_prefill += 1;
                Some(v.id)
            }
        }
    }

    fn dispatch_multimodal(&mut self, rid: RequestId) {
        let r = &self.rts[rid as usize];
        let remaining = r.prompt - r.prefilled.min(r.prompt);
        let images = r.images_left;
        let views = self.views(r.req.class);
        let fused = |views: &[InstanceView], profile: &ModelProfile| {
            views
                .iter()
                .filter(|v| v.healthy)
                .map(|v| {
                    (
                        v.id,
                        predict_ttft(remaining, &v.queued_prefill, profile)
                            + estimate_encode_time(v.queued_encode_units + images, profile),
                    )
                })
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(id, _)| id)
        };
        let (encode, prefill, decode) = match self.pol.epd {
            EpdMode::Fused => match fused(&views, self.profile) {
                Some(i) => (i, i, Some(i)),
                None => return self.fail_request(rid),
            },
            EpdMode::Hybrid(s) => match dispatch_multimodal(remaining, images, s, &views, self.profile) {
                Some(p) => (p.encode, p.prefill, p.decode),
                None => match fused(&views, self.profile) {
                    Some(i) => (i, i, None),
                    None => return self.fail_request(rid),
                },
            },
        };
        let rt = &mut self.rts[rid as usize];
        rt.prefill_inst = Some(prefill);
        rt.fixed_decode = decode;
        rt.loc = Some(encode);
        self.insts[encode as usize].encode_q.push(rid);
        self.try_start(encode as usize);
    }

    /// Queues a prefill; in priority modes an online request goes ahead of
    /// every offline one, interrupting offline work at the chunk boundary.
    fn enqueue_prefill(&mut self, inst: InstanceId, rid: RequestId) {
        self.rts[rid as usize].loc = Some(inst);
        if self.rts[rid as usize].req.state == RequestState::Migrating
            || self.rts[rid as usize].req.state == RequestState::Encoding
        {
            self.set_state(rid, RequestState::Queued);
        }
        let online = self.rts[rid as usize].req.class == RequestClass::Online;
        if !(online && self.priority_mode()) {
            self.insts[inst as usize].prefill_q.push(rid);
            return;
        }
        let queue: Vec<QueuedPrefill> = self.insts[inst as usize]
            .prefill_q
            .iter()
            .map(|q| {
                let r = &self.rts[*q as usize];
                QueuedPrefill {
                    id: *q,
                    class: r.req.class,
                    context: r.prefilled,
                }
            })
            .collect();
        let out = preempt(&queue, rid, 0.0);
        self.counters.online_preemptions += out.interrupted.len() as u64;
        for v in &out.interrupted {
            if self.rts[*v as usize].req.state == RequestState::Prefilling {
                self.set_state(*v, RequestState::Preempted);
            }
        }
        self.insts[inst as usize].prefill_q = out.order;
    }

    // ---- batches -------------------------------------------------------

    fn try_start(&mut self, i: usize) {
        if !self.insts[i].healthy || self.insts[i].busy {
            return;
        }
        let mut transfers = Vec::new();
        while let Some(rid) = self.insts[i].migration_q.pop_front() {
            transfers.push(rid);
            if self.rts[rid as usize].prefill_done() {
                self.set_state(rid, RequestState::Decoding);
                self.insts[i].decodes.push(rid);
            } else {
                self.enqueue_prefill(i as InstanceId, rid);
            }
        }

        let step = self.step_tokens();
        let decodes = self.admitted_decodes(i);
        let decode_items: Vec<DecodeItem> = decodes
            .iter()
            .map(|d| DecodeItem {
                id: *d,
                step_tokens: step,
            })
            .collect();
        let prefills = self.admissible_prefills(i);
        let encodes: Vec<EncodeWork> = self.insts[i]
            .encode_q
            .iter()
            .map(|r| EncodeWork {
                id: *r,
                images: self.rts[*r as usize].images_left,
            })
            .collect();
        let inst = &self.insts[i];
        let mut plan = if !self.pol.stage_ordered || !encodes.is_empty() {
            let limits = EPDLimits {
                max_encode_batch: self.limits.max_encode_batch.max(1),
                token_budget: self.limits.token_budget.min(inst.budget),
            };
            assemble_batch(
                &decode_items,
                &prefills,
                &encodes,
                &limits,
                u64::MAX,
                self.pol.stage_ordered,
            )
        } else {
            local_schedule(
                &[],
                &decode_items,
                &prefills,
                &LocalLimits {
                    token_budget: inst.budget,
                    kv_free_tokens: u64::MAX,
                },
            )
        };
        plan.transfers = transfers;
        if plan.is_empty() {
            return;
        }

        // Reserve the whole prompt when a request's first chunk starts.
        for c in &plan.chunks {
            let rt = &self.rts[c.id as usize];
            if c.context == 0 && rt.kv == 0 {
                let need = rt.prompt as u64;
                self.rts[c.id as usize].kv = need;
                self.insts[i].kv_used += need;
            }
        }
        let chunk_ids: Vec<RequestId> = plan.chunks.iter().map(|c| c.id).collect();
        for id in chunk_ids {
            self.set_state(id, RequestState::Prefilling);
        }
        let enc_ids: Vec<RequestId> = plan.encodes.iter().map(|e| e.id).collect();
        for id in enc_ids {
            if self.rts[id as usize].req.state != RequestState::Encoding {
                self.set_state(id, RequestState::Encoding);
            }
        }

        let kv_total: u64 = plan.decodes.iter().map(|d| self.rts[*d as usize].kv).sum();
        let mut work = StepWork::price(
            plan.chunks.iter().map(|c| (c.context, c.tokens)),
            plan.decode_tokens,
            kv_total,
            plan.encode_images(),
            self.profile,
            self.cfg.features.graph_mode,
        );
        work.encode_concurrent = matches!(self.pol.epd, EpdMode::Hybrid(_)) && self.insts[i].pool != PoolTag::E;
        let dur = step_duration(work.base_ms(), self.profile, self.cfg);
        let dur_us = to_us(dur).max(1);

        let inst = &mut self.insts[i];
        inst.busy = true;
        inst.generation += 1;
        inst.step_start_us = self.now;
        inst.plan = Some(plan);
        let g = inst.generation;
        self.push(self.now + dur_us, Kind::StepComplete, i as u64, Payload::Generation(g));
    }

    /// Resident decodes that join this step.
    fn admitted_decodes(&self, i: usize) -> Vec<RequestId> {
        let inst = &self.insts[i];
        if self.pol.coloc != ColocMode::Colocation {
            return inst.decodes.clone();
        }
        let is_offline = |r: &RequestId| self.rts[*r as usize].req.class == RequestClass::Offline;
        let online: Vec<RequestId> = inst.decodes.iter().filter(|r| !is_offline(r)).copied().collect();
        let offline: Vec<RequestId> = inst.decodes.iter().filter(|r| is_offline(r)).copied().collect();
        if offline.is_empty() {
            return online;
        }
        let relaxed = PoolKind::from(inst.pool) == PoolKind::LatencyRelaxed;
        if relaxed
            && inst
                .prefill_q
                .iter()
                .any(|r| self.rts[*r as usize].req.class == RequestClass::Online)
        {
            return online;
        }
        let step = self.step_tokens();
        let (bt, kv, tpot) = self.online_batch(&online);
        let cands: Vec<OfflineCandidate> = offline
            .iter()
            .map(|r| OfflineCandidate {
                id: *r,
                step_tokens: step,
                kv_tokens: self.rts[*r as usize].kv,
            })
            .collect();
        let mut out = online.clone();
        if relaxed || online.is_empty() {
            // Relaxed instances, or nothing to balance against: fill in
            // order up to the TPOT bound.
            let (mut bt, mut kv) = (bt, kv);
            for c in &cands {
                let t = crate::model::estimate_decode_step_time(
                    (bt + c.step_tokens as u64) as u32,
                    kv + c.kv_tokens,
                    self.profile,
                    self.cfg.features.graph_mode,
                )
                .unwrap_or(f64::INFINITY);
                if t > tpot && !out.is_empty() {
                    break;
                }
                out.push(c.id);
                bt += c.step_tokens as u64;
                kv += c.kv_tokens;
            }
        } else {
            out.extend(select_offline_for_batch(
                &cands,
                bt,
                kv,
                self.profile,
                self.cfg.features.graph_mode,
                tpot,
            ));
        }
        out
    }

    /// Batch tokens, KV and tightest TPOT target of a set of online decodes.
    fn online_batch(&self, online: &[RequestId]) -> (u64, u64, f64) {
        let tpot = online
            .iter()
            .map(|r| self.rts[*r as usize].req.slo_tpot_ms)
            .min_by(f64::total_cmp)
            .unwrap_or(self.pol.slo.tpot_ms);
        let bt = online.len() as u64 * self.step_tokens() as u64;
        let kv = online.iter().map(|r| self.rts[*r as usize].kv).sum();
        (bt, kv, tpot)
    }

    /// Offline decode placement under co-location: a strict instance only
    /// when its online batch would admit the request now, else the relaxed
    /// origin keeps it.
    fn choose_offline_decode(&self, rid: RequestId, origin: InstanceId) -> Option<InstanceId> {
        let kv_tokens = self.rts[rid as usize].kv;
        let cand = [OfflineCandidate {
            id: rid,
            step_tokens: self.step_tokens(),
            kv_tokens,
        }];
        let mut best: Option<(f64, InstanceId)> = None;
        for (d, inst) in self.insts.iter().enumerate() {
            if !inst.healthy || !inst.pool.decode_duty() || inst.kv_used + kv_tokens > inst.kv_cap {
                continue;
            }
            let online: Vec<RequestId> = inst
                .decodes
                .iter()
                .filter(|r| self.rts[**r as usize].req.class == RequestClass::Online)
                .copied()
                .collect();
            if online.is_empty() {
                continue;
            }
            let (bt, kv, tpot) = self.online_batch(&online);
            if select_offline_for_batch(&cand, bt, kv, self.profile, self.cfg.features.graph_mode, tpot).is_empty() {
                continue;
            }
            let imb =
                UtilizationSnapshot::of(bt + cand[0].step_tokens as u64, kv + kv_tokens, self.profile).imbalance();
            if best.is_none_or(|(b, _)| imb < b) {
                best = Some((imb, d as InstanceId));
            }
        }
        match best {
            Some((_, d)) => Some(d),
            None if self.insts[origin as usize].healthy => Some(origin),
            None => None,
        }
    }

    /// Prefill queue entries that may receive a chunk: anything already
    /// started, plus new prompts whose full KV fits.
    fn admissible_prefills(&self, i: usize) -> Vec<PrefillItem> {
        let inst = &self.insts[i];
        let mut kv_free = inst.kv_cap.saturating_sub(inst.kv_used);
        // Online work still waiting for its first token runs without
        // offline chunks beside it.
        let waiting_online = |r: &RequestId| {
            let q = &self.rts[*r as usize].req;
            q.class == RequestClass::Online && q.first_token_ms.is_none()
        };
        let pause_offline = self.pol.coloc == ColocMode::Colocation
            && (inst.prefill_q.iter().any(waiting_online) || inst.decodes.iter().any(waiting_online));
        let mut out = Vec::new();
        for rid in &inst.prefill_q {
            let rt = &self.rts[*rid as usize];
            if pause_offline && rt.req.class == RequestClass::Offline {
                continue;
            }
            if rt.kv == 0 {
                if rt.prompt as u64 > kv_free {
                    continue;
                }
                kv_free -= rt.prompt as u64;
            }
            out.push(PrefillItem {
                id: *rid,
                context: rt.prefilled,
                remaining: rt.prompt - rt.prefilled.min(rt.prompt),
            });
        }
        out
    }

    fn on_step_complete(&mut self, i: usize, generation: u64) {
        let inst = &mut self.insts[i];
        if !inst.healthy || !inst.busy || inst.generation != generation {
            return;
        }
        inst.busy = false;
        inst.busy_us += self.now - inst.step_start_us;
        inst.steps += 1;
        inst.last_busy_end_us = self.now;
        self.counters.steps += 1;
        let plan = inst.plan.take().unwrap_or_default();

        for e in &plan.encodes {
            let rt = &mut self.rts[e.id as usize];
            rt.images_left -= e.images.min(rt.images_left);
            if rt.images_left == 0 {
                self.encode_done(e.id, i);
            }
        }
        for c in &plan.chunks {
            let rt = &mut self.rts[c.id as usize];
            if rt.loc != Some(i as InstanceId) {
                continue;
            }
            rt.prefilled += c.tokens;
            if rt.prefilled >= rt.prompt {
                self.insts[i].prefill_q.retain(|r| *r != c.id);
                self.place_decode(c.id);
            }
        }
        let expected = if self.cfg.features.mtp {
            expected_tokens_per_step(self.profile.mtp_draft_len, self.profile.mtp_accept_prob)
        } else {
            1.0
        };
        for rid in &plan.decodes {
            self.emit_tokens(*rid, i, expected);
        }
        self.relieve_kv_pressure(i);
        self.try_start(i);
    }

    fn emit_tokens(&mut self, rid: RequestId, i: usize, expected: f64) {
        let now = self.now;
        let record = self.cfg.record_token_times;
        let rt = &mut self.rts[rid as usize];
        if rt.loc != Some(i as InstanceId) || rt.req.state != RequestState::Decoding {
            return;
        }
        rt.credit += expected;
        let whole = libm::floor(rt.credit);
        rt.credit -= whole;
        let left = rt.req.true_output_tokens - rt.req.tokens_generated;
        let emit = (whole as u32).clamp(1, left.max(1)).min(left);
        if emit == 0 {
            return;
        }
        rt.req.tokens_generated += emit;
        rt.kv += emit as u64;
        if record {
            for _ in 0..emit {
                rt.token_times.push(to_ms(now));
            }
        }
        let first = rt.req.first_token_ms.is_none();
        if first {
            rt.req.first_token_ms = Some(to_ms(now));
        }
        let interval = rt.last_token_us.map(|t| to_ms(now - t) / emit as f64);
        rt.last_token_us = Some(now);
        let ttft = to_ms(now) - rt.req.arrival_ms;
        let done = rt.req.tokens_generated >= rt.req.true_output_tokens;
        let inst = &mut self.insts[i];
        inst.kv_used += emit as u64;
        if first {
            inst.stats.record_ttft(ttft);
        }
        if let Some(iv) = interval {
            inst.stats.record_token_interval(iv);
        }
        if done {
            self.complete(rid, i);
        }
    }

    fn complete(&mut self, rid: RequestId, i: usize) {
        self.set_state(rid, RequestState::Complete);
        let rt = &mut self.rts[rid as usize];
        rt.req.finish_ms = Some(to_ms(self.now));
        let tpot = match (rt.req.first_token_ms, rt.req.tokens_generated) {
            (Some(f), n) if n >= 2 => Some((to_ms(self.now) - f) / (n - 1) as f64),
            _ => None,
        };
        let kv = core::mem::take(&mut rt.kv);
        rt.loc = None;
        let inst = &mut self.insts[i];
        inst.kv_used = inst.kv_used.saturating_sub(kv);
        inst.decodes.retain(|r| *r != rid);
        if let Some(t) = tpot {
            inst.stats.record_tpot(t);
        }
        self.unfinished -= 1;
    }

    /// Recompute-preempts the most recent decodes until KV fits again.
    fn relieve_kv_pressure(&mut self, i: usize) {
        while self.insts[i].kv_used > self.insts[i].kv_cap {
            let victim = self.insts[i].decodes.iter().copied().max_by(|a, b| {
                self.rts[*a as usize]
                    .req
                    .arrival_ms
                    .total_cmp(&self.rts[*b as usize].req.arrival_ms)
                    .then(a.cmp(b))
            });
            let Some(v) = victim else { break };
            self.insts[i].decodes.retain(|r| *r != v);
            let rt = &mut self.rts[v as usize];
            let kv = core::mem::take(&mut rt.kv);
            rt.prompt = kv as u32;
            rt.prefilled = 0;
            self.insts[i].kv_used -= kv;
            self.set_state(v, RequestState::Preempted);
            self.counters.preemptions += 1;
            self.enqueue_prefill(i as InstanceId, v);
        }
    }

    fn encode_done(&mut self, rid: RequestId, i: usize) {
        self.insts[i].encode_q.retain(|r| *r != rid);
        let target = self.rts[rid as usize]
            .prefill_inst
            .filter(|p| self.insts[*p as usize].healthy);
        match target {
            Some(p) if p as usize == i => self.enqueue_prefill(p, rid),
            Some(p) => {
                let r = &self.rts[rid as usize];
                let tokens = r.req.image_units as f64 * self.cfg.tokens_per_image as f64;
                let ms = tokens / self.cfg.migration_bandwidth_tokens_per_ms;
                self.counters.image_transfers += 1;
                self.start_transfer(rid, p, ms, true);
            }
            None => match self.choose_prefill(rid) {
                Some(p) => {
                    self.enqueue_prefill(p, rid);
                    self.try_start(p as usize);
                }
                None => self.fail_request(rid),
            },
        }
    }

    fn place_decode(&mut self, rid: RequestId) {
        let Some(origin) = self.rts[rid as usize].loc else {
            return;
        };
        let fixed = self.rts[rid as usize]
            .fixed_decode
            .filter(|d| self.insts[*d as usize].healthy);
        let target = match fixed {
            Some(d) => Some(d),
            None => self.choose_decode(rid, origin),
        };
        if self.rts[rid as usize].req.state == RequestState::Preempted {
            self.set_state(rid, RequestState::Prefilling);
        }
        match target {
            Some(t) if t == origin => {
                self.set_state(rid, RequestState::Decoding);
                self.insts[origin as usize].decodes.push(rid);
            }
            Some(t) => {
                let ms = self.rts[rid as usize].kv as f64 / self.cfg.migration_bandwidth_tokens_per_ms;
                self.counters.kv_transfers += 1;
                self.start_transfer(rid, t, ms, true);
            }
            None => {
                if !self.decode_wait.contains(&rid) {
                    self.decode_wait.push(rid);
                }
            }
        }
    }

    fn choose_decode(&mut self, rid: RequestId, origin: InstanceId) -> Option<InstanceId> {
        let rt = &self.rts[rid as usize];
        let views = self.views(rt.req.class);
        let step = self.step_tokens();
        let any_decode = views.iter().any(|v| v.healthy && v.pool.decode_duty());
        if !any_decode {
            return Some(origin);
        }
        if self.pol.coloc == ColocMode::Colocation
            && rt.req.class == RequestClass::Offline
            && PoolKind::from(self.insts[origin as usize].pool) == PoolKind::LatencyRelaxed
        {
            return self.choose_offline_decode(rid, origin);
        }
        let need = DecodeNeed {
            kv_tokens: rt.kv,
            step_tokens: step,
            origin: match self.pol.dispatch {
                DispatchPolicy::SloAware => Some(origin),
                _ => None,
            },
            slo_tpot_ms: rt.req.slo_tpot_ms,
        };
        match self.pol.dispatch {
            DispatchPolicy::SloAware | DispatchPolicy::MinLoad => {
                match dispatch_decode(&need, &views, self.profile, &self.pol.pd) {
                    DecodeDispatch::Assign(i) => Some(i),
                    DecodeDispatch::Wait => None,
                }
            }
            DispatchPolicy::RoundRobin => {
                let ring: Vec<&InstanceView> = views.iter().filter(|v| v.healthy && v.pool.decode_duty()).collect();
                let n = ring.len();
                for k in 0..n {
                    let v = ring[(self.rr_decode + k) % n];
                    if v.stats.kv_used_tokens + need.kv_tokens <= v.kv_capacity_tokens
                        && v.stats.running_tokens + step as u64 <= v.token_budget as u64
                    {
                        self.rr_decode = self.rr_decode + k + 1;
                        return Some(v.id);
                    }
                }
                None
            }
        }
    }

    /// Moves a request (and its KV charge) to `target`. Serial transfers
    /// queue on the target's inbound link.
    fn start_transfer(&mut self, rid: RequestId, target: InstanceId, ms: f64, serial: bool) {
        let rt = &mut self.rts[rid as usize];
        let kv = rt.kv;
        if let Some(src) = rt.loc {
            let s = &mut self.insts[src as usize];
            s.kv_used = s.kv_used.saturating_sub(kv);
            s.decodes.retain(|r| *r != rid);
            s.prefill_q.retain(|r| *r != rid);
        }
        rt.loc = Some(target);
        self.insts[target as usize].kv_used += kv;
        self.set_state(rid, RequestState::Migrating);
        let dur = to_us(ms);
        let end = if serial {
            let t = &mut self.insts[target as usize];
            let start = t.link_free_us.max(self.now);
            t.link_free_us = start + dur;
            start + dur
        } else {
            self.now + dur
        };
        self.in_flight += 1;
        self.push(end, Kind::TransferComplete, rid, Payload::Target(target));
    }

    fn on_transfer_complete(&mut self, rid: RequestId, target: InstanceId) {
        self.in_flight -= 1;
        if self.rts[rid as usize].req.state.is_terminal() || self.rts[rid as usize].loc != Some(target) {
            return;
        }
        if !self.insts[target as usize].healthy {
            self.recover(alloc::vec![rid], target);
            return;
        }
        self.insts[target as usize].migration_q.push_back(rid);
        self.try_start(target as usize);
    }

    // ---- heartbeat -----------------------------------------------------

    fn on_heartbeat(&mut self) -> bool {
        self.heartbeat_armed = false;
        for i in 0..self.insts.len() {
            let idle = if self.insts[i].busy {
                0.0
            } else {
                to_ms(self.now.saturating_sub(self.insts[i].last_busy_end_us))
            };
            self.insts[i].stats.idle_ms = idle;
        }

        if self.pol.dispatch == DispatchPolicy::SloAware {
            let views = self.views(RequestClass::Online);
            let changes = maybe_switch_roles(
                &views,
                self.prefill_pressure,
                self.pol.slo.tpot_ms,
                &self.pol.pd,
                to_ms(self.now),
            );
            for c in changes {
                self.push(self.now, Kind::RoleSwitch, c.instance as u64, Payload::Role(c.to));
            }
        }
        self.prefill_pressure = false;

        let waiting = core::mem::take(&mut self.decode_wait);
        for rid in waiting {
            let rt = &self.rts[rid as usize];
            if rt.req.state.is_terminal() || !rt.prefill_done() || rt.req.state == RequestState::Migrating {
                continue;
            }
            self.place_decode(rid);
        }
        for i in 0..self.insts.len() {
            self.try_start(i);
        }
        if self.pol.coloc == ColocMode::Colocation {
            self.migrate_offline();
        }

        if self.unfinished == 0 {
            return true;
        }
        let quiet = self.arrivals_left == 0
            && self.in_flight == 0
            && self.recovering == 0
            && self.insts.iter().all(|i| !i.busy);
        if quiet {
            self.stall_beats += 1;
            if self.stall_beats > STALL_HEARTBEATS {
                return false;
            }
        } else {
            self.stall_beats = 0;
        }
        self.push(
            self.now + to_us(self.cfg.heartbeat_ms),
            Kind::Heartbeat,
            0,
            Payload::None,
        );
        self.heartbeat_armed = true;
        true
    }

    fn migrate_offline(&mut self) {
        for p in 0..self.insts.len() {
            let pi = &self.insts[p];
            if !pi.healthy || !pi.pool.prefill_duty() || pi.busy || !pi.prefill_q.is_empty() {
                continue;
            }
            for _ in 0..OFFLINE_MOVES_PER_BEAT {
                let view = self.view(p, RequestClass::Offline);
                let pick = (0..self.insts.len())
                    .filter(|d| *d != p && self.insts[*d].healthy && self.insts[*d].pool.decode_duty())
                    .flat_map(|d| {
                        let running: Vec<RequestId> = self.insts[d]
                            .plan
                            .as_ref()
                            .map(|pl| pl.decodes.clone())
                            .unwrap_or_default();
                        self.insts[d]
                            .decodes
                            .iter()
                            .copied()
                            .filter(move |r| !running.contains(r))
                            .collect::<Vec<_>>()
                    })
                    .filter(|r| self.rts[*r as usize].req.class == RequestClass::Offline)
                    .min();
                let Some(rid) = pick else { break };
                let kv = self.rts[rid as usize].kv;
                match migrate_offline_decode(
                    kv,
                    &view,
                    &self.pol.coloc_cfg,
                    self.cfg.migration_bandwidth_tokens_per_ms,
                ) {
                    Some(ms) => {
                        self.counters.offline_migrations += 1;
                        self.start_transfer(rid, p as InstanceId, ms, true);
                    }
                    None => break,
                }
            }
        }
    }

    fn on_role_switch(&mut self, i: usize, to: PoolTag) {
        let inst = &mut self.insts[i];
        if !inst.healthy || inst.pool == to {
            return;
        }
        inst.pool = to;
        inst.last_switch_ms = Some(to_ms(self.now));
        self.counters.role_switches += 1;
        self.try_start(i);
    }

    // ---- faults --------------------------------------------------------

    fn on_fault(&mut self, i: usize) {
        if !self.insts[i].healthy {
            return;
        }
        self.counters.faults += 1;
        let now = self.now;
        let inst = &mut self.insts[i];
        inst.healthy = false;
        inst.generation += 1;
        if inst.busy {
            inst.busy_us += now - inst.step_start_us;
            inst.busy = false;
        }
        inst.plan = None;
        inst.down_since_us = Some(now);
        inst.kv_used = 0;
        let mut residents: Vec<RequestId> = Vec::new();
        residents.append(&mut inst.decodes);
        residents.append(&mut inst.prefill_q);
        residents.append(&mut inst.encode_q);
        residents.extend(inst.migration_q.drain(..));
        let waiting: Vec<RequestId> = self
            .decode_wait
            .iter()
            .copied()
            .filter(|r| self.rts[*r as usize].loc == Some(i as InstanceId))
            .collect();
        self.decode_wait.retain(|r| !waiting.contains(r));
        residents.extend(waiting);
        residents.sort_unstable();
        residents.dedup();
        self.recovering += 1;
        self.push(
            now + to_us(self.cfg.recovery.recovery_ms),
            Kind::Recover,
            i as u64,
            Payload::None,
        );
        self.recover(residents, i as InstanceId);
    }

    fn on_recover(&mut self, i: usize) {
        self.recovering -= 1;
        let inst = &mut self.insts[i];
        inst.healthy = true;
        if let Some(s) = inst.down_since_us.take() {
            inst.downtime_us += self.now - s;
        }
        inst.last_busy_end_us = self.now;
        self.try_start(i);
    }

    fn recovery_candidates(&self, decode_phase: bool, failed: InstanceId) -> Vec<RouteCandidate> {
        let views = self.views(RequestClass::Online);
        let duty = |v: &InstanceView| {
            if decode_phase {
                v.pool.decode_duty()
            } else {
                v.pool.prefill_duty()
            }
        };
        let mut c: Vec<RouteCandidate> = views
            .iter()
            .filter(|v| v.healthy && v.id != failed && duty(v))
            .map(|v| RouteCandidate {
                id: v.id,
                healthy: true,
                queued_prefill: v.queued_prefill.clone(),
            })
            .collect();
        if c.is_empty() {
            c = views
                .iter()
                .filter(|v| v.healthy && v.id != failed)
                .map(|v| RouteCandidate {
                    id: v.id,
                    healthy: true,
                    queued_prefill: v.queued_prefill.clone(),
                })
                .collect();
        }
        c
    }

    /// Rehomes requests whose instance failed: work without KV is simply
    /// dispatched again; KV-holding work is recomputed or migrated.
    fn recover(&mut self, rids: Vec<RequestId>, failed: InstanceId) {
        let mut groups: [Vec<ResidentRequest>; 2] = [Vec::new(), Vec::new()];
        for rid in rids {
            let rt = &mut self.rts[rid as usize];
            if rt.req.state.is_terminal() {
                continue;
            }
            rt.loc = None;
            if rt.kv == 0 && rt.req.tokens_generated == 0 {
                rt.prefilled = 0;
                self.park(rid);
                self.dispatch_new(rid);
                continue;
            }
            let decode_phase = rt.prefill_done();
            groups[decode_phase as usize].push(ResidentRequest {
                id: rid,
                class: rt.req.class,
                prefix_tokens: rt.kv as u32,
                tokens: Vec::new(),
                replica: self.cfg.kv_host_replica,
            });
        }
        for (phase, group) in groups.into_iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let cands = self.recovery_candidates(phase == 1, failed);
            let plan = plan_fault_recovery(
                failed,
                &group,
                &cands,
                &GlobalCacheIndex::default(),
                self.profile,
                &self.cfg.recovery,
                crate::kvcache::DEFAULT_BLOCK_SIZE,
            );
            for d in plan {
                let rid = d.request;
                match d.action {
                    RecoveryAction::Migrate { target } => {
                        self.counters.recoveries_migrate += 1;
                        let ms = d.migrate_cost_ms.unwrap_or(0.0);
                        self.start_transfer(rid, target, ms, false);
                    }
                    RecoveryAction::Recompute { target } => {
                        self.counters.recoveries_recompute += 1;
                        let rt = &mut self.rts[rid as usize];
                        if phase == 1 {
                            rt.prompt = rt.kv as u32;
                        }
                        rt.kv = 0;
                        rt.prefilled = 0;
                        self.park(rid);
                        self.enqueue_prefill(target, rid);
                        self.try_start(target as usize);
                    }
                    RecoveryAction::Failed => {
                        self.counters.recoveries_failed += 1;
                        self.rts[rid as usize].kv = 0;
                        self.fail_request(rid);
                    }
                }
            }
        }
    }

    /// Puts a request that lost its placement into a waiting state.
    fn park(&mut self, rid: RequestId) {
        match self.rts[rid as usize].req.state {
            RequestState::Prefilling | RequestState::Decoding => self.set_state(rid, RequestState::Preempted),
            RequestState::Migrating => self.set_state(rid, RequestState::Queued),
            _ => {}
        }
    }

    fn fail_request(&mut self, rid: RequestId) {
        let rt = &mut self.rts[rid as usize];
        if rt.req.state.is_terminal() {
            return;
        }
        if let Some(l) = rt.loc.take() {
            let kv = core::mem::take(&mut rt.kv);
            let inst = &mut self.insts[l as usize];
            inst.kv_used = inst.kv_used.saturating_sub(kv);
            inst.decodes.retain(|r| *r != rid);
            inst.prefill_q.retain(|r| *r != rid);
            inst.encode_q.retain(|r| *r != rid);
        }
        self.set_state(rid, RequestState::Failed);
        self.unfinished -= 1;
    }

    // ---- results -------------------------------------------------------

    fn finish(mut self) -> SimResult {
        let pending: Vec<RequestId> = (0..self.rts.len() as RequestId)
            .filter(|r| !self.rts[*r as usize].req.state.is_terminal())
            .collect();
        for rid in pending {
            self.fail_request(rid);
        }
        let end_us = self
            .rts
            .iter()
            .filter_map(|r| r.req.finish_ms)
            .map(to_us)
            .max()
            .unwrap_or(self.now)
            .max(1);
        let requests = self
            .rts
            .into_iter()
            .map(|rt| RequestRecord {
                id: rt.req.id,
                class: rt.req.class,
                modality: rt.req.modality,
                arrival_ms: rt.req.arrival_ms,
                input_tokens: rt.req.input_tokens,
                image_units: rt.req.image_units,
                output_tokens: rt.req.true_output_tokens,
                tokens_generated: rt.req.tokens_generated,
                slo_ttft_ms: rt.req.slo_ttft_ms,
                slo_tpot_ms: rt.req.slo_tpot_ms,
                state: rt.req.state,
                first_token_ms: rt.req.first_token_ms,
                finish_ms: rt.req.finish_ms,
                token_times_ms: rt.token_times,
            })
            .collect();
        let now = self.now;
        let instances = self
            .insts
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let down = inst.downtime_us + inst.down_since_us.map_or(0, |s| now.saturating_sub(s));
                InstanceRecord {
                    id: i as InstanceId,
                    initial_pool: inst.initial_pool,
                    final_pool: inst.pool,
                    busy_ms: to_ms(inst.busy_us),
                    utilization: (inst.busy_us as f64 / end_us as f64).min(1.0),
                    steps: inst.steps,
                    downtime_ms: to_ms(down),
                }
            })
            .collect();
        SimResult {
            schema: alloc::string::String::from(RESULT_SCHEMA),
            metadata: Some(RunMetadata {
                dispatch: self.pol.dispatch,
                epd: self.pol.epd,
                stage_ordered: self.pol.stage_ordered,
                coloc: self.pol.coloc,
                epd_limits: self.limits,
                seed: self.cfg.seed,
            }),
            end_ms: to_ms(end_us),
            requests,
            instances,
            counters: self.counters,
        }
    }
}
