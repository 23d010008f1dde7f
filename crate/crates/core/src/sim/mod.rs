//! Deterministic iteration-level discrete-event simulator.
//!
//! Each event advances one instance by one batched step, completes a
//! transfer, fires a heartbeat, or injects a fault. Simulation time is kept
//! in integer microseconds so runs are bit-reproducible.

mod engine;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::coloc::ColocConfig;
use crate::epd::{EPDLimits, EPDStrategy};
use crate::error::{Error, Result};
use crate::kernel::{dual_stream_estimate, OverlapProfile};
use crate::kvcache::RecoveryConfig;
use crate::model::{
    estimate_chunk_time, estimate_decode_step_time, estimate_encode_time, InstanceId, Modality, ModelProfile,
    RequestClass, RequestId, RequestState, SLOTargets, TraceRecord,
};
use crate::pd::{PDConfig, PoolTag};

pub use engine::{inject_fault, Simulator};

pub const RESULT_SCHEMA: &str = "xsim.sim-result/1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Features {
    pub async_sched_overlap: bool,
    pub dual_stream: bool,
    pub graph_mode: bool,
    pub mtp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub time_ms: f64,
    pub instance: InstanceId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub features: Features,
    pub n_micro_batches: u32,
    pub migration_bandwidth_tokens_per_ms: f64,
    pub heartbeat_ms: f64,
    pub seed: u64,
    pub recovery: RecoveryConfig,
    pub overlap: OverlapProfile,
    pub tokens_per_image: u32,
    /// Whether KV written to HBM also survives in host memory.
    pub kv_host_replica: bool,
    pub record_token_times: bool,
    /// Events after this time are dropped and unfinished requests fail.
    pub horizon_ms: Option<f64>,
    pub faults: Vec<FaultSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            features: Features::default(),
            n_micro_batches: 1,
            migration_bandwidth_tokens_per_ms: 4096.0,
            heartbeat_ms: 100.0,
            seed: 0,
            recovery: RecoveryConfig::default(),
            overlap: OverlapProfile::default(),
            tokens_per_image: crate::epd::DEFAULT_TOKENS_PER_IMAGE,
            kv_host_replica: true,
            record_token_times: false,
            horizon_ms: None,
            faults: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_micro_batches < 1 {
            return Err(Error::InvalidConfig("n_micro_batches must be at least 1"));
        }
        if !(self.migration_bandwidth_tokens_per_ms > 0.0) {
            return Err(Error::InvalidConfig("migration bandwidth must be positive"));
        }
        if !(self.heartbeat_ms > 0.0) {
            return Err(Error::InvalidConfig("heartbeat_ms must be positive"));
        }
        if !(self.recovery.bandwidth_bytes_per_ms > 0.0) || self.recovery.recovery_ms < 0.0 {
            return Err(Error::InvalidConfig("invalid recovery settings"));
        }
        self.overlap.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub pool: PoolTag,
    pub kv_capacity_tokens: u64,
    pub token_budget: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub instances: Vec<InstanceConfig>,
}

impl ClusterConfig {
    pub fn uniform(pools: &[PoolTag], kv_capacity_tokens: u64, token_budget: u32) -> Self {
        ClusterConfig {
            instances: pools
                .iter()
                .map(|p| InstanceConfig {
                    pool: *p,
                    kv_capacity_tokens,
                    token_budget,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::InvalidConfig("cluster has no instances"));
        }
        if self
            .instances
            .iter()
            .any(|i| i.token_budget == 0 || i.kv_capacity_tokens == 0)
        {
            return Err(Error::InvalidConfig("instance budget and KV capacity must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispatchPolicy {
    SloAware,
    MinLoad,
    RoundRobin,
}

impl DispatchPolicy {
    pub fn name(self) -> &'static str {
        match self {
            DispatchPolicy::SloAware => "slo-aware",
            DispatchPolicy::MinLoad => "min-load",
            DispatchPolicy::RoundRobin => "round-robin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpdMode {
    Hybrid(EPDStrategy),
    /// Every phase of a multimodal request on one instance, serially.
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColocMode {
    /// First come, first served regardless of class.
    StaticPd,
    /// Online prefill ahead of offline at chunk boundaries.
    OnlinePriority,
    /// Online priority plus balanced offline decode admission and migration
    /// of offline decodes onto idle relaxed instances.
    Colocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Policies {
    pub dispatch: DispatchPolicy,
    pub epd: EpdMode,
    pub stage_ordered: bool,
    pub coloc: ColocMode,
    pub pd: PDConfig,
    pub coloc_cfg: ColocConfig,
    /// Profiled from `slo` when absent.
    pub epd_limits: Option<EPDLimits>,
    /// Cluster-level targets used by role switching and limit profiling.
    pub slo: SLOTargets,
}

impl Default for Policies {
    fn default() -> Self {
        Policies {
            dispatch: DispatchPolicy::SloAware,
            epd: EpdMode::Hybrid(EPDStrategy::E_P_D),
            stage_ordered: true,
            coloc: ColocMode::OnlinePriority,
            pd: PDConfig::default(),
            coloc_cfg: ColocConfig::default(),
            epd_limits: None,
            slo: SLOTargets::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub preemptions: u64,
    pub online_preemptions: u64,
    pub role_switches: u64,
    pub kv_transfers: u64,
    pub image_transfers: u64,
    pub offline_migrations: u64,
    pub faults: u64,
    pub recoveries_recompute: u64,
    pub recoveries_migrate: u64,
    pub recoveries_failed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub class: RequestClass,
    pub modality: Modality,
    pub arrival_ms: f64,
    pub input_tokens: u32,
    pub image_units: u32,
    pub output_tokens: u32,
    pub tokens_generated: u32,
    pub slo_ttft_ms: f64,
    pub slo_tpot_ms: f64,
    pub state: RequestState,
    pub first_token_ms: Option<f64>,
    pub finish_ms: Option<f64>,
    /// Emission time of every token; empty unless recording was enabled.
    pub token_times_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: InstanceId,
    pub initial_pool: PoolTag,
    pub final_pool: PoolTag,
    pub busy_ms: f64,
    pub utilization: f64,
    pub steps: u64,
    pub downtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub dispatch: DispatchPolicy,
    pub epd: EpdMode,
    pub stage_ordered: bool,
    pub coloc: ColocMode,
    pub epd_limits: EPDLimits,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub schema: String,
    pub metadata: Option<RunMetadata>,
    pub end_ms: f64,
    pub requests: Vec<RequestRecord>,
    pub instances: Vec<InstanceRecord>,
    pub counters: Counters,
}

impl SimResult {
    pub fn empty() -> Self {
        SimResult {
            schema: String::from(RESULT_SCHEMA),
            metadata: None,
            end_ms: 0.0,
            requests: Vec::new(),
            instances: Vec::new(),
            counters: Counters::default(),
        }
    }

    /// Every completed request has both timestamps and all its tokens.
    pub fn check_invariants(&self) -> Result<()> {
        for r in &self.requests {
            match r.state {
                RequestState::Complete => {
                    if r.first_token_ms.is_none() || r.finish_ms.is_none() {
                        return Err(Error::InvariantViolated("complete request without timestamps"));
                    }
                    if r.tokens_generated != r.output_tokens {
                        return Err(Error::InvariantViolated("token count mismatch at completion"));
                    }
                }
                RequestState::Failed => {}
                _ => return Err(Error::InvariantViolated("request neither complete nor failed")),
            }
            if r.first_token_ms.is_some_and(|t| t < r.arrival_ms) {
                return Err(Error::InvariantViolated("first token precedes arrival"));
            }
        }
        Ok(())
    }
}

/// Accelerator time of one batch before framework overheads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepWork {
    /// Σ (context, chunk) pairs priced by the chunk model, plus the fixed
    /// prefill cost when any chunk is present.
    pub prefill_ms: f64,
    pub decode_ms: f64,
    pub encode_ms: f64,
    /// Encode runs on its own stream next to the language model.
    pub encode_concurrent: bool,
}

impl StepWork {
    pub fn price(
        chunks: impl IntoIterator<Item = (u32, u32)>,
        decode_tokens: u32,
        decode_kv_tokens: u64,
        encode_images: u32,
        profile: &ModelProfile,
        graph_mode: bool,
    ) -> Self {
        let mut any = false;
        let mut prefill_ms = 0.0;
        for (ctx, s) in chunks {
            any = true;
            prefill_ms += estimate_chunk_time(ctx, s, profile);
        }
        if any {
            prefill_ms += profile.prefill_c;
        }
        let decode_ms = if decode_tokens > 0 {
            estimate_decode_step_time(decode_tokens, decode_kv_tokens, profile, graph_mode).unwrap_or(0.0)
        } else {
            0.0
        };
        StepWork {
            prefill_ms,
            decode_ms,
            encode_ms: estimate_encode_time(encode_images, profile),
            encode_concurrent: false,
        }
    }

    pub fn base_ms(&self) -> f64 {
        let lang = self.prefill_ms + self.decode_ms;
        if self.encode_concurrent {
            lang.max(self.encode_ms)
        } else {
            lang + self.encode_ms
        }
    }
}

/// Wall time of a step: the base shortened by dual-stream overlap (never by
/// more than half), plus scheduling overhead either in full or only the part
/// the accelerator work does not hide.
pub fn step_duration(base_ms: f64, profile: &ModelProfile, cfg: &SimConfig) -> f64 {
    let mut t = base_ms;
    if cfg.features.dual_stream && cfg.n_micro_batches >= 2 {
        let saved = dual_stream_estimate(&cfg.overlap).saved_fraction * base_ms;
        if saved > 0.0 {
            t -= saved.min(0.5 * base_ms);
        }
    }
    if cfg.features.async_sched_overlap {
        t + (profile.sched_overhead_ms - t).max(0.0)
    } else {
        t + profile.sched_overhead_ms
    }
}

/// Simulates `trace` to completion (or to the horizon).
pub fn run(
    trace: &[TraceRecord],
    cluster: &ClusterConfig,
    policies: &Policies,
    profile: &ModelProfile,
    cfg: &SimConfig,
) -> Result<SimResult> {
    let mut sim = Simulator::new(trace, cluster, policies, profile, cfg)?;
    for f in &cfg.faults {
        sim.schedule_fault(f.time_ms, f.instance)?;
    }
    Ok(sim.run_to_end())
}
