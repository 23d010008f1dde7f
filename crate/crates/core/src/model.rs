//! Request and instance domain types plus the analytic latency model.
//!
//! Every scheduler and the simulator price work through the functions in this
//! module: a quadratic prefill model, a roofline decode model and a linear
//! encode model. All results are milliseconds as `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type RequestId = u64;
pub type InstanceId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestClass {
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Multimodal,
}

/// Lifecycle state of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Queued,
    Encoding,
    Prefilling,
    Decoding,
    Preempted,
    Migrating,
    Complete,
    Failed,
}

impl RequestState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RequestState::Complete | RequestState::Failed)
    }

    /// Whether the lifecycle graph has an edge `self -> next`.
    ///
    /// Self-loops are allowed for non-terminal states (a request can stay in
    /// `Prefilling` across many chunks).
    pub fn can_transition(self, next: RequestState) -> bool {
        use RequestState::*;
        if self == next {
            return !self.is_terminal();
        }
        match self {
            Queued => matches!(next, Encoding | Prefilling | Migrating | Failed),
            Encoding => matches!(next, Queued | Prefilling | Migrating | Failed),
            Prefilling => matches!(next, Queued | Decoding | Preempted | Migrating | Failed),
            Decoding => matches!(next, Complete | Preempted | Migrating | Failed),
            Preempted => matches!(next, Queued | Prefilling | Migrating | Failed),
            Migrating => matches!(next, Queued | Prefilling | Decoding | Failed),
            Complete | Failed => false,
        }
    }
}

/// Per-request latency targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SLOTargets {
    pub ttft_ms: f64,
    pub tpot_ms: f64,
}

impl Default for SLOTargets {
    fn default() -> Self {
        SLOTargets {
            ttft_ms: 2000.0,
            tpot_ms: 100.0,
        }
    }
}

impl SLOTargets {
    pub fn new(ttft_ms: f64, tpot_ms: f64) -> Result<Self> {
        let slo = SLOTargets { ttft_ms, tpot_ms };
        slo.validate()?;
        Ok(slo)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ttft_ms > 0.0 && self.tpot_ms > 0.0) {
            return Err(Error::InvalidConfig("SLO targets must be positive"));
        }
        Ok(())
    }
}

/// One inference job.
///
/// `true_output_tokens` is oracle knowledge: the simulator uses it to decide
/// when a request finishes, schedulers never read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub class: RequestClass,
    pub modality: Modality,
    pub arrival_ms: f64,
    pub input_tokens: u32,
    pub image_units: u32,
    pub true_output_tokens: u32,
    pub slo_ttft_ms: f64,
    pub slo_tpot_ms: f64,
    pub state: RequestState,
    pub tokens_generated: u32,
    pub first_token_ms: Option<f64>,
    pub finish_ms: Option<f64>,
    pub origin_instance: Option<InstanceId>,
}

impl Request {
    pub fn new_text(id: RequestId, arrival_ms: f64, input_tokens: u32, output_tokens: u32) -> Self {
        Request {
            id,
            class: RequestClass::Online,
            modality: Modality::Text,
            arrival_ms,
            input_tokens,
            image_units: 0,
            true_output_tokens: output_tokens,
            slo_ttft_ms: SLOTargets::default().ttft_ms,
            slo_tpot_ms: SLOTargets::default().tpot_ms,
            state: RequestState::Queued,
            tokens_generated: 0,
            first_token_ms: None,
            finish_ms: None,
            origin_instance: None,
        }
    }

    pub fn slo(&self) -> SLOTargets {
        SLOTargets {
            ttft_ms: self.slo_ttft_ms,
            tpot_ms: self.slo_tpot_ms,
        }
    }

    /// Prompt length seen by prefill, including the image tokens produced by
    /// the encoder.
    pub fn prompt_tokens(&self, tokens_per_image: u32) -> u32 {
        self.input_tokens + self.image_units * tokens_per_image
    }

    /// Moves the request along the lifecycle graph.
    pub fn transition(&mut self, next: RequestState) -> Result<()> {
        if !self.state.can_transition(next) {
            return Err(Error::InvalidTransition {
                from: self.state,
                to: next,
            });
        }
        self.state = next;
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.tokens_generated > self.true_output_tokens {
            return Err(Error::InvariantViolated("tokens_generated exceeds true_output_tokens"));
        }
        if let Some(t) = self.first_token_ms {
            if t < self.arrival_ms {
                return Err(Error::InvariantViolated("first token precedes arrival"));
            }
        }
        if (self.image_units == 0) != (self.modality == Modality::Text) {
            return Err(Error::InvariantViolated("image_units must be zero exactly for text"));
        }
        Ok(())
    }
}

/// One row of a request trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ms: f64,
    pub class: RequestClass,
    pub modality: Modality,
    pub input_tokens: u32,
    pub image_units: u32,
    pub output_tokens: u32,
    pub slo_ttft_ms: f64,
    pub slo_tpot_ms: f64,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_ms >= 0.0 && self.arrival_ms.is_finite()) {
            return Err(Error::InvalidConfig("arrival_ms must be finite and non-negative"));
        }
        if self.input_tokens == 0 || self.output_tokens == 0 {
            return Err(Error::InvalidConfig("token counts must be at least 1"));
        }
        if (self.image_units == 0) != (self.modality == Modality::Text) {
            return Err(Error::InvalidConfig("image_units must be zero exactly for text"));
        }
        SLOTargets::new(self.slo_ttft_ms, self.slo_tpot_ms).map(|_| ())
    }

    pub fn to_request(&self, id: RequestId) -> Request {
        Request {
            id,
            class: self.class,
            modality: self.modality,
            arrival_ms: self.arrival_ms,
            input_tokens: self.input_tokens,
            image_units: self.image_units,
            true_output_tokens: self.output_tokens,
            slo_ttft_ms: self.slo_ttft_ms,
            slo_tpot_ms: self.slo_tpot_ms,
            state: RequestState::Queued,
            tokens_generated: 0,
            first_token_ms: None,
            finish_ms: None,
            origin_instance: None,
        }
    }
}

/// Coefficients of the analytic latency model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelProfile {
    /// ms / token²
    pub prefill_a: f64,
    /// ms / token
    pub prefill_b: f64,
    /// ms
    pub prefill_c: f64,
    /// ms per batch token
    pub decode_alpha: f64,
    /// ms per resident KV token
    pub decode_beta: f64,
    pub encode_per_image_ms: f64,
    pub launch_overhead_ms: f64,
    pub launch_overhead_graph_ms: f64,
    pub sched_overhead_ms: f64,
    pub num_layers: u32,
    pub mtp_draft_len: u32,
    pub mtp_accept_prob: f64,
    pub attn_gamma_us_per_token_layer: f64,
}

impl Default for ModelProfile {
    fn default() -> Self {
        ModelProfile {
            prefill_a: 1.0e-5,
            prefill_b: 0.05,
            prefill_c: 5.0,
            decode_alpha: 0.05,
            decode_beta: 5.0e-5,
            encode_per_image_ms: 40.0,
            launch_overhead_ms: 4.0,
            launch_overhead_graph_ms: 1.0,
            sched_overhead_ms: 2.0,
            num_layers: 61,
            mtp_draft_len: 1,
            mtp_accept_prob: 0.7,
            attn_gamma_us_per_token_layer: 9.84e-4,
        }
    }
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            self.prefill_a,
            self.prefill_b,
            self.prefill_c,
            self.decode_alpha,
            self.decode_beta,
            self.encode_per_image_ms,
            self.launch_overhead_ms,
            self.launch_overhead_graph_ms,
            self.sched_overhead_ms,
            self.attn_gamma_us_per_token_layer,
        ];
        if coeffs.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidConfig(
                "profile coefficients must be finite and non-negative",
            ));
        }
        if self.launch_overhead_graph_ms > self.launch_overhead_ms {
            return Err(Error::InvalidConfig(
                "graph-mode launch overhead exceeds eager overhead",
            ));
        }
        if !(0.0..=1.0).contains(&self.mtp_accept_prob) {
            return Err(Error::InvalidConfig("mtp_accept_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn launch_overhead(&self, graph_mode: bool) -> f64 {
        if graph_mode {
            self.launch_overhead_graph_ms
        } else {
            self.launch_overhead_ms
        }
    }
}

/// `a·L² + b·L + c` for a whole prompt of `input_tokens`.
pub fn estimate_prefill_time(input_tokens: u32, profile: &ModelProfile) -> f64 {
    let l = input_tokens as f64;
    profile.prefill_a * l * l + profile.prefill_b * l + profile.prefill_c
}

/// Marginal cost of computing `chunk_tokens` on top of `context_tokens`
/// already-computed ones: `a(s² + 2ks) + b·s`.
///
/// The constant term is excluded so the chunk costs of any partition of a
/// prompt of length `L` sum to exactly `a·L² + b·L`.
pub fn estimate_chunk_time(context_tokens: u32, chunk_tokens: u32, profile: &ModelProfile) -> f64 {
    let k = context_tokens as f64;
    let s = chunk_tokens as f64;
    profile.prefill_a * (s * s + 2.0 * k * s) + profile.prefill_b * s
}

/// Roofline decode step: `max(α·batch, β·kv) + launch`.
pub fn estimate_decode_step_time(
    batch_tokens: u32,
    kv_total_tokens: u64,
    profile: &ModelProfile,
    graph_mode: bool,
) -> Result<f64> {
    if batch_tokens == 0 {
        return Err(Error::InvalidBatch);
    }
    let compute = profile.decode_alpha * batch_tokens as f64;
    let memory = profile.decode_beta * kv_total_tokens as f64;
    Ok(compute.max(memory) + profile.launch_overhead(graph_mode))
}

pub fn estimate_encode_time(image_units: u32, profile: &ModelProfile) -> f64 {
    image_units as f64 * profile.encode_per_image_ms
}

/// Expected tokens emitted per decode step with `draft_len` speculative
/// tokens, each accepted independently with probability `accept_prob` until
/// the first rejection: `Σ_{k=0..d} p^k`.
pub fn expected_tokens_per_step(draft_len: u32, accept_prob: f64) -> f64 {
    let p = accept_prob.clamp(0.0, 1.0);
    let mut term = 1.0;
    let mut sum = 1.0;
    for _ in 0..draft_len {
        term *= p;
        sum += term;
    }
    sum
}
