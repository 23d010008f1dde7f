//! Synthetic trace generation and CSV trace files.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use xsim_core::model::{Modality, RequestClass, SLOTargets, TraceRecord};

use crate::error::{Error, Result};

/// Column order of trace files.
pub const TRACE_HEADER: [&str; 8] = [
    "arrival_ms",
    "class",
    "modality",
    "input_tokens",
    "image_units",
    "output_tokens",
    "slo_ttft_ms",
    "slo_tpot_ms",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LengthDist {
    Fixed {
        n: u32,
    },
    /// Inclusive on both ends.
    Uniform {
        lo: u32,
        hi: u32,
    },
    /// Rounded and clamped to `[1, cap]`.
    Lognormal {
        mu: f64,
        sigma: f64,
        cap: u32,
    },
}

impl LengthDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LengthDist::Fixed { n } => n >= 1,
            LengthDist::Uniform { lo, hi } => lo >= 1 && lo <= hi,
            LengthDist::Lognormal { mu, sigma, cap } => mu.is_finite() && sigma.is_finite() && sigma >= 0.0 && cap >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid length distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            LengthDist::Fixed { n } => n,
            LengthDist::Uniform { lo, hi } => rng.random_range(lo..=hi),
            LengthDist::Lognormal { mu, sigma, cap } => {
                let x: f64 = LogNormal::new(mu, sigma).expect("validated").sample(rng);
                x.round().clamp(1.0, cap as f64) as u32
            }
        }
    }
}

/// Arrival modulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Burst {
    /// Homogeneous Poisson at `rate_rps`.
    #[default]
    None,
    /// Two-state Markov-modulated Poisson. Starts in the high state; dwell
    /// times are exponential with the same mean in both states.
    TwoState {
        high_rate_rps: f64,
        low_rate_rps: f64,
        mean_dwell_ms: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub seed: u64,
    pub count: usize,
    pub rate_rps: f64,
    pub burst: Burst,
    pub input: LengthDist,
    pub output: LengthDist,
    /// Image units per multimodal request.
    pub images: LengthDist,
    pub offline_fraction: f64,
    pub multimodal_fraction: f64,
    pub slo: SLOTargets,
    /// Targets stamped on offline rows; `slo` when absent.
    pub offline_slo: Option<SLOTargets>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            seed: 0,
            count: 0,
            rate_rps: 1.0,
            burst: Burst::None,
            input: LengthDist::Fixed { n: 512 },
            output: LengthDist::Fixed { n: 128 },
            images: LengthDist::Fixed { n: 1 },
            offline_fraction: 0.0,
            multimodal_fraction: 0.0,
            slo: SLOTargets::default(),
            offline_slo: None,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.rate_rps) {
            return Err(xsim_core::Error::InvalidConfig("rate_rps must be positive").into());
        }
        if let Burst::TwoState {
            high_rate_rps,
            low_rate_rps,
            mean_dwell_ms,
        } = self.burst
        {
            if !positive(high_rate_rps) || !positive(low_rate_rps) || !positive(mean_dwell_ms) {
                return Err(xsim_core::Error::InvalidConfig("burst rates and dwell must be positive").into());
            }
        }
        for f in [self.offline_fraction, self.multimodal_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("fraction {f} outside [0, 1]")));
            }
        }
        self.input.validate()?;
        self.output.validate()?;
        self.images.validate()?;
        self.slo.validate()?;
        if let Some(s) = &self.offline_slo {
            s.validate()?;
        }
        Ok(())
    }
}

struct Arrivals {
    t_ms: f64,
    burst: Burst,
    rate_rps: f64,
    high: bool,
    state_end_ms: f64,
}

impl Arrivals {
    fn new(cfg: &TraceConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut a = Arrivals {
            t_ms: 0.0,
            burst: cfg.burst,
            rate_rps: cfg.rate_rps,
            high: true,
            state_end_ms: f64::INFINITY,
        };
        if let Burst::TwoState { mean_dwell_ms, .. } = cfg.burst {
            a.state_end_ms = exp_sample(rng, mean_dwell_ms);
        }
        a
    }

    fn rate_per_ms(&self) -> f64 {
        match self.burst {
            Burst::None => self.rate_rps / 1000.0,
            Burst::TwoState {
                high_rate_rps,
                low_rate_rps,
                ..
            } => {
                if self.high {
                    high_rate_rps / 1000.0
                } else {
                    low_rate_rps / 1000.0
                }
            }
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let gap = exp_sample(rng, 1.0 / self.rate_per_ms());
            if self.t_ms + gap <= self.state_end_ms {
                self.t_ms += gap;
                return self.t_ms;
            }
            // Memoryless: restart the draw from the state boundary.
            self.t_ms = self.state_end_ms;
            self.high = !self.high;
            if let Burst::TwoState { mean_dwell_ms, .. } = self.burst {
                self.state_end_ms = self.t_ms + exp_sample(rng, mean_dwell_ms);
            }
        }
    }
}

fn exp_sample(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    Exp::new(1.0 / mean).expect("positive mean").sample(rng)
}

/// Deterministic trace for `cfg`; arrivals are non-decreasing.
pub fn gen_trace(cfg: &TraceConfig) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut arrivals = Arrivals::new(cfg, &mut rng);
    let mut out = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let arrival_ms = arrivals.next(&mut rng);
        let offline = rng.random::<f64>() < cfg.offline_fraction;
        let multimodal = rng.random::<f64>() < cfg.multimodal_fraction;
        let input_tokens = cfg.input.sample(&mut rng);
        let output_tokens = cfg.output.sample(&mut rng);
        let image_units = if multimodal { cfg.images.sample(&mut rng) } else { 0 };
        let slo = match (offline, &cfg.offline_slo) {
            (true, Some(s)) => *s,
            _ => cfg.slo,
        };
        out.push(TraceRecord {
            arrival_ms,
            class: if offline {
                RequestClass::Offline
            } else {
                RequestClass::Online
            },
            modality: if multimodal {
                Modality::Multimodal
            } else {
                Modality::Text
            },
            input_tokens,
            image_units,
            output_tokens,
            slo_ttft_ms: slo.ttft_ms,
            slo_tpot_ms: slo.tpot_ms,
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawRow {
    arrival_ms: f64,
    class: RequestClass,
    modality: Modality,
    input_tokens: i64,
    image_units: i64,
    output_tokens: i64,
    slo_ttft_ms: f64,
    slo_tpot_ms: f64,
}

fn count(row: usize, name: &str, v: i64) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::MalformedTrace {
        row,
        reason: format!("{name} = {v} is not a valid count"),
    })
}

/// Parses a trace. Error rows are file line numbers, the header being line 1.
pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::MalformedTrace {
        row: 1,
        reason: e.to_string(),
    })?;
    for col in TRACE_HEADER {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::MalformedTrace {
                row: 1,
                reason: format!("missing column {col}"),
            });
        }
    }
    let headers = headers.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::MalformedTrace {
            row: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let row = rec.position().map_or(out.len() + 2, |p| p.line() as usize);
        let raw: RawRow = rec.deserialize(Some(&headers)).map_err(|e| Error::MalformedTrace {
            row,
            reason: e.to_string(),
        })?;
        let r = TraceRecord {
            arrival_ms: raw.arrival_ms,
            class: raw.class,
            modality: raw.modality,
            input_tokens: count(row, "input_tokens", raw.input_tokens)?,
            image_units: count(row, "image_units", raw.image_units)?,
            output_tokens: count(row, "output_tokens", raw.output_tokens)?,
            slo_ttft_ms: raw.slo_ttft_ms,
            slo_tpot_ms: raw.slo_tpot_ms,
        };
        r.validate().map_err(|e| Error::MalformedTrace {
            row,
            reason: e.to_string(),
        })?;
        out.push(r);
    }
    out.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
    Ok(out)
}

pub fn load_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = std::fs::File::open(path).map_err(|source| Error::TraceIo {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace_csv(std::io::BufReader::new(file))
}

pub fn write_trace_csv<W: Write>(writer: W, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io {
        path: "<trace>".into(),
        source: std::io::Error::other(e),
    };
    w.write_record(TRACE_HEADER).map_err(io)?;
    for r in trace {
        w.write_record([
            r.arrival_ms.to_string(),
            class_name(r.class).to_string(),
            modality_name(r.modality).to_string(),
            r.input_tokens.to_string(),
            r.image_units.to_string(),
            r.output_tokens.to_string(),
            r.slo_ttft_ms.to_string(),
            r.slo_tpot_ms.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<trace>".into(),
        source,
    })
}

pub fn save_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_trace_csv(std::io::BufWriter::new(file), trace)
}

fn class_name(c: RequestClass) -> &'static str {
    match c {
        RequestClass::Online => "online",
        RequestClass::Offline => "offline",
    }
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Text => "text",
        Modality::Multimodal => "multimodal",
    }
}
