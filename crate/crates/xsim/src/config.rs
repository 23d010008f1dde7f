//! Scenario files.
//!
//! A scenario is a TOML document with four tables:
//!
//! ```toml
//! [model]          # latency coefficients, see `ModelProfile`
//! prefill_a = 1e-5
//!
//! [sim]            # engine settings, see `SimConfig`
//! heartbeat_ms = 100.0
//! [sim.features]
//! async_sched_overlap = true
//!
//! [policies]       # see `Policies`
//! dispatch = "slo-aware"
//! coloc = "online-priority"
//! epd = { hybrid = "E_P_D" }   # or "fused"
//! [policies.slo]
//! ttft_ms = 2000.0
//! tpot_ms = 100.0
//!
//! [[cluster]]      # one entry per group of identical instances
//! pool = "P"
//! count = 2
//! kv_capacity_tokens = 200000
//! token_budget = 2048
//! ```
//!
//! Every field has a default except the cluster, which must name at least
//! one instance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xsim_core::kernel::OverlapProfile;
use xsim_core::model::ModelProfile;
use xsim_core::pd::PoolTag;
use xsim_core::sim::{ClusterConfig, InstanceConfig, Policies, SimConfig};

use crate::error::{Error, Result};
use crate::workload::TraceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceGroup {
    pub pool: PoolTag,
    #[serde(default = "one")]
    pub count: u32,
    pub kv_capacity_tokens: u64,
    pub token_budget: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub model: ModelProfile,
    pub sim: SimConfig,
    pub policies: Policies,
    pub cluster: Vec<InstanceGroup>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_config(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sim.validate()?;
        self.policies.pd.validate()?;
        self.policies.slo.validate()?;
        self.cluster_config().validate()?;
        Ok(())
    }

    /// Groups expanded in file order; instance ids follow that order.
    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            instances: self
                .cluster
                .iter()
                .flat_map(|g| {
                    (0..g.count).map(move |_| InstanceConfig {
                        pool: g.pool,
                        kv_capacity_tokens: g.kv_capacity_tokens,
                        token_budget: g.token_budget,
                    })
                })
                .collect(),
        }
    }
}

pub fn load_trace_spec(path: &Path) -> Result<TraceConfig> {
    let c: TraceConfig = toml::from_str(&read_config(path)?).map_err(|e| Error::Config(e.to_string()))?;
    c.validate()?;
    Ok(c)
}

pub fn load_overlap_profile(path: &Path) -> Result<OverlapProfile> {
    let p: OverlapProfile = toml::from_str(&read_config(path)?).map_err(|e| Error::Config(e.to_string()))?;
    p.validate()?;
    Ok(p)
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use xsim_core::epd::EPDStrategy;
    use xsim_core::sim::{ColocMode, DispatchPolicy, EpdMode};

    const TEXT: &str = r#"
[model]
prefill_b = 0.04

[sim.features]
async_sched_overlap = true

[policies]
dispatch = "min-load"
coloc = "colocation"
epd = { hybrid = "ED_P" }

[[cluster]]
pool = "P"
count = 2
kv_capacity_tokens = 1000
token_budget = 256

[[cluster]]
pool = "D"
kv_capacity_tokens = 4000
token_budget = 512
"#;

    #[test]
    fn parses_groups_and_overrides() {
        let s = Scenario::from_toml(TEXT).unwrap();
        assert_eq!(s.model.prefill_b, 0.04);
        assert_eq!(s.model.prefill_c, ModelProfile::default().prefill_c);
        assert!(s.sim.features.async_sched_overlap);
        assert_eq!(s.policies.dispatch, DispatchPolicy::MinLoad);
        assert_eq!(s.policies.coloc, ColocMode::Colocation);
        assert_eq!(s.policies.epd, EpdMode::Hybrid(EPDStrategy::ED_P));
        let c = s.cluster_config();
        assert_eq!(c.instances.len(), 3);
        assert_eq!(c.instances[2].pool, PoolTag::D);
    }

    #[test]
    fn fused_and_errors() {
        let s = Scenario::from_toml(&TEXT.replace("{ hybrid = \"ED_P\" }", "\"fused\"")).unwrap();
        assert_eq!(s.policies.epd, EpdMode::Fused);
        assert!(matches!(
            Scenario::from_toml(
                "[model]\nprefill_a = -1.0\n[[cluster]]\npool=\"P\"\nkv_capacity_tokens=1\ntoken_budget=1\n"
            ),
            Err(Error::Core(_))
        ));
        assert!(matches!(Scenario::from_toml(""), Err(Error::Core(_))));
        assert!(matches!(
            Scenario::from_toml("[policies]\ndispatch = \"best\""),
            Err(Error::Config(_))
        ));
    }
}
