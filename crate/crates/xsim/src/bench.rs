//! Random beam-search instances and the oracle sweep behind `beam-bench`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use xsim_core::beam::{brute_force_topk, expand_beam, Hypothesis};

/// One hypothesis per beam slot, `top_k` strictly descending expansions each.
/// Skewed instances spread cumulative scores and expansion log-probs widely.
pub fn random_beam_instance(rng: &mut ChaCha8Rng, max_width: usize, skewed: bool) -> (Vec<Hypothesis>, usize) {
    let beam_width = rng.random_range(1..=max_width);
    let top_k = rng.random_range(1..=max_width);
    let spread = if skewed { 20.0 } else { 0.5 };
    let hyps = (0..beam_width)
        .map(|slot| {
            let mut lp = -rng.random_range(0.0..1.0) * spread * 0.1;
            let expansions = (0..top_k)
                .map(|t| {
                    let e = (t as u32, lp);
                    lp -= 1e-6 + rng.random_range(0.0..1.0) * spread * 0.2;
                    e
                })
                .collect();
            Hypothesis {
                slot_id: slot as u32,
                token_ids: vec![],
                cum_log_prob: -rng.random_range(0.0..1.0) * spread,
                expansions,
            }
        })
        .collect();
    (hyps, beam_width)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BeamBenchSummary {
    pub instances: usize,
    pub skewed: usize,
    pub mismatches: usize,
    pub inspected: usize,
    pub brute_force: usize,
    /// Skewed instances where the heap inspected strictly fewer expansions.
    pub skewed_strictly_fewer: usize,
}

/// Alternates uniform and skewed instances.
pub fn beam_bench(instances: usize, seed: u64, max_width: usize) -> BeamBenchSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = BeamBenchSummary {
        instances,
        ..Default::default()
    };
    for i in 0..instances {
        let skewed = i % 2 == 1;
        let (hyps, w) = random_beam_instance(&mut rng, max_width.max(1), skewed);
        let fast = expand_beam(&hyps, w);
        let slow = brute_force_topk(&hyps, w);
        if fast.selected != slow.selected {
            s.mismatches += 1;
        }
        s.inspected += fast.inspected;
        s.brute_force += slow.inspected;
        if skewed {
            s.skewed += 1;
            if fast.inspected < slow.inspected {
                s.skewed_strictly_fewer += 1;
            }
        }
    }
    s
}
