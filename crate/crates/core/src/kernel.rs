//! Operator-level compute-unit allocation and dual-stream overlap accounting.
//!
//! [`allocate_units`] assigns matrix (cube) and vector units to concurrently
//! running operators so that their completion times line up. The objective is
//! the alignment loss: the largest completion-time gap between any cube
//! operator and any vector operator, with `T = W / (γ · units)`.
//!
//! [`dual_stream_estimate`] turns a measured single/dual-stream profile of
//! one decoder layer into exposed communication and per-layer savings.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allocations whose enumeration space is at most this large are solved
/// exactly.
pub const EXACT_SEARCH_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    Cube,
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorWorkload {
    pub kind: OperatorKind,
    pub work: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocatorConfig {
    pub gamma_cube: f64,
    pub gamma_vector: f64,
    pub n_cube: u32,
    pub n_vector: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAllocation {
    /// Units per cube operator.
    pub cube_units: Vec<u32>,
    /// Units per vector operator.
    pub vector_units: Vec<u32>,
    pub cube_times: Vec<f64>,
    pub vector_times: Vec<f64>,
    pub loss: f64,
    /// True when the result came from exhaustive search.
    pub exact: bool,
}

/// Alignment loss of a concrete allocation.
///
/// With both classes present this is `max_{i,j} |T_i − T_j|`. With only one
/// class present it degrades to `max T − min T` over that class.
pub fn alignment_loss(cube_times: &[f64], vector_times: &[f64]) -> f64 {
    let span = |ts: &[f64]| -> (f64, f64) {
        ts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
            (lo.min(t), hi.max(t))
        })
    };
    match (cube_times.is_empty(), vector_times.is_empty()) {
        (true, true) => 0.0,
        (false, true) => {
            let (lo, hi) = span(cube_times);
            hi - lo
        }
        (true, false) => {
            let (lo, hi) = span(vector_times);
            hi - lo
        }
        (false, false) => {
            let (c_lo, c_hi) = span(cube_times);
            let (v_lo, v_hi) = span(vector_times);
            (c_hi - v_lo).max(v_hi - c_lo)
        }
    }
}

fn times(work: &[f64], units: &[u32], gamma: f64) -> Vec<f64> {
    work.iter().zip(units).map(|(w, x)| w / (gamma * *x as f64)).collect()
}

fn makespan(cube_times: &[f64], vector_times: &[f64]) -> f64 {
    cube_times.iter().chain(vector_times).fold(0.0f64, |m, t| m.max(*t))
}

/// Number of vectors of `k` positive integers summing to at most `n`, i.e.
/// `C(n, k)`.
fn composition_count(n: u32, k: usize) -> u128 {
    if k == 0 {
        return 1;
    }
    if (n as usize) < k {
        return 0;
    }
    let k = k as u128;
    let n = n as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Calls `f` with every vector of `k` integers ≥ 1 whose sum is ≤ `budget`.
fn for_each_allocation(k: usize, budget: u32, f: &mut impl FnMut(&[u32])) {
    fn rec(buf: &mut Vec<u32>, idx: usize, remaining: u32, f: &mut impl FnMut(&[u32])) {
        if idx == buf.len() {
            f(buf);
            return;
        }
        let still_needed = (buf.len() - idx - 1) as u32;
        let max_here = remaining - still_needed;
        for x in 1..=max_here {
            buf[idx] = x;
            rec(buf, idx + 1, remaining - x, f);
        }
    }
    let mut buf = vec![1u32; k];
    if (budget as usize) < k {
        return;
    }
    rec(&mut buf, 0, budget, f);
}

struct Candidate {
    cube_units: Vec<u32>,
    vector_units: Vec<u32>,
    cube_times: Vec<f64>,
    vector_times: Vec<f64>,
    loss: f64,
    makespan: f64,
}

impl Candidate {
    fn build(cube: &[f64], vector: &[f64], x: Vec<u32>, y: Vec<u32>, cfg: &AllocatorConfig) -> Self {
        let cube_times = times(cube, &x, cfg.gamma_cube);
        let vector_times = times(vector, &y, cfg.gamma_vector);
        let loss = alignment_loss(&cube_times, &vector_times);
        let makespan = makespan(&cube_times, &vector_times);
        Candidate {
            cube_units: x,
            vector_units: y,
            cube_times,
            vector_times,
            loss,
            makespan,
        }
    }

    /// Lower loss wins; equal loss prefers the shorter makespan.
    fn better_than(&self, other: &Candidate) -> bool {
        self.loss < other.loss || (self.loss == other.loss && self.makespan < other.makespan)
    }

    fn into_allocation(self, exact: bool) -> UnitAllocation {
        UnitAllocation {
            cube_units: self.cube_units,
            vector_units: self.vector_units,
            cube_times: self.cube_times,
            vector_times: self.vector_times,
            loss: self.loss,
            exact,
        }
    }
}

/// Minimises the alignment loss over integer unit allocations.
///
/// Every operator receives at least one unit. Equal-loss allocations are
/// ranked by makespan, then by enumeration order.
pub fn allocate_units(cube: &[f64], vector: &[f64], cfg: &AllocatorConfig) -> Result<UnitAllocation> {
    if !(cfg.gamma_cube > 0.0 && cfg.gamma_vector > 0.0) {
        return Err(Error::InvalidConfig("unit throughput must be positive"));
    }
    if cube.iter().chain(vector).any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidConfig("operator workloads must be positive"));
    }
    if cube.len() > cfg.n_cube as usize || vector.len() > cfg.n_vector as usize {
        return Err(Error::Infeasible);
    }
    let space = composition_count(cfg.n_cube, cube.len()).saturating_mul(composition_count(cfg.n_vector, vector.len()));
    if space <= EXACT_SEARCH_LIMIT {
        Ok(exhaustive(cube, vector, cfg).into_allocation(true))
    } else {
        Ok(greedy(cube, vector, cfg).into_allocation(false))
    }
}

fn exhaustive(cube: &[f64], vector: &[f64], cfg: &AllocatorConfig) -> Candidate {
    // Vector-side allocations are reused for every cube allocation.
    let mut vector_allocs: Vec<(Vec<u32>, Vec<f64>)> = Vec::new();
    for_each_allocation(vector.len(), cfg.n_vector, &mut |y| {
        vector_allocs.push((y.to_vec(), times(vector, y, cfg.gamma_vector)));
    });

    let mut best: Option<Candidate> = None;
    for_each_allocation(cube.len(), cfg.n_cube, &mut |x| {
        let cube_times = times(cube, x, cfg.gamma_cube);
        for (y, vector_times) in &vector_allocs {
            let loss = alignment_loss(&cube_times, vector_times);
            let span = makespan(&cube_times, vector_times);
            let improves = match &best {
                None => true,
                Some(b) => loss < b.loss || (loss == b.loss && span < b.makespan),
            };
            if improves {
                best = Some(Candidate {
                    cube_units: x.to_vec(),
                    vector_units: y.clone(),
                    cube_times: cube_times.clone(),
                    vector_times: vector_times.clone(),
                    loss,
                    makespan: span,
                });
            }
        }
    });
    best.expect("allocation space is non-empty when operators fit")
}

/// Proportional-to-work rounding, with every operator holding ≥ 1 unit.
fn proportional(work: &[f64], budget: u32) -> Vec<u32> {
    if work.is_empty() {
        return Vec::new();
    }
    let total: f64 = work.iter().sum();
    let spare = budget - work.len() as u32;
    let mut units: Vec<u32> = work
        .iter()
        .map(|w| 1 + libm::floor(w / total * spare as f64) as u32)
        .collect();
    // Hand leftover units to the operators with the largest per-unit time.
    let mut used: u32 = units.iter().sum();
    while used < budget {
        let (idx, _) = work
            .iter()
            .zip(&units)
            .enumerate()
            .map(|(i, (w, x))| (i, w / *x as f64))
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, t)| if t > acc.1 { (i, t) } else { acc },
            );
        units[idx] += 1;
        used += 1;
    }
    units
}

fn greedy(cube: &[f64], vector: &[f64], cfg: &AllocatorConfig) -> Candidate {
    let mut best = Candidate::build(
        cube,
        vector,
        proportional(cube, cfg.n_cube),
        proportional(vector, cfg.n_vector),
        cfg,
    );
    // Hill-climb over single-unit moves within a class (including dropping a
    // unit to the unused pool or taking one from it).
    loop {
        let mut improved: Option<Candidate> = None;
        for class in [OperatorKind::Cube, OperatorKind::Vector] {
            let (units, budget) = match class {
                OperatorKind::Cube => (&best.cube_units, cfg.n_cube),
                OperatorKind::Vector => (&best.vector_units, cfg.n_vector),
            };
            let used: u32 = units.iter().sum();
            let n = units.len();
            // `n` stands for the unused pool.
            for from in 0..=n {
                for to in 0..=n {
                    if from == to {
                        continue;
                    }
                    if from == n && used >= budget {
                        continue;
                    }
                    if from < n && units[from] <= 1 {
                        continue;
                    }
                    let mut moved = units.clone();
                    if from < n {
                        moved[from] -= 1;
                    }
                    if to < n {
                        moved[to] += 1;
                    }
                    let cand = match class {
                        OperatorKind::Cube => Candidate::build(cube, vector, moved, best.vector_units.clone(), cfg),
                        OperatorKind::Vector => Candidate::build(cube, vector, best.cube_units.clone(), moved, cfg),
                    };
                    let reference = improved.as_ref().unwrap_or(&best);
                    if cand.better_than(reference) {
                        improved = Some(cand);
                    }
                }
            }
        }
        match improved {
            Some(c) => best = c,
            None => return best,
        }
    }
}

/// Single-layer communication/computation profile, single vs dual stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlapProfile {
    pub comm_single_ms: f64,
    pub comm_dual_ms: f64,
    pub compute_single_ms: f64,
    pub compute_dual_ms: f64,
    pub overlap_ratio: f64,
    pub num_layers: u32,
}

impl Default for OverlapProfile {
    fn default() -> Self {
        OverlapProfile {
            comm_single_ms: 9.3,
            comm_dual_ms: 12.4,
            compute_single_ms: 13.0,
            compute_dual_ms: 17.0,
            overlap_ratio: 0.8,
            num_layers: 61,
        }
    }
}

impl OverlapProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return Err(Error::InvalidConfig("overlap_ratio must lie in [0, 1]"));
        }
        let times = [
            self.comm_single_ms,
            self.comm_dual_ms,
            self.compute_single_ms,
            self.compute_dual_ms,
        ];
        if times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidConfig("overlap profile times must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapEstimate {
    pub exposed_ms: f64,
    pub compute_overhead_ms: f64,
    pub saved_per_layer_ms: f64,
    pub total_saved_ms: f64,
    /// Per-layer saving relative to the single-stream layer time.
    pub saved_fraction: f64,
}

/// Exposed communication and savings of dual-stream micro-batching.
///
/// Negative savings are returned as-is; the caller decides whether to enable
/// dual-stream execution.
pub fn dual_stream_estimate(profile: &OverlapProfile) -> OverlapEstimate {
    let exposed = profile.comm_dual_ms * (1.0 - profile.overlap_ratio);
    let compute_overhead = profile.compute_dual_ms - profile.compute_single_ms;
    let saved = profile.comm_single_ms - exposed - compute_overhead;
    let single_layer = profile.comm_single_ms + profile.compute_single_ms;
    OverlapEstimate {
        exposed_ms: exposed,
        compute_overhead_ms: compute_overhead,
        saved_per_layer_ms: saved,
        total_saved_ms: saved * profile.num_layers as f64,
        saved_fraction: if single_layer > 0.0 { saved / single_layer } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(gc: f64, gv: f64, nc: u32, nv: u32) -> AllocatorConfig {
        AllocatorConfig {
            gamma_cube: gc,
            gamma_vector: gv,
            n_cube: nc,
            n_vector: nv,
        }
    }

    #[test]
    fn symmetric_single_units() {
        let a = allocate_units(&[4.0], &[4.0], &cfg(1.0, 1.0, 1, 1)).unwrap();
        assert_eq!(a.cube_units, vec![1]);
        assert_eq!(a.vector_units, vec![1]);
        assert_eq!(a.loss, 0.0);
    }

    #[test]
    fn balanced_by_makespan_tiebreak() {
        let a = allocate_units(&[8.0], &[4.0], &cfg(1.0, 1.0, 4, 4)).unwrap();
        assert_eq!(a.cube_units, vec![4]);
        assert_eq!(a.vector_units, vec![2]);
        assert_eq!(a.loss, 0.0);
        assert_eq!(a.cube_times, vec![2.0]);
    }

    #[test]
    fn infeasible_when_units_short() {
        assert_eq!(
            allocate_units(&[1.0, 1.0], &[1.0], &cfg(1.0, 1.0, 1, 1)),
            Err(Error::Infeasible)
        );
    }

    #[test]
    fn single_class_uses_span() {
        let a = allocate_units(&[6.0, 3.0], &[], &cfg(1.0, 1.0, 3, 0)).unwrap();
        assert_eq!(a.cube_units, vec![2, 1]);
        assert_eq!(a.loss, 0.0);
    }

    #[test]
    fn greedy_path_used_for_large_spaces() {
        let work = [5.0, 9.0, 13.0, 2.0, 7.0, 11.0];
        let a = allocate_units(&work, &[4.0, 6.0, 8.0, 3.0], &cfg(1.0, 0.5, 64, 64)).unwrap();
        assert!(!a.exact);
        assert!(a.cube_units.iter().sum::<u32>() <= 64);
        assert!(a.vector_units.iter().sum::<u32>() <= 64);
        assert!(a.cube_units.iter().chain(&a.vector_units).all(|x| *x >= 1));
        let recomputed = alignment_loss(&a.cube_times, &a.vector_times);
        assert_eq!(recomputed, a.loss);
        // Starting point is proportional; hill climbing must not end worse.
        let start = Candidate::build(
            &work,
            &[4.0, 6.0, 8.0, 3.0],
            proportional(&work, 64),
            proportional(&[4.0, 6.0, 8.0, 3.0], 64),
            &cfg(1.0, 0.5, 64, 64),
        );
        assert!(a.loss <= start.loss);
    }

    #[test]
    fn composition_counts() {
        assert_eq!(composition_count(6, 3), 20);
        assert_eq!(composition_count(3, 0), 1);
        assert_eq!(composition_count(2, 3), 0);
        let mut n = 0;
        for_each_allocation(3, 6, &mut |_| n += 1);
        assert_eq!(n, 20);
    }

    #[test]
    fn table_three_breakdown() {
        let e = dual_stream_estimate(&OverlapProfile::default());
        assert!((e.exposed_ms - 2.48).abs() < 1e-9);
        assert!((e.saved_per_layer_ms - 2.82).abs() < 1e-9);
        assert!((e.total_saved_ms - 172.02).abs() < 1e-9);
    }

    #[test]
    fn overlap_limits() {
        let none = dual_stream_estimate(&OverlapProfile {
            overlap_ratio: 0.0,
            ..OverlapProfile::default()
        });
        assert!((none.exposed_ms - 12.4).abs() < 1e-12);
        assert!((none.saved_per_layer_ms + 7.1).abs() < 1e-9);

        let ideal = dual_stream_estimate(&OverlapProfile {
            overlap_ratio: 1.0,
            compute_dual_ms: 13.0,
            ..OverlapProfile::default()
        });
        assert!((ideal.saved_per_layer_ms - 9.3).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn loss_invariant_under_joint_scaling(
                cube in proptest::collection::vec(0.5..50.0f64, 1..3),
                vector in proptest::collection::vec(0.5..50.0f64, 1..3),
                c in 0.1..10.0f64,
            ) {
                let base = cfg(2.0, 1.0, 5, 5);
                let scaled = cfg(2.0 * c, c, 5, 5);
                let cube_s: Vec<f64> = cube.iter().map(|w| w * c).collect();
                let vector_s: Vec<f64> = vector.iter().map(|w| w * c).collect();
                let a = allocate_units(&cube, &vector, &base).unwrap();
                let b = allocate_units(&cube_s, &vector_s, &scaled).unwrap();
                prop_assert!((a.loss - b.loss).abs() <= 1e-9 * a.loss.max(1.0));
            }

            #[test]
            fn overlap_linear_in_layers_and_monotone_in_ratio(
                layers in 1u32..200, r in 0.0..1.0f64, dr in 0.0..0.5f64,
            ) {
                let p = OverlapProfile { overlap_ratio: r, num_layers: layers, ..OverlapProfile::default() };
                let one = dual_stream_estimate(&OverlapProfile { num_layers: 1, ..p });
                let e = dual_stream_estimate(&p);
                prop_assert!((e.total_saved_ms - one.total_saved_ms * layers as f64).abs() < 1e-9 * layers as f64);
                let q = OverlapProfile { overlap_ratio: (r + dr).min(1.0), ..p };
                prop_assert!(dual_stream_estimate(&q).saved_per_layer_ms >= e.saved_per_layer_ms);
            }
        }
    }
}
