//! Beam expansion for generative recommendation decoding.
//!
//! Each live hypothesis carries its top-k expansions sorted by descending
//! log-probability. [`expand_beam`] keeps a bounded min-heap of the best
//! `beam_width` candidates and abandons a hypothesis as soon as its next
//! expansion cannot beat the heap minimum, since every later expansion of the
//! same hypothesis is no better.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INVALID_LOGIT_BIAS: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub slot_id: u32,
    pub token_ids: Vec<u32>,
    pub cum_log_prob: f64,
    /// `(token_id, log_prob)`, strictly descending by log-prob.
    pub expansions: Vec<(u32, f64)>,
}

impl Hypothesis {
    pub fn expansions_sorted(&self) -> bool {
        self.expansions.windows(2).all(|w| w[0].1 > w[1].1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    pub parent_index: usize,
    pub expansion_index: usize,
    pub token_id: u32,
    pub total_log_prob: f64,
}

impl BeamCandidate {
    fn new(parent_index: usize, expansion_index: usize, h: &Hypothesis) -> Self {
        let (token_id, lp) = h.expansions[expansion_index];
        BeamCandidate {
            parent_index,
            expansion_index,
            token_id,
            total_log_prob: h.cum_log_prob + lp,
        }
    }

    /// `Less` means `self` ranks ahead: higher score, then lower indices.
    fn rank(&self, other: &Self) -> Ordering {
        other
            .total_log_prob
            .total_cmp(&self.total_log_prob)
            .then(self.parent_index.cmp(&other.parent_index))
            .then(self.expansion_index.cmp(&other.expansion_index))
    }
}

/// Heap entry ordered so that the worst-ranked candidate is the max.
struct Worst(BeamCandidate);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Expansion {
    /// Best `beam_width` candidates, best first.
    pub selected: Vec<BeamCandidate>,
    /// Expansions that reached the heap; the bound check that ends a
    /// hypothesis is not counted.
    pub inspected: usize,
}

/// Heap-based top-`beam_width` selection with early termination per
/// hypothesis.
pub fn expand_beam(hypotheses: &[Hypothesis], beam_width: usize) -> Expansion {
    if hypotheses.is_empty() || beam_width == 0 {
        return Expansion::default();
    }
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(beam_width + 1);
    let mut inspected = 0;
    for (p, h) in hypotheses.iter().enumerate() {
        debug_assert!(h.expansions_sorted());
        for e in 0..h.expansions.len() {
            let cand = BeamCandidate::new(p, e, h);
            if heap.len() < beam_width {
                inspected += 1;
                heap.push(Worst(cand));
                continue;
            }
            let floor = heap.peek().map(|w| w.0.total_log_prob).unwrap_or(f64::NEG_INFINITY);
            // Heap entries all come from earlier indices, so a tie loses.
            if cand.total_log_prob <= floor {
                break;
            }
            inspected += 1;
            heap.pop();
            heap.push(Worst(cand));
        }
    }
    let mut selected: Vec<BeamCandidate> = heap.into_iter().map(|w| w.0).collect();
    selected.sort_by(|a, b| a.rank(b));
    Expansion { selected, inspected }
}

/// Reference selection: score every expansion, sort, truncate.
pub fn brute_force_topk(hypotheses: &[Hypothesis], beam_width: usize) -> Expansion {
    let mut all: Vec<BeamCandidate> = hypotheses
        .iter()
        .enumerate()
        .flat_map(|(p, h)| (0..h.expansions.len()).map(move |e| BeamCandidate::new(p, e, h)))
        .collect();
    let inspected = all.len();
    all.sort_by(|a, b| a.rank(b));
    all.truncate(beam_width);
    Expansion {
        selected: all,
        inspected,
    }
}

/// Additive vocabulary mask: 0 for valid ids, a large negative bias for the
/// rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidMask {
    pub bias: Vec<f64>,
}

impl ValidMask {
    pub fn from_valid_ids(vocab_size: usize, valid: impl IntoIterator<Item = u32>) -> Self {
        let mut bias = alloc::vec![INVALID_LOGIT_BIAS; vocab_size];
        for id in valid {
            if let Some(b) = bias.get_mut(id as usize) {
                *b = 0.0;
            }
        }
        ValidMask { bias }
    }

    pub fn is_valid(&self, id: usize) -> bool {
        self.bias.get(id).is_some_and(|b| *b == 0.0)
    }
}

pub fn apply_valid_mask(logits: &[f64], mask: &ValidMask) -> Result<Vec<f64>> {
    if logits.len() != mask.bias.len() {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: mask.bias.len(),
        });
    }
    Ok(logits.iter().zip(&mask.bias).map(|(l, m)| l + m).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTopK {
    pub ids: Vec<u32>,
    /// Set when fewer than `k` valid ids exist, so invalid ids were returned.
    pub degenerate: bool,
}

/// Top-k over masked logits, ties broken by lower id.
pub fn masked_top_k(logits: &[f64], mask: &ValidMask, k: usize) -> Result<MaskedTopK> {
    let masked = apply_valid_mask(logits, mask)?;
    let mut order: Vec<u32> = (0..masked.len() as u32).collect();
    order.sort_by(|a, b| masked[*b as usize].total_cmp(&masked[*a as usize]).then(a.cmp(b)));
    order.truncate(k);
    let degenerate = order.iter().any(|id| !mask.is_valid(*id as usize));
    Ok(MaskedTopK { ids: order, degenerate })
}

/// Fixed set of hypothesis slots reused across decode steps.
///
/// Buffers are reserved up front; committing a step copies parent token
/// lists into staging buffers and then swaps them into the slots, so a slot
/// can be overwritten even while another selected candidate still reads its
/// old content.
#[derive(Debug, Clone)]
pub struct BeamStorage {
    slots: Vec<Hypothesis>,
    staging: Vec<Vec<u32>>,
    allocations: u64,
}

impl BeamStorage {
    pub fn new(beam_width: usize, top_k: usize, max_len: usize) -> Self {
        let slots = (0..beam_width as u32)
            .map(|slot_id| Hypothesis {
                slot_id,
                token_ids: Vec::with_capacity(max_len),
                cum_log_prob: 0.0,
                expansions: Vec::with_capacity(top_k),
            })
            .collect();
        let staging = (0..beam_width).map(|_| Vec::with_capacity(max_len)).collect();
        BeamStorage {
            slots,
            staging,
            allocations: 0,
        }
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.slots
    }

    pub fn slot_ids(&self) -> Vec<u32> {
        self.slots.iter().map(|h| h.slot_id).collect()
    }

    /// Number of buffer reallocations observed since construction.
    pub fn allocations(&self) -> u64 {
        self.allocations
    }

    pub fn set_expansions(&mut self, slot: usize, expansions: &[(u32, f64)]) {
        let h = &mut self.slots[slot];
        let cap = h.expansions.capacity();
        h.expansions.clear();
        h.expansions.extend_from_slice(expansions);
        if h.expansions.capacity() != cap {
            self.allocations += 1;
        }
    }

    /// Overwrites slots in place with the selected candidates.
    pub fn commit(&mut self, selected: &[BeamCandidate]) {
        let n = selected.len().min(self.slots.len());
        // Stage: copy every parent before any slot is touched.
        for (i, cand) in selected.iter().take(n).enumerate() {
            let parent = &self.slots[cand.parent_index].token_ids;
            let buf = &mut self.staging[i];
            let cap = buf.capacity();
            buf.clear();
            buf.extend_from_slice(parent);
            buf.push(cand.token_id);
            if buf.capacity() != cap {
                self.allocations += 1;
            }
        }
        // Swap staged buffers in; the old slot buffers become staging space.
        for (i, cand) in selected.iter().take(n).enumerate() {
            core::mem::swap(&mut self.slots[i].token_ids, &mut self.staging[i]);
            self.slots[i].cum_log_prob = cand.total_log_prob;
            self.slots[i].expansions.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn hyp(slot: u32, cum: f64, exps: &[(u32, f64)]) -> Hypothesis {
        Hypothesis {
            slot_id: slot,
            token_ids: vec![],
            cum_log_prob: cum,
            expansions: exps.to_vec(),
        }
    }

    #[test]
    fn width_one_is_argmax() {
        let hs = [
            hyp(0, -1.0, &[(1, -0.5), (2, -2.0)]),
            hyp(1, 0.0, &[(3, -0.2), (4, -0.3)]),
        ];
        let e = expand_beam(&hs, 1);
        assert_eq!(e.selected.len(), 1);
        assert_eq!(e.selected[0].token_id, 3);
        assert_eq!(e.selected, brute_force_topk(&hs, 1).selected);
    }

    #[test]
    fn skewed_example_prunes_second_branch() {
        let hs = [
            hyp(0, 0.0, &[(10, -0.1), (11, -5.0)]),
            hyp(1, -1.0, &[(10, -0.1), (11, -5.0)]),
        ];
        let e = expand_beam(&hs, 2);
        let totals: Vec<f64> = e.selected.iter().map(|c| c.total_log_prob).collect();
        assert_eq!(totals, vec![-0.1, -1.1]);
        assert_eq!(e.selected, brute_force_topk(&hs, 2).selected);
        assert_eq!(e.inspected, 3);
        assert!(e.inspected < brute_force_topk(&hs, 2).inspected);
    }

    #[test]
    fn empty_hypotheses() {
        assert!(expand_beam(&[], 4).selected.is_empty());
    }

    #[test]
    fn mask_arithmetic_and_top2() {
        let mask = ValidMask::from_valid_ids(3, [0, 2]);
        let out = apply_valid_mask(&[1.0, 9.0, 2.0], &mask).unwrap();
        assert_eq!(out, vec![1.0, -1e9 + 9.0, 2.0]);
        let top = masked_top_k(&[1.0, 9.0, 2.0], &mask, 2).unwrap();
        assert_eq!(top.ids, vec![2, 0]);
        assert!(!top.degenerate);
    }

    #[test]
    fn mask_identity_and_degenerate() {
        let all = ValidMask::from_valid_ids(3, [0, 1, 2]);
        assert_eq!(apply_valid_mask(&[1.0, 9.0, 2.0], &all).unwrap(), vec![1.0, 9.0, 2.0]);
        let none = ValidMask::from_valid_ids(3, []);
        let top = masked_top_k(&[1.0, 9.0, 2.0], &none, 1).unwrap();
        assert_eq!(top.ids, vec![1]);
        assert!(top.degenerate);
        assert!(apply_valid_mask(&[1.0], &all).is_err());
    }

    #[test]
    fn commit_reuses_slots() {
        let mut store = BeamStorage::new(4, 3, 16);
        let before = store.slot_ids();
        for step in 0..3u32 {
            for s in 0..4 {
                let base = -(s as f64);
                store.set_expansions(
                    s,
                    &[
                        (step * 10 + 1, base - 0.1),
                        (step * 10 + 2, base - 0.2),
                        (step * 10 + 3, base - 0.3),
                    ],
                );
            }
            let sel = expand_beam(store.hypotheses(), 4).selected;
            store.commit(&sel);
            assert_eq!(store.slot_ids(), before);
            assert!(store
                .hypotheses()
                .iter()
                .all(|h| h.token_ids.len() == step as usize + 1));
        }
        assert_eq!(store.allocations(), 0);
    }

    #[test]
    fn commit_extends_surviving_parent() {
        let mut store = BeamStorage::new(2, 2, 8);
        store.set_expansions(0, &[(7, -0.1), (8, -0.2)]);
        store.set_expansions(1, &[(9, -3.0), (5, -4.0)]);
        let sel = expand_beam(store.hypotheses(), 2).selected;
        store.commit(&sel);
        assert_eq!(store.hypotheses()[0].token_ids, vec![7]);
        assert_eq!(store.hypotheses()[1].token_ids, vec![8]);
        // Both children of slot 0: slot 1 is overwritten with a sibling.
        store.set_expansions(0, &[(1, -0.1), (2, -0.2)]);
        store.set_expansions(1, &[(3, -5.0), (4, -6.0)]);
        let sel = expand_beam(store.hypotheses(), 2).selected;
        assert!(sel.iter().all(|c| c.parent_index == 0));
        store.commit(&sel);
        assert_eq!(store.hypotheses()[0].token_ids, vec![7, 1]);
        assert_eq!(store.hypotheses()[1].token_ids, vec![7, 2]);
    }

    #[test]
    fn commit_handles_crossed_parents() {
        // Slot 0 takes slot 1's child and vice versa; staging prevents aliasing.
        let mut store = BeamStorage::new(2, 1, 8);
        store.slots[0].token_ids.extend_from_slice(&[1, 1]);
        store.slots[1].token_ids.extend_from_slice(&[2, 2]);
        let sel = [
            BeamCandidate {
                parent_index: 1,
                expansion_index: 0,
                token_id: 20,
                total_log_prob: -1.0,
            },
            BeamCandidate {
                parent_index: 0,
                expansion_index: 0,
                token_id: 10,
                total_log_prob: -2.0,
            },
        ];
        store.commit(&sel);
        assert_eq!(store.hypotheses()[0].token_ids, vec![2, 2, 20]);
        assert_eq!(store.hypotheses()[1].token_ids, vec![1, 1, 10]);
    }
}
