//! Logically contiguous, physically discrete KV storage.
//!
//! A [`PagePool`] owns a fixed set of physical pages. Each session reserves a
//! contiguous virtual range of `max_seq_len` token slots up front and maps
//! physical pages into it only as the sequence grows. Completed sessions keep
//! their pages mapped as a reusable set so the next request of the same size
//! can take them over with a cheap remap instead of an unmap/map pair.
//!
//! Addresses are token slots, not bytes.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PageId = u32;
pub type SessionId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PageStatus {
    Free,
    /// Reserved ahead of need by pre-mapping; not yet part of the visible
    /// mapping.
    Allocated,
    Mapped,
    Reusable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalPage {
    pub page_id: PageId,
    pub status: PageStatus,
    pub owner_session: Option<SessionId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub virt_start: u64,
    pub max_seq_len: u64,
    pub page_size_tokens: u64,
    /// Page index → physical page, gap-free from index 0.
    pub mapping: Vec<PageId>,
    pub prefetched: Option<PageId>,
    pub tokens: u64,
    pub completed: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapCounters {
    pub maps: u64,
    pub unmaps: u64,
    pub remaps: u64,
    pub prefetch_hits: u64,
}

/// Simulated cost of mapping operations, microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapCosts {
    pub map_us: f64,
    pub remap_us: f64,
    pub unmap_us: f64,
}

impl Default for MapCosts {
    fn default() -> Self {
        MapCosts {
            map_us: 30.0,
            remap_us: 3.0,
            unmap_us: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub num_pages: u32,
    pub page_size_tokens: u64,
    /// Reusable pages beyond this count are unmapped back to the free list,
    /// oldest first.
    pub reusable_limit: Option<usize>,
    pub prefetch: bool,
    pub costs: MapCosts,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            num_pages: 1024,
            page_size_tokens: 16,
            reusable_limit: None,
            prefetch: true,
            costs: MapCosts::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub page_idx: u64,
    pub offset: u64,
    pub page_id: PageId,
}

#[derive(Debug, Clone)]
pub struct PagePool {
    config: PoolConfig,
    pages: Vec<PhysicalPage>,
    free: VecDeque<PageId>,
    /// Reusable page sets of completed sessions keyed by page count, oldest
    /// first within a key.
    reusable: BTreeMap<usize, VecDeque<(u64, Vec<PageId>)>>,
    reusable_seq: u64,
    sessions: BTreeMap<SessionId, Session>,
    next_session: SessionId,
    next_virt: u64,
    counters: MapCounters,
    cost_us: f64,
}

impl PagePool {
    pub fn new(config: PoolConfig) -> Self {
        let pages = (0..config.num_pages)
            .map(|page_id| PhysicalPage {
                page_id,
                status: PageStatus::Free,
                owner_session: None,
            })
            .collect();
        PagePool {
            config,
            pages,
            free: (0..config.num_pages).collect(),
            reusable: BTreeMap::new(),
            reusable_seq: 0,
            sessions: BTreeMap::new(),
            next_session: 0,
            next_virt: 0,
            counters: MapCounters::default(),
            cost_us: 0.0,
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn counters(&self) -> MapCounters {
        self.counters
    }

    /// Accumulated simulated mapping cost, microseconds.
    pub fn mapping_cost_us(&self) -> f64 {
        self.cost_us
    }

    pub fn pages(&self) -> &[PhysicalPage] {
        &self.pages
    }

    pub fn session(&self, id: SessionId) -> Result<&Session> {
        self.sessions.get(&id).ok_or(Error::UnknownSession(id))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }

    pub fn reusable_pages(&self) -> usize {
        self.reusable.values().flatten().map(|(_, set)| set.len()).sum()
    }

    /// Reserves a virtual range; no physical page is touched.
    pub fn create_session(&mut self, max_seq_len: u64) -> SessionId {
        let id = self.next_session;
        self.next_session += 1;
        let session = Session {
            session_id: id,
            virt_start: self.next_virt,
            max_seq_len,
            page_size_tokens: self.config.page_size_tokens,
            mapping: Vec::new(),
            prefetched: None,
            tokens: 0,
            completed: false,
        };
        self.next_virt += max_seq_len;
        self.sessions.insert(id, session);
        id
    }

    /// Resolves a token offset inside the session's virtual range.
    pub fn translate(&self, id: SessionId, virt_offset: u64) -> Result<Translation> {
        let s = self.session(id)?;
        if virt_offset >= s.max_seq_len {
            return Err(Error::OutOfRange {
                offset: virt_offset,
                max: s.max_seq_len,
            });
        }
        let page_idx = virt_offset / s.page_size_tokens;
        let offset = virt_offset % s.page_size_tokens;
        let page_id = *s.mapping.get(page_idx as usize).ok_or(Error::Unmapped(page_idx))?;
        Ok(Translation {
            page_idx,
            offset,
            page_id,
        })
    }

    fn pages_for(&self, tokens: u64) -> usize {
        tokens.div_ceil(self.config.page_size_tokens) as usize
    }

    fn take_reusable_set(&mut self, count: usize) -> Option<Vec<PageId>> {
        let sets = self.reusable.get_mut(&count)?;
        let (_, set) = sets.pop_front()?;
        if sets.is_empty() {
            self.reusable.remove(&count);
        }
        Some(set)
    }

    /// Takes one page out of the oldest reusable set.
    fn take_reusable_page(&mut self) -> Option<PageId> {
        let (&key, _) = self
            .reusable
            .iter()
            .min_by_key(|(_, sets)| sets.front().map(|(seq, _)| *seq).unwrap_or(u64::MAX))?;
        let sets = self.reusable.get_mut(&key)?;
        let (seq, mut set) = sets.pop_front()?;
        if sets.is_empty() {
            self.reusable.remove(&key);
        }
        let page = set.pop()?;
        if !set.is_empty() {
            let len = set.len();
            let bucket = self.reusable.entry(len).or_default();
            // Keep age order inside the bucket.
            let pos = bucket.iter().position(|(s, _)| *s > seq).unwrap_or(bucket.len());
            bucket.insert(pos, (seq, set));
        }
        Some(page)
    }

    fn assign(&mut self, page: PageId, session: SessionId, status: PageStatus) {
        let p = &mut self.pages[page as usize];
        p.status = status;
        p.owner_session = Some(session);
    }

    /// Grows the session mapping to cover `token_count` tokens.
    ///
    /// Pages come from, in order: the prefetched page, an exact-size reusable
    /// set (one remap), single reusable pages (one remap each), free pages
    /// (one map each). Fails without side effects when the pool cannot supply
    /// enough pages.
    pub fn ensure_mapped(&mut self, id: SessionId, token_count: u64) -> Result<usize> {
        let s = self.session(id)?;
        if s.completed {
            return Err(Error::SessionCompleted(id));
        }
        if token_count > s.max_seq_len {
            return Err(Error::OutOfRange {
                offset: token_count,
                max: s.max_seq_len,
            });
        }
        let have = s.mapping.len();
        let want = self.pages_for(token_count);
        let prefetched = s.prefetched;
        if want <= have {
            let s = self.sessions.get_mut(&id).expect("checked above");
            s.tokens = s.tokens.max(token_count);
            return Ok(0);
        }
        let mut need = want - have;
        let available = self.free.len() + self.reusable_pages() + usize::from(prefetched.is_some());
        if available < need {
            return Err(Error::OutOfPages { need, available });
        }

        let mut new_pages: Vec<PageId> = Vec::with_capacity(need);
        if let Some(p) = prefetched {
            new_pages.push(p);
            self.counters.prefetch_hits += 1;
            need -= 1;
        }
        if need > 0 {
            if let Some(set) = self.take_reusable_set(need) {
                self.counters.remaps += 1;
                self.cost_us += self.config.costs.remap_us;
                new_pages.extend(set);
                need = 0;
            }
        }
        while need > 0 {
            if let Some(p) = self.take_reusable_page() {
                self.counters.remaps += 1;
                self.cost_us += self.config.costs.remap_us;
                new_pages.push(p);
            } else {
                let p = self.free.pop_front().expect("availability checked");
                self.counters.maps += 1;
                self.cost_us += self.config.costs.map_us;
                new_pages.push(p);
            }
            need -= 1;
        }
        for p in &new_pages {
            self.assign(*p, id, PageStatus::Mapped);
        }
        let added = new_pages.len();
        let s = self.sessions.get_mut(&id).expect("checked above");
        s.prefetched = None;
        s.mapping.extend(new_pages);
        s.tokens = s.tokens.max(token_count);
        Ok(added)
    }

    /// Maps the next page ahead of need when the next token starts a new
    /// page. No-op mid-page, when disabled, or when the pool is exhausted.
    pub fn prefetch_next(&mut self, id: SessionId) -> Result<bool> {
        if !self.config.prefetch {
            return Ok(false);
        }
        let s = self.session(id)?;
        if s.completed || s.prefetched.is_some() {
            return Ok(false);
        }
        let page = self.config.page_size_tokens;
        let next_page_needed = s.tokens % page == 0 && s.tokens < s.max_seq_len;
        if !next_page_needed || self.pages_for(s.tokens + 1) <= s.mapping.len() {
            return Ok(false);
        }
        let p = if let Some(p) = self.take_reusable_page() {
            self.counters.remaps += 1;
            self.cost_us += self.config.costs.remap_us;
            p
        } else if let Some(p) = self.free.pop_front() {
            self.counters.maps += 1;
            self.cost_us += self.config.costs.map_us;
            p
        } else {
            return Ok(false);
        };
        self.assign(p, id, PageStatus::Allocated);
        self.sessions.get_mut(&id).expect("checked above").prefetched = Some(p);
        Ok(true)
    }

    /// Releases the session's pages into the reusable pool as one set.
    pub fn complete_session(&mut self, id: SessionId) -> Result<()> {
        let s = self.sessions.get_mut(&id).ok_or(Error::UnknownSession(id))?;
        if s.completed {
            return Err(Error::SessionCompleted(id));
        }
        s.completed = true;
        let mut set = core::mem::take(&mut s.mapping);
        set.extend(s.prefetched.take());
        for p in &set {
            let page = &mut self.pages[*p as usize];
            page.status = PageStatus::Reusable;
            page.owner_session = None;
        }
        if !set.is_empty() {
            let seq = self.reusable_seq;
            self.reusable_seq += 1;
            self.reusable.entry(set.len()).or_default().push_back((seq, set));
        }
        if let Some(limit) = self.config.reusable_limit {
            let excess = self.reusable_pages().saturating_sub(limit);
            self.reclaim(excess);
        }
        Ok(())
    }

    /// Unmaps up to `n` reusable pages (oldest first) back to the free list.
    pub fn reclaim(&mut self, n: usize) -> usize {
        let mut done = 0;
        while done < n {
            let Some(p) = self.take_reusable_page() else {
                break;
            };
            let page = &mut self.pages[p as usize];
            page.status = PageStatus::Free;
            page.owner_session = None;
            self.free.push_back(p);
            self.counters.unmaps += 1;
            self.cost_us += self.config.costs.unmap_us;
            done += 1;
        }
        done
    }

    /// Checks ownership and page-count invariants across the whole pool.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen: BTreeMap<PageId, SessionId> = BTreeMap::new();
        for s in self.sessions.values() {
            if !s.completed && s.mapping.len() != self.pages_for(s.tokens) {
                return Err(Error::InvariantViolated("mapped pages differ from ceil(tokens/page)"));
            }
            for p in s.mapping.iter().chain(s.prefetched.iter()) {
                if seen.insert(*p, s.session_id).is_some() {
                    return Err(Error::InvariantViolated("page mapped by two sessions"));
                }
                let page = &self.pages[*p as usize];
                if page.owner_session != Some(s.session_id) {
                    return Err(Error::InvariantViolated("page owner disagrees with mapping"));
                }
            }
        }
        for page in &self.pages {
            match page.status {
                PageStatus::Free | PageStatus::Reusable if page.owner_session.is_some() => {
                    return Err(Error::InvariantViolated("unowned page carries an owner"));
                }
                PageStatus::Mapped | PageStatus::Allocated if !seen.contains_key(&page.page_id) => {
                    return Err(Error::InvariantViolated("owned page missing from every session"));
                }
                _ => {}
            }
        }
        let total = seen.len() + self.free.len() + self.reusable_pages();
        if total != self.pages.len() {
            return Err(Error::InvariantViolated("page accounting does not add up"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(pages: u32, page_size: u64) -> PagePool {
        PagePool::new(PoolConfig {
            num_pages: pages,
            page_size_tokens: page_size,
            ..PoolConfig::default()
        })
    }

    #[test]
    fn new_sessions_consume_nothing() {
        let mut p = pool(8, 16);
        let a = p.create_session(100);
        let b = p.create_session(100);
        assert!(p.session(a).unwrap().mapping.is_empty());
        assert_eq!(p.free_pages(), 8);
        let (sa, sb) = (p.session(a).unwrap(), p.session(b).unwrap());
        assert!(sa.virt_start + sa.max_seq_len <= sb.virt_start);
        let z = p.create_session(0);
        assert!(matches!(p.translate(z, 0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn translate_arithmetic() {
        let mut p = pool(8, 1024);
        let s = p.create_session(8192);
        p.ensure_mapped(s, 4096).unwrap();
        let t = p.translate(s, 3100).unwrap();
        assert_eq!((t.page_idx, t.offset), (3, 28));
        let t = p.translate(s, 0).unwrap();
        assert_eq!((t.page_idx, t.offset), (0, 0));
        let t = p.translate(s, 1024).unwrap();
        assert_eq!((t.page_idx, t.offset), (1, 0));
        assert_eq!(p.translate(s, 4096), Err(Error::Unmapped(4)));
        assert!(matches!(p.translate(s, 8192), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn ceil_page_growth() {
        let mut p = pool(8, 16);
        let s = p.create_session(1000);
        p.ensure_mapped(s, 33).unwrap();
        assert_eq!(p.session(s).unwrap().mapping.len(), 3);
        assert_eq!(p.counters().maps, 3);
    }

    #[test]
    fn exact_set_reuse_is_one_remap() {
        let mut p = pool(8, 16);
        let a = p.create_session(1000);
        p.ensure_mapped(a, 48).unwrap();
        p.complete_session(a).unwrap();
        let before = p.counters();
        let b = p.create_session(1000);
        p.ensure_mapped(b, 40).unwrap();
        let after = p.counters();
        assert_eq!(after.remaps - before.remaps, 1);
        assert_eq!(after.maps, before.maps);
    }

    #[test]
    fn exhaustion_reports_out_of_pages() {
        let mut p = pool(2, 16);
        let s = p.create_session(1000);
        assert_eq!(p.ensure_mapped(s, 48), Err(Error::OutOfPages { need: 3, available: 2 }));
        assert!(p.session(s).unwrap().mapping.is_empty());
    }

    #[test]
    fn completion_and_pressure() {
        let mut p = pool(8, 16);
        let s = p.create_session(1000);
        p.ensure_mapped(s, 48).unwrap();
        p.complete_session(s).unwrap();
        assert_eq!(p.reusable_pages(), 3);
        assert!(p.pages().iter().filter(|pg| pg.status == PageStatus::Reusable).count() == 3);
        assert_eq!(p.counters().unmaps, 0);
        assert_eq!(p.complete_session(s), Err(Error::SessionCompleted(s)));
        assert_eq!(p.reclaim(10), 3);
        assert_eq!(p.counters().unmaps, 3);
        assert_eq!(p.free_pages(), 8);
    }

    #[test]
    fn reusable_limit_applies_pressure() {
        let mut p = PagePool::new(PoolConfig {
            num_pages: 8,
            page_size_tokens: 16,
            reusable_limit: Some(0),
            ..PoolConfig::default()
        });
        let s = p.create_session(1000);
        p.ensure_mapped(s, 48).unwrap();
        p.complete_session(s).unwrap();
        assert_eq!(p.counters().unmaps, 3);
        assert_eq!(p.reusable_pages(), 0);
    }

    #[test]
    fn prefetch_at_page_boundary() {
        let mut p = pool(8, 16);
        let s = p.create_session(1000);
        p.ensure_mapped(s, 16).unwrap();
        assert!(p.prefetch_next(s).unwrap());
        assert_eq!(p.session(s).unwrap().mapping.len(), 1);
        p.ensure_mapped(s, 17).unwrap();
        assert_eq!(p.counters().prefetch_hits, 1);
        assert_eq!(p.counters().maps, 2);
        // Mid-page: nothing to do.
        assert!(!p.prefetch_next(s).unwrap());
        p.check_invariants().unwrap();
    }

    #[test]
    fn prefetch_does_not_change_translation() {
        let run = |prefetch: bool| {
            let mut p = PagePool::new(PoolConfig {
                num_pages: 64,
                page_size_tokens: 16,
                prefetch,
                ..PoolConfig::default()
            });
            let s = p.create_session(512);
            let mut seen = Vec::new();
            for t in 1..=300u64 {
                p.ensure_mapped(s, t).unwrap();
                p.prefetch_next(s).unwrap();
                let tr = p.translate(s, t - 1).unwrap();
                seen.push((tr.page_idx, tr.offset));
            }
            (seen, p.counters())
        };
        let (with, cw) = run(true);
        let (without, cn) = run(false);
        assert_eq!(with, without);
        assert!(cw.prefetch_hits > 0);
        assert_eq!(cn.prefetch_hits, 0);
    }

    #[test]
    fn sequential_equal_requests_follow_reuse_law() {
        let mut p = pool(64, 16);
        let n = 10;
        for _ in 0..n {
            let s = p.create_session(1000);
            p.ensure_mapped(s, 100).unwrap();
            p.complete_session(s).unwrap();
        }
        assert_eq!(p.counters().maps, 7);
        assert_eq!(p.counters().remaps, n - 1);
    }
}
