//! Paged KV storage: fixed-size pages, one block table per (layer, head) and
//! a variable logical length per head.
//!
//! Evicted slots are left as holes until [`PagedCache::compact`] repacks the
//! head. Pages that become empty go back to a LIFO free list.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::HeadCache;
use crate::error::{Error, Result};
use crate::eviction::{Candidate, EntryId};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const DEFAULT_PAGE_SIZE: usize = 16;

pub type PageId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAddress {
    pub page: PageId,
    pub slot: usize,
}

#[derive(Debug, Clone)]
struct Page<T> {
    keys: Vec<T>,
    values: Vec<T>,
    births: Vec<usize>,
    betas: Vec<T>,
    occupied: Vec<bool>,
    /// Next never-written slot; holes below it are not reused.
    fill: usize,
    live: usize,
    owner: Option<(usize, usize)>,
}

impl<T: Scalar> Page<T> {
    fn new(page_size: usize, dim: usize) -> Self {
        Self {
            keys: vec![T::zero(); page_size * dim],
            values: vec![T::zero(); page_size * dim],
            births: vec![0; page_size],
            betas: vec![T::zero(); page_size],
            occupied: vec![false; page_size],
            fill: 0,
            live: 0,
            owner: None,
        }
    }

    fn reset(&mut self) {
        self.occupied.iter_mut().for_each(|o| *o = false);
        self.fill = 0;
        self.live = 0;
        self.owner = None;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTable {
    pub pages: Vec<PageId>,
    pub logical_length: usize,
}

/// Contiguous copy of one head's logical sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Gathered<T> {
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
    pub births: Vec<usize>,
    pub betas: Vec<T>,
}

impl<T: Scalar> Gathered<T> {
    pub fn into_head_cache(self) -> Result<HeadCache<T>> {
        HeadCache::from_parts(self.keys, self.values, self.births, self.betas)
    }
}

#[derive(Debug, Clone)]
pub struct PagedCache<T> {
    layers: usize,
    heads: usize,
    dim: usize,
    page_size: usize,
    max_pages: Option<usize>,
    pages: Vec<Page<T>>,
    free: Vec<PageId>,
    tables: Vec<BlockTable>,
    /// birth -> slot address, per head.
    index: Vec<BTreeMap<usize, SlotAddress>>,
    peak_entries: usize,
    peak_pages: usize,
}

impl<T: Scalar> PagedCache<T> {
    pub fn new(layers: usize, heads: usize, dim: usize, page_size: usize, max_pages: Option<usize>) -> Result<Self> {
        if page_size == 0 || layers == 0 || heads == 0 {
            return Err(Error::Config("page size, layers and heads must be positive".into()));
        }
        Ok(Self {
            layers,
            heads,
            dim,
            page_size,
            max_pages,
            pages: Vec::new(),
            free: Vec::new(),
            tables: vec![BlockTable::default(); layers * heads],
            index: vec![BTreeMap::new(); layers * heads],
            peak_entries: 0,
            peak_pages: 0,
        })
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn slot_of(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.layers || head >= self.heads {
            return Err(Error::InvalidArgument(format!("no head ({layer}, {head})")));
        }
        Ok(layer * self.heads + head)
    }

    pub fn block_table(&self, layer: usize, head: usize) -> Result<&BlockTable> {
        Ok(&self.tables[self.slot_of(layer, head)?])
    }

    pub fn logical_length(&self, layer: usize, head: usize) -> Result<usize> {
        Ok(self.block_table(layer, head)?.logical_length)
    }

    /// Entries currently stored across every head.
    pub fn total_entries(&self) -> usize {
        self.tables.iter().map(|t| t.logical_length).sum()
    }

    pub fn pages_in_use(&self) -> usize {
        self.pages.len() - self.free.len()
    }

    pub fn peak_entries(&self) -> usize {
        self.peak_entries
    }

    pub fn peak_pages(&self) -> usize {
        self.peak_pages
    }

    fn allocate(&mut self, owner: (usize, usize)) -> Result<PageId> {
        let id = match self.free.pop() {
            Some(id) => id,
            None => {
                if self.max_pages.is_some_and(|m| self.pages.len() >= m) {
                    return Err(Error::Capacity {
                        max_pages: self.max_pages.unwrap_or_default(),
                    });
                }
                self.pages.push(Page::new(self.page_size, self.dim));
                self.pages.len() - 1
            }
        };
        self.pages[id].owner = Some(owner);
        self.peak_pages = self.peak_pages.max(self.pages_in_use());
        Ok(id)
    }

    fn release(&mut self, id: PageId) {
        self.pages[id].reset();
        self.free.push(id);
    }

    /// Appends an entry at the tail of the head's logical sequence.
    pub fn append(&mut self, layer: usize, head: usize, key: &[T], value: &[T], birth: usize, beta: T) -> Result<SlotAddress> {
        let h = self.slot_of(layer, head)?;
        if key.len() != self.dim || value.len() != self.dim {
            return Err(Error::Shape(format!("entry dims {}/{} vs cache dim {}", key.len(), value.len(), self.dim)));
        }
        if let Some((&last, _)) = self.index[h].iter().next_back() {
            if birth <= last {
                return Err(Error::InvalidArgument(format!("birth {birth} not after {last}")));
            }
        }
        let tail = self.tables[h].pages.last().copied();
        let page = match tail {
            Some(p) if self.pages[p].fill < self.page_size => p,
            _ => {
                let p = self.allocate((layer, head))?;
                self.tables[h].pages.push(p);
                p
            }
        };
        let d = self.dim;
        let pg = &mut self.pages[page];
        let slot = pg.fill;
        pg.keys[slot * d..(slot + 1) * d].copy_from_slice(key);
        pg.values[slot * d..(slot + 1) * d].copy_from_slice(value);
        pg.births[slot] = birth;
        pg.betas[slot] = beta;
        pg.occupied[slot] = true;
        pg.fill += 1;
        pg.live += 1;
        self.tables[h].logical_length += 1;
        let addr = SlotAddress { page, slot };
        self.index[h].insert(birth, addr);
        self.peak_entries = self.peak_entries.max(self.total_entries());
        Ok(addr)
    }

    /// Removes the listed entries. Either all are removed or, if any birth is
    /// unknown, none are.
    pub fn evict(&mut self, layer: usize, head: usize, births: &[usize]) -> Result<()> {
        let h = self.slot_of(layer, head)?;
        for &b in births {
            if !self.index[h].contains_key(&b) {
                return Err(Error::UnknownEntry { layer, head, birth: b });
            }
        }
        for &b in births {
            let Some(addr) = self.index[h].remove(&b) else {
                return Err(Error::UnknownEntry { layer, head, birth: b });
            };
            let pg = &mut self.pages[addr.page];
            pg.occupied[addr.slot] = false;
            pg.live -= 1;
            self.tables[h].logical_length -= 1;
            if pg.live == 0 {
                self.tables[h].pages.retain(|&p| p != addr.page);
                self.release(addr.page);
            }
        }
        Ok(())
    }

    fn survivors(&self, h: usize) -> impl Iterator<Item = (PageId, usize)> + '_ {
        self.tables[h].pages.iter().flat_map(move |&p| {
            let pg = &self.pages[p];
            (0..pg.fill).filter(move |&s| pg.occupied[s]).map(move |s| (p, s))
        })
    }

    /// Contiguous copy of the head's entries in logical (birth) order.
    pub fn gather(&self, layer: usize, head: usize) -> Result<Gathered<T>> {
        let h = self.slot_of(layer, head)?;
        let n = self.tables[h].logical_length;
        let d = self.dim;
        let mut keys = Vec::with_capacity(n * d);
        let mut values = Vec::with_capacity(n * d);
        let mut births = Vec::with_capacity(n);
        let mut betas = Vec::with_capacity(n);
        for (p, s) in self.survivors(h) {
            let pg = &self.pages[p];
            keys.extend_from_slice(&pg.keys[s * d..(s + 1) * d]);
            values.extend_from_slice(&pg.values[s * d..(s + 1) * d]);
            births.push(pg.births[s]);
            betas.push(pg.betas[s]);
        }
        Ok(Gathered {
            keys: Matrix::from_vec(n, d, keys)?,
            values: Matrix::from_vec(n, d, values)?,
            births,
            betas,
        })
    }

    pub fn head_cache(&self, layer: usize, head: usize) -> Result<HeadCache<T>> {
        self.gather(layer, head)?.into_head_cache()
    }

    /// Repacks the head's survivors into the minimum number of pages.
    pub fn compact(&mut self, layer: usize, head: usize) -> Result<()> {
        let h = self.slot_of(layer, head)?;
        let n = self.tables[h].logical_length;
        let needed = n.div_ceil(self.page_size);
        if self.tables[h].pages.len() <= needed {
            return Ok(());
        }
        let g = self.gather(layer, head)?;
        for p in std::mem::take(&mut self.tables[h].pages) {
            self.release(p);
        }
        self.tables[h].logical_length = 0;
        self.index[h].clear();
        for i in 0..n {
            self.append(layer, head, g.keys.row(i), g.values.row(i), g.births[i], g.betas[i])?;
        }
        Ok(())
    }

    pub fn compact_all(&mut self) -> Result<()> {
        for l in 0..self.layers {
            for h in 0..self.heads {
                self.compact(l, h)?;
            }
        }
        Ok(())
    }

    /// Every live entry with its retention score, for the eviction policy.
    pub fn candidates(&self) -> Vec<Candidate<T>> {
        let mut out = Vec::with_capacity(self.total_entries());
        for l in 0..self.layers {
            for h in 0..self.heads {
                let idx = l * self.heads + h;
                for (&birth, addr) in &self.index[idx] {
                    out.push(Candidate {
                        id: EntryId { layer: l, head: h, birth },
                        beta: self.pages[addr.page].betas[addr.slot],
                    });
                }
            }
        }
        out
    }

    /// Checks the accounting, ownership and indexing invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = vec![false; self.pages.len()];
        let mut occupied_total = 0;
        for (idx, t) in self.tables.iter().enumerate() {
            let owner = (idx / self.heads, idx % self.heads);
            let mut live = 0;
            for &p in &t.pages {
                if seen[p] {
                    return Err(Error::InvalidArgument(format!("page {p} referenced twice")));
                }
                seen[p] = true;
                let pg = &self.pages[p];
                if pg.owner != Some(owner) {
                    return Err(Error::InvalidArgument(format!("page {p} owned by {:?}, listed under {owner:?}", pg.owner)));
                }
                let count = pg.occupied.iter().filter(|o| **o).count();
                if count != pg.live || count > self.page_size {
                    return Err(Error::InvalidArgument(format!("page {p} occupancy mismatch")));
                }
                live += count;
            }
            if live != t.logical_length || self.index[idx].len() != live {
                return Err(Error::InvalidArgument(format!("head {owner:?} length mismatch")));
            }
            occupied_total += live;
        }
        for &f in &self.free {
            if seen[f] || self.pages[f].live != 0 {
                return Err(Error::InvalidArgument(format!("free page {f} still in use")));
            }
        }
        if occupied_total != self.total_entries() {
            return Err(Error::InvalidArgument("total occupancy mismatch".into()));
        }
        Ok(())
    }

    /// Debug view of block tables and per-page occupancy.
    pub fn snapshot(&self) -> CacheSnapshot {
        let mut tables = Vec::new();
        for l in 0..self.layers {
            for h in 0..self.heads {
                let t = &self.tables[l * self.heads + h];
                tables.push(TableSnapshot {
                    layer: l,
                    head: h,
                    logical_length: t.logical_length,
                    pages: t.pages.clone(),
                    occupancy: t.pages.iter().map(|&p| self.pages[p].live).collect(),
                });
            }
        }
        CacheSnapshot {
            page_size: self.page_size,
            pages_allocated: self.pages.len(),
            pages_in_use: self.pages_in_use(),
            free_list: self.free.clone(),
            total_entries: self.total_entries(),
            tables,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSnapshot {
    pub layer: usize,
    pub head: usize,
    pub logical_length: usize,
    pub pages: Vec<PageId>,
    pub occupancy: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub page_size: usize,
    pub pages_allocated: usize,
    pub pages_in_use: usize,
    pub free_list: Vec<PageId>,
    pub total_entries: usize,
    pub tables: Vec<TableSnapshot>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![i as f64, -(i as f64)], vec![0.5 * i as f64, 1.0])
    }

    fn fill(c: &mut PagedCache<f64>, layer: usize, head: usize, births: impl IntoIterator<Item = usize>) {
        for b in births {
            let (k, v) = entry(b);
            c.append(layer, head, &k, &v, b, 0.5).unwrap();
        }
    }

    #[test]
    fn twenty_appends_use_two_pages() {
        let mut c = PagedCache::new(1, 1, 2, 16, None).unwrap();
        fill(&mut c, 0, 0, 0..20);
        assert_eq!(c.snapshot().tables[0].occupancy, vec![16, 4]);
        assert_eq!(c.logical_length(0, 0).unwrap(), 20);
        c.check_invariants().unwrap();
    }

    #[test]
    fn interleaved_heads_are_independent() {
        let mut c = PagedCache::new(1, 2, 2, 4, None).unwrap();
        for b in 0..6 {
            fill(&mut c, 0, b % 2, [b]);
        }
        assert_eq!(c.gather(0, 0).unwrap().births, vec![0, 2, 4]);
        assert_eq!(c.gather(0, 1).unwrap().births, vec![1, 3, 5]);
        let t0 = &c.block_table(0, 0).unwrap().pages;
        let t1 = &c.block_table(0, 1).unwrap().pages;
        assert!(t0.iter().all(|p| !t1.contains(p)));
        c.check_invariants().unwrap();
    }

    #[test]
    fn allocator_exhaustion() {
        let mut c = PagedCache::new(1, 1, 2, 2, Some(1)).unwrap();
        fill(&mut c, 0, 0, 0..2);
        let (k, v) = entry(2);
        assert!(matches!(c.append(0, 0, &k, &v, 2, 0.5), Err(Error::Capacity { .. })));
    }

    #[test]
    fn evict_all_frees_everything() {
        let mut c = PagedCache::new(1, 1, 2, 4, None).unwrap();
        fill(&mut c, 0, 0, 0..10);
        c.evict(0, 0, &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!(c.logical_length(0, 0).unwrap(), 0);
        assert_eq!(c.pages_in_use(), 0);
        let g = c.gather(0, 0).unwrap();
        assert_eq!(g.keys.rows(), 0);
        c.check_invariants().unwrap();
    }

    #[test]
    fn evict_every_other_keeps_order() {
        let mut c = PagedCache::new(1, 1, 2, 16, None).unwrap();
        fill(&mut c, 0, 0, 0..32);
        let odd: Vec<usize> = (0..32).filter(|b| b % 2 == 1).collect();
        c.evict(0, 0, &odd).unwrap();
        let g = c.gather(0, 0).unwrap();
        assert_eq!(g.births, (0..32).step_by(2).collect::<Vec<_>>());
        assert_eq!(g.keys.row(3), entry(6).0.as_slice());
        assert_eq!(c.block_table(0, 0).unwrap().pages.len(), 2);
        c.compact(0, 0).unwrap();
        assert_eq!(c.block_table(0, 0).unwrap().pages.len(), 1);
        assert_eq!(c.gather(0, 0).unwrap(), g);
    }

    #[test]
    fn unknown_birth_is_rejected_atomically() {
        let mut c = PagedCache::new(1, 1, 2, 4, None).unwrap();
        fill(&mut c, 0, 0, 0..3);
        assert!(matches!(c.evict(0, 0, &[1, 7]), Err(Error::UnknownEntry { birth: 7, .. })));
        assert_eq!(c.logical_length(0, 0).unwrap(), 3);
    }

    #[test]
    fn evicted_births_never_come_back() {
        let mut c = PagedCache::new(1, 1, 2, 4, None).unwrap();
        fill(&mut c, 0, 0, 0..5);
        c.evict(0, 0, &[1, 2]).unwrap();
        fill(&mut c, 0, 0, 5..7);
        assert_eq!(c.gather(0, 0).unwrap().births, vec![0, 3, 4, 5, 6]);
        let (k, v) = entry(2);
        assert!(c.append(0, 0, &k, &v, 2, 0.5).is_err());
    }

    #[test]
    fn compact_examples() {
        let mut c = PagedCache::new(1, 1, 2, 3, None).unwrap();
        fill(&mut c, 0, 0, 0..9);
        let before = c.snapshot();
        c.compact(0, 0).unwrap();
        assert_eq!(c.snapshot(), before);
        c.evict(0, 0, &[1, 2, 4, 5, 7, 8]).unwrap();
        assert_eq!(c.block_table(0, 0).unwrap().pages.len(), 3);
        let g = c.gather(0, 0).unwrap();
        c.compact(0, 0).unwrap();
        assert_eq!(c.block_table(0, 0).unwrap().pages.len(), 1);
        assert_eq!(c.gather(0, 0).unwrap(), g);
        c.check_invariants().unwrap();
    }

    #[test]
    fn free_list_is_lifo() {
        let mut c = PagedCache::new(1, 2, 2, 1, None).unwrap();
        fill(&mut c, 0, 0, 0..3);
        c.evict(0, 0, &[0]).unwrap();
        c.evict(0, 0, &[2]).unwrap();
        let freed_last = 2;
        let addr = c.append(0, 1, &[0.0, 0.0], &[0.0, 0.0], 0, 1.0).unwrap();
        assert_eq!(addr.page, freed_last);
    }

    #[test]
    fn snapshot_serializes() {
        let mut c = PagedCache::new(2, 1, 2, 4, None).unwrap();
        fill(&mut c, 1, 0, 0..5);
        let json = serde_json::to_string(&c.snapshot()).unwrap();
        let back: CacheSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tables[1].occupancy, vec![4, 1]);
    }
}
