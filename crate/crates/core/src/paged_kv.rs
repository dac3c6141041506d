//! Paged storage for the KV cache and its gradients.
//!
//! One arena of fixed-size physical pages is shared by every layer; each layer
//! owns a page table mapping logical page index → physical page. A physical
//! page holds `page_size` token slots of keys and values, each slot shaped
//! `[n_kv_heads × head_dim]`. Appends only ever write into free slots of the
//! tail page or into freshly allocated pages, so existing page data is never
//! moved. Gradient pages mirror KV pages one-to-one and are allocated on the
//! first scatter into them.
//!
//! Cache storage is not referenced by any activation tape: attention reads it
//! through [`PagedCache::page`] and writes gradients back through
//! [`PagedCache::scatter_add_grads`].

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Scalar, Tensor};

/// Page size used for the reference-scale runs.
pub const REFERENCE_PAGE_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Device,
    Host,
}

struct Page<T> {
    k: Box<[T]>,
    v: Box<[T]>,
    /// Mean key over valid slots, `[n_kv_heads × head_dim]`. Kept alongside
    /// the page as always-resident retrieval metadata.
    key_mean: Box<[T]>,
    tier: Tier,
    grad: Option<GradPage<T>>,
}

struct GradPage<T> {
    dk: Box<[T]>,
    dv: Box<[T]>,
}

#[derive(Default, Clone)]
struct LayerTable {
    pages: Vec<usize>,
    filled: usize,
}

/// Borrowed view of one page; slots `valid..` are unfilled.
pub struct PageRef<'a, T> {
    pub k: &'a [T],
    pub v: &'a [T],
    pub valid: usize,
}

/// Gather result: page-ordered copies plus a per-slot validity mask.
#[derive(Clone, Debug)]
pub struct Gathered<T> {
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub device_bytes: usize,
    pub host_bytes: usize,
    pub grad_bytes: usize,
    pub pages: usize,
    pub reallocs: usize,
    pub copied_bytes: usize,
}

impl MemoryReport {
    pub fn kv_bytes(&self) -> usize {
        self.device_bytes + self.host_bytes
    }
}

pub struct PagedCache<T> {
    page_size: usize,
    n_kv_heads: usize,
    head_dim: usize,
    arena: Vec<Page<T>>,
    free: Vec<usize>,
    spare_grads: Vec<GradPage<T>>,
    tables: Vec<LayerTable>,
}

impl<T: Scalar> PagedCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self::with_geometry(cfg.n_layers, cfg.page_size, cfg.n_kv_heads, cfg.head_dim)
    }

    pub fn with_geometry(n_layers: usize, page_size: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        assert!(page_size > 0 && n_kv_heads > 0 && head_dim > 0);
        Self {
            page_size,
            n_kv_heads,
            head_dim,
            arena: Vec::new(),
            free: Vec::new(),
            spare_grads: Vec::new(),
            tables: vec![LayerTable::default(); n_layers],
        }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn n_layers(&self) -> usize {
        self.tables.len()
    }

    pub fn slot_elems(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    fn page_elems(&self) -> usize {
        self.page_size * self.slot_elems()
    }

    /// Bytes of one page's keys plus values.
    pub fn page_bytes(&self) -> usize {
        2 * self.page_elems() * T::BYTES
    }

    /// Tokens appended so far to `layer`.
    pub fn filled(&self, layer: usize) -> usize {
        self.tables.get(layer).map_or(0, |t| t.filled)
    }

    pub fn num_pages(&self, layer: usize) -> usize {
        self.tables.get(layer).map_or(0, |t| t.pages.len())
    }

    /// Physical pages ever created, including free ones.
    pub fn arena_pages(&self) -> usize {
        self.arena.len()
    }

    fn table(&self, layer: usize) -> Result<&LayerTable> {
        self.tables
            .get(layer)
            .ok_or_else(|| Error::OutOfRange(format!("layer {layer} of {}", self.tables.len())))
    }

    fn physical(&self, layer: usize, page: usize) -> Result<usize> {
        let t = self.table(layer)?;
        t.pages.get(page).copied().ok_or_else(|| {
            Error::OutOfRange(format!("page {page} of layer {layer} ({} pages)", t.pages.len()))
        })
    }

    fn valid_slots(&self, layer: usize, page: usize) -> usize {
        let filled = self.tables[layer].filled;
        filled.saturating_sub(page * self.page_size).min(self.page_size)
    }

    fn alloc_page(&mut self) -> usize {
        if let Some(id) = self.free.pop() {
            let p = &mut self.arena[id];
            p.tier = Tier::Device;
            return id;
        }
        let n = self.page_elems();
        self.arena.push(Page {
            k: vec![T::zero(); n].into_boxed_slice(),
            v: vec![T::zero(); n].into_boxed_slice(),
            key_mean: vec![T::zero(); self.slot_elems()].into_boxed_slice(),
            tier: Tier::Device,
            grad: None,
        });
        self.arena.len() - 1
    }

    /// Appends `k`, `v` (`[n × n_kv_heads × head_dim]`) to `layer`, returning
    /// the global slot interval written.
    pub fn append_chunk(&mut self, layer: usize, k: &Tensor<T>, v: &Tensor<T>) -> Result<Range<usize>> {
        self.table(layer)?;
        let se = self.slot_elems();
        if k.shape() != v.shape() || k.row_len() != se || k.rank() != 3 {
            return Err(Error::dim(
                "append_chunk",
                format!("k {:?}, v {:?}, slot {se}", k.shape(), v.shape()),
            ));
        }
        let n = k.rows();
        let start = self.tables[layer].filled;
        let mut written = 0;
        while written < n {
            let filled = self.tables[layer].filled;
            let page_idx = filled / self.page_size;
            let slot = filled % self.page_size;
            if page_idx == self.tables[layer].pages.len() {
                let id = self.alloc_page();
                self.tables[layer].pages.push(id);
            }
            let id = self.tables[layer].pages[page_idx];
            let take = (self.page_size - slot).min(n - written);
            let page = &mut self.arena[id];
            if page.tier != Tier::Device {
                return Err(Error::Residency { layer, page: page_idx });
            }
            let src = written * se..(written + take) * se;
            let dst = slot * se..(slot + take) * se;
            page.k[dst.clone()].copy_from_slice(&k.data()[src.clone()]);
            page.v[dst].copy_from_slice(&v.data()[src]);
            written += take;
            self.tables[layer].filled += take;
            self.refresh_mean(layer, page_idx);
        }
        Ok(start..start + n)
    }

    fn refresh_mean(&mut self, layer: usize, page_idx: usize) {
        let valid = self.valid_slots(layer, page_idx);
        let se = self.slot_elems();
        let id = self.tables[layer].pages[page_idx];
        let page = &mut self.arena[id];
        let inv = T::one() / T::from_usize(valid.max(1));
        for e in 0..se {
            let mut s = T::zero();
            for slot in 0..valid {
                s += page.k[slot * se + e];
            }
            page.key_mean[e] = s * inv;
        }
    }

    /// Mean key of every page in `layer`, `[n_pages × n_kv_heads × head_dim]`.
    /// Means come from pinned metadata, so residency is not required.
    pub fn key_means(&self, layer: usize, n_pages: usize) -> Result<Tensor<T>> {
        let t = self.table(layer)?;
        if n_pages > t.pages.len() {
            return Err(Error::OutOfRange(format!(
                "{n_pages} pages requested, layer {layer} has {}",
                t.pages.len()
            )));
        }
        let mut data = Vec::with_capacity(n_pages * self.slot_elems());
        for &id in &t.pages[..n_pages] {
            data.extend_from_slice(&self.arena[id].key_mean);
        }
        Tensor::new(&[n_pages, self.n_kv_heads, self.head_dim], data)
    }

    pub fn tier(&self, layer: usize, page: usize) -> Result<Tier> {
        Ok(self.arena[self.physical(layer, page)?].tier)
    }

    pub fn set_tier(&mut self, layer: usize, page: usize, tier: Tier) -> Result<()> {
        let id = self.physical(layer, page)?;
        self.arena[id].tier = tier;
        Ok(())
    }

    pub fn has_grad(&self, layer: usize, page: usize) -> Result<bool> {
        Ok(self.arena[self.physical(layer, page)?].grad.is_some())
    }

    fn resident(&self, layer: usize, page: usize) -> Result<usize> {
        let id = self.physical(layer, page)?;
        if self.arena[id].tier != Tier::Device {
            return Err(Error::Residency { layer, page });
        }
        Ok(id)
    }

    /// Read access to one device-resident page.
    pub fn page(&self, layer: usize, page: usize) -> Result<PageRef<'_, T>> {
        let id = self.resident(layer, page)?;
        let p = &self.arena[id];
        Ok(PageRef { k: &p.k, v: &p.v, valid: self.valid_slots(layer, page) })
    }

    /// Raw pointer to a page's key storage; used to observe that pages never move.
    pub fn page_key_ptr(&self, layer: usize, page: usize) -> Result<*const T> {
        Ok(self.arena[self.physical(layer, page)?].k.as_ptr())
    }

    pub fn gather_pages(&self, layer: usize, page_ids: &[usize]) -> Result<Gathered<T>> {
        let pe = self.page_elems();
        let mut k = Vec::with_capacity(page_ids.len() * pe);
        let mut v = Vec::with_capacity(page_ids.len() * pe);
        let mut mask = Vec::with_capacity(page_ids.len() * self.page_size);
        for &pid in page_ids {
            let p = self.page(layer, pid)?;
            k.extend_from_slice(p.k);
            v.extend_from_slice(p.v);
            mask.extend((0..self.page_size).map(|s| s < p.valid));
        }
        let shape = [page_ids.len() * self.page_size, self.n_kv_heads, self.head_dim];
        Ok(Gathered { k: Tensor::new(&shape, k)?, v: Tensor::new(&shape, v)?, mask })
    }

    /// Adds `dk`, `dv` (laid out like [`gather_pages`](Self::gather_pages)
    /// output) into the gradient pages of `page_ids`. Unfilled slots are skipped.
    pub fn scatter_add_grads(
        &mut self,
        layer: usize,
        page_ids: &[usize],
        dk: &Tensor<T>,
        dv: &Tensor<T>,
    ) -> Result<()> {
        let pe = self.page_elems();
        if dk.numel() != page_ids.len() * pe || dv.numel() != dk.numel() {
            return Err(Error::dim(
                "scatter_add_grads",
                format!("{} pages vs dk {:?} dv {:?}", page_ids.len(), dk.shape(), dv.shape()),
            ));
        }
        for (i, &pid) in page_ids.iter().enumerate() {
            let src = i * pe..(i + 1) * pe;
            self.add_page_grad(layer, pid, &dk.data()[src.clone()], &dv.data()[src])?;
        }
        Ok(())
    }

    /// Adds one page worth of gradient (`[page_size × slot]` each) into `page`.
    pub fn add_page_grad(&mut self, layer: usize, page: usize, dk: &[T], dv: &[T]) -> Result<()> {
        let id = self.resident(layer, page)?;
        let pe = self.page_elems();
        if dk.len() != pe || dv.len() != pe {
            return Err(Error::dim("add_page_grad", format!("{} vs page {pe}", dk.len())));
        }
        let used = self.valid_slots(layer, page) * self.slot_elems();
        if self.arena[id].grad.is_none() {
            let g = match self.spare_grads.pop() {
                Some(mut g) => {
                    g.dk.iter_mut().chain(g.dv.iter_mut()).for_each(|x| *x = T::zero());
                    g
                }
                None => GradPage {
                    dk: vec![T::zero(); pe].into_boxed_slice(),
                    dv: vec![T::zero(); pe].into_boxed_slice(),
                },
            };
            self.arena[id].grad = Some(g);
        }
        let g = self.arena[id].grad.as_mut().expect("allocated above");
        for (a, &b) in g.dk[..used].iter_mut().zip(&dk[..used]) {
            *a += b;
        }
        for (a, &b) in g.dv[..used].iter_mut().zip(&dv[..used]) {
            *a += b;
        }
        Ok(())
    }

    /// Gradient page contents, `None` if never written.
    pub fn grad_page(&self, layer: usize, page: usize) -> Result<Option<(&[T], &[T])>> {
        let id = self.resident(layer, page)?;
        Ok(self.arena[id].grad.as_ref().map(|g| (&g.dk[..], &g.dv[..])))
    }

    /// Accumulated key/value gradients for global slots `range` of `layer`,
    /// `[len × n_kv_heads × head_dim]`; missing gradient pages read as zero.
    pub fn read_grads(&self, layer: usize, range: Range<usize>) -> Result<(Tensor<T>, Tensor<T>)> {
        let se = self.slot_elems();
        let n = range.len();
        let mut dk = Tensor::zeros(&[n, self.n_kv_heads, self.head_dim]);
        let mut dv = Tensor::zeros(&[n, self.n_kv_heads, self.head_dim]);
        let mut slot = range.start;
        while slot < range.end {
            let page = slot / self.page_size;
            let off = slot % self.page_size;
            let take = (self.page_size - off).min(range.end - slot);
            if let Some((gk, gv)) = self.grad_page(layer, page)? {
                let dst = (slot - range.start) * se..(slot - range.start + take) * se;
                let src = off * se..(off + take) * se;
                dk.data_mut()[dst.clone()].copy_from_slice(&gk[src.clone()]);
                dv.data_mut()[dst].copy_from_slice(&gv[src]);
            }
            slot += take;
        }
        Ok((dk, dv))
    }

    /// Zeroes every allocated gradient page without releasing it.
    pub fn zero_grads(&mut self) {
        for p in &mut self.arena {
            if let Some(g) = &mut p.grad {
                g.dk.iter_mut().chain(g.dv.iter_mut()).for_each(|x| *x = T::zero());
            }
        }
    }

    /// Returns every page to the free list and drops all page tables.
    pub fn reset(&mut self) {
        for t in &mut self.tables {
            for id in t.pages.drain(..).rev() {
                let p = &mut self.arena[id];
                if let Some(g) = p.grad.take() {
                    self.spare_grads.push(g);
                }
                p.tier = Tier::Device;
                self.free.push(id);
            }
            t.filled = 0;
        }
    }

    pub fn memory_report(&self) -> MemoryReport {
        let mut r = MemoryReport::default();
        let pb = self.page_bytes();
        for t in &self.tables {
            for &id in &t.pages {
                let p = &self.arena[id];
                match p.tier {
                    Tier::Device => r.device_bytes += pb,
                    Tier::Host => r.host_bytes += pb,
                }
                if p.grad.is_some() {
                    r.grad_bytes += pb;
                }
                r.pages += 1;
            }
        }
        r
    }

    /// Structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let Some(first) = self.tables.first() else { return Ok(()) };
        for (l, t) in self.tables.iter().enumerate() {
            if t.filled != first.filled {
                return Err(format!("layer {l} filled {} vs {}", t.filled, first.filled));
            }
            if t.pages.len() != t.filled.div_ceil(self.page_size) {
                return Err(format!("layer {l}: {} pages for {} tokens", t.pages.len(), t.filled));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrowthPolicy {
    ExactFit,
    Doubling,
}

/// One reallocation of the contiguous buffer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReallocPoint {
    pub append_index: usize,
    /// Bytes stored once this append completes.
    pub stored_bytes: usize,
    /// Live bytes while the copy is in flight.
    pub peak_bytes: usize,
}

impl ReallocPoint {
    pub fn ratio(&self) -> f64 {
        self.peak_bytes as f64 / self.stored_bytes as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContiguousReport {
    pub peak_bytes: usize,
    pub copied_bytes: usize,
    pub reallocs: usize,
    pub final_bytes: usize,
    pub capacity_bytes: usize,
    pub realloc_points: Vec<ReallocPoint>,
}

/// Simulates growing a single contiguous cache buffer by concatenation.
///
/// Each append of `a` bytes first exists as its own staging tensor. When the
/// buffer lacks room, a new buffer is allocated and the old contents plus the
/// staged chunk are copied in; old buffer, staging tensor and new buffer are
/// live together at that moment.
pub fn contiguous_append_baseline(appends: &[usize], policy: GrowthPolicy) -> ContiguousReport {
    let mut r = ContiguousReport::default();
    let (mut cap, mut used) = (0usize, 0usize);
    for (i, &a) in appends.iter().enumerate() {
        let needed = used + a;
        let live = if needed > cap {
            let new_cap = match policy {
                GrowthPolicy::ExactFit => needed,
                GrowthPolicy::Doubling => needed.max(2 * cap),
            };
            let peak = cap + a + new_cap;
            r.copied_bytes += used;
            r.reallocs += 1;
            r.realloc_points.push(ReallocPoint { append_index: i, stored_bytes: needed, peak_bytes: peak });
            cap = new_cap;
            peak
        } else {
            cap + a
        };
        used = needed;
        r.peak_bytes = r.peak_bytes.max(live);
    }
    r.final_bytes = used;
    r.capacity_bytes = cap;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cache(layers: usize, p: usize, kvh: usize, d: usize) -> PagedCache<f32> {
        PagedCache::with_geometry(layers, p, kvh, d)
    }

    fn ramp(n: usize, kvh: usize, d: usize, offset: f32) -> Tensor<f32> {
        Tensor::from_fn(&[n, kvh, d], |i| offset + i as f32)
    }

    #[test]
    fn new_cache_is_empty() {
        let cfg = ModelConfig { page_size: REFERENCE_PAGE_SIZE, chunk_size: 256, ..Default::default() };
        let c = PagedCache::<f32>::new(&cfg);
        assert_eq!(c.memory_report(), MemoryReport::default());
        assert!((0..cfg.n_layers).all(|l| c.filled(l) == 0));
        assert_eq!(c.page_size(), 128);
    }

    #[test]
    fn append_page_arithmetic() {
        let mut c = cache(1, 128, 1, 2);
        let r = c.append_chunk(0, &ramp(130, 1, 2, 0.0), &ramp(130, 1, 2, 0.0)).unwrap();
        assert_eq!(r, 0..130);
        assert_eq!(c.num_pages(0), 2);

        let mut c = cache(1, 128, 1, 2);
        c.append_chunk(0, &ramp(64, 1, 2, 0.0), &ramp(64, 1, 2, 0.0)).unwrap();
        let r = c.append_chunk(0, &ramp(64, 1, 2, 0.0), &ramp(64, 1, 2, 0.0)).unwrap();
        assert_eq!(r, 64..128);
        assert_eq!(c.num_pages(0), 1);
        assert!(c.append_chunk(3, &ramp(1, 1, 2, 0.0), &ramp(1, 1, 2, 0.0)).is_err());
    }

    #[test]
    fn pages_never_move() {
        let mut c = cache(2, 16, 2, 16);
        c.append_chunk(0, &ramp(16, 2, 16, 0.0), &ramp(16, 2, 16, 0.0)).unwrap();
        let before = c.page_key_ptr(0, 0).unwrap();
        for i in 0..10 {
            let layer = i % 2;
            c.append_chunk(layer, &ramp(24, 2, 16, 0.0), &ramp(24, 2, 16, 0.0)).unwrap();
        }
        assert_eq!(before, c.page_key_ptr(0, 0).unwrap());
        assert_eq!(c.memory_report().copied_bytes, 0);
    }

    #[test]
    fn memory_report_arithmetic() {
        let mut c = cache(2, 16, 2, 16);
        for l in 0..2 {
            c.append_chunk(l, &ramp(48, 2, 16, 0.0), &ramp(48, 2, 16, 0.0)).unwrap();
        }
        let r = c.memory_report();
        assert_eq!(r.pages, 6);
        assert_eq!(r.device_bytes, 24_576);
        assert_eq!(r.grad_bytes, 0);
        assert_eq!(r.host_bytes, 0);
    }

    #[test]
    fn gather_masks_partial_page() {
        let mut c = cache(1, 16, 1, 2);
        c.append_chunk(0, &ramp(19, 1, 2, 0.0), &ramp(19, 1, 2, 0.0)).unwrap();
        let g = c.gather_pages(0, &[1]).unwrap();
        assert_eq!(g.mask.iter().filter(|&&m| m).count(), 19 % 16);
        assert_eq!(g.k.shape(), &[16, 1, 2]);
        let e = c.gather_pages(0, &[]).unwrap();
        assert_eq!(e.k.numel(), 0);
        assert!(e.mask.is_empty());
    }

    #[test]
    fn key_mean_of_partial_page() {
        let mut c = cache(1, 16, 1, 2);
        let k = Tensor::new(&[3, 1, 2], vec![1.0, 10.0, 2.0, 20.0, 6.0, 60.0]).unwrap();
        c.append_chunk(0, &k, &k).unwrap();
        let m = c.key_means(0, 1).unwrap();
        assert_eq!(m.data(), &[3.0, 30.0]);
        assert_eq!(c.key_means(0, 0).unwrap().numel(), 0);
    }

    #[test]
    fn residency_is_enforced() {
        let mut c = cache(1, 4, 1, 2);
        c.append_chunk(0, &ramp(8, 1, 2, 0.0), &ramp(8, 1, 2, 0.0)).unwrap();
        c.set_tier(0, 1, Tier::Host).unwrap();
        assert!(matches!(c.gather_pages(0, &[0, 1]), Err(Error::Residency { layer: 0, page: 1 })));
        let z = Tensor::zeros(&[4, 1, 2]);
        assert!(c.scatter_add_grads(0, &[1], &z, &z).is_err());
        assert_eq!(c.memory_report().host_bytes, c.page_bytes());
        // metadata stays readable
        assert!(c.key_means(0, 2).is_ok());
    }

    #[test]
    fn scatter_cancellation_and_zero_init() {
        let mut c = cache(1, 4, 1, 2);
        c.append_chunk(0, &ramp(4, 1, 2, 0.0), &ramp(4, 1, 2, 0.0)).unwrap();
        let g = ramp(4, 1, 2, 0.5);
        c.scatter_add_grads(0, &[0], &g, &g).unwrap();
        let (dk, dv) = c.grad_page(0, 0).unwrap().unwrap();
        assert_eq!(dk, g.data());
        assert_eq!(dv, g.data());
        let mut neg = g.clone();
        neg.scale(-1.0);
        c.scatter_add_grads(0, &[0], &neg, &neg).unwrap();
        let (dk, _) = c.grad_page(0, 0).unwrap().unwrap();
        assert!(dk.iter().all(|x| x.abs() < 1e-6));
        assert_eq!(c.memory_report().grad_bytes, c.page_bytes());
    }

    #[test]
    fn scatter_ignores_unfilled_slots() {
        let mut c = cache(1, 4, 1, 1);
        c.append_chunk(0, &ramp(2, 1, 1, 0.0), &ramp(2, 1, 1, 0.0)).unwrap();
        let g = Tensor::full(&[4, 1, 1], 1.0);
        c.scatter_add_grads(0, &[0], &g, &g).unwrap();
        assert_eq!(c.grad_page(0, 0).unwrap().unwrap().0, &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn scatter_permutation_invariant() {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let grads: Vec<Tensor<f32>> =
            (0..8).map(|_| Tensor::randn(&[8, 2, 4], 1.0, &mut rng)).collect();
        let run = |order: &[usize]| {
            let mut c = cache(1, 4, 2, 4);
            c.append_chunk(0, &ramp(8, 2, 4, 0.0), &ramp(8, 2, 4, 0.0)).unwrap();
            for &i in order {
                c.scatter_add_grads(0, &[0, 1], &grads[i], &grads[i]).unwrap();
            }
            c.read_grads(0, 0..8).unwrap().0
        };
        let base = run(&(0..8).collect::<Vec<_>>());
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut rng);
        let perm = run(&order);
        let scale = base.data().iter().fold(0f32, |m, v| m.max(v.abs()));
        for (a, b) in base.data().iter().zip(perm.data()) {
            assert!((a - b).abs() <= 1e-5 * scale.max(1.0));
        }
    }

    #[test]
    fn reset_reuses_free_pages() {
        let mut c = cache(2, 4, 1, 2);
        for l in 0..2 {
            c.append_chunk(l, &ramp(12, 1, 2, 0.0), &ramp(12, 1, 2, 0.0)).unwrap();
        }
        let z = Tensor::zeros(&[4, 1, 2]);
        c.scatter_add_grads(1, &[2], &z, &z).unwrap();
        assert_eq!(c.arena_pages(), 6);
        c.reset();
        assert_eq!(c.memory_report(), MemoryReport::default());
        for l in 0..2 {
            c.append_chunk(l, &ramp(12, 1, 2, 7.0), &ramp(12, 1, 2, 7.0)).unwrap();
        }
        assert_eq!(c.arena_pages(), 6);
        assert_eq!(c.memory_report().grad_bytes, 0);
        let g = c.gather_pages(1, &[0]).unwrap();
        assert_eq!(g.k.data()[0], 7.0);
    }

    #[test]
    fn contiguous_exact_fit_doubles_at_every_realloc() {
        let appends = vec![1024; 16];
        let r = contiguous_append_baseline(&appends, GrowthPolicy::ExactFit);
        assert_eq!(r.reallocs, 16);
        assert!(r.realloc_points.iter().all(|p| p.ratio() >= 2.0));
        assert_eq!(r.copied_bytes, 1024 * (0..16).sum::<usize>());
        assert_eq!(r.peak_bytes, 2 * 16 * 1024);
    }

    #[test]
    fn contiguous_doubling_amortises_copies() {
        let appends = vec![1000; 16];
        let r = contiguous_append_baseline(&appends, GrowthPolicy::Doubling);
        // reallocs at 1, 2, 4, 8 chunks stored → 15 chunks copied in total
        assert_eq!(r.reallocs, 5);
        assert_eq!(r.copied_bytes, 15_000);
        assert!(r.copied_bytes <= r.final_bytes && 2 * r.copied_bytes >= r.final_bytes);
    }

    proptest! {
        #[test]
        fn append_sequences_keep_invariants(lens in proptest::collection::vec(1usize..40, 1..12), p in 1usize..9) {
            let mut c = cache(1, p, 1, 2);
            let mut expect = Vec::new();
            let mut next = 0.0f32;
            for &n in &lens {
                let k = ramp(n, 1, 2, next);
                next += (2 * n) as f32;
                expect.extend_from_slice(k.data());
                c.append_chunk(0, &k, &k).unwrap();
            }
            let total: usize = lens.iter().sum();
            prop_assert_eq!(c.num_pages(0), total.div_ceil(p));
            prop_assert_eq!(c.memory_report().copied_bytes, 0);
            prop_assert_eq!(c.memory_report().reallocs, 0);
            let ids: Vec<usize> = (0..c.num_pages(0)).collect();
            let g = c.gather_pages(0, &ids).unwrap();
            let flat: Vec<f32> = g.k.data().chunks(2).zip(&g.mask).filter(|(_, &m)| m).flat_map(|(x, _)| x.to_vec()).collect();
            prop_assert_eq!(flat, expect);
        }
    }
}
