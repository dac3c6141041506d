//! Simulated two-tier (device/host) page residency.
//!
//! The controller follows the trainer through a step as a sequence of layer
//! units (forward, recompute, backward) and keeps the cache's tier tags
//! honest: a page is tagged `Device` only once its simulated transfer has
//! completed and the compute clock has reached it, and is tagged `Host` when
//! evicted. Since the cache refuses access to host pages, a scheduling bug
//! surfaces as a residency error rather than a silent miss. Values never move.
//!
//! Time is simulated. Compute segments cost what [`TierConfig`] says; page
//! transfers queue FIFO on a single host-to-device link; dirty pages are
//! written back on a separate device-to-host link that never blocks compute.
//!
//! Prefetch: pages of the next unit are requested when the current unit
//! begins, as long as they are known in advance (dense and local layers, and
//! every recompute/backward unit, whose selections were recorded in the
//! forward pass). Top-K forward layers learn their pages after the query
//! projection and request them immediately, overlapping the key/value
//! projections.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{select_recent, selection_union, Selection};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, ModelConfig};
use crate::paged_kv::{PagedCache, Tier};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Recompute,
    Backward,
}

/// One layer's worth of work in one pass over one chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Unit {
    pub phase: Phase,
    pub chunk: usize,
    pub layer: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictPolicy {
    /// Evict least-recently-used pages only when room is needed.
    #[default]
    Lru,
    /// Offload every page right after the unit that used it.
    Eager,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierConfig {
    pub device_capacity_pages: usize,
    pub bandwidth_bytes_per_s: f64,
    /// Query projection time per layer.
    pub q_proj_s: f64,
    /// Key/value projection time per layer.
    pub kv_proj_s: f64,
    /// Remaining fixed per-layer time (output projection, MLP, norms).
    pub other_s: f64,
    /// Attention time per attended key token.
    pub per_token_s: f64,
    /// Backward units cost this multiple of the matching forward work.
    pub backward_factor: f64,
    pub policy: EvictPolicy,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            device_capacity_pages: 4096,
            bandwidth_bytes_per_s: 16e9,
            q_proj_s: 20e-6,
            kv_proj_s: 20e-6,
            other_s: 60e-6,
            per_token_s: 50e-9,
            backward_factor: 2.0,
            policy: EvictPolicy::Lru,
        }
    }
}

impl TierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.device_capacity_pages == 0 {
            return Err(Error::Config("device capacity must be at least one page".into()));
        }
        if !(self.bandwidth_bytes_per_s > 0.0 && self.bandwidth_bytes_per_s.is_finite()) {
            return Err(Error::Config(format!("bandwidth {} must be positive", self.bandwidth_bytes_per_s)));
        }
        let costs = [self.q_proj_s, self.kv_proj_s, self.other_s, self.per_token_s, self.backward_factor];
        if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config("compute costs must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn transfer_seconds(&self, bytes: usize) -> f64 {
        bytes as f64 / self.bandwidth_bytes_per_s
    }
}

/// Key into the schedule: `(layer, logical page)`.
pub type PageKey = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    FetchIssued { layer: usize, page: usize, bytes: usize, grad_bytes: usize, t: f64 },
    /// Logged when issued; `start..t` is the page's slot on the link.
    FetchDone { layer: usize, page: usize, start: f64, t: f64 },
    Evict { layer: usize, page: usize, writeback_bytes: usize, t: f64 },
    Alloc { layer: usize, page: usize, t: f64 },
    ComputeBegin { phase: Phase, chunk: usize, layer: usize, t: f64 },
    ComputeEnd { phase: Phase, chunk: usize, layer: usize, t: f64 },
    /// A compute segment of `seconds` starting at `t`.
    Work { seconds: f64, t: f64 },
    Stall { from: f64, to: f64 },
    Access { layer: usize, page: usize, t: f64 },
}

impl Event {
    /// Compute-clock timestamp; `None` for link-clock events.
    fn compute_time(&self) -> Option<f64> {
        match *self {
            Event::FetchDone { .. } => None,
            Event::Stall { from, .. } => Some(from),
            Event::FetchIssued { t, .. }
            | Event::Evict { t, .. }
            | Event::Alloc { t, .. }
            | Event::ComputeBegin { t, .. }
            | Event::ComputeEnd { t, .. }
            | Event::Work { t, .. }
            | Event::Access { t, .. } => Some(t),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleLog {
    pub events: Vec<Event>,
}

impl ScheduleLog {
    pub fn write_json_lines<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_json_lines<R: BufRead>(r: R) -> Result<Self> {
        let mut events = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                events.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { events })
    }
}

/// Totals kept online by the controller for the current step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    /// Host-to-device key/value bytes.
    pub transfer_bytes: usize,
    /// Host-to-device gradient page bytes.
    pub grad_transfer_bytes: usize,
    /// Device-to-host bytes written on eviction.
    pub writeback_bytes: usize,
    pub stall_seconds: f64,
    pub fetches: usize,
    pub evictions: usize,
    pub end_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Loc {
    Device,
    InFlight { ready: f64 },
    Host,
}

#[derive(Clone, Copy, Debug)]
struct PageState {
    loc: Loc,
    last_use: u64,
    dirty_kv: bool,
    dirty_grad: bool,
}

/// Drives page residency for one trainer. See the module docs.
#[derive(Clone, Debug)]
pub struct TierController {
    cfg: TierConfig,
    modes: Vec<AttentionMode>,
    page_size: usize,
    chunk_size: usize,
    budget_pages: usize,
    local_window: usize,
    page_bytes: usize,
    chunk_pages: Vec<Range<usize>>,
    clock: f64,
    link_free: f64,
    writeback_free: f64,
    use_counter: u64,
    pages: BTreeMap<PageKey, PageState>,
    resident: usize,
    /// Pages the current unit reads or writes.
    pinned: BTreeSet<PageKey>,
    /// Pages requested ahead for the next unit.
    pending: BTreeSet<PageKey>,
    selections: BTreeMap<(usize, usize), Vec<usize>>,
    attended: usize,
    log: ScheduleLog,
    summary: StepSummary,
}

impl TierController {
    pub fn new(cfg: TierConfig, model: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        Ok(Self {
            cfg,
            modes: model.attention.clone(),
            page_size: model.page_size,
            chunk_size: model.chunk_size,
            budget_pages: model.budget_pages(),
            local_window: model.local_window,
            page_bytes: 0,
            chunk_pages: Vec::new(),
            clock: 0.0,
            link_free: 0.0,
            writeback_free: 0.0,
            use_counter: 0,
            pages: BTreeMap::new(),
            resident: 0,
            pinned: BTreeSet::new(),
            pending: BTreeSet::new(),
            selections: BTreeMap::new(),
            attended: 0,
            log: ScheduleLog::default(),
            summary: StepSummary::default(),
        })
    }

    pub fn config(&self) -> &TierConfig {
        &self.cfg
    }

    /// Schedule of the most recent step.
    pub fn log(&self) -> &ScheduleLog {
        &self.log
    }

    pub fn step_summary(&self) -> &StepSummary {
        &self.summary
    }

    /// Largest number of pages one layer needs resident at once for a step
    /// with these chunk lengths.
    pub fn working_set_pages(&self, chunk_lens: &[usize]) -> usize {
        let ppc = self.chunk_size / self.page_size;
        let mut ws = 0;
        for (i, &len) in chunk_lens.iter().enumerate() {
            let own = len.div_ceil(self.page_size);
            let cand = i * ppc;
            for &mode in &self.modes {
                let sel = match mode {
                    AttentionMode::Dense => cand,
                    AttentionMode::Local => self.local_window.min(cand),
                    AttentionMode::Topk => cand.min(own * self.budget_pages),
                };
                ws = ws.max(sel + own);
            }
        }
        ws
    }

    pub fn step_begin<T: Scalar>(&mut self, cache: &PagedCache<T>, chunk_lens: &[usize]) -> Result<()> {
        let ws = self.working_set_pages(chunk_lens);
        if self.cfg.device_capacity_pages < ws {
            return Err(Error::Config(format!(
                "device capacity of {} pages is below the {ws}-page working set of one layer",
                self.cfg.device_capacity_pages
            )));
        }
        let ppc = self.chunk_size / self.page_size;
        self.chunk_pages = chunk_lens
            .iter()
            .enumerate()
            .map(|(i, &len)| i * ppc..i * ppc + len.div_ceil(self.page_size))
            .collect();
        self.page_bytes = cache.page_bytes();
        self.clock = 0.0;
        self.link_free = 0.0;
        self.writeback_free = 0.0;
        self.use_counter = 0;
        self.pages.clear();
        self.resident = 0;
        self.pinned.clear();
        self.pending.clear();
        self.selections.clear();
        self.log = ScheduleLog::default();
        self.summary = StepSummary::default();
        Ok(())
    }

    pub fn step_end<T: Scalar>(&mut self, _cache: &mut PagedCache<T>) -> Result<()> {
        self.summary.end_time = self.clock.max(self.link_free).max(self.writeback_free);
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.modes.len()
    }

    fn next_unit(&self, u: Unit) -> Option<Unit> {
        let (n_chunks, last) = (self.chunk_pages.len(), self.n_layers() - 1);
        let at = |phase, chunk, layer| Some(Unit { phase, chunk, layer });
        match u.phase {
            Phase::Forward if u.layer < last => at(Phase::Forward, u.chunk, u.layer + 1),
            Phase::Forward if u.chunk + 1 < n_chunks => at(Phase::Forward, u.chunk + 1, 0),
            Phase::Forward => at(Phase::Recompute, n_chunks - 1, 0),
            Phase::Recompute if u.layer < last => at(Phase::Recompute, u.chunk, u.layer + 1),
            Phase::Recompute => at(Phase::Backward, u.chunk, last),
            Phase::Backward if u.layer > 0 => at(Phase::Backward, u.chunk, u.layer - 1),
            Phase::Backward if u.chunk > 0 => at(Phase::Recompute, u.chunk - 1, 0),
            Phase::Backward => None,
        }
    }

    /// Pages `u` will read, if already determined.
    fn known_needs(&self, u: Unit) -> Option<BTreeSet<PageKey>> {
        let own = self.chunk_pages.get(u.chunk)?.clone();
        let cand = own.start;
        let ids: Vec<usize> = match u.phase {
            Phase::Forward => match self.modes[u.layer] {
                AttentionMode::Dense => (0..cand).collect(),
                AttentionMode::Local => select_recent(cand, self.local_window),
                AttentionMode::Topk if self.budget_pages >= cand => (0..cand).collect(),
                AttentionMode::Topk => return None,
            },
            Phase::Recompute => self.selections.get(&(u.chunk, u.layer))?.clone(),
            Phase::Backward => {
                let mut ids = self.selections.get(&(u.chunk, u.layer))?.clone();
                ids.extend(own);
                ids
            }
        };
        Some(ids.into_iter().map(|p| (u.layer, p)).collect())
    }

    fn work(&mut self, seconds: f64) {
        if seconds > 0.0 {
            self.log.events.push(Event::Work { seconds, t: self.clock });
            self.clock += seconds;
        }
    }

    fn backward_scale(&self, u: Unit) -> f64 {
        if u.phase == Phase::Backward {
            self.cfg.backward_factor
        } else {
            1.0
        }
    }

    /// Evicts least-recently-used pages that are neither pinned nor pending
    /// until one more page fits with `reserve` slots to spare. Returns false if
    /// that is impossible.
    fn make_room<T: Scalar>(&mut self, cache: &mut PagedCache<T>, reserve: usize) -> Result<bool> {
        while self.resident + reserve >= self.cfg.device_capacity_pages {
            let victim = self
                .pages
                .iter()
                .filter(|(k, s)| s.loc == Loc::Device && !self.pinned.contains(k) && !self.pending.contains(k))
                .min_by_key(|(k, s)| (s.last_use, **k))
                .map(|(k, _)| *k);
            match victim {
                Some(k) => self.evict(cache, k)?,
                None => return Ok(false),
            }
        }
        Ok(true)
    }

    fn evict<T: Scalar>(&mut self, cache: &mut PagedCache<T>, key: PageKey) -> Result<()> {
        let has_grad = cache.has_grad(key.0, key.1)?;
        let st = self.pages.get_mut(&key).expect("evicting a tracked page");
        let wb = if st.dirty_kv { self.page_bytes } else { 0 }
            + if st.dirty_grad && has_grad { self.page_bytes } else { 0 };
        st.loc = Loc::Host;
        st.dirty_kv = false;
        st.dirty_grad = false;
        self.resident -= 1;
        if wb > 0 {
            self.writeback_free = self.writeback_free.max(self.clock) + self.cfg.transfer_seconds(wb);
        }
        self.summary.writeback_bytes += wb;
        self.summary.evictions += 1;
        cache.set_tier(key.0, key.1, Tier::Host)?;
        self.log.events.push(Event::Evict { layer: key.0, page: key.1, writeback_bytes: wb, t: self.clock });
        Ok(())
    }

    /// Requests `key`. A prefetch (`Some(reserve)`) keeps `reserve` slots free
    /// for the current unit and gives up quietly when it cannot; a demand
    /// fetch treats a full device as a configuration error.
    fn fetch<T: Scalar>(&mut self, cache: &mut PagedCache<T>, key: PageKey, prefetch: Option<usize>) -> Result<bool> {
        let st = self.pages.get(&key).copied();
        match st.map(|s| s.loc) {
            Some(Loc::Device) | Some(Loc::InFlight { .. }) => return Ok(true),
            Some(Loc::Host) => {}
            None => return Err(Error::State(format!("page {} of layer {} is unknown", key.1, key.0))),
        }
        if !self.make_room(cache, prefetch.unwrap_or(0))? {
            if prefetch.is_some() {
                return Ok(false);
            }
            return Err(Error::Config(format!(
                "device capacity of {} pages cannot hold the current working set",
                self.cfg.device_capacity_pages
            )));
        }
        let grad_bytes = if cache.has_grad(key.0, key.1)? { self.page_bytes } else { 0 };
        let start = self.link_free.max(self.clock);
        let done = start + self.cfg.transfer_seconds(self.page_bytes + grad_bytes);
        self.link_free = done;
        self.resident += 1;
        let s = self.pages.get_mut(&key).expect("checked above");
        s.loc = Loc::InFlight { ready: done };
        self.summary.transfer_bytes += self.page_bytes;
        self.summary.grad_transfer_bytes += grad_bytes;
        self.summary.fetches += 1;
        let (layer, page) = key;
        self.log.events.push(Event::FetchIssued { layer, page, bytes: self.page_bytes, grad_bytes, t: self.clock });
        self.log.events.push(Event::FetchDone { layer, page, start, t: done });
        Ok(true)
    }

    pub fn unit_begin<T: Scalar>(&mut self, cache: &mut PagedCache<T>, u: Unit) -> Result<()> {
        let Unit { phase, chunk, layer } = u;
        self.log.events.push(Event::ComputeBegin { phase, chunk, layer, t: self.clock });
        self.pinned = self.known_needs(u).unwrap_or_default();
        self.pending.retain(|k| !self.pinned.contains(k));
        let still_needed = match (u.phase, self.known_needs(u)) {
            (Phase::Forward, known) => {
                let own = self.chunk_pages[chunk].len();
                own + if known.is_some() { 0 } else { own * self.budget_pages }
            }
            _ => 0,
        };
        for key in self.pinned.clone() {
            self.fetch(cache, key, None)?;
        }
        if let Some(next) = self.next_unit(u) {
            if let Some(needs) = self.known_needs(next) {
                for key in needs {
                    if self.pinned.contains(&key) {
                        self.pending.insert(key);
                        continue;
                    }
                    // Protected pages cannot be evicted; keep room for what
                    // the current unit has yet to bring in.
                    let protected = self.pinned.union(&self.pending).count();
                    if protected + 1 + still_needed > self.cfg.device_capacity_pages {
                        break;
                    }
                    self.pending.insert(key);
                    if !self.fetch(cache, key, Some(still_needed))? {
                        self.pending.remove(&key);
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    /// Forward units: the pages chosen after the query projection.
    pub fn selected<T: Scalar>(&mut self, cache: &mut PagedCache<T>, u: Unit, sel: &Selection) -> Result<()> {
        self.work(self.cfg.q_proj_s);
        let ids = selection_union(sel);
        self.selections.insert((u.chunk, u.layer), ids.clone());
        for p in ids {
            let key = (u.layer, p);
            self.pending.remove(&key);
            self.pinned.insert(key);
            self.fetch(cache, key, None)?;
        }
        Ok(())
    }

    /// Forward units: pages just created on the device by the append.
    pub fn appended<T: Scalar>(&mut self, cache: &mut PagedCache<T>, u: Unit, pages: Range<usize>) -> Result<()> {
        self.work(self.cfg.kv_proj_s);
        for p in pages {
            let key = (u.layer, p);
            self.pinned.insert(key);
            if !self.make_room(cache, 0)? {
                return Err(Error::Config(format!(
                    "device capacity of {} pages cannot hold a new chunk",
                    self.cfg.device_capacity_pages
                )));
            }
            self.resident += 1;
            self.use_counter += 1;
            self.pages.insert(
                key,
                PageState { loc: Loc::Device, last_use: self.use_counter, dirty_kv: true, dirty_grad: false },
            );
            self.log.events.push(Event::Alloc { layer: u.layer, page: p, t: self.clock });
        }
        Ok(())
    }

    /// Waits for every pinned page and marks it device-resident.
    pub fn before_access<T: Scalar>(&mut self, cache: &mut PagedCache<T>, u: Unit, attended: usize) -> Result<()> {
        match u.phase {
            Phase::Forward => {}
            Phase::Recompute => self.work(self.cfg.q_proj_s + self.cfg.kv_proj_s),
            Phase::Backward => self.work(self.cfg.backward_factor * self.cfg.other_s),
        }
        self.attended = attended;
        let keys: Vec<PageKey> = self.pinned.iter().copied().collect();
        let mut ready = self.clock;
        for &key in &keys {
            self.fetch(cache, key, None)?;
            if let Loc::InFlight { ready: r } = self.pages[&key].loc {
                ready = ready.max(r);
            }
        }
        if ready > self.clock {
            self.log.events.push(Event::Stall { from: self.clock, to: ready });
            self.summary.stall_seconds += ready - self.clock;
            self.clock = ready;
        }
        // Prefetches that landed while we waited.
        let landed: Vec<PageKey> = self
            .pages
            .iter()
            .filter(|(_, s)| matches!(s.loc, Loc::InFlight { ready } if ready <= self.clock))
            .map(|(k, _)| *k)
            .collect();
        for key in landed {
            self.pages.get_mut(&key).expect("listed above").loc = Loc::Device;
            cache.set_tier(key.0, key.1, Tier::Device)?;
        }
        for key in keys {
            self.use_counter += 1;
            let s = self.pages.get_mut(&key).expect("fetched above");
            debug_assert_eq!(s.loc, Loc::Device);
            s.last_use = self.use_counter;
            self.log.events.push(Event::Access { layer: key.0, page: key.1, t: self.clock });
        }
        Ok(())
    }

    pub fn unit_end<T: Scalar>(&mut self, cache: &mut PagedCache<T>, u: Unit) -> Result<()> {
        let scale = self.backward_scale(u);
        let post = match u.phase {
            Phase::Backward => scale * (self.cfg.per_token_s * self.attended as f64 + self.cfg.q_proj_s + self.cfg.kv_proj_s),
            _ => self.cfg.other_s + self.cfg.per_token_s * self.attended as f64,
        };
        self.work(post);
        if u.phase == Phase::Backward {
            if let Some(ids) = self.selections.get(&(u.chunk, u.layer)) {
                for &p in ids {
                    if let Some(s) = self.pages.get_mut(&(u.layer, p)) {
                        s.dirty_grad = true;
                    }
                }
            }
        }
        let Unit { phase, chunk, layer } = u;
        self.log.events.push(Event::ComputeEnd { phase, chunk, layer, t: self.clock });
        let used = std::mem::take(&mut self.pinned);
        if self.cfg.policy == EvictPolicy::Eager {
            for key in used {
                if !self.pending.contains(&key) && self.pages[&key].loc == Loc::Device {
                    self.evict(cache, key)?;
                }
            }
        }
        Ok(())
    }
}

/// Result of checking a schedule log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub violations: Vec<String>,
    pub stall_seconds: f64,
    pub transfer_bytes: usize,
    pub grad_transfer_bytes: usize,
    pub writeback_bytes: usize,
    /// Share of link-busy time during which compute was not stalled.
    pub overlap_fraction: f64,
    pub fetches: usize,
    pub accesses: usize,
    pub evictions: usize,
}

/// Checks residency-before-use and clock monotonicity and totals the log.
pub fn validate_schedule(log: &ScheduleLog) -> ScheduleReport {
    let mut r = ScheduleReport::default();
    let mut resident_since: BTreeMap<PageKey, f64> = BTreeMap::new();
    let mut last_compute = f64::NEG_INFINITY;
    let mut last_link = f64::NEG_INFINITY;
    let mut transfers: Vec<(f64, f64)> = Vec::new();
    let mut stalls: Vec<(f64, f64)> = Vec::new();

    for (i, e) in log.events.iter().enumerate() {
        if let Some(t) = e.compute_time() {
            if t < last_compute {
                r.violations.push(format!("event {i}: compute clock went back from {last_compute} to {t}"));
            }
            last_compute = last_compute.max(t);
        }
        match *e {
            Event::FetchIssued { bytes, grad_bytes, .. } => {
                r.fetches += 1;
                r.transfer_bytes += bytes;
                r.grad_transfer_bytes += grad_bytes;
            }
            Event::FetchDone { layer, page, start, t } => {
                if t < last_link {
                    r.violations.push(format!("event {i}: link clock went back from {last_link} to {t}"));
                }
                last_link = last_link.max(t);
                transfers.push((start, t));
                resident_since.insert((layer, page), t);
            }
            Event::Alloc { layer, page, t } => {
                resident_since.insert((layer, page), t);
            }
            Event::Evict { layer, page, writeback_bytes, .. } => {
                r.evictions += 1;
                r.writeback_bytes += writeback_bytes;
                if resident_since.remove(&(layer, page)).is_none() {
                    r.violations.push(format!("event {i}: evicting non-resident page {page} of layer {layer}"));
                }
            }
            Event::Stall { from, to } => {
                r.stall_seconds += to - from;
                stalls.push((from, to));
                last_compute = last_compute.max(to);
            }
            Event::Access { layer, page, t } => {
                r.accesses += 1;
                match resident_since.get(&(layer, page)) {
                    Some(&since) if since <= t => {}
                    Some(&since) => r.violations.push(format!(
                        "event {i}: page {page} of layer {layer} accessed at {t} before its transfer finished at {since}"
                    )),
                    None => r.violations.push(format!(
                        "event {i}: page {page} of layer {layer} accessed while not resident"
                    )),
                }
            }
            Event::ComputeBegin { .. } | Event::ComputeEnd { .. } | Event::Work { .. } => {}
        }
    }

    let total: f64 = transfers.iter().map(|(s, e)| e - s).sum();
    r.overlap_fraction = if total > 0.0 {
        let stalled = interval_intersection(&transfers, &stalls);
        (1.0 - stalled / total).clamp(0.0, 1.0)
    } else {
        1.0
    };
    r
}

/// Total length of `a ∩ b` for two lists of disjoint intervals, each sorted.
fn interval_intersection(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j, mut sum) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            sum += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    sum
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Timed {
    t: f64,
    seq: usize,
    arrival: bool,
}

impl Eq for Timed {}

impl Ord for Timed {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (t, seq).
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Timed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Recomputes total stall by discrete-event simulation of the compute
/// segments, fetch requests and accesses recorded in `log`, ignoring the
/// log's own transfer completion and stall times.
pub fn replay_stall(log: &ScheduleLog, bandwidth_bytes_per_s: f64) -> f64 {
    struct Job {
        seconds: f64,
    }
    let mut jobs: Vec<Job> = Vec::new();
    let mut heap: BinaryHeap<Timed> = BinaryHeap::new();
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut busy = false;
    let mut outstanding: BTreeMap<PageKey, usize> = BTreeMap::new();
    let mut now = 0.0f64;
    let mut stall = 0.0;

    for e in &log.events {
        match *e {
            Event::Work { seconds, .. } => now += seconds,
            Event::FetchIssued { layer, page, bytes, grad_bytes, .. } => {
                let id = jobs.len();
                jobs.push(Job { seconds: (bytes + grad_bytes) as f64 / bandwidth_bytes_per_s });
                outstanding.insert((layer, page), id);
                heap.push(Timed { t: now, seq: id, arrival: true });
            }
            Event::Access { layer, page, .. } => {
                let Some(&want) = outstanding.get(&(layer, page)) else { continue };
                let mut done_at = None;
                while done_at.is_none() {
                    let Some(ev) = heap.pop() else { break };
                    if ev.arrival {
                        if busy {
                            queue.push_back(ev.seq);
                        } else {
                            busy = true;
                            heap.push(Timed { t: ev.t + jobs[ev.seq].seconds, seq: ev.seq, arrival: false });
                        }
                    } else {
                        outstanding.retain(|_, id| *id != ev.seq);
                        if ev.seq == want {
                            done_at = Some(ev.t);
                        }
                        match queue.pop_front() {
                            Some(next) => {
                                heap.push(Timed { t: ev.t + jobs[next].seconds, seq: next, arrival: false })
                            }
                            None => busy = false,
                        }
                    }
                }
                if let Some(t) = done_at {
                    if t > now {
                        stall += t - now;
                        now = t;
                    }
                }
            }
            _ => {}
        }
    }
    stall
}
