//! Chunked causal attention over the paged cache.
//!
//! A chunk's queries attend to (a) a per-query-page selection of past cache
//! pages and (b) the chunk's own keys under a causal mask. The forward pass
//! streams over key pages with running max/sum accumulators and saves one
//! logsumexp per (row, head); the backward pass rebuilds probabilities from
//! it and writes past-page key/value gradients straight into gradient pages.
//!
//! Page selection is a constant of the computation: the backward pass replays
//! the ids chosen in the forward pass.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMode, ModelConfig};
use crate::ops::dot;
use crate::paged_kv::{PageRef, PagedCache};
use crate::tensor::{Scalar, Tensor};

/// Selected past page ids for each query page of a chunk, ascending.
pub type Selection = Vec<Vec<usize>>;

/// Values saved by [`attn_forward`] for the exact backward.
#[derive(Clone, Debug)]
pub struct AttnSaved<T> {
    /// `[C × n_q_heads]`
    pub lse: Tensor<T>,
    /// Attention output `O`, `[C × n_q_heads × head_dim]`.
    pub out: Tensor<T>,
    pub selected: Selection,
}

impl<T: Scalar> AttnSaved<T> {
    pub fn bytes(&self) -> usize {
        self.lse.bytes() + self.out.bytes()
    }
}

/// Mean key per page over valid slots for the first `n_pages` pages of `layer`.
pub fn page_mean_keys<T: Scalar>(cache: &PagedCache<T>, layer: usize, n_pages: usize) -> Result<Tensor<T>> {
    cache.key_means(layer, n_pages)
}

/// Page relevance with per-page voting.
///
/// For every query token `j` of query page `i` and every query head, raw
/// scores against each page mean of that head's kv group are softmax-normalised
/// over pages, then summed over the tokens and heads of the query page.
/// Returns `[m × n]` with `m = ceil(rows / page_size)`.
pub fn score_pages<T: Scalar>(
    q: &Tensor<T>,
    k_avg: &Tensor<T>,
    page_size: usize,
    scaled: bool,
) -> Result<Tensor<T>> {
    let (rows, qh, d) = dims3("score_pages", q)?;
    let (n, kvh, d2) = dims3("score_pages", k_avg)?;
    if d != d2 || kvh == 0 || qh % kvh != 0 {
        return Err(Error::dim(
            "score_pages",
            format!("q {:?} vs k_avg {:?}", q.shape(), k_avg.shape()),
        ));
    }
    let group = qh / kvh;
    let m = rows.div_ceil(page_size);
    let mut score = Tensor::zeros(&[m, n]);
    if n == 0 {
        return Ok(score);
    }
    let scale = if scaled { T::one() / T::from_usize(d).sqrt() } else { T::one() };
    let mut raw = vec![T::zero(); n];
    for t in 0..rows {
        for h in 0..qh {
            let qv = &q.data()[(t * qh + h) * d..(t * qh + h + 1) * d];
            let g = h / group;
            for (k, r) in raw.iter_mut().enumerate() {
                let kv = &k_avg.data()[(k * kvh + g) * d..(k * kvh + g + 1) * d];
                *r = dot(qv, kv) * scale;
            }
            crate::ops::softmax_in_place(&mut raw);
            for (s, &p) in score.row_mut(t / page_size).iter_mut().zip(&raw) {
                *s += p;
            }
        }
    }
    if !score.all_finite() {
        return Err(Error::NonFinite("score_pages"));
    }
    Ok(score)
}

/// The `k` best pages of `scores`, ties to the lower id, returned ascending.
pub fn select_topk<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let n = scores.len();
    if k >= n {
        return (0..n).collect();
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

/// The last `min(window, n)` page ids, ascending.
pub fn select_recent(n_pages: usize, window: usize) -> Vec<usize> {
    (n_pages.saturating_sub(window)..n_pages).collect()
}

/// Page selection for one chunk at one layer.
///
/// `q` is the chunk's rotated queries and `n_candidates` the number of pages
/// completed by earlier chunks.
pub fn select_pages<T: Scalar>(
    mode: AttentionMode,
    cfg: &ModelConfig,
    cache: &PagedCache<T>,
    layer: usize,
    q: &Tensor<T>,
    n_candidates: usize,
) -> Result<Selection> {
    let m = q.rows().div_ceil(cfg.page_size);
    Ok(match mode {
        AttentionMode::Dense => vec![(0..n_candidates).collect(); m],
        AttentionMode::Local => vec![select_recent(n_candidates, cfg.local_window); m],
        AttentionMode::Topk => {
            let k = cfg.budget_pages();
            if k >= n_candidates {
                vec![(0..n_candidates).collect(); m]
            } else {
                let k_avg = page_mean_keys(cache, layer, n_candidates)?;
                let score = score_pages(q, &k_avg, cfg.page_size, cfg.score_scale)?;
                (0..m).map(|i| select_topk(score.row(i), k)).collect()
            }
        }
    })
}

/// Sorted union of every query page's selection.
pub fn selection_union(sel: &Selection) -> Vec<usize> {
    let mut all: Vec<usize> = sel.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

fn dims3<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::dim(op, format!("expected rank 3, got {s:?}"))),
    }
}

struct Geometry {
    rows: usize,
    qh: usize,
    kvh: usize,
    d: usize,
    group: usize,
    page_size: usize,
}

fn geometry<T: Scalar>(
    q: &Tensor<T>,
    k_cur: &Tensor<T>,
    v_cur: &Tensor<T>,
    page_size: usize,
) -> Result<Geometry> {
    let (rows, qh, d) = dims3("attention", q)?;
    let (rk, kvh, dk) = dims3("attention", k_cur)?;
    if rk != rows || dk != d || k_cur.shape() != v_cur.shape() || kvh == 0 || qh % kvh != 0 {
        return Err(Error::dim(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k_cur.shape(), v_cur.shape()),
        ));
    }
    Ok(Geometry { rows, qh, kvh, d, group: qh / kvh, page_size })
}

/// Running softmax state for one (row, head).
struct Online<'a, T> {
    max: T,
    sum: T,
    acc: &'a mut [T],
}

impl<T: Scalar> Online<'_, T> {
    /// Folds in one block of keys: `scores[j]` pairs with value row `values(j)`.
    fn block<'v>(&mut self, scores: &[T], values: impl Fn(usize) -> &'v [T])
    where
        T: 'v,
    {
        if scores.is_empty() {
            return;
        }
        let bmax = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let new_max = self.max.max(bmax);
        let corr = (self.max - new_max).exp();
        self.sum *= corr;
        for a in self.acc.iter_mut() {
            *a *= corr;
        }
        for (j, &s) in scores.iter().enumerate() {
            let p = (s - new_max).exp();
            self.sum += p;
            for (a, &v) in self.acc.iter_mut().zip(values(j)) {
                *a += p * v;
            }
        }
        self.max = new_max;
    }
}

/// Streaming attention forward.
///
/// `q`: `[C × qh × d]` rotated queries; `k_cur`, `v_cur`: `[C × kvh × d]` the
/// chunk's own rotated keys and values; `selected[i]`: past pages for query
/// page `i`. Scores use `1/√d`.
pub fn attn_forward<T: Scalar>(
    cache: &PagedCache<T>,
    layer: usize,
    q: &Tensor<T>,
    k_cur: &Tensor<T>,
    v_cur: &Tensor<T>,
    selected: &Selection,
) -> Result<AttnSaved<T>> {
    let g = geometry(q, k_cur, v_cur, cache.page_size())?;
    let (qh, kvh, d, p) = (g.qh, g.kvh, g.d, g.page_size);
    let n_qpages = g.rows.div_ceil(p);
    if selected.len() != n_qpages {
        return Err(Error::dim(
            "attn_forward",
            format!("{} selections for {n_qpages} query pages", selected.len()),
        ));
    }
    let scale = T::one() / T::from_usize(d).sqrt();
    let mut out = Tensor::zeros(&[g.rows, qh, d]);
    let mut lse = Tensor::zeros(&[g.rows, qh]);
    let mut scores = vec![T::zero(); p];

    for (qp, sel) in selected.iter().enumerate() {
        let pages: Vec<PageRef<'_, T>> =
            sel.iter().map(|&pid| cache.page(layer, pid)).collect::<Result<_>>()?;
        for t in qp * p..((qp + 1) * p).min(g.rows) {
            for h in 0..qh {
                let kv = h / g.group;
                let qv = &q.data()[(t * qh + h) * d..(t * qh + h + 1) * d];
                let acc = &mut out.data_mut()[(t * qh + h) * d..(t * qh + h + 1) * d];
                let mut st = Online { max: T::neg_infinity(), sum: T::zero(), acc };
                for page in &pages {
                    let slot = |j: usize| (j * kvh + kv) * d;
                    for (j, s) in scores[..page.valid].iter_mut().enumerate() {
                        *s = dot(qv, &page.k[slot(j)..slot(j) + d]) * scale;
                    }
                    st.block(&scores[..page.valid], |j| &page.v[slot(j)..slot(j) + d]);
                }
                // The chunk's own keys, causal, in page-sized blocks.
                let mut start = 0;
                while start <= t {
                    let end = (start + p).min(t + 1);
                    let row = |j: usize| ((start + j) * kvh + kv) * d;
                    for (j, s) in scores[..end - start].iter_mut().enumerate() {
                        *s = dot(qv, &k_cur.data()[row(j)..row(j) + d]) * scale;
                    }
                    st.block(&scores[..end - start], |j| &v_cur.data()[row(j)..row(j) + d]);
                    start = end;
                }
                let (mx, sum) = (st.max, st.sum);
                let inv = T::one() / sum;
                for a in st.acc.iter_mut() {
                    *a *= inv;
                }
                lse.data_mut()[t * qh + h] = mx + sum.ln();
            }
        }
    }
    if !out.all_finite() {
        return Err(Error::NonFinite("attn_forward"));
    }
    Ok(AttnSaved { lse, out, selected: selected.clone() })
}

/// Exact attention backward.
///
/// Returns `(dQ, dK_cur, dV_cur)`. Gradients for past pages are added into the
/// cache's gradient pages and never returned.
pub fn attn_backward<T: Scalar>(
    cache: &mut PagedCache<T>,
    layer: usize,
    d_out: &Tensor<T>,
    q: &Tensor<T>,
    k_cur: &Tensor<T>,
    v_cur: &Tensor<T>,
    saved: &AttnSaved<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = geometry(q, k_cur, v_cur, cache.page_size())?;
    let (rows, qh, kvh, d, p) = (g.rows, g.qh, g.kvh, g.d, g.page_size);
    if d_out.shape() != q.shape() || saved.out.shape() != q.shape() {
        return Err(Error::dim("attn_backward", "dO / saved O shape mismatch"));
    }
    let scale = T::one() / T::from_usize(d).sqrt();
    let head = |t: usize, h: usize| (t * qh + h) * d..(t * qh + h + 1) * d;

    // D = rowsum(dO ⊙ O)
    let delta: Vec<T> = (0..rows * qh)
        .map(|i| dot(&d_out.data()[i * d..(i + 1) * d], &saved.out.data()[i * d..(i + 1) * d]))
        .collect();

    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k_cur.shape());
    let mut dv = Tensor::zeros(v_cur.shape());

    let slot_elems = kvh * d;
    let mut dk_page = vec![T::zero(); p * slot_elems];
    let mut dv_page = vec![T::zero(); p * slot_elems];

    for pid in selection_union(&saved.selected) {
        dk_page.iter_mut().for_each(|x| *x = T::zero());
        dv_page.iter_mut().for_each(|x| *x = T::zero());
        {
            let page = cache.page(layer, pid)?;
            for (qp, sel) in saved.selected.iter().enumerate() {
                if sel.binary_search(&pid).is_err() {
                    continue;
                }
                for t in qp * p..((qp + 1) * p).min(rows) {
                    for h in 0..qh {
                        let kv = h / g.group;
                        let (qv, gv) = (&q.data()[head(t, h)], &d_out.data()[head(t, h)]);
                        let (l, dl) = (saved.lse.data()[t * qh + h], delta[t * qh + h]);
                        let dqv = &mut dq.data_mut()[head(t, h)];
                        for j in 0..page.valid {
                            let o = (j * kvh + kv) * d;
                            let (kj, vj) = (&page.k[o..o + d], &page.v[o..o + d]);
                            let prob = (dot(qv, kj) * scale - l).exp();
                            let ds = prob * (dot(gv, vj) - dl) * scale;
                            for x in 0..d {
                                dv_page[o + x] += prob * gv[x];
                                dk_page[o + x] += ds * qv[x];
                                dqv[x] += ds * kj[x];
                            }
                        }
                    }
                }
            }
        }
        cache.add_page_grad(layer, pid, &dk_page, &dv_page)?;
    }

    for t in 0..rows {
        for h in 0..qh {
            let kv = h / g.group;
            let (qv, gv) = (&q.data()[head(t, h)], &d_out.data()[head(t, h)]);
            let (l, dl) = (saved.lse.data()[t * qh + h], delta[t * qh + h]);
            for j in 0..=t {
                let o = (j * kvh + kv) * d;
                let (kj, vj) = (&k_cur.data()[o..o + d], &v_cur.data()[o..o + d]);
                let prob = (dot(qv, kj) * scale - l).exp();
                let ds = prob * (dot(gv, vj) - dl) * scale;
                let (dkd, dvd) = (dk.data_mut(), dv.data_mut());
                for x in 0..d {
                    dvd[o + x] += prob * gv[x];
                    dkd[o + x] += ds * qv[x];
                }
                let dqv = &mut dq.data_mut()[head(t, h)];
                for x in 0..d {
                    dqv[x] += ds * kj[x];
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// One row of a retrieval dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub chunk: usize,
    pub layer: usize,
    pub query_page: usize,
    pub selected: Vec<usize>,
}

/// CSV with header `chunk,layer,query_page,selected`; ids are `;`-separated.
pub fn write_retrieval_csv<W: Write>(records: &[RetrievalRecord], mut w: W) -> Result<()> {
    writeln!(w, "chunk,layer,query_page,selected")?;
    for r in records {
        let ids: Vec<String> = r.selected.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{},{},{},{}", r.chunk, r.layer, r.query_page, ids.join(";"))?;
    }
    Ok(())
}
