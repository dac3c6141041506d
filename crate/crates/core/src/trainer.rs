//! Chunk-recurrent training.
//!
//! A sequence of `T` tokens is cut into `S = ceil(T / C)` chunks. The forward
//! pass runs the chunks in order: each appends its keys and values to the
//! paged cache, attends to the cache left by earlier chunks, and drops its
//! activations. The backward pass walks the chunks in reverse, recomputes a
//! chunk's activations from its tokens and the cache, and backpropagates the
//! chunk loss together with the key/value gradients later chunks deposited
//! into its gradient pages. Attention gradients for earlier chunks' keys and
//! values are in turn written into their gradient pages.
//!
//! Loss is the mean next-token cross entropy over all `T − 1` predictions; the
//! last token of chunk `i` predicts the first token of chunk `i + 1`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attn_backward, attn_forward, select_pages, selection_union, AttnSaved, RetrievalRecord, Selection,
};
use crate::error::{Error, Result};
use crate::model::{adam_step, AdamConfig, AdamState, ModelConfig, ModelParams, ParamGrads};
use crate::ops::{
    cross_entropy_scaled, linear, linear_backward, matmul_nt, matmul_tn, rmsnorm, rmsnorm_backward, rope,
    rope_backward, silu, silu_backward,
};
use crate::paged_kv::PagedCache;
use crate::tensor::{Scalar, Tensor};
use crate::tiered::{Phase, TierController, Unit};

/// Live/peak byte counter for saved activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeMeter {
    live: usize,
    peak: usize,
}

impl TapeMeter {
    pub fn alloc(&mut self, bytes: usize) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, bytes: usize) {
        debug_assert!(bytes <= self.live, "tape underflow");
        self.live -= bytes.min(self.live);
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn reset_peak(&mut self) {
        self.peak = self.live;
    }
}

/// Everything needed to replay one chunk. Activations are not stored here.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkState {
    pub index: usize,
    pub tokens: Vec<usize>,
    /// Next-token targets; one shorter than `tokens` for the final chunk.
    pub targets: Vec<usize>,
    pub pos_offset: usize,
    /// Replay seed. The model has no stochastic ops, so replay is exact
    /// regardless; the seed travels with the chunk for stochastic extensions.
    pub seed: u64,
    /// Pages chosen in the forward pass, per layer.
    pub selected: Vec<Selection>,
    /// Global cache slots this chunk appended.
    pub slots: Range<usize>,
}

impl ChunkState {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits `tokens` into chunk states of `chunk_size` tokens.
pub fn chunk_states(cfg: &ModelConfig, tokens: &[usize], seed: u64) -> Result<Vec<ChunkState>> {
    if tokens.len() < 2 {
        return Err(Error::Config(format!(
            "a training sequence needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::OutOfRange(format!("token {bad} with vocab {}", cfg.vocab_size)));
    }
    let c = cfg.chunk_size;
    Ok(tokens
        .chunks(c)
        .enumerate()
        .map(|(i, chunk)| {
            let start = i * c;
            let end = (start + chunk.len() + 1).min(tokens.len());
            ChunkState {
                index: i,
                tokens: chunk.to_vec(),
                targets: tokens[start + 1..end].to_vec(),
                pos_offset: start,
                seed: seed.wrapping_add(i as u64),
                selected: vec![Vec::new(); cfg.n_layers],
                slots: 0..0,
            }
        })
        .collect())
}

struct LayerTape<T> {
    x: Tensor<T>,
    a: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: AttnSaved<T>,
    h: Tensor<T>,
    b: Tensor<T>,
    up: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Scalar> LayerTape<T> {
    fn bytes(&self) -> usize {
        [&self.x, &self.a, &self.q, &self.k, &self.v, &self.h, &self.b, &self.up, &self.act]
            .iter()
            .map(|t| t.bytes())
            .sum::<usize>()
            + self.attn.bytes()
    }
}

struct HeadTape<T> {
    x: Tensor<T>,
    f: Tensor<T>,
    dlogits: Tensor<T>,
}

impl<T: Scalar> HeadTape<T> {
    fn bytes(&self) -> usize {
        self.x.bytes() + self.f.bytes() + self.dlogits.bytes()
    }
}

/// Per-step results.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub loss: T,
    pub grads: ParamGrads<T>,
    pub tape_peak_bytes: usize,
    /// Key/value page bytes held at the end of the forward pass.
    pub kv_bytes: usize,
    /// Gradient page bytes held at the end of the backward pass.
    pub grad_page_bytes: usize,
    pub kv_pages: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pass {
    Forward,
    Recompute,
}

/// Chunked trainer owning the paged cache and the tape meter.
pub struct Trainer<T> {
    cfg: ModelConfig,
    cache: PagedCache<T>,
    meter: TapeMeter,
    /// Zero every gradient page after each chunk's backward, cutting gradient
    /// flow between chunks. Ablation only.
    pub ablate_grad_pages: bool,
    /// When set, forward passes append one record per (chunk, layer, query page).
    pub retrieval_log: Option<Vec<RetrievalRecord>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            cache: PagedCache::new(cfg),
            meter: TapeMeter::default(),
            ablate_grad_pages: false,
            retrieval_log: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &PagedCache<T> {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut PagedCache<T> {
        &mut self.cache
    }

    pub fn meter(&self) -> &TapeMeter {
        &self.meter
    }

    /// Forward pass for one chunk: appends its KV and returns its share of the
    /// step loss. Chunks must arrive in index order.
    pub fn forward_chunk(
        &mut self,
        params: &ModelParams<T>,
        state: &mut ChunkState,
        total_predictions: usize,
        mut ctl: Option<&mut TierController>,
    ) -> Result<T> {
        let expected = state.index * self.cfg.chunk_size;
        if self.cache.filled(0) != expected || state.pos_offset != expected {
            return Err(Error::State(format!(
                "chunk {} forward with {} cached tokens (expected {expected})",
                state.index,
                self.cache.filled(0)
            )));
        }
        let (loss, tape) = self.run_chunk(params, state, Pass::Forward, total_predictions, &mut ctl)?;
        self.drop_tape(tape);
        Ok(loss)
    }

    /// Backward pass for one chunk, accumulating into `grads`. Chunks must
    /// arrive in reverse index order after all forwards ran.
    pub fn backward_chunk(
        &mut self,
        params: &ModelParams<T>,
        state: &ChunkState,
        total_predictions: usize,
        grads: &mut ParamGrads<T>,
        mut ctl: Option<&mut TierController>,
    ) -> Result<()> {
        if state.slots.end > self.cache.filled(0) || state.slots.len() != state.len() {
            return Err(Error::State(format!("chunk {} backward before its forward", state.index)));
        }
        let mut st = state.clone();
        let (_, mut tape) = self.run_chunk(params, &mut st, Pass::Recompute, total_predictions, &mut ctl)?;
        let cfg = &self.cfg;
        let eps = T::from_f64(cfg.norm_eps);
        let n = state.len();
        let pos: Vec<usize> = (state.pos_offset..state.pos_offset + n).collect();

        let head = tape.head.take().expect("recompute fills the head");
        let dw = matmul_tn(&head.f, &head.dlogits)?;
        grads.unembed.add_assign(&dw)?;
        let df = matmul_nt(&head.dlogits, &params.unembed)?;
        let (mut dx, dg) = rmsnorm_backward(&head.x, &params.final_norm, eps, &df)?;
        grads.final_norm.add_assign(&dg)?;
        self.meter.free(head.bytes());

        for l in (0..cfg.n_layers).rev() {
            let lt = tape.layers.pop().expect("one tape entry per layer");
            let lp = &params.layers[l];
            let gl = &mut grads.layers[l];
            let unit = Unit { phase: Phase::Backward, chunk: state.index, layer: l };
            if let Some(c) = ctl.as_deref_mut() {
                c.unit_begin(&mut self.cache, unit)?;
            }

            // y = h + silu(b·Wup)·Wdown, b = norm(h)
            let (dact, dwd) = linear_backward(&lt.act, &lp.wdown, &dx)?;
            gl.wdown.add_assign(&dwd)?;
            let dup = silu_backward(&lt.up, &dact)?;
            let (db, dwu) = linear_backward(&lt.b, &lp.wup, &dup)?;
            gl.wup.add_assign(&dwu)?;
            let (dh_norm, dg2) = rmsnorm_backward(&lt.h, &lp.mlp_norm, eps, &db)?;
            gl.mlp_norm.add_assign(&dg2)?;
            let mut dh = dx;
            dh.add_assign(&dh_norm)?;

            // h = x + O·Wo
            let o2 = lt.attn.out.clone().reshape(&[n, cfg.q_dim()])?;
            let (do2, dwo) = linear_backward(&o2, &lp.wo, &dh)?;
            gl.wo.add_assign(&dwo)?;
            let d_out = do2.reshape(&[n, cfg.n_q_heads, cfg.head_dim])?;

            if let Some(c) = ctl.as_deref_mut() {
                c.before_access(&mut self.cache, unit, attended_tokens(&lt.attn.selected, cfg.page_size, n))?;
            }
            let (dq, mut dk, mut dv) =
                attn_backward(&mut self.cache, l, &d_out, &lt.q, &lt.k, &lt.v, &lt.attn)?;
            // Gradients later chunks sent into this chunk's keys and values.
            let (gk, gv) = self.cache.read_grads(l, state.slots.clone())?;
            dk.add_assign(&gk)?;
            dv.add_assign(&gv)?;
            if let Some(c) = ctl.as_deref_mut() {
                c.unit_end(&mut self.cache, unit)?;
            }

            let dq = rope_backward(&dq, &pos, cfg.rope_base)?.reshape(&[n, cfg.q_dim()])?;
            let dk = rope_backward(&dk, &pos, cfg.rope_base)?.reshape(&[n, cfg.kv_dim()])?;
            let dv = dv.reshape(&[n, cfg.kv_dim()])?;
            let (mut da, dwq) = linear_backward(&lt.a, &lp.wq, &dq)?;
            let (da_k, dwk) = linear_backward(&lt.a, &lp.wk, &dk)?;
            let (da_v, dwv) = linear_backward(&lt.a, &lp.wv, &dv)?;
            gl.wq.add_assign(&dwq)?;
            gl.wk.add_assign(&dwk)?;
            gl.wv.add_assign(&dwv)?;
            da.add_assign(&da_k)?;
            da.add_assign(&da_v)?;
            let (dx_norm, dg1) = rmsnorm_backward(&lt.x, &lp.attn_norm, eps, &da)?;
            gl.attn_norm.add_assign(&dg1)?;
            dh.add_assign(&dx_norm)?;
            dx = dh;
            self.meter.free(lt.bytes());
        }

        for (t, &tok) in state.tokens.iter().enumerate() {
            for (e, &g) in grads.embed.row_mut(tok).iter_mut().zip(dx.row(t)) {
                *e += g;
            }
        }
        Ok(())
    }

    fn run_chunk(
        &mut self,
        params: &ModelParams<T>,
        state: &mut ChunkState,
        pass: Pass,
        total_predictions: usize,
        ctl: &mut Option<&mut TierController>,
    ) -> Result<(T, Tape<T>)> {
        let cfg = &self.cfg;
        let eps = T::from_f64(cfg.norm_eps);
        let n = state.len();
        let (qh, kvh, hd) = (cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim);
        let pos: Vec<usize> = (state.pos_offset..state.pos_offset + n).collect();
        let n_candidates = state.pos_offset / cfg.page_size;
        let phase = match pass {
            Pass::Forward => Phase::Forward,
            Pass::Recompute => Phase::Recompute,
        };

        let mut x = Tensor::zeros(&[n, cfg.d_model]);
        for (t, &tok) in state.tokens.iter().enumerate() {
            x.row_mut(t).copy_from_slice(params.embed.row(tok));
        }
        let mut tape = Tape { layers: Vec::with_capacity(cfg.n_layers), head: None };

        for l in 0..cfg.n_layers {
            let lp = &params.layers[l];
            let unit = Unit { phase, chunk: state.index, layer: l };
            if let Some(c) = ctl.as_deref_mut() {
                c.unit_begin(&mut self.cache, unit)?;
            }
            let a = rmsnorm(&x, &lp.attn_norm, eps)?;
            let q = rope(&linear(&a, &lp.wq)?.reshape(&[n, qh, hd])?, &pos, cfg.rope_base)?;
            let sel = match pass {
                Pass::Forward => {
                    let s = select_pages(cfg.attention[l], cfg, &self.cache, l, &q, n_candidates)?;
                    if let Some(c) = ctl.as_deref_mut() {
                        c.selected(&mut self.cache, unit, &s)?;
                    }
                    if let Some(log) = &mut self.retrieval_log {
                        log.extend(s.iter().enumerate().map(|(qp, ids)| RetrievalRecord {
                            chunk: state.index,
                            layer: l,
                            query_page: qp,
                            selected: ids.clone(),
                        }));
                    }
                    state.selected[l] = s.clone();
                    s
                }
                Pass::Recompute => state.selected[l].clone(),
            };
            let k = rope(&linear(&a, &lp.wk)?.reshape(&[n, kvh, hd])?, &pos, cfg.rope_base)?;
            let v = linear(&a, &lp.wv)?.reshape(&[n, kvh, hd])?;
            if pass == Pass::Forward {
                let slots = self.cache.append_chunk(l, &k, &v)?;
                if let Some(c) = ctl.as_deref_mut() {
                    let pages = slots.start / cfg.page_size..slots.end.div_ceil(cfg.page_size);
                    c.appended(&mut self.cache, unit, pages)?;
                }
                state.slots = slots;
            }
            if let Some(c) = ctl.as_deref_mut() {
                c.before_access(&mut self.cache, unit, attended_tokens(&sel, cfg.page_size, n))?;
            }
            let attn = attn_forward(&self.cache, l, &q, &k, &v, &sel)?;
            if let Some(c) = ctl.as_deref_mut() {
                c.unit_end(&mut self.cache, unit)?;
            }
            let o2 = attn.out.clone().reshape(&[n, cfg.q_dim()])?;
            let mut h = linear(&o2, &lp.wo)?;
            h.add_assign(&x)?;
            let b = rmsnorm(&h, &lp.mlp_norm, eps)?;
            let up = linear(&b, &lp.wup)?;
            let act = silu(&up);
            let mut y = linear(&act, &lp.wdown)?;
            y.add_assign(&h)?;
            let lt = LayerTape { x, a, q, k, v, attn, h, b, up, act };
            self.meter.alloc(lt.bytes());
            tape.layers.push(lt);
            x = y;
        }

        let f = rmsnorm(&x, &params.final_norm, eps)?;
        let logits = linear(&f, &params.unembed)?;
        let (loss, dlogits) = cross_entropy_scaled(&logits, &state.targets, total_predictions)?;
        drop(logits);
        let head = HeadTape { x, f, dlogits };
        self.meter.alloc(head.bytes());
        tape.head = Some(head);
        Ok((loss, tape))
    }

    fn drop_tape(&mut self, tape: Tape<T>) {
        for lt in &tape.layers {
            self.meter.free(lt.bytes());
        }
        if let Some(h) = &tape.head {
            self.meter.free(h.bytes());
        }
    }

    /// Forward over every chunk, then backward in reverse. The cache is
    /// cleared before and after.
    pub fn train_step(
        &mut self,
        params: &ModelParams<T>,
        tokens: &[usize],
        mut ctl: Option<&mut TierController>,
    ) -> Result<StepOutput<T>> {
        let mut states = chunk_states(&self.cfg, tokens, self.cfg.seed)?;
        let total = tokens.len() - 1;
        self.cache.reset();
        self.meter.reset_peak();
        if let Some(c) = ctl.as_deref_mut() {
            c.step_begin(&self.cache, &states.iter().map(ChunkState::len).collect::<Vec<_>>())?;
        }

        let mut loss = T::zero();
        for st in &mut states {
            loss += self.forward_chunk(params, st, total, ctl.as_deref_mut())?;
        }
        let fwd = self.cache.memory_report();

        let mut grads = ModelParams::zeros_like(params);
        for st in states.iter().rev() {
            self.backward_chunk(params, st, total, &mut grads, ctl.as_deref_mut())?;
            if self.ablate_grad_pages {
                self.cache.zero_grads();
            }
        }
        let bwd = self.cache.memory_report();
        if let Some(c) = ctl {
            c.step_end(&mut self.cache)?;
        }
        self.cache.reset();
        Ok(StepOutput {
            loss,
            grads,
            tape_peak_bytes: self.meter.peak(),
            kv_bytes: fwd.kv_bytes(),
            grad_page_bytes: bwd.grad_bytes,
            kv_pages: fwd.pages,
        })
    }

    /// Loss only: the forward pass of [`train_step`](Self::train_step).
    pub fn eval_loss(&mut self, params: &ModelParams<T>, tokens: &[usize]) -> Result<T> {
        let mut states = chunk_states(&self.cfg, tokens, self.cfg.seed)?;
        let total = tokens.len() - 1;
        self.cache.reset();
        let mut loss = T::zero();
        for st in &mut states {
            loss += self.forward_chunk(params, st, total, None)?;
        }
        self.cache.reset();
        Ok(loss)
    }
}

struct Tape<T> {
    layers: Vec<LayerTape<T>>,
    head: Option<HeadTape<T>>,
}

fn attended_tokens(sel: &Selection, page_size: usize, rows: usize) -> usize {
    selection_union(sel).len() * page_size + rows
}

/// One line of the per-step metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub tape_peak_bytes: usize,
    pub kv_bytes: usize,
    pub grad_page_bytes: usize,
    pub transfer_bytes: usize,
    pub stall_ms: f64,
}

/// Training-set view: fixed-length windows over a token stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<usize>,
}

impl Corpus {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("empty corpus".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Window for `step`; consecutive steps walk the corpus and wrap around.
    pub fn window(&self, step: usize, seq_len: usize) -> Result<&[usize]> {
        if seq_len > self.tokens.len() {
            return Err(Error::Config(format!(
                "sequence length {seq_len} exceeds corpus of {} tokens",
                self.tokens.len()
            )));
        }
        let n_windows = self.tokens.len() / seq_len;
        let start = (step % n_windows) * seq_len;
        Ok(&self.tokens[start..start + seq_len])
    }
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub steps: usize,
    pub seq_len: usize,
    pub adam: AdamConfig,
}

/// Sequential `train_step` + Adam; returns one metrics record per step.
pub fn fit<T: Scalar>(
    trainer: &mut Trainer<T>,
    params: &mut ModelParams<T>,
    corpus: &Corpus,
    fit: &FitConfig,
    mut ctl: Option<&mut TierController>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    let mut adam = AdamState::new(params);
    let mut history = Vec::with_capacity(fit.steps);
    for step in 0..fit.steps {
        let tokens = corpus.window(step, fit.seq_len)?;
        let out = trainer.train_step(params, tokens, ctl.as_deref_mut())?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        adam_step(params, &out.grads, &mut adam, &fit.adam)?;
        let (transfer_bytes, stall_ms) = match ctl.as_deref() {
            Some(c) => {
                let s = c.step_summary();
                (s.transfer_bytes, s.stall_seconds * 1e3)
            }
            None => (0, 0.0),
        };
        let m = StepMetrics {
            step,
            loss: out.loss.as_f64(),
            tape_peak_bytes: out.tape_peak_bytes,
            kv_bytes: out.kv_bytes,
            grad_page_bytes: out.grad_page_bytes,
            transfer_bytes,
            stall_ms,
        };
        on_step(&m);
        history.push(m);
    }
    Ok(history)
}
