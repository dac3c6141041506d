//! Desk-scale experiments shared by the command line and the test suites.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{synthetic, SyntheticKind};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, ModelConfig, ModelParams};
use crate::oracle::{compare_grads, full_forward_backward, BudgetRow, GradReport};
use crate::paged_kv::{contiguous_append_baseline, GrowthPolicy, PagedCache};
use crate::tensor::{Scalar, Tensor};
use crate::tiered::{replay_stall, validate_schedule, ScheduleLog, ScheduleReport, StepSummary, TierConfig, TierController};
use crate::trainer::{TapeMeter, Trainer};

/// Chunk size the budget grid below is expressed against.
pub const REFERENCE_CHUNK: usize = 4096;
/// Retrieval budgets, in tokens, at [`REFERENCE_CHUNK`].
pub const REFERENCE_BUDGETS: [usize; 4] = [512, 2048, 8192, 32768];

/// Reference budgets scaled to `chunk_size` and rounded up to whole pages.
pub fn budget_grid(chunk_size: usize, page_size: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = REFERENCE_BUDGETS
        .iter()
        .map(|&b| {
            let scaled = (b * chunk_size).div_ceil(REFERENCE_CHUNK);
            scaled.div_ceil(page_size).max(1) * page_size
        })
        .collect();
    grid.dedup();
    grid
}

/// Chunk sizes for a throughput sweep: 1/8, 1/4, 1/2 and 1× the configured
/// size, in whole pages.
pub fn chunk_size_grid(chunk_size: usize, page_size: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = [8, 4, 2, 1]
        .iter()
        .map(|&d| (chunk_size / d).div_ceil(page_size).max(1) * page_size)
        .collect();
    grid.dedup();
    grid
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    /// Dense chunked gradients against the full-sequence reference, worst seed.
    pub dense: GradReport,
    /// Sparse chunked gradients against dense chunked gradients, per (budget, seed).
    pub sparse: Vec<(usize, u64, GradReport)>,
    pub rows: Vec<BudgetRow>,
    /// `(budget, mean over seeds of the per-matrix mean L2 error)`.
    pub mean_l2_by_budget: Vec<(usize, f64)>,
}

/// Gradient error of Top-K sparse training across budgets and seeds.
///
/// `base` supplies the architecture; its attention modes are overridden.
pub fn gradcheck_sweep<T: Scalar>(
    base: &ModelConfig,
    seq_len: usize,
    seeds: &[u64],
    budgets: &[usize],
) -> Result<GradcheckOutcome> {
    let dense_cfg = base.clone().with_mode(AttentionMode::Dense);
    let mut out = GradcheckOutcome::default();
    let mut sums = vec![0.0; budgets.len()];
    for &seed in seeds {
        let params = ModelParams::<f64>::init(&dense_cfg, seed)?.cast::<T>();
        let tokens = synthetic(SyntheticKind::Random, seq_len, base.vocab_size, seed ^ 0x5eed)?;
        let dense = Trainer::new(&dense_cfg)?.train_step(&params, &tokens, None)?;
        let (_, oracle) = full_forward_backward(&dense_cfg, &params, &tokens, &mut TapeMeter::default())?;
        let report = compare_grads(&dense.grads, &oracle)?;
        if report.max_rel >= out.dense.max_rel {
            out.dense = report;
        }
        for (bi, &b) in budgets.iter().enumerate() {
            let cfg = ModelConfig { retrieval_budget: b, ..base.clone().with_mode(AttentionMode::Topk) };
            let sparse = Trainer::new(&cfg)?.train_step(&params, &tokens, None)?;
            let r = compare_grads(&sparse.grads, &dense.grads)?;
            sums[bi] += r.mean_l2;
            out.rows.push(BudgetRow { budget: b, context: seq_len, l2: r.mean_l2 });
            out.sparse.push((b, seed, r));
        }
    }
    out.mean_l2_by_budget =
        budgets.iter().zip(&sums).map(|(&b, &s)| (b, s / seeds.len().max(1) as f64)).collect();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembenchRow {
    pub tokens: usize,
    pub paged_peak: usize,
    pub contiguous_peak: usize,
    pub theoretical: usize,
    pub contiguous_doubling_peak: usize,
    pub paged_copied_bytes: usize,
    pub contiguous_copied_bytes: usize,
    /// Smallest peak/stored ratio over the exact-fit reallocations.
    pub min_realloc_ratio: f64,
}

/// Whole-model contiguous cache: one buffer per layer, appended chunk by chunk.
fn contiguous_model(n_layers: usize, appends: &[usize], policy: GrowthPolicy) -> (usize, usize, f64) {
    let per_layer = contiguous_append_baseline(appends, policy);
    let mut caps = vec![0usize; n_layers];
    let mut used = vec![0usize; n_layers];
    let mut peak = 0;
    for &a in appends {
        for l in 0..n_layers {
            let others: usize = (0..n_layers).filter(|&o| o != l).map(|o| caps[o]).sum();
            let need = used[l] + a;
            let live = if need > caps[l] {
                let new_cap = match policy {
                    GrowthPolicy::ExactFit => need,
                    GrowthPolicy::Doubling => need.max(2 * caps[l]),
                };
                let live = caps[l] + a + new_cap;
                caps[l] = new_cap;
                live
            } else {
                caps[l] + a
            };
            used[l] = need;
            peak = peak.max(others + live);
        }
    }
    let min_ratio = per_layer.realloc_points.iter().map(|p| p.ratio()).fold(f64::INFINITY, f64::min);
    (peak, per_layer.copied_bytes * n_layers, min_ratio)
}

/// Peak KV memory of the paged cache against a contiguous concatenating cache
/// for each sequence length in `lens`, both holding `f32` entries.
pub fn membench(cfg: &ModelConfig, lens: &[usize]) -> Result<Vec<MembenchRow>> {
    cfg.validate()?;
    let per_token = 2 * cfg.kv_dim() * f32::BYTES;
    let mut rows = Vec::with_capacity(lens.len());
    for &t in lens {
        if t == 0 {
            return Err(Error::Config("membench lengths must be positive".into()));
        }
        let mut cache = PagedCache::<f32>::new(cfg);
        let mut peak = 0;
        let mut appends = Vec::new();
        let mut done = 0;
        while done < t {
            let n = cfg.chunk_size.min(t - done);
            let kv = Tensor::<f32>::zeros(&[n, cfg.n_kv_heads, cfg.head_dim]);
            for l in 0..cfg.n_layers {
                cache.append_chunk(l, &kv, &kv)?;
                peak = peak.max(cache.memory_report().kv_bytes());
            }
            appends.push(n * per_token);
            done += n;
        }
        let (contiguous_peak, contiguous_copied_bytes, min_realloc_ratio) =
            contiguous_model(cfg.n_layers, &appends, GrowthPolicy::ExactFit);
        let (doubling, _, _) = contiguous_model(cfg.n_layers, &appends, GrowthPolicy::Doubling);
        rows.push(MembenchRow {
            tokens: t,
            paged_peak: peak,
            contiguous_peak,
            theoretical: t * per_token * cfg.n_layers,
            contiguous_doubling_peak: doubling,
            paged_copied_bytes: cache.memory_report().copied_bytes,
            contiguous_copied_bytes,
            min_realloc_ratio,
        });
    }
    Ok(rows)
}

pub fn write_membench_csv<W: Write>(rows: &[MembenchRow], mut w: W) -> Result<()> {
    writeln!(
        w,
        "T,paged_peak,contiguous_peak,theoretical,contiguous_doubling_peak,paged_copied_bytes,contiguous_copied_bytes,min_realloc_ratio"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.tokens,
            r.paged_peak,
            r.contiguous_peak,
            r.theoretical,
            r.contiguous_doubling_peak,
            r.paged_copied_bytes,
            r.contiguous_copied_bytes,
            r.min_realloc_ratio
        )?;
    }
    Ok(())
}

/// One logged training step under the offload simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRun {
    pub report: ScheduleReport,
    pub summary: StepSummary,
    /// Stall recomputed by the independent event replay.
    pub replay_stall_seconds: f64,
    pub page_bytes: usize,
    #[serde(skip)]
    pub log: ScheduleLog,
}

pub fn schedule_run<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    tokens: &[usize],
    tier: &TierConfig,
) -> Result<ScheduleRun> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let mut ctl = TierController::new(tier.clone(), cfg)?;
    trainer.train_step(params, tokens, Some(&mut ctl))?;
    let log = ctl.log().clone();
    Ok(ScheduleRun {
        report: validate_schedule(&log),
        summary: ctl.step_summary().clone(),
        replay_stall_seconds: replay_stall(&log, tier.bandwidth_bytes_per_s),
        page_bytes: trainer.cache().page_bytes(),
        log,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkSweepRow {
    pub chunk_size: usize,
    pub tokens_per_s: f64,
    pub tape_peak_bytes: usize,
    pub loss: f64,
}

/// Wall-clock training throughput of one step per chunk size.
pub fn chunk_size_sweep<T: Scalar>(
    base: &ModelConfig,
    params: &ModelParams<T>,
    tokens: &[usize],
    sizes: &[usize],
) -> Result<Vec<ChunkSweepRow>> {
    sizes
        .iter()
        .map(|&c| {
            let cfg = ModelConfig { chunk_size: c, ..base.clone() };
            let mut tr = Trainer::<T>::new(&cfg)?;
            let start = Instant::now();
            let out = tr.train_step(params, tokens, None)?;
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            Ok(ChunkSweepRow {
                chunk_size: c,
                tokens_per_s: tokens.len() as f64 / secs,
                tape_peak_bytes: out.tape_peak_bytes,
                loss: out.loss.as_f64(),
            })
        })
        .collect()
}
