//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary so the lines reach the terminal in order.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use chunktrain_core::attention::{attn_backward, attn_forward, RetrievalRecord, Selection};
use chunktrain_core::corpus::{synthetic, SyntheticKind};
use chunktrain_core::experiments::{budget_grid, gradcheck_sweep, membench};
use chunktrain_core::model::{AdamConfig, AttentionMode, ModelConfig, ModelParams};
use chunktrain_core::ops::{
    cross_entropy, fd_gradcheck, linear, linear_backward, rmsnorm, rmsnorm_backward, rope, rope_backward, silu,
    silu_backward, softmax_rows, softmax_rows_backward,
};
use chunktrain_core::oracle::{activation_peak_probe, compare_grads, full_forward_backward, ProbeRun};
use chunktrain_core::paged_kv::PagedCache;
use chunktrain_core::tiered::{validate_schedule, EvictPolicy, TierConfig, TierController};
use chunktrain_core::trainer::{fit, Corpus, FitConfig, StepOutput, TapeMeter, Trainer};
use chunktrain_core::{Result, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn desk() -> ModelConfig {
    ModelConfig::default()
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    synthetic(SyntheticKind::Random, n, vocab, seed).unwrap()
}

fn step<T: Scalar>(cfg: &ModelConfig, p: &ModelParams<T>, toks: &[usize]) -> Result<StepOutput<T>> {
    Trainer::new(cfg)?.train_step(p, toks, None)
}

// 1. Chunked dense gradients equal the full-sequence reference.
fn gradient_equivalence() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = desk();
    let toks = tokens(512, cfg.vocab_size, 1);
    let p64 = ModelParams::<f64>::init(&cfg, 1)?;
    let p32 = p64.cast::<f32>();
    let r64 = compare_grads(&step(&cfg, &p64, &toks)?.grads, &full_forward_backward(&cfg, &p64, &toks, &mut TapeMeter::default())?.1)?;
    let r32 = compare_grads(&step(&cfg, &p32, &toks)?.grads, &full_forward_backward(&cfg, &p32, &toks, &mut TapeMeter::default())?.1)?;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r32.max_rel < 1e-5 && r64.max_rel < 1e-10 && secs < 10.0,
        format!("max rel f32 {:.2e} (<1e-5), f64 {:.2e} (<1e-10), {secs:.2}s (<10s)", r32.max_rel, r64.max_rel),
    )
}

// 2. Chunked tape peak is flat in sequence length; the reference grows.
fn constant_activation_memory() -> Result<Outcome> {
    let cfg = desk();
    let p = ModelParams::<f64>::init(&cfg, 2)?.cast::<f32>();
    let slack = PagedCache::<f32>::new(&cfg).page_bytes();
    let mut peaks = Vec::new();
    for s in [1usize, 2, 4, 8, 16] {
        let toks = tokens(s * cfg.chunk_size, cfg.vocab_size, s as u64);
        peaks.push(activation_peak_probe(ProbeRun::Chunked, &cfg, &p, &toks)?);
    }
    let spread = peaks.iter().max().unwrap() - peaks.iter().min().unwrap();
    let short = activation_peak_probe(ProbeRun::FullSequence, &cfg, &p, &tokens(64, cfg.vocab_size, 3))?;
    let long = activation_peak_probe(ProbeRun::FullSequence, &cfg, &p, &tokens(512, cfg.vocab_size, 3))?;
    let growth = long as f64 / short as f64;
    outcome(
        spread <= slack && growth >= 4.0,
        format!("chunked peaks {peaks:?} (spread {spread} ≤ {slack}), reference grows {growth:.2}× (≥4×)"),
    )
}

// 3. Paged cache memory is exactly the theoretical KV size.
fn paged_vs_contiguous() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = desk();
    let lens = [64, 128, 256, 512, 1024, 2048, 4096];
    let rows = membench(&cfg, &lens)?;
    let secs = start.elapsed().as_secs_f64();
    let exact = rows.iter().all(|r| r.paged_peak == r.theoretical);
    let min_ratio = rows.iter().map(|r| r.min_realloc_ratio).fold(f64::INFINITY, f64::min);
    let no_copies = rows.iter().all(|r| r.paged_copied_bytes == 0);
    let per_token = 2 * cfg.kv_dim() * 4 * cfg.n_layers;
    let slope_ok = rows.windows(2).all(|w| w[1].paged_peak - w[0].paged_peak == (w[1].tokens - w[0].tokens) * per_token);
    let worst = rows.last().map(|r| r.contiguous_peak as f64 / r.theoretical as f64).unwrap_or(0.0);
    outcome(
        exact && min_ratio >= 2.0 && no_copies && slope_ok && secs < 5.0,
        format!(
            "paged/theoretical 1.00 at all T: {exact}, min exact-fit realloc ratio {min_ratio:.2} (≥2), paged copies 0: {no_copies}, slope {per_token} B/token: {slope_ok}, contiguous/theoretical at T=4096 {worst:.2}, {secs:.2}s (<5s)"
        ),
    )
}

// 4. Full budget is dense; error shrinks as the budget grows.
fn sparse_degeneracy_and_monotonicity() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = desk();
    let t = 512;
    let toks = tokens(t, cfg.vocab_size, 4);
    let full = ModelConfig { retrieval_budget: t, ..cfg.clone().with_mode(AttentionMode::Topk) };
    let p64 = ModelParams::<f64>::init(&cfg, 4)?;
    let (d64, s64) = (step(&cfg, &p64, &toks)?, step(&full, &p64, &toks)?);
    let bitwise = d64.loss.to_bits() == s64.loss.to_bits() && d64.grads == s64.grads;
    let p32 = p64.cast::<f32>();
    let r32 = compare_grads(&step(&full, &p32, &toks)?.grads, &step(&cfg, &p32, &toks)?.grads)?;

    let grid = budget_grid(cfg.chunk_size, cfg.page_size);
    let seeds: Vec<u64> = (0..10).collect();
    let sweep = gradcheck_sweep::<f64>(&cfg, t, &seeds, &grid)?;
    let means: Vec<f64> = sweep.mean_l2_by_budget.iter().map(|&(_, m)| m).collect();
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    let secs = start.elapsed().as_secs_f64();
    let table: Vec<String> = sweep.mean_l2_by_budget.iter().map(|(b, m)| format!("{b}:{m:.3e}")).collect();
    outcome(
        bitwise && r32.max_rel <= 1e-6 && monotone && secs < 60.0,
        format!(
            "k≥n bitwise f64: {bitwise}, f32 rel {:.1e} (≤1e-6); mean L2 by budget over {} seeds [{}] non-increasing: {monotone}, {secs:.1}s (<60s)",
            r32.max_rel,
            seeds.len(),
            table.join(" ")
        ),
    )
}

const MODES: [AttentionMode; 3] = [AttentionMode::Dense, AttentionMode::Local, AttentionMode::Topk];

fn ws_pages(cfg: &ModelConfig, t: usize) -> Result<usize> {
    let n = t.div_ceil(cfg.chunk_size);
    let lens: Vec<usize> = (0..n).map(|i| cfg.chunk_size.min(t - i * cfg.chunk_size)).collect();
    Ok(TierController::new(TierConfig::default(), cfg)?.working_set_pages(&lens))
}

// 5. Offload never changes numbers.
fn offload_transparency() -> Result<Outcome> {
    let t = 512;
    let toks = tokens(t, desk().vocab_size, 5);
    let mut checked = 0;
    let mut failures = Vec::new();
    for mode in MODES {
        let cfg = desk().with_mode(mode);
        let p = ModelParams::<f64>::init(&cfg, 5)?.cast::<f32>();
        let off = step(&cfg, &p, &toks)?;
        let ws = ws_pages(&cfg, t)?;
        for policy in [EvictPolicy::Lru, EvictPolicy::Eager] {
            let tier = TierConfig { device_capacity_pages: ws, bandwidth_bytes_per_s: 1e8, policy, ..TierConfig::default() };
            let mut ctl = TierController::new(tier, &cfg)?;
            let on = Trainer::new(&cfg)?.train_step(&p, &toks, Some(&mut ctl))?;
            checked += 1;
            if on.loss.to_bits() != off.loss.to_bits() || on.grads != off.grads || ctl.step_summary().evictions == 0 {
                failures.push(format!("{mode}/{policy:?}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{checked} runs (dense/local/topk × LRU/eager at minimum capacity, evicting) bitwise equal; failures {failures:?}"),
    )
}

/// Pages each unit needs that the previous same-layer unit did not already
/// use, rebuilt independently from the retrieval log.
fn fresh_pages(records: &[RetrievalRecord], cfg: &ModelConfig, n_chunks: usize) -> usize {
    let mut sel: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for r in records {
        sel.entry((r.chunk, r.layer)).or_default().extend(&r.selected);
    }
    let ppc = cfg.pages_per_chunk();
    let get = |i: usize, l: usize| sel.get(&(i, l)).cloned().unwrap_or_default();
    let mut units = Vec::new();
    for i in 0..n_chunks {
        units.extend((0..cfg.n_layers).map(|l| (l, get(i, l))));
    }
    for i in (0..n_chunks).rev() {
        units.extend((0..cfg.n_layers).map(|l| (l, get(i, l))));
        for l in (0..cfg.n_layers).rev() {
            let mut s = get(i, l);
            s.extend(i * ppc..(i + 1) * ppc);
            units.push((l, s));
        }
    }
    let mut total = 0;
    let mut prev: Option<(usize, BTreeSet<usize>)> = None;
    for (l, needs) in units {
        total += match &prev {
            Some((pl, p)) if *pl == l => needs.difference(p).count(),
            _ => needs.len(),
        };
        prev = Some((l, needs));
    }
    total
}

// 6. Simulated schedules are legal, hide fast transfers and move exact bytes.
fn schedule_correctness() -> Result<Outcome> {
    let t = 512;
    let toks = tokens(t, desk().vocab_size, 6);
    let mut violations = 0;
    let mut fast_ok = true;
    let mut exact_ok = true;
    let mut bytes = BTreeMap::new();
    let mut notes = Vec::new();
    for mode in MODES {
        let cfg = desk().with_mode(mode);
        let p = ModelParams::<f64>::init(&cfg, 6)?.cast::<f32>();
        let ws = ws_pages(&cfg, t)?;
        for bw in [TierConfig::default().bandwidth_bytes_per_s, 1e7] {
            let tier = TierConfig { device_capacity_pages: ws + 8, bandwidth_bytes_per_s: bw, policy: EvictPolicy::Eager, ..TierConfig::default() };
            let mut ctl = TierController::new(tier.clone(), &cfg)?;
            let mut tr = Trainer::new(&cfg)?;
            tr.retrieval_log = Some(Vec::new());
            tr.train_step(&p, &toks, Some(&mut ctl))?;
            let r = validate_schedule(ctl.log());
            violations += r.violations.len();
            let page_bytes = tr.cache().page_bytes();
            let expected = fresh_pages(tr.retrieval_log.as_deref().unwrap_or(&[]), &cfg, t / cfg.chunk_size) * page_bytes;
            exact_ok &= r.transfer_bytes == expected;
            if bw == TierConfig::default().bandwidth_bytes_per_s {
                // The whole working set moves faster than the shortest compute segment.
                let transfer = tier.transfer_seconds(ws * page_bytes);
                let compute = tier.q_proj_s.min(tier.kv_proj_s).min(tier.other_s);
                fast_ok &= transfer <= compute && r.stall_seconds == 0.0 && r.overlap_fraction == 1.0;
                notes.push(format!("{mode} stall {} overlap {}", r.stall_seconds, r.overlap_fraction));
                bytes.insert(mode.to_string(), r.transfer_bytes);
            }
        }
    }
    let sparse_le = bytes["topk"] <= bytes["dense"];
    outcome(
        violations == 0 && fast_ok && exact_ok && sparse_le,
        format!(
            "violations {violations}; fast link: {} ; bytes == fresh pages × page_bytes: {exact_ok}; topk {} ≤ dense {}",
            notes.join(", "),
            bytes["topk"],
            bytes["dense"]
        ),
    )
}

// 7. Training on a periodic corpus converges.
fn optimization_sanity() -> Result<Outcome> {
    let start = Instant::now();
    let seq_len = 256;
    let corpus = Corpus::new(synthetic(SyntheticKind::Periodic, 8192, desk().vocab_size, 7)?)?;
    let n_pages = seq_len / desk().page_size;
    let mut notes = Vec::new();
    let mut pass = true;
    for cfg in [
        desk(),
        ModelConfig { retrieval_budget: n_pages / 2 * desk().page_size, ..desk().with_mode(AttentionMode::Topk) },
    ] {
        let mut params = ModelParams::<f64>::init(&cfg, 7)?.cast::<f32>();
        let mut tr = Trainer::new(&cfg)?;
        let fc = FitConfig { steps: 200, seq_len, adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() } };
        let hist = fit(&mut tr, &mut params, &corpus, &fc, None, |_| {})?;
        let (first, last) = (hist[0].loss, hist[hist.len() - 1].loss);
        let drop = 1.0 - last / first;
        pass &= drop >= 0.5;
        notes.push(format!("{} {first:.3}→{last:.4} (−{:.1}%)", cfg.attention[0], 100.0 * drop));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 300.0, format!("{}; {secs:.1}s (<300s)", notes.join(", ")))
}

/// Worst finite-difference error of `bwd` against `fwd` under the linear
/// functional `Σ w·y` with random `w`.
fn fd_op<T: Scalar>(
    inputs: &[Tensor<T>],
    fwd: &dyn Fn(&[Tensor<T>]) -> Tensor<T>,
    bwd: &dyn Fn(&[Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>,
    rng: &mut ChaCha8Rng,
    eps: f64,
) -> f64 {
    let y = fwd(inputs);
    let w = Tensor::<T>::randn(y.shape(), 1.0, rng);
    let grads = bwd(inputs, &w);
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let err = fd_gradcheck(
            |th| {
                let mut x = inputs.to_vec();
                x[i].data_mut().copy_from_slice(th);
                fwd(&x).data().iter().zip(w.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
            },
            inputs[i].data(),
            g.data(),
            T::from_f64(eps),
        );
        worst = worst.max(err);
    }
    worst
}

fn fd_suite<T: Scalar>(seeds: u64, eps: f64) -> Result<BTreeMap<&'static str, f64>> {
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let r = &mut rng;

        let x = Tensor::<T>::randn(&[5, 6], 1.0, r);
        let w = Tensor::<T>::randn(&[6, 4], 0.5, r);
        let e = fd_op(&[x, w], &|a| linear(&a[0], &a[1]).unwrap(), &|a, dy| {
            let (dx, dw) = linear_backward(&a[0], &a[1], dy).unwrap();
            vec![dx, dw]
        }, r, eps);
        note("linear", e);

        let x = Tensor::<T>::randn(&[4, 7], 1.5, r);
        let e = fd_op(&[x], &|a| softmax_rows(&a[0]).unwrap(), &|a, dy| {
            vec![softmax_rows_backward(&softmax_rows(&a[0]).unwrap(), dy).unwrap()]
        }, r, eps);
        note("softmax", e);

        let x = Tensor::<T>::randn(&[4, 8], 1.0, r);
        let g = Tensor::<T>::from_fn(&[8], |_| T::from_f64(r.random_range(0.5..1.5)));
        let ne = T::from_f64(1e-5);
        let e = fd_op(&[x, g], &|a| rmsnorm(&a[0], &a[1], ne).unwrap(), &|a, dy| {
            let (dx, dg) = rmsnorm_backward(&a[0], &a[1], ne, dy).unwrap();
            vec![dx, dg]
        }, r, eps);
        note("rmsnorm", e);

        let x = Tensor::<T>::randn(&[3, 9], 2.0, r);
        let e = fd_op(&[x], &|a| silu(&a[0]), &|a, dy| vec![silu_backward(&a[0], dy).unwrap()], r, eps);
        note("silu", e);

        let off = r.random_range(0..5000usize);
        let pos: Vec<usize> = (off..off + 5).collect();
        let x = Tensor::<T>::randn(&[5, 2, 8], 1.0, r);
        let e = fd_op(&[x], &|a| rope(&a[0], &pos, 10000.0).unwrap(), &|_, dy| {
            vec![rope_backward(dy, &pos, 10000.0).unwrap()]
        }, r, eps);
        note("rope", e);

        let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..11)).collect();
        let x = Tensor::<T>::randn(&[6, 11], 2.0, r);
        let e = fd_op(&[x], &|a| Tensor::full(&[1], cross_entropy(&a[0], &targets).unwrap().0), &|a, dy| {
            let (_, mut g) = cross_entropy(&a[0], &targets).unwrap();
            g.scale(dy.data()[0]);
            vec![g]
        }, r, eps);
        note("cross_entropy", e);

        // Attention over two query pages, ten past tokens (one partial page)
        // with a random per-query-page selection, GQA group 2.
        let (p, qh, kvh, d, rows, past): (usize, usize, usize, usize, usize, usize) = (4, 4, 2, 8, 8, 10);
        let sel: Selection = (0..2)
            .map(|_| (0..past.div_ceil(p)).filter(|_| r.random_bool(0.6)).collect())
            .collect();
        let inputs = [
            Tensor::<T>::randn(&[rows, qh, d], 1.0, r),
            Tensor::<T>::randn(&[rows, kvh, d], 1.0, r),
            Tensor::<T>::randn(&[rows, kvh, d], 1.0, r),
            Tensor::<T>::randn(&[past, kvh, d], 1.0, r),
            Tensor::<T>::randn(&[past, kvh, d], 1.0, r),
        ];
        let cache_of = |a: &[Tensor<T>]| {
            let mut c = PagedCache::<T>::with_geometry(1, p, kvh, d);
            c.append_chunk(0, &a[3], &a[4]).unwrap();
            c
        };
        let e = fd_op(&inputs, &|a| attn_forward(&cache_of(a), 0, &a[0], &a[1], &a[2], &sel).unwrap().out, &|a, dy| {
            let mut c = cache_of(a);
            let saved = attn_forward(&c, 0, &a[0], &a[1], &a[2], &sel).unwrap();
            let (dq, dk, dv) = attn_backward(&mut c, 0, dy, &a[0], &a[1], &a[2], &saved).unwrap();
            let (gk, gv) = c.read_grads(0, 0..past).unwrap();
            vec![dq, dk, dv, gk, gv]
        }, r, eps);
        note("attention", e);
    }
    Ok(worst)
}

/// End-to-end chunked model: a sample of coordinates of every matrix.
fn fd_model<T: Scalar>(mode: AttentionMode, seeds: u64, eps: f64) -> Result<f64> {
    let cfg = ModelConfig {
        d_model: 16,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 4,
        d_ff: 32,
        vocab_size: 32,
        chunk_size: 8,
        page_size: 4,
        retrieval_budget: 4,
        local_window: 1,
        ..ModelConfig::default()
    }
    .with_mode(mode);
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let p = ModelParams::<f64>::init(&cfg, 2000 + seed)?.cast::<T>();
        let toks = tokens(3 * cfg.chunk_size + 3, cfg.vocab_size, seed);
        let mut tr = Trainer::new(&cfg)?;
        let g = tr.train_step(&p, &toks, None)?.grads;
        let n = p.named().len();
        for idx in 0..n {
            let theta: Vec<T> = p.named()[idx].1.data().iter().take(8).copied().collect();
            let analytic: Vec<T> = g.named()[idx].1.data().iter().take(8).copied().collect();
            let mut probe = p.clone();
            let err = fd_gradcheck(
                |th| {
                    probe.named_mut()[idx].1.data_mut()[..th.len()].copy_from_slice(th);
                    tr.eval_loss(&probe, &toks).unwrap().as_f64()
                },
                &theta,
                &analytic,
                T::from_f64(eps),
            );
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

// 8. Finite differences across ops and seeds.
fn fd_checks() -> Result<Outcome> {
    const SEEDS: u64 = 20;
    let f32s = fd_suite::<f32>(SEEDS, 1e-2)?;
    let f64s = fd_suite::<f64>(SEEDS, 1e-6)?;
    let m64 = [AttentionMode::Dense, AttentionMode::Topk, AttentionMode::Local]
        .iter()
        .map(|&m| fd_model::<f64>(m, SEEDS, 1e-6))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let w32 = f32s.values().copied().fold(0.0, f64::max);
    let w64 = f64s.values().copied().fold(0.0, f64::max).max(m64);
    let per_op: Vec<String> = f32s.iter().map(|(k, v)| format!("{k} {v:.1e}/{:.1e}", f64s[k])).collect();
    outcome(
        w32 < 1e-3 && w64 < 1e-6,
        format!(
            "{SEEDS} seeds, worst f32 {w32:.1e} (<1e-3), f64 {w64:.1e} (<1e-6); per op f32/f64: {}; chunked model f64 {m64:.1e}",
            per_op.join(", ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 8] = [
        ("gradient equivalence", gradient_equivalence),
        ("constant activation memory", constant_activation_memory),
        ("paged vs contiguous memory", paged_vs_contiguous),
        ("sparse degeneracy and monotonicity", sparse_degeneracy_and_monotonicity),
        ("offload transparency", offload_transparency),
        ("schedule correctness", schedule_correctness),
        ("optimization sanity", optimization_sanity),
        ("finite-difference suite", fd_checks),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let o = run().unwrap_or_else(|e| Outcome { pass: false, detail: format!("error: {e}") });
        println!("criterion {} [{}] {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
