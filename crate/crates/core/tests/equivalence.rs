//! Chunked training against the full-sequence reference.

use chunktrain_core::model::{AttentionMode, ModelConfig, ModelParams};
use chunktrain_core::ops::fd_gradcheck;
use chunktrain_core::oracle::{compare_grads, full_forward_backward};
use chunktrain_core::trainer::{TapeMeter, Trainer};
use chunktrain_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 8,
        d_ff: 64,
        vocab_size: 64,
        chunk_size: 16,
        page_size: 4,
        retrieval_budget: 8,
        local_window: 2,
        ..ModelConfig::default()
    }
}

fn check_dense<T: Scalar>(cfg: &ModelConfig, t: usize, seed: u64, loss_tol: f64, grad_tol: f64) {
    let p = ModelParams::<f64>::init(cfg, seed).unwrap().cast::<T>();
    let toks = tokens(t, cfg.vocab_size, seed + 100);
    let (ol, og) = full_forward_backward(cfg, &p, &toks, &mut TapeMeter::default()).unwrap();
    let out = Trainer::new(cfg).unwrap().train_step(&p, &toks, None).unwrap();
    let lrel = (out.loss.as_f64() - ol.as_f64()).abs() / ol.as_f64().abs();
    assert!(lrel <= loss_tol, "{} T={t} loss rel {lrel:e}", T::NAME);
    let r = compare_grads(&out.grads, &og).unwrap();
    assert!(r.max_rel <= grad_tol, "{} T={t} grad rel {:e}", T::NAME, r.max_rel);
}

#[test]
fn dense_chunked_matches_reference_for_any_chunk_count() {
    let cfg = small();
    for (s, seed) in [(1, 1), (2, 2), (4, 3), (8, 4)] {
        check_dense::<f64>(&cfg, s * cfg.chunk_size, seed, 1e-12, 1e-10);
        check_dense::<f32>(&cfg, s * cfg.chunk_size, seed, 1e-6, 1e-5);
    }
}

#[test]
fn ragged_final_chunk_matches_reference() {
    let cfg = small();
    check_dense::<f64>(&cfg, 3 * cfg.chunk_size + 5, 9, 1e-12, 1e-10);
}

#[test]
fn single_chunk_loss_matches_reference_closely() {
    let cfg = small();
    let p = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let toks = tokens(cfg.chunk_size, cfg.vocab_size, 6);
    let (ol, _) = full_forward_backward(&cfg, &p, &toks, &mut TapeMeter::default()).unwrap();
    let cl = Trainer::new(&cfg).unwrap().eval_loss(&p, &toks).unwrap();
    assert!((ol - cl).abs() <= 1e-14 * ol.abs(), "{ol} vs {cl}");
}

/// The chunked gradient of a sparse model is the exact gradient of that model
/// with its page selection held fixed; small perturbations keep the selection.
fn fd_chunked(cfg: &ModelConfig, seed: u64) -> f64 {
    let p = ModelParams::<f64>::init(cfg, seed).unwrap();
    let toks = tokens(4 * cfg.chunk_size, cfg.vocab_size, seed + 7);
    let mut tr = Trainer::new(cfg).unwrap();
    let g = tr.train_step(&p, &toks, None).unwrap().grads;
    // Check a subset of coordinates: every matrix of layer 0 and the embedding.
    let mut probe = p.clone();
    let names: Vec<String> = p.named().iter().map(|(n, _)| n.to_string()).collect();
    let mut worst = 0.0f64;
    for (idx, name) in names.iter().enumerate() {
        if name.starts_with("layers.1") || name.ends_with("norm") {
            continue;
        }
        let theta: Vec<f64> = p.named()[idx].1.data().iter().take(24).copied().collect();
        let analytic: Vec<f64> = g.named()[idx].1.data().iter().take(24).copied().collect();
        let err = fd_gradcheck(
            |th| {
                let mut named = probe.named_mut();
                named[idx].1.data_mut()[..th.len()].copy_from_slice(th);
                drop(named);
                tr.eval_loss(&probe, &toks).unwrap()
            },
            &theta,
            &analytic,
            1e-6,
        );
        probe = p.clone();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn sparse_and_local_chunked_gradients_pass_finite_differences() {
    for mode in [AttentionMode::Topk, AttentionMode::Local] {
        let cfg = small().with_mode(mode);
        let err = fd_chunked(&cfg, 11);
        assert!(err < 1e-6, "{mode}: fd error {err:e}");
    }
}

#[test]
fn mixed_layer_modes_are_supported() {
    let mut cfg = small();
    cfg.attention = vec![AttentionMode::Topk, AttentionMode::Dense];
    let err = fd_chunked(&cfg, 12);
    assert!(err < 1e-6, "fd error {err:e}");
}
