//! Full-sequence reference model and gradient comparison.
//!
//! [`full_forward_backward`] evaluates the same network as the chunked trainer
//! in one pass over the whole sequence with a materialised `T × T` causal
//! softmax per head. It shares the elementwise and matmul kernels with the
//! trainer, so the chunking, caching and gradient-page plumbing are the only
//! difference between the two. [`naive_attention`] is a plain triple loop kept
//! to cross-check attention on its own.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamGrads};
use crate::ops::{
    cross_entropy_scaled, linear, linear_backward, matmul, matmul_nt, matmul_tn, rmsnorm, rmsnorm_backward, rope,
    rope_backward, silu, silu_backward, softmax_rows, softmax_rows_backward,
};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{TapeMeter, Trainer};

/// `[T × H × d]` → head `h` as `[T × d]`.
fn head<T: Scalar>(x: &Tensor<T>, h: usize) -> Tensor<T> {
    let (t, nh, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[t, d], |i| x.data()[((i / d) * nh + h) * d + i % d])
}

fn add_head<T: Scalar>(dst: &mut Tensor<T>, h: usize, src: &Tensor<T>) {
    let (nh, d) = (dst.shape()[1], dst.shape()[2]);
    for (i, &v) in src.data().iter().enumerate() {
        dst.data_mut()[((i / d) * nh + h) * d + i % d] += v;
    }
}

struct LayerTape<T> {
    x: Tensor<T>,
    a: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention probabilities per query head, `[T × T]` each.
    probs: Vec<Tensor<T>>,
    o: Tensor<T>,
    h: Tensor<T>,
    b: Tensor<T>,
    up: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Scalar> LayerTape<T> {
    fn bytes(&self) -> usize {
        [&self.x, &self.a, &self.q, &self.k, &self.v, &self.o, &self.h, &self.b, &self.up, &self.act]
            .iter()
            .map(|t| t.bytes())
            .sum::<usize>()
            + self.probs.iter().map(Tensor::bytes).sum::<usize>()
    }
}

/// Loss and parameter gradients over the whole sequence in one pass. Saved
/// activations are charged to `meter`.
pub fn full_forward_backward<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    tokens: &[usize],
    meter: &mut TapeMeter,
) -> Result<(T, ParamGrads<T>)> {
    cfg.validate()?;
    let n = tokens.len();
    if n < 2 {
        return Err(Error::Config(format!("a training sequence needs at least 2 tokens, got {n}")));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::OutOfRange(format!("token {bad} with vocab {}", cfg.vocab_size)));
    }
    let eps = T::from_f64(cfg.norm_eps);
    let (qh, kvh, hd, group) = (cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim, cfg.group_size());
    let scale = T::one() / T::from_usize(hd).sqrt();
    let pos: Vec<usize> = (0..n).collect();

    let mut x = Tensor::zeros(&[n, cfg.d_model]);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(params.embed.row(tok));
    }
    let mut tapes = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let a = rmsnorm(&x, &lp.attn_norm, eps)?;
        let q = rope(&linear(&a, &lp.wq)?.reshape(&[n, qh, hd])?, &pos, cfg.rope_base)?;
        let k = rope(&linear(&a, &lp.wk)?.reshape(&[n, kvh, hd])?, &pos, cfg.rope_base)?;
        let v = linear(&a, &lp.wv)?.reshape(&[n, kvh, hd])?;
        let mut o = Tensor::zeros(&[n, qh, hd]);
        let mut probs = Vec::with_capacity(qh);
        for h in 0..qh {
            let (qh_, kg, vg) = (head(&q, h), head(&k, h / group), head(&v, h / group));
            let mut s = matmul_nt(&qh_, &kg)?;
            for i in 0..n {
                let row = s.row_mut(i);
                for (j, e) in row.iter_mut().enumerate() {
                    *e = if j <= i { *e * scale } else { T::neg_infinity() };
                }
            }
            let p = softmax_rows(&s)?;
            add_head(&mut o, h, &matmul(&p, &vg)?);
            probs.push(p);
        }
        let mut h = linear(&o.clone().reshape(&[n, cfg.q_dim()])?, &lp.wo)?;
        h.add_assign(&x)?;
        let b = rmsnorm(&h, &lp.mlp_norm, eps)?;
        let up = linear(&b, &lp.wup)?;
        let act = silu(&up);
        let mut y = linear(&act, &lp.wdown)?;
        y.add_assign(&h)?;
        let lt = LayerTape { x, a, q, k, v, probs, o, h, b, up, act };
        meter.alloc(lt.bytes());
        tapes.push(lt);
        x = y;
    }
    let f = rmsnorm(&x, &params.final_norm, eps)?;
    let logits = linear(&f, &params.unembed)?;
    let (loss, dlogits) = cross_entropy_scaled(&logits, &tokens[1..], n - 1)?;
    let head_bytes = x.bytes() + f.bytes() + dlogits.bytes();
    meter.alloc(head_bytes);

    let mut grads = ModelParams::zeros_like(params);
    grads.unembed = matmul_tn(&f, &dlogits)?;
    let df = matmul_nt(&dlogits, &params.unembed)?;
    let (mut dx, dg) = rmsnorm_backward(&x, &params.final_norm, eps, &df)?;
    grads.final_norm = dg;
    meter.free(head_bytes);

    for (l, lt) in tapes.into_iter().enumerate().rev() {
        let lp = &params.layers[l];
        let gl = &mut grads.layers[l];
        let (dact, dwd) = linear_backward(&lt.act, &lp.wdown, &dx)?;
        gl.wdown = dwd;
        let dup = silu_backward(&lt.up, &dact)?;
        let (db, dwu) = linear_backward(&lt.b, &lp.wup, &dup)?;
        gl.wup = dwu;
        let (dhn, dg2) = rmsnorm_backward(&lt.h, &lp.mlp_norm, eps, &db)?;
        gl.mlp_norm = dg2;
        let mut dh = dx;
        dh.add_assign(&dhn)?;

        let (do2, dwo) = linear_backward(&lt.o.clone().reshape(&[n, cfg.q_dim()])?, &lp.wo, &dh)?;
        gl.wo = dwo;
        let d_out = do2.reshape(&[n, qh, hd])?;
        let mut dq = Tensor::zeros(&[n, qh, hd]);
        let mut dk = Tensor::zeros(&[n, kvh, hd]);
        let mut dv = Tensor::zeros(&[n, kvh, hd]);
        for (h, p) in lt.probs.iter().enumerate() {
            let g = h / group;
            let (qh_, kg, vg, doh) = (head(&lt.q, h), head(&lt.k, g), head(&lt.v, g), head(&d_out, h));
            add_head(&mut dv, g, &matmul_tn(p, &doh)?);
            let dp = matmul_nt(&doh, &vg)?;
            let mut ds = softmax_rows_backward(p, &dp)?;
            ds.scale(scale);
            add_head(&mut dq, h, &matmul(&ds, &kg)?);
            add_head(&mut dk, g, &matmul_tn(&ds, &qh_)?);
        }
        let dq = rope_backward(&dq, &pos, cfg.rope_base)?.reshape(&[n, cfg.q_dim()])?;
        let dk = rope_backward(&dk, &pos, cfg.rope_base)?.reshape(&[n, cfg.kv_dim()])?;
        let dv = dv.reshape(&[n, cfg.kv_dim()])?;
        let (mut da, dwq) = linear_backward(&lt.a, &lp.wq, &dq)?;
        let (da_k, dwk) = linear_backward(&lt.a, &lp.wk, &dk)?;
        let (da_v, dwv) = linear_backward(&lt.a, &lp.wv, &dv)?;
        gl.wq = dwq;
        gl.wk = dwk;
        gl.wv = dwv;
        da.add_assign(&da_k)?;
        da.add_assign(&da_v)?;
        let (dxn, dg1) = rmsnorm_backward(&lt.x, &lp.attn_norm, eps, &da)?;
        gl.attn_norm = dg1;
        dh.add_assign(&dxn)?;
        dx = dh;
        meter.free(lt.bytes());
    }
    for (t, &tok) in tokens.iter().enumerate() {
        for (e, &g) in grads.embed.row_mut(tok).iter_mut().zip(dx.row(t)) {
            *e += g;
        }
    }
    Ok((loss, grads))
}

/// Causal attention by explicit loops: `q [T × qh × d]`, `k`/`v` `[T × kvh × d]`.
pub fn naive_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, qh, d) = match q.shape() {
        [a, b, c] => (*a, *b, *c),
        s => return Err(Error::dim("naive_attention", format!("q {s:?}"))),
    };
    let kvh = k.shape().get(1).copied().unwrap_or(0);
    if k.shape() != [n, kvh, d] || v.shape() != k.shape() || kvh == 0 || qh % kvh != 0 {
        return Err(Error::dim("naive_attention", format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let group = qh / kvh;
    let scale = 1.0 / (d as f64).sqrt();
    let at = |t: &Tensor<T>, i: usize, h: usize, hs: usize, x: usize| t.data()[(i * hs + h) * d + x].as_f64();
    let mut out = Tensor::zeros(&[n, qh, d]);
    for i in 0..n {
        for h in 0..qh {
            let g = h / group;
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|x| at(q, i, h, qh, x) * at(k, j, g, kvh, x)).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for x in 0..d {
                let val: f64 = (0..=i).map(|j| w[j] * at(v, j, g, kvh, x)).sum::<f64>() / z;
                out.data_mut()[(i * qh + h) * d + x] = T::from_f64(val);
            }
        }
    }
    Ok(out)
}

/// Gradient error for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixError {
    pub layer: Option<usize>,
    pub matrix: String,
    /// `‖a − b‖₂`
    pub l2: f64,
    /// `‖a − b‖₂ / ‖b‖₂`; zero when both vanish.
    pub rel: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub entries: Vec<MatrixError>,
    pub max_rel: f64,
    /// Mean of `l2` over the projection, embedding and unembedding matrices.
    pub mean_l2: f64,
}

impl GradReport {
    pub fn get(&self, layer: Option<usize>, matrix: &str) -> Option<&MatrixError> {
        self.entries.iter().find(|e| e.layer == layer && e.matrix == matrix)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-tensor error of `a` against reference `b`.
pub fn compare_grads<T: Scalar>(a: &ParamGrads<T>, b: &ParamGrads<T>) -> Result<GradReport> {
    let (na, nb) = (a.named(), b.named());
    if na.len() != nb.len() {
        return Err(Error::dim("compare_grads", "parameter sets differ"));
    }
    let mut r = GradReport::default();
    let (mut sum, mut count) = (0.0, 0);
    for ((name, ta), (name_b, tb)) in na.iter().zip(&nb) {
        if name != name_b || ta.shape() != tb.shape() {
            return Err(Error::dim(
                "compare_grads",
                format!("{name} {:?} vs {name_b} {:?}", ta.shape(), tb.shape()),
            ));
        }
        let l2 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = tb.l2_norm();
        let rel = if l2 == 0.0 { 0.0 } else if norm == 0.0 { f64::INFINITY } else { l2 / norm };
        r.max_rel = r.max_rel.max(rel);
        if name.matrix.is_projection() {
            sum += l2;
            count += 1;
        }
        r.entries.push(MatrixError { layer: name.layer, matrix: name.matrix.as_str().to_string(), l2, rel });
    }
    r.mean_l2 = if count > 0 { sum / count as f64 } else { 0.0 };
    Ok(r)
}

/// One row of the budget sweep table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: usize,
    pub context: usize,
    pub l2: f64,
}

pub fn write_budget_csv<W: Write>(rows: &[BudgetRow], mut w: W) -> Result<()> {
    writeln!(w, "budget,context,l2")?;
    for r in rows {
        writeln!(w, "{},{},{:e}", r.budget, r.context, r.l2)?;
    }
    Ok(())
}

/// Which implementation [`activation_peak_probe`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeRun {
    Chunked,
    FullSequence,
}

/// Largest number of saved-activation bytes live at once during one
/// training step on `tokens`.
pub fn activation_peak_probe<T: Scalar>(
    run: ProbeRun,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    tokens: &[usize],
) -> Result<usize> {
    match run {
        ProbeRun::Chunked => Ok(Trainer::new(cfg)?.train_step(params, tokens, None)?.tape_peak_bytes),
        ProbeRun::FullSequence => {
            let mut meter = TapeMeter::default();
            full_forward_backward(cfg, params, tokens, &mut meter)?;
            Ok(meter.peak())
        }
    }
}
