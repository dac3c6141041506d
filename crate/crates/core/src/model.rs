//! Toy decoder-only transformer: configuration, parameters and Adam.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Dense,
    #[serde(alias = "topk_sparse", alias = "sparse")]
    Topk,
    Local,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "topk" | "topk_sparse" | "sparse" => Ok(Self::Topk),
            "local" => Ok(Self::Local),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Topk => "topk",
            Self::Local => "local",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ModeSpec {
    All(AttentionMode),
    PerLayer(Vec<AttentionMode>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RawConfig {
    n_layers: usize,
    d_model: usize,
    n_q_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
    d_ff: usize,
    vocab_size: usize,
    chunk_size: usize,
    page_size: usize,
    attention: ModeSpec,
    retrieval_budget: usize,
    local_window: usize,
    rope_base: f64,
    norm_eps: f64,
    score_scale: bool,
    seed: u64,
}

impl Default for RawConfig {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_q_heads: c.n_q_heads,
            n_kv_heads: c.n_kv_heads,
            head_dim: c.head_dim,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            chunk_size: c.chunk_size,
            page_size: c.page_size,
            attention: ModeSpec::All(AttentionMode::Dense),
            retrieval_budget: c.retrieval_budget,
            local_window: c.local_window,
            rope_base: c.rope_base,
            norm_eps: c.norm_eps,
            score_scale: c.score_scale,
            seed: c.seed,
        }
    }
}

/// Model and chunking hyperparameters.
///
/// `retrieval_budget` is in tokens and must be a whole number of pages;
/// `local_window` is in pages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub chunk_size: usize,
    pub page_size: usize,
    pub attention: Vec<AttentionMode>,
    pub retrieval_budget: usize,
    pub local_window: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Apply `1/√head_dim` to page retrieval scores. Off by default.
    pub score_scale: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            d_ff: 128,
            vocab_size: 256,
            chunk_size: 64,
            page_size: 16,
            attention: vec![AttentionMode::Dense; 2],
            retrieval_budget: 128,
            local_window: 2,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            score_scale: false,
            seed: 0,
        }
    }
}

impl TryFrom<RawConfig> for ModelConfig {
    type Error = Error;

    fn try_from(r: RawConfig) -> Result<Self> {
        let attention = match r.attention {
            ModeSpec::All(m) => vec![m; r.n_layers],
            ModeSpec::PerLayer(v) => v,
        };
        let cfg = Self {
            n_layers: r.n_layers,
            d_model: r.d_model,
            n_q_heads: r.n_q_heads,
            n_kv_heads: r.n_kv_heads,
            head_dim: r.head_dim,
            d_ff: r.d_ff,
            vocab_size: r.vocab_size,
            chunk_size: r.chunk_size,
            page_size: r.page_size,
            attention,
            retrieval_budget: r.retrieval_budget,
            local_window: r.local_window,
            rope_base: r.rope_base,
            norm_eps: r.norm_eps,
            score_scale: r.score_scale,
            seed: r.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ModelConfig> for RawConfig {
    fn from(c: ModelConfig) -> Self {
        let attention = match c.attention.first() {
            Some(&m) if c.attention.iter().all(|&x| x == m) => ModeSpec::All(m),
            _ => ModeSpec::PerLayer(c.attention.clone()),
        };
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_q_heads: c.n_q_heads,
            n_kv_heads: c.n_kv_heads,
            head_dim: c.head_dim,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            chunk_size: c.chunk_size,
            page_size: c.page_size,
            attention,
            retrieval_budget: c.retrieval_budget,
            local_window: c.local_window,
            rope_base: c.rope_base,
            norm_eps: c.norm_eps,
            score_scale: c.score_scale,
            seed: c.seed,
        }
    }
}

impl ModelConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("chunk_size", self.chunk_size),
            ("page_size", self.page_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim {} must be even for rotary", self.head_dim));
        }
        if !self.chunk_size.is_multiple_of(self.page_size) {
            return fail(format!(
                "chunk_size {} not divisible by page_size {}",
                self.chunk_size, self.page_size
            ));
        }
        if !self.retrieval_budget.is_multiple_of(self.page_size) {
            return fail(format!(
                "retrieval_budget {} not divisible by page_size {}",
                self.retrieval_budget, self.page_size
            ));
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2".into());
        }
        if self.attention.len() != self.n_layers {
            return fail(format!(
                "{} attention modes for {} layers",
                self.attention.len(),
                self.n_layers
            ));
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps >= 0.0) {
            return fail("rope_base must exceed 1 and norm_eps be non-negative".into());
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: AttentionMode) -> Self {
        self.attention = vec![mode; self.n_layers];
        self
    }

    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn q_dim(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Top-K budget in pages.
    pub fn budget_pages(&self) -> usize {
        self.retrieval_budget / self.page_size
    }

    pub fn pages_per_chunk(&self) -> usize {
        self.chunk_size / self.page_size
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = d * self.q_dim()
            + 2 * d * self.kv_dim()
            + self.q_dim() * d
            + 2 * d * self.d_ff
            + 2 * d;
        2 * self.vocab_size * d + self.n_layers * per_layer + d
    }
}

/// Which matrix a parameter tensor is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matrix {
    Wq,
    Wk,
    Wv,
    Wo,
    Wup,
    Wdown,
    AttnNorm,
    MlpNorm,
    FinalNorm,
    Emb,
    Unemb,
}

impl Matrix {
    pub fn as_str(self) -> &'static str {
        match self {
            Matrix::Wq => "wq",
            Matrix::Wk => "wk",
            Matrix::Wv => "wv",
            Matrix::Wo => "wo",
            Matrix::Wup => "wup",
            Matrix::Wdown => "wdown",
            Matrix::AttnNorm => "attn_norm",
            Matrix::MlpNorm => "mlp_norm",
            Matrix::FinalNorm => "final_norm",
            Matrix::Emb => "emb",
            Matrix::Unemb => "unemb",
        }
    }

    pub fn is_projection(self) -> bool {
        !matches!(self, Matrix::AttnNorm | Matrix::MlpNorm | Matrix::FinalNorm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamName {
    pub layer: Option<usize>,
    pub matrix: Matrix,
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layers.{l}.{}", self.matrix.as_str()),
            None => f.write_str(self.matrix.as_str()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub wup: Tensor<T>,
    pub wdown: Tensor<T>,
}

/// All learnable tensors. Also used as the gradient store, see [`ParamGrads`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
}

pub type ParamGrads<T> = ModelParams<T>;

impl<T: Scalar> ModelParams<T> {
    /// Matrices ~ N(0, d_model^-1/2), norm gains 1. Deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (cfg.d_model as f64).powf(-0.5);
        let d = cfg.d_model;
        let embed = Tensor::randn(&[cfg.vocab_size, d], std, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[d], T::one()),
                wq: Tensor::randn(&[d, cfg.q_dim()], std, &mut rng),
                wk: Tensor::randn(&[d, cfg.kv_dim()], std, &mut rng),
                wv: Tensor::randn(&[d, cfg.kv_dim()], std, &mut rng),
                wo: Tensor::randn(&[cfg.q_dim(), d], std, &mut rng),
                mlp_norm: Tensor::full(&[d], T::one()),
                wup: Tensor::randn(&[d, cfg.d_ff], std, &mut rng),
                wdown: Tensor::randn(&[cfg.d_ff, d], std, &mut rng),
            })
            .collect();
        let final_norm = Tensor::full(&[d], T::one());
        let unembed = Tensor::randn(&[d, cfg.vocab_size], std, &mut rng);
        Ok(Self { embed, layers, final_norm, unembed })
    }

    pub fn zeros_like(other: &Self) -> Self {
        let mut z = other.clone();
        z.zero();
        z
    }

    pub fn zero(&mut self) {
        for (_, t) in self.named_mut() {
            t.fill_zero();
        }
    }

    pub fn named(&self) -> Vec<(ParamName, &Tensor<T>)> {
        let mut out = vec![(ParamName { layer: None, matrix: Matrix::Emb }, &self.embed)];
        for (l, p) in self.layers.iter().enumerate() {
            let n = |matrix| ParamName { layer: Some(l), matrix };
            out.extend([
                (n(Matrix::AttnNorm), &p.attn_norm),
                (n(Matrix::Wq), &p.wq),
                (n(Matrix::Wk), &p.wk),
                (n(Matrix::Wv), &p.wv),
                (n(Matrix::Wo), &p.wo),
                (n(Matrix::MlpNorm), &p.mlp_norm),
                (n(Matrix::Wup), &p.wup),
                (n(Matrix::Wdown), &p.wdown),
            ]);
        }
        out.push((ParamName { layer: None, matrix: Matrix::FinalNorm }, &self.final_norm));
        out.push((ParamName { layer: None, matrix: Matrix::Unemb }, &self.unembed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(ParamName, &mut Tensor<T>)> {
        let mut out = vec![(ParamName { layer: None, matrix: Matrix::Emb }, &mut self.embed)];
        for (l, p) in self.layers.iter_mut().enumerate() {
            let n = |matrix| ParamName { layer: Some(l), matrix };
            out.extend([
                (n(Matrix::AttnNorm), &mut p.attn_norm),
                (n(Matrix::Wq), &mut p.wq),
                (n(Matrix::Wk), &mut p.wk),
                (n(Matrix::Wv), &mut p.wv),
                (n(Matrix::Wo), &mut p.wo),
                (n(Matrix::MlpNorm), &mut p.mlp_norm),
                (n(Matrix::Wup), &mut p.wup),
                (n(Matrix::Wdown), &mut p.wdown),
            ]);
        }
        out.push((ParamName { layer: None, matrix: Matrix::FinalNorm }, &mut self.final_norm));
        out.push((ParamName { layer: None, matrix: Matrix::Unemb }, &mut self.unembed));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Flattened copy of every tensor in [`named`](Self::named) order.
    pub fn flat(&self) -> Vec<T> {
        self.named().into_iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        for (_, t) in self.named_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    attn_norm: p.attn_norm.cast(),
                    wq: p.wq.cast(),
                    wk: p.wk.cast(),
                    wv: p.wv.cast(),
                    wo: p.wo.cast(),
                    mlp_norm: p.mlp_norm.cast(),
                    wup: p.wup.cast(),
                    wdown: p.wdown.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: ModelParams::zeros_like(params),
            v: ModelParams::zeros_like(params),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update at step `state.t + 1`. `grads` is read only.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
    let one = T::one();
    let grads = grads.named();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in
        params.named_mut().into_iter().zip(grads).zip(ms).zip(vs)
    {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((pv, &gv), (mv, vv)) in iter {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
