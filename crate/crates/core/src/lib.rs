//! Chunk-recurrent training for a small decoder-only transformer.
//!
//! A long sequence is split into chunks that run forward one after another,
//! each attending to the paged KV cache left behind by earlier chunks. Per-chunk
//! activations are dropped after the forward step and recomputed during a
//! reverse-order backward, while gradients that flow into past keys and values
//! accumulate in gradient pages mirroring the cache. Attention can be dense,
//! Top-K page-sparse or local, and page residency can be driven by a simulated
//! two-tier offload scheduler.

pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod model;
pub mod ops;
pub mod oracle;
pub mod paged_kv;
pub mod tensor;
pub mod tiered;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
