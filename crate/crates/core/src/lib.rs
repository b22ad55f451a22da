//! Hierarchical LFQ video tokenizer with a text-conditioned autoregressive
//! token generator, trained and evaluated on procedural synthetic video.
//!
//! The pipeline: `synth` makes clips and captions, `vae` encodes them into
//! multi-layer LFQ token grids, `mask` finds temporally redundant tokens,
//! `codec` serializes token streams and videos bit-exactly, `generator`
//! samples new token streams from captions with CFG and a KV-cache, and
//! `train` fits both models on CPU. `tensor` is the in-crate autodiff
//! engine all of it runs on.

pub mod artifact;
pub mod codec;
pub mod generator;
pub mod lfq;
pub mod mask;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vae;
pub mod video;

use std::sync::OnceLock;

/// Worker threads for batched kernels. `HITOK_THREADS` caps internal
/// parallelism; the default of 1 keeps every run bit-deterministic with
/// the sequential order (parallel results are identical by construction,
/// but 1 is the conservative default).
pub fn threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("HITOK_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}
