//! Decoder-only transformer over the hierarchical token stream.
//!
//! A sequence is the right-padded caption prefix followed by the video
//! tokens ordered coarsest layer first, each layer in (t, h, w) raster
//! order. Positions carry 3D rotary coordinates: text tokens sit at
//! (index, 0, 0), video tokens at their latent grid coordinates. Layer
//! identity is a learned additive segment embedding (text has its own
//! segment). Per-layer input embedding tables and output heads; the mask
//! is fully causal everywhere.

pub mod infer;
pub mod sampling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::{self, CaptionError};
use crate::tensor::params::{fan_in_bound, init_uniform};
use crate::tensor::{Graph, ParamStore, Real, Tensor, TensorError, VarId};
use crate::vae::{HierarchyConfig, VaeError};

const EMBED_INIT: f64 = 0.02;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("incompatible configs: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Lfq(#[from] crate::lfq::LfqError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub rope_alloc: [usize; 3],
    pub ffn_mult: usize,
    pub text_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            blocks: 4,
            hidden: 128,
            heads: 4,
            head_dim: 32,
            rope_alloc: [12, 10, 10],
            ffn_mult: 4,
            text_len: 8,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.hidden != self.heads * self.head_dim {
            return Err(GenError::Config(format!(
                "hidden {} != heads {} * head_dim {}",
                self.hidden, self.heads, self.head_dim
            )));
        }
        if self.rope_alloc.iter().sum::<usize>() != self.head_dim
            || self.rope_alloc.iter().any(|a| a % 2 != 0)
        {
            return Err(GenError::Config(format!(
                "rope allocation {:?} must be even per axis and sum to head dim {}",
                self.rope_alloc, self.head_dim
            )));
        }
        if self.blocks == 0 || self.ffn_mult == 0 || self.text_len < 2 {
            return Err(GenError::Config("blocks/ffn_mult/text_len too small".into()));
        }
        Ok(())
    }
}

/// Stream layout: text prefix, then video layers coarsest first.
#[derive(Clone, Debug)]
pub struct SequenceLayout {
    pub text_len: usize,
    pub video_len: usize,
    /// RoPE coordinates per stream position.
    pub positions: Vec<[u32; 3]>,
    /// Segment-embedding id per position: video layer id, or M for text.
    pub segments: Vec<u32>,
    /// Per video layer m (densest-first indexing): [start, end) in stream
    /// coordinates.
    pub layer_ranges: Vec<(usize, usize)>,
    /// Vocabulary size per layer, densest first.
    pub vocab: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(hier: &HierarchyConfig, text_len: usize) -> Self {
        let m_count = hier.layers.len();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        for i in 0..text_len {
            positions.push([i as u32, 0, 0]);
            segments.push(m_count as u32);
        }
        let mut layer_ranges = vec![(0usize, 0usize); m_count];
        for m in (0..m_count).rev() {
            let start = positions.len();
            let [t, h, w] = hier.layers[m].latent_shape;
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        positions.push([ti as u32, hi as u32, wi as u32]);
                        segments.push(m as u32);
                    }
                }
            }
            layer_ranges[m] = (start, positions.len());
        }
        SequenceLayout {
            text_len,
            video_len: positions.len() - text_len,
            positions,
            segments,
            layer_ranges,
            vocab: hier.layers.iter().map(|l| 1usize << l.quant_dim).collect(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.text_len + self.video_len
    }

    /// Video layer owning stream position p (densest-first layer index).
    pub fn layer_of(&self, p: usize) -> Option<usize> {
        self.layer_ranges
            .iter()
            .position(|&(s, e)| p >= s && p < e)
    }

    /// Layer order as emitted: coarsest first.
    pub fn emission_order(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.layer_ranges.len()).rev()
    }
}

/// Initializes generator parameters; draw order is fixed so a seed fully
/// determines the store.
pub fn init_params<T: Real>(
    cfg: &GenConfig,
    hier: &HierarchyConfig,
    seed: u64,
) -> Result<ParamStore<T>, GenError> {
    cfg.validate()?;
    hier.validate(false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = cfg.hidden;
    let m_count = hier.layers.len();

    store.insert(
        "gen.text_embed",
        init_uniform(&mut rng, &[synth::vocab_size(), d], EMBED_INIT),
    )?;
    for (m, l) in hier.layers.iter().enumerate() {
        store.insert(
            &format!("gen.tok_embed.layer{m}"),
            init_uniform(&mut rng, &[1 << l.quant_dim, d], EMBED_INIT),
        )?;
    }
    store.insert(
        "gen.uncond_embed",
        init_uniform(&mut rng, &[cfg.text_len, d], EMBED_INIT),
    )?;
    store.insert(
        "gen.seg_embed",
        init_uniform(&mut rng, &[m_count + 1, d], EMBED_INIT),
    )?;
    for b in 0..cfg.blocks {
        let p = format!("gen.block{b}");
        store.insert(&format!("{p}.ln1.gain"), Tensor::full(&[d], T::one()))?;
        store.insert(&format!("{p}.ln1.bias"), Tensor::zeros(&[d]))?;
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(
                &format!("{p}.attn.{w}"),
                init_uniform(&mut rng, &[d, d], fan_in_bound(d)),
            )?;
        }
        store.insert(&format!("{p}.ln2.gain"), Tensor::full(&[d], T::one()))?;
        store.insert(&format!("{p}.ln2.bias"), Tensor::zeros(&[d]))?;
        store.insert(
            &format!("{p}.mlp.w1"),
            init_uniform(&mut rng, &[d, d * cfg.ffn_mult], fan_in_bound(d)),
        )?;
        store.insert(
            &format!("{p}.mlp.w2"),
            init_uniform(&mut rng, &[d * cfg.ffn_mult, d], fan_in_bound(d * cfg.ffn_mult)),
        )?;
    }
    store.insert("gen.final_ln.gain", Tensor::full(&[d], T::one()))?;
    store.insert("gen.final_ln.bias", Tensor::zeros(&[d]))?;
    for (m, l) in hier.layers.iter().enumerate() {
        store.insert(
            &format!("gen.head.layer{m}"),
            init_uniform(&mut rng, &[d, 1 << l.quant_dim], fan_in_bound(d)),
        )?;
    }
    Ok(store)
}

pub(crate) type Binding = std::collections::BTreeMap<String, VarId>;

fn bound<T: Real>(binding: &Binding, name: &str) -> Result<VarId, GenError> {
    let _ = std::marker::PhantomData::<T>;
    binding
        .get(name)
        .copied()
        .ok_or_else(|| GenError::Tensor(TensorError::UnknownParam(name.to_string())))
}

/// Dropout probabilities for the training path; zeros at evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct DropoutCfg {
    pub residual: f64,
    pub ffn: f64,
}

/// Per-layer logits of a full-sequence (teacher-forced) forward pass.
pub struct ForwardOutput {
    /// For layer m: logits [B * N_m, vocab_m] at the positions that
    /// predict layer m's tokens (the stream positions one to the left).
    pub layer_logits: Vec<VarId>,
    /// Final hidden states [B, L, hidden].
    pub hidden: VarId,
}

/// Builds the training forward pass over a batch of sequences.
///
/// `text_ids` is [B][text_len]; `video_ids` is [B][video_len] in stream
/// (coarse-to-dense) order; `cond_drop[b]` replaces sample b's text prefix
/// with the learned unconditional embeddings.
#[allow(clippy::too_many_arguments)]
pub fn forward_train<T: Real>(
    g: &mut Graph<T>,
    binding: &Binding,
    cfg: &GenConfig,
    layout: &SequenceLayout,
    text_ids: &[Vec<u32>],
    video_ids: &[Vec<u32>],
    cond_drop: &[bool],
    dropout: DropoutCfg,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOutput, GenError> {
    let b = text_ids.len();
    if b == 0 || video_ids.len() != b || cond_drop.len() != b {
        return Err(GenError::Config("empty or ragged batch".into()));
    }
    let (lt, lv) = (layout.text_len, layout.video_len);
    for (t, v) in text_ids.iter().zip(video_ids) {
        if t.len() != lt || v.len() != lv {
            return Err(GenError::Config(format!(
                "sequence lengths {}/{} do not match layout {}/{}",
                t.len(),
                v.len(),
                lt,
                lv
            )));
        }
    }
    let d = cfg.hidden;

    // text prefix: embedded caption, or the unconditional embeddings for
    // dropped samples, selected by a constant 0/1 mix
    let text_flat: Vec<u32> = text_ids.iter().flatten().copied().collect();
    let text_table = bound::<T>(binding, "gen.text_embed")?;
    let text_emb = g.embed_lookup(text_table, &text_flat, &[b, lt])?;
    let text_emb = {
        let uncond = bound::<T>(binding, "gen.uncond_embed")?;
        let uncond_flat = g.reshape(uncond, &[lt * d])?;
        let uncond_tiled = g.broadcast_vec(uncond_flat, &[b])?;
        let uncond_tiled = g.reshape(uncond_tiled, &[b, lt, d])?;
        let mut keep = vec![T::zero(); b * lt * d];
        let mut drop = vec![T::zero(); b * lt * d];
        for (bi, &dropped) in cond_drop.iter().enumerate() {
            let fill = if dropped { &mut drop } else { &mut keep };
            fill[bi * lt * d..(bi + 1) * lt * d]
                .iter_mut()
                .for_each(|v| *v = T::one());
        }
        let keep = g.constant(&[b, lt, d], keep)?;
        let drop = g.constant(&[b, lt, d], drop)?;
        let kept = g.mul(text_emb, keep)?;
        let dropped = g.mul(uncond_tiled, drop)?;
        g.add(kept, dropped)?
    };

    // video tokens: per-layer tables, concatenated in stream order
    let mut parts = vec![text_emb];
    for m in layout.emission_order() {
        let (s, e) = layout.layer_ranges[m];
        let n = e - s;
        let mut ids = Vec::with_capacity(b * n);
        for v in video_ids {
            ids.extend_from_slice(&v[s - lt..e - lt]);
        }
        let table = bound::<T>(binding, &format!("gen.tok_embed.layer{m}"))?;
        parts.push(g.embed_lookup(table, &ids, &[b, n])?);
    }
    let x = g.concat(&parts, 1)?;
    let seg_table = bound::<T>(binding, "gen.seg_embed")?;
    let mut x = g.segment_embed(x, seg_table, &layout.segments)?;

    let l = layout.total_len();
    for blk in 0..cfg.blocks {
        let p = format!("gen.block{blk}");
        let ln1g = bound::<T>(binding, &format!("{p}.ln1.gain"))?;
        let ln1b = bound::<T>(binding, &format!("{p}.ln1.bias"))?;
        let h = g.layer_norm(x, ln1g, ln1b)?;
        let wq = bound::<T>(binding, &format!("{p}.attn.wq"))?;
        let wk = bound::<T>(binding, &format!("{p}.attn.wk"))?;
        let wv = bound::<T>(binding, &format!("{p}.attn.wv"))?;
        let wo = bound::<T>(binding, &format!("{p}.attn.wo"))?;
        let to_heads = |g: &mut Graph<T>, t: VarId| -> Result<VarId, GenError> {
            let r = g.reshape(t, &[b, l, cfg.heads, cfg.head_dim])?;
            Ok(g.permute(r, &[0, 2, 1, 3])?)
        };
        let q = g.linear(h, wq, None)?;
        let k = g.linear(h, wk, None)?;
        let v = g.linear(h, wv, None)?;
        let q = to_heads(g, q)?;
        let k = to_heads(g, k)?;
        let v = to_heads(g, v)?;
        let q = g.rope3d(q, cfg.rope_alloc, &layout.positions)?;
        let k = g.rope3d(k, cfg.rope_alloc, &layout.positions)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.affine(scores, 1.0 / (cfg.head_dim as f64).sqrt(), 0.0)?;
        let attn = g.causal_softmax(scores)?;
        let ctx = g.matmul_nn(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        let proj = g.linear(ctx, wo, None)?;
        let proj = g.dropout(proj, dropout.residual, rng)?;
        x = g.add(x, proj)?;

        let ln2g = bound::<T>(binding, &format!("{p}.ln2.gain"))?;
        let ln2b = bound::<T>(binding, &format!("{p}.ln2.bias"))?;
        let h2 = g.layer_norm(x, ln2g, ln2b)?;
        let w1 = bound::<T>(binding, &format!("{p}.mlp.w1"))?;
        let w2 = bound::<T>(binding, &format!("{p}.mlp.w2"))?;
        let mid = g.linear(h2, w1, None)?;
        let mid = g.gelu(mid)?;
        let mid = g.dropout(mid, dropout.ffn, rng)?;
        let out = g.linear(mid, w2, None)?;
        let out = g.dropout(out, dropout.residual, rng)?;
        x = g.add(x, out)?;
    }
    let fg = bound::<T>(binding, "gen.final_ln.gain")?;
    let fb = bound::<T>(binding, "gen.final_ln.bias")?;
    let hidden = g.layer_norm(x, fg, fb)?;

    // layer-m logits come from the positions immediately before layer m's
    // tokens (shifted supervision)
    let mut layer_logits = vec![VarId(usize::MAX); layout.layer_ranges.len()];
    for (m, &(s, e)) in layout.layer_ranges.iter().enumerate() {
        let n = e - s;
        let sl = g.slice(hidden, 1, s - 1, n)?;
        let flat = g.reshape(sl, &[b * n, d])?;
        let head = bound::<T>(binding, &format!("gen.head.layer{m}"))?;
        layer_logits[m] = g.linear(flat, head, None)?;
    }
    Ok(ForwardOutput { layer_logits, hidden })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn desk() -> (GenConfig, HierarchyConfig, SequenceLayout) {
        let hier = HierarchyConfig::desk_default();
        let cfg = GenConfig::default();
        let layout = SequenceLayout::new(&hier, cfg.text_len);
        (cfg, hier, layout)
    }

    #[test]
    fn layout_orders_layers_coarse_to_dense() {
        let (_, _, layout) = desk();
        assert_eq!(layout.total_len(), 8 + 73);
        assert_eq!(layout.video_len, 73);
        // coarsest (layer 2) first: one token right after the text
        assert_eq!(layout.layer_ranges[2], (8, 9));
        assert_eq!(layout.layer_ranges[1], (9, 17));
        assert_eq!(layout.layer_ranges[0], (17, 81));
        assert_eq!(layout.layer_of(8), Some(2));
        assert_eq!(layout.layer_of(17), Some(0));
        assert_eq!(layout.layer_of(5), None);
        // raster order within a layer is lexicographic in (t, h, w)
        let base = 17;
        assert_eq!(layout.positions[base], [0, 0, 0]);
        assert_eq!(layout.positions[base + 1], [0, 0, 1]);
        assert_eq!(layout.positions[base + 4], [0, 1, 0]);
        assert_eq!(layout.positions[base + 16], [1, 0, 0]);
        // segment ids: text = M, video = layer id
        assert_eq!(layout.segments[0], 3);
        assert_eq!(layout.segments[8], 2);
        assert_eq!(layout.segments[80], 0);
    }

    #[test]
    fn rope_identity_at_origin_and_norm_preservation() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_vec(&[1, 1, 2, 12], (0..24).map(|i| (i as f64) / 7.0 - 1.5).collect())
            .unwrap();
        let xi = g.leaf(&x, false).unwrap();
        let y = g
            .rope3d(xi, [4, 4, 4], &[[0, 0, 0], [3, 1, 2]])
            .unwrap();
        let out = g.data(y);
        // position (0,0,0) is the identity rotation
        assert_eq!(&out[..12], &x.data()[..12]);
        // rotations preserve the norm
        let n0: f64 = x.data()[12..].iter().map(|v| v * v).sum();
        let n1: f64 = out[12..].iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-9);
    }

    #[test]
    fn rope_relative_offset_property_all_axes() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let alloc = [4usize, 4, 4];
        for _ in 0..100 {
            let q: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = [
                rng.random_range(0..30u32),
                rng.random_range(0..30u32),
                rng.random_range(0..30u32),
            ];
            let delta = [
                rng.random_range(0..10u32),
                rng.random_range(0..10u32),
                rng.random_range(0..10u32),
            ];
            let pd = [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
            let rot = |v: &[f64], pos: [u32; 3]| -> Vec<f64> {
                let mut out = v.to_vec();
                ops::rope3d_apply(&mut out, 1, 1, alloc, &[pos], 10_000.0, false);
                out
            };
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let lhs = dot(&rot(&q, p), &rot(&k, pd));
            let rhs = dot(&rot(&q, [0, 0, 0]), &rot(&k, delta));
            assert!((lhs - rhs).abs() < 1e-6, "{} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn first_video_logits_come_from_the_coarsest_vocabulary() {
        let (cfg, hier, layout) = desk();
        let params = init_params::<f32>(&cfg, &hier, 5).unwrap();
        let mut g = Graph::new();
        let binding = params.bind(&mut g, false).unwrap();
        let text = vec![synth::tokenize("a red square moves right", cfg.text_len).unwrap()];
        let video = vec![vec![0u32; layout.video_len]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward_train(
            &mut g,
            &binding,
            &cfg,
            &layout,
            &text,
            &video,
            &[false],
            DropoutCfg::default(),
            &mut rng,
        )
        .unwrap();
        // layer 2 (coarsest) logits: one position, 2^6 vocabulary
        assert_eq!(g.shape(out.layer_logits[2]), &[1, 64]);
        assert_eq!(g.shape(out.layer_logits[1]), &[8, 256]);
        assert_eq!(g.shape(out.layer_logits[0]), &[64, 1024]);
    }

    #[test]
    fn causal_mask_ignores_future_permutations() {
        let (cfg, hier, layout) = desk();
        let params = init_params::<f64>(&cfg, &hier, 6).unwrap();
        let text = vec![synth::tokenize("a blue circle moves up", cfg.text_len).unwrap()];
        let mut video: Vec<u32> = (0..layout.video_len as u32).map(|i| i % 60).collect();
        let run = |video: &Vec<u32>| -> Vec<f64> {
            let mut g = Graph::new();
            let binding = params.bind(&mut g, false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = forward_train(
                &mut g,
                &binding,
                &cfg,
                &layout,
                &text,
                &[video.clone()],
                &[false],
                DropoutCfg::default(),
                &mut rng,
            )
            .unwrap();
            // logits for the first 4 dense-layer positions
            g.data(out.layer_logits[0])[..4 * 1024].to_vec()
        };
        let before = run(&video);
        // permute tokens strictly after the 4th dense position
        let cut = layout.video_len - 40;
        video[cut..].reverse();
        let after = run(&video);
        assert_eq!(before, after);
    }

    #[test]
    fn condition_dropout_swaps_in_unconditional_rows() {
        let (cfg, hier, layout) = desk();
        let params = init_params::<f64>(&cfg, &hier, 7).unwrap();
        let text_a = synth::tokenize("a red square moves right", cfg.text_len).unwrap();
        let text_b = synth::tokenize("a blue circle moves left", cfg.text_len).unwrap();
        let video = vec![vec![0u32; layout.video_len]; 2];
        let run = |texts: &[Vec<u32>], drops: &[bool]| -> Vec<f64> {
            let mut g = Graph::new();
            let binding = params.bind(&mut g, false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = forward_train(
                &mut g,
                &binding,
                &cfg,
                &layout,
                texts,
                &video,
                drops,
                DropoutCfg::default(),
                &mut rng,
            )
            .unwrap();
            g.data(out.hidden).to_vec()
        };
        // with both samples dropped, different captions give identical
        // activations (everything sees only the unconditional prefix)
        let both = run(&[text_a.clone(), text_b.clone()], &[true, true]);
        let per = both.len() / 2;
        assert_eq!(&both[..per], &both[per..]);
        // and without dropout they differ
        let neither = run(&[text_a, text_b], &[false, false]);
        assert_ne!(&neither[..per], &neither[per..]);
    }
}
