//! Incremental (KV-cached) inference path.
//!
//! Weights are flattened out of the parameter store once; each new stream
//! position costs one pass over the blocks with attention against the
//! cached keys/values. The arithmetic mirrors the graph forward pass
//! step for step, so cached and uncached logits agree to rounding.

use crate::synth;
use crate::tensor::graph::NORM_EPS;
use crate::tensor::ops::{self, UnaryKind};
use crate::tensor::{ParamStore, Real};
use crate::vae::HierarchyConfig;

use super::{GenConfig, GenError, SequenceLayout};

struct BlockWeights<T> {
    ln1: (Vec<T>, Vec<T>),
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    wo: Vec<T>,
    ln2: (Vec<T>, Vec<T>),
    w1: Vec<T>,
    w2: Vec<T>,
}

pub struct GenWeights<T> {
    pub cfg: GenConfig,
    pub vocab: Vec<usize>,
    text_embed: Vec<T>,
    tok_embed: Vec<Vec<T>>,
    uncond_embed: Vec<T>,
    seg_embed: Vec<T>,
    blocks: Vec<BlockWeights<T>>,
    final_ln: (Vec<T>, Vec<T>),
    heads: Vec<Vec<T>>,
    layer_count: usize,
}

impl<T: Real> GenWeights<T> {
    pub fn from_store(
        store: &ParamStore<T>,
        cfg: &GenConfig,
        hier: &HierarchyConfig,
    ) -> Result<Self, GenError> {
        cfg.validate()?;
        let d = cfg.hidden;
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<T>, GenError> {
            let t = store.get(name)?;
            if t.shape() != shape {
                return Err(GenError::Incompatible(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            Ok(t.data().to_vec())
        };
        let m_count = hier.layers.len();
        let mut tok_embed = Vec::with_capacity(m_count);
        let mut heads = Vec::with_capacity(m_count);
        let mut vocab = Vec::with_capacity(m_count);
        for (m, l) in hier.layers.iter().enumerate() {
            let v = 1usize << l.quant_dim;
            tok_embed.push(fetch(&format!("gen.tok_embed.layer{m}"), &[v, d])?);
            heads.push(fetch(&format!("gen.head.layer{m}"), &[d, v])?);
            vocab.push(v);
        }
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("gen.block{b}");
            blocks.push(BlockWeights {
                ln1: (fetch(&format!("{p}.ln1.gain"), &[d])?, fetch(&format!("{p}.ln1.bias"), &[d])?),
                wq: fetch(&format!("{p}.attn.wq"), &[d, d])?,
                wk: fetch(&format!("{p}.attn.wk"), &[d, d])?,
                wv: fetch(&format!("{p}.attn.wv"), &[d, d])?,
                wo: fetch(&format!("{p}.attn.wo"), &[d, d])?,
                ln2: (fetch(&format!("{p}.ln2.gain"), &[d])?, fetch(&format!("{p}.ln2.bias"), &[d])?),
                w1: fetch(&format!("{p}.mlp.w1"), &[d, d * cfg.ffn_mult])?,
                w2: fetch(&format!("{p}.mlp.w2"), &[d * cfg.ffn_mult, d])?,
            });
        }
        Ok(GenWeights {
            cfg: cfg.clone(),
            vocab,
            text_embed: fetch("gen.text_embed", &[synth::vocab_size(), d])?,
            tok_embed,
            uncond_embed: fetch("gen.uncond_embed", &[cfg.text_len, d])?,
            seg_embed: fetch("gen.seg_embed", &[m_count + 1, d])?,
            blocks,
            final_ln: (fetch("gen.final_ln.gain", &[d])?, fetch("gen.final_ln.bias", &[d])?),
            heads,
            layer_count: m_count,
        })
    }

    fn seg_row(&self, seg: usize) -> &[T] {
        let d = self.cfg.hidden;
        &self.seg_embed[seg * d..(seg + 1) * d]
    }

    /// Embedded caption token at text position `i` (segment row added).
    pub fn embed_text(&self, id: u32, _i: usize) -> Vec<T> {
        let d = self.cfg.hidden;
        let mut x = self.text_embed[id as usize * d..(id as usize + 1) * d].to_vec();
        for (v, &s) in x.iter_mut().zip(self.seg_row(self.layer_count)) {
            *v += s;
        }
        x
    }

    /// Learned unconditional embedding for text position `i`.
    pub fn embed_uncond(&self, i: usize) -> Vec<T> {
        let d = self.cfg.hidden;
        let mut x = self.uncond_embed[i * d..(i + 1) * d].to_vec();
        for (v, &s) in x.iter_mut().zip(self.seg_row(self.layer_count)) {
            *v += s;
        }
        x
    }

    /// Embedded video token of layer m.
    pub fn embed_video(&self, layer: usize, idx: u32) -> Vec<T> {
        let d = self.cfg.hidden;
        let table = &self.tok_embed[layer];
        let mut x = table[idx as usize * d..(idx as usize + 1) * d].to_vec();
        for (v, &s) in x.iter_mut().zip(self.seg_row(layer)) {
            *v += s;
        }
        x
    }

    /// Head logits for layer m from a final hidden state.
    pub fn logits(&self, layer: usize, hidden: &[T]) -> Vec<T> {
        ops::linear_forward(hidden, &self.heads[layer], None, self.cfg.hidden, self.vocab[layer])
    }
}

/// Appended keys/values for one transformer block, laid out [pos, H, hd].
pub struct KvCache<T> {
    k: Vec<T>,
    v: Vec<T>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    fn new() -> Self {
        KvCache {
            k: Vec::new(),
            v: Vec::new(),
            len: 0,
        }
    }
}

/// One autoregressive stream: per-block caches plus the consumed length.
pub struct GenState<T> {
    caches: Vec<KvCache<T>>,
    len: usize,
}

impl<T: Real> GenState<T> {
    pub fn new(w: &GenWeights<T>) -> Self {
        GenState {
            caches: (0..w.cfg.blocks).map(|_| KvCache::new()).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm_vec<T: Real>(x: &[T], gain: &[T], bias: &[T]) -> Vec<T> {
    ops::group_norm_forward(x, gain, bias, x.len(), 1, NORM_EPS)
}

/// Feeds one embedded position through the blocks, appending to the cache,
/// and returns the final (post-norm) hidden state.
pub fn step<T: Real>(
    w: &GenWeights<T>,
    state: &mut GenState<T>,
    mut x: Vec<T>,
    pos: [u32; 3],
) -> Vec<T> {
    let d = w.cfg.hidden;
    let heads = w.cfg.heads;
    let hd = w.cfg.head_dim;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    for (blk, cache) in w.blocks.iter().zip(state.caches.iter_mut()) {
        let h = layer_norm_vec(&x, &blk.ln1.0, &blk.ln1.1);
        let mut q = ops::linear_forward(&h, &blk.wq, None, d, d);
        let mut k = ops::linear_forward(&h, &blk.wk, None, d, d);
        let v = ops::linear_forward(&h, &blk.wv, None, d, d);
        ops::rope3d_apply(&mut q, heads, 1, w.cfg.rope_alloc, &[pos], 10_000.0, false);
        ops::rope3d_apply(&mut k, heads, 1, w.cfg.rope_alloc, &[pos], 10_000.0, false);
        cache.k.extend_from_slice(&k);
        cache.v.extend_from_slice(&v);
        cache.len += 1;

        let mut ctx = vec![T::zero(); d];
        for hi in 0..heads {
            let qh = &q[hi * hd..(hi + 1) * hd];
            let mut scores = Vec::with_capacity(cache.len);
            for p in 0..cache.len {
                let kh = &cache.k[p * d + hi * hd..p * d + (hi + 1) * hd];
                let mut dot = T::zero();
                for (a, b) in qh.iter().zip(kh) {
                    dot += *a * *b;
                }
                scores.push(dot * scale);
            }
            let probs = ops::softmax_forward(&scores, cache.len);
            let ctx_h = &mut ctx[hi * hd..(hi + 1) * hd];
            for (p, &w_p) in probs.iter().enumerate() {
                let vh = &cache.v[p * d + hi * hd..p * d + (hi + 1) * hd];
                for (c, &vv) in ctx_h.iter_mut().zip(vh) {
                    *c += w_p * vv;
                }
            }
        }
        let proj = ops::linear_forward(&ctx, &blk.wo, None, d, d);
        for (a, &b) in x.iter_mut().zip(&proj) {
            *a += b;
        }

        let h2 = layer_norm_vec(&x, &blk.ln2.0, &blk.ln2.1);
        let mid = ops::linear_forward(&h2, &blk.w1, None, d, d * w.cfg.ffn_mult);
        let mid = ops::unary_forward(UnaryKind::Gelu, &mid);
        let out = ops::linear_forward(&mid, &blk.w2, None, d * w.cfg.ffn_mult, d);
        for (a, &b) in x.iter_mut().zip(&out) {
            *a += b;
        }
    }
    state.len += 1;
    layer_norm_vec(&x, &w.final_ln.0, &w.final_ln.1)
}

/// Runs a whole prefix through the cache and returns every position's
/// final hidden state (convenience for tests and teacher forcing).
pub fn run_prefix<T: Real>(
    w: &GenWeights<T>,
    state: &mut GenState<T>,
    embedded: Vec<Vec<T>>,
    layout: &SequenceLayout,
) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(embedded.len());
    for x in embedded {
        let pos = layout.positions[state.len()];
        let h = step(w, state, x, pos);
        out.push(h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{forward_train, init_params, DropoutCfg};
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_forward_hidden<T: Real>(
        params: &ParamStore<T>,
        cfg: &GenConfig,
        layout: &SequenceLayout,
        text: &[u32],
        video: &[u32],
    ) -> Vec<T> {
        let mut g = Graph::new();
        let binding = params.bind(&mut g, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward_train(
            &mut g,
            &binding,
            cfg,
            layout,
            &[text.to_vec()],
            &[video.to_vec()],
            &[false],
            DropoutCfg::default(),
            &mut rng,
        )
        .unwrap();
        g.data(out.hidden).to_vec()
    }

    fn incremental_hidden<T: Real>(
        params: &ParamStore<T>,
        cfg: &GenConfig,
        hier: &HierarchyConfig,
        layout: &SequenceLayout,
        text: &[u32],
        video: &[u32],
    ) -> Vec<T> {
        let w = GenWeights::from_store(params, cfg, hier).unwrap();
        let mut state = GenState::new(&w);
        let mut out = Vec::new();
        for (i, pos) in layout.positions.iter().enumerate() {
            let x = if i < layout.text_len {
                w.embed_text(text[i], i)
            } else {
                let m = layout.layer_of(i).unwrap();
                w.embed_video(m, video[i - layout.text_len])
            };
            out.extend(step(&w, &mut state, x, *pos));
        }
        out
    }

    fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (Real::to_f64(*x) - Real::to_f64(*y)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn cached_path_matches_full_forward_f32_and_f64() {
        let hier = HierarchyConfig::desk_default();
        let cfg = GenConfig::default();
        let layout = SequenceLayout::new(&hier, cfg.text_len);
        let text = crate::synth::tokenize("a green triangle moves down", cfg.text_len).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let video: Vec<u32> = layout
            .emission_order()
            .flat_map(|m| {
                let (s, e) = layout.layer_ranges[m];
                let v = layout.vocab[m] as u32;
                (s..e).map(move |_| v).collect::<Vec<_>>()
            })
            .map(|v| rng.random_range(0..v))
            .collect();

        let p64 = init_params::<f64>(&cfg, &hier, 9).unwrap();
        let full = full_forward_hidden(&p64, &cfg, &layout, &text, &video);
        let inc = incremental_hidden(&p64, &cfg, &hier, &layout, &text, &video);
        assert!(max_abs_diff(&full, &inc) < 1e-10, "f64 diff {}", max_abs_diff(&full, &inc));

        let p32 = p64.cast::<f32>();
        let full = full_forward_hidden(&p32, &cfg, &layout, &text, &video);
        let inc = incremental_hidden(&p32, &cfg, &hier, &layout, &text, &video);
        assert!(max_abs_diff(&full, &inc) < 1e-4, "f32 diff {}", max_abs_diff(&full, &inc));
    }
}
