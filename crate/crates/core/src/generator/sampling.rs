//! CFG-guided sampling over the hierarchical token stream.
//!
//! Generation runs two cached streams: one prefilled with the embedded
//! caption, one with the learned unconditional embeddings. Each new token
//! combines their logits as uncond + (cond - uncond) * cfg_scale, applies
//! temperature and optional top-k, samples with a seeded rng, and feeds
//! the chosen token to both streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::TokenStreamFile;
use crate::lfq::{self, LfqCodes};
use crate::synth;
use crate::tensor::{ParamStore, Real};
use crate::vae::{self, HierarchyConfig};
use crate::video::VideoBlock;

use super::infer::{self, GenState, GenWeights};
use super::{GenConfig, GenError, SequenceLayout};

pub const DEFAULT_CFG_SCALE: f64 = 7.5;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub cfg_scale: f64,
    pub temperature: f64,
    /// 0 disables the filter.
    pub top_k: usize,
    pub seed: u64,
    /// Guard rail: generation refuses streams longer than this.
    pub max_tokens: Option<usize>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            cfg_scale: DEFAULT_CFG_SCALE,
            temperature: 1.0,
            top_k: 0,
            seed: 0,
            max_tokens: None,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.cfg_scale < 0.0 {
            return Err(GenError::Config(format!("cfg_scale {} < 0", self.cfg_scale)));
        }
        if self.temperature <= 0.0 {
            return Err(GenError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// uncond + (cond - uncond) * scale, evaluated in f64 so the scale-1 and
/// scale-0 identities are exact after the cast back.
pub fn cfg_logits<T: Real>(cond: &[T], uncond: &[T], scale: f64) -> Result<Vec<T>, GenError> {
    if cond.len() != uncond.len() {
        return Err(GenError::Config(format!(
            "cfg shape mismatch: {} vs {}",
            cond.len(),
            uncond.len()
        )));
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| {
            let (c, u) = (Real::to_f64(c), Real::to_f64(u));
            T::from_f64(u + (c - u) * scale)
        })
        .collect())
}

/// Temperature then optional top-k, then categorical sampling by CDF
/// inversion. Ties in the top-k cutoff resolve toward lower indices.
pub fn sample_index<T: Real>(
    logits: &[T],
    temperature: f64,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let mut scaled: Vec<f64> = logits
        .iter()
        .map(|&v| Real::to_f64(v) / temperature)
        .collect();
    if top_k > 0 && top_k < scaled.len() {
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| {
            scaled[b]
                .partial_cmp(&scaled[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &i in &order[top_k..] {
            scaled[i] = f64::NEG_INFINITY;
        }
    }
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cdf = Vec::with_capacity(scaled.len());
    let mut total = 0.0f64;
    for &v in &scaled {
        total += if v.is_finite() { (v - mx).exp() } else { 0.0 };
        cdf.push(total);
    }
    let u: f64 = rng.random_range(0.0..1.0) * total;
    cdf.iter().position(|&c| u < c).unwrap_or(scaled.len() - 1)
}

/// A generated stream plus its decoded clip.
pub struct Generated {
    /// Densest-first per-layer code grids.
    pub codes: Vec<LfqCodes<f32>>,
    /// Coarse-first file image of the same stream.
    pub stream: TokenStreamFile,
    pub video: VideoBlock,
}

/// Samples one full token stream for a caption and decodes it.
pub fn generate(
    caption: &str,
    gen_params: &ParamStore<f32>,
    gen_cfg: &GenConfig,
    tok_params: &ParamStore<f32>,
    hier: &HierarchyConfig,
    sp: &SamplingParams,
) -> Result<Generated, GenError> {
    sp.validate()?;
    hier.validate(true)?;
    let layout = SequenceLayout::new(hier, gen_cfg.text_len);
    if let Some(max) = sp.max_tokens {
        if max < layout.video_len {
            return Err(GenError::Config(format!(
                "max_tokens {} below the {}-token stream",
                max, layout.video_len
            )));
        }
    }
    let text = synth::tokenize(caption, gen_cfg.text_len)?;
    let w = GenWeights::from_store(gen_params, gen_cfg, hier)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sp.seed);

    let mut cond = GenState::new(&w);
    let mut uncond = GenState::new(&w);
    let mut h_cond = Vec::new();
    let mut h_uncond = Vec::new();
    for i in 0..layout.text_len {
        let pos = layout.positions[i];
        h_cond = infer::step(&w, &mut cond, w.embed_text(text[i], i), pos);
        h_uncond = infer::step(&w, &mut uncond, w.embed_uncond(i), pos);
    }

    let mut stream_tokens: Vec<u32> = Vec::with_capacity(layout.video_len);
    for p in layout.text_len..layout.total_len() {
        let m = layout.layer_of(p).expect("video position");
        let logits_c = w.logits(m, &h_cond);
        let logits_u = w.logits(m, &h_uncond);
        let mixed = cfg_logits(&logits_c, &logits_u, sp.cfg_scale)?;
        let idx = sample_index(&mixed, sp.temperature, sp.top_k, &mut rng);
        assert!(idx < layout.vocab[m], "sampled index outside the layer vocabulary");
        stream_tokens.push(idx as u32);

        let pos = layout.positions[p];
        let emb = w.embed_video(m, idx as u32);
        h_cond = infer::step(&w, &mut cond, emb.clone(), pos);
        h_uncond = infer::step(&w, &mut uncond, emb, pos);
    }

    // split the stream back into densest-first grids
    let mut codes: Vec<Option<LfqCodes<f32>>> = vec![None; hier.layers.len()];
    for m in layout.emission_order() {
        let (s, e) = layout.layer_ranges[m];
        let ids = &stream_tokens[s - layout.text_len..e - layout.text_len];
        codes[m] = Some(lfq::codes_from_indices(
            ids,
            &hier.layers[m].latent_shape,
            hier.layers[m].quant_dim,
        )?);
    }
    let codes: Vec<LfqCodes<f32>> = codes.into_iter().map(|c| c.expect("filled")).collect();
    let stream = TokenStreamFile::from_codes(&codes, None)
        .map_err(|e| GenError::Config(e.to_string()))?;
    let video = vae::decode(&codes, hier, tok_params, None)?;
    Ok(Generated {
        codes,
        stream,
        video,
    })
}
