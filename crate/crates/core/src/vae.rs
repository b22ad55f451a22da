//! 3D causal encoder/decoder with the multi-layer code hierarchy.
//!
//! The main encoder downsamples with strided causal convs plus a residual
//! conv per stage, then a 1x1x1 head projects to the densest layer's bit
//! channels. Lightweight two-conv compressors cascade to coarser latents,
//! each quantized by LFQ. The decoder mirrors this: each coarse layer is
//! upsampled and its contribution added onto the next-finer quantized
//! latent (1x1x1 channel-matching conv, additive fusion), and the fused
//! densest latent runs through the mirrored upsampling stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lfq::{self, LfqCodes, LfqError};
use crate::mask::{self, MaskError, MaskPlan, MaskStrategy};
use crate::tensor::params::{fan_in_bound, init_uniform};
use crate::tensor::{Graph, ParamStore, Real, Tensor, TensorError, VarId};
use crate::video::VideoBlock;

pub const NORM_GROUPS: usize = 8;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid hierarchy config: {0}")]
    Config(String),
    #[error("layer {0} missing from the provided latents")]
    MissingLayer(usize),
    #[error("strategy `learned` without a learned-mask parameter: {0}")]
    LearnedTokenMissing(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lfq(#[from] LfqError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// One quantization layer: bits per token and the latent grid it lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub quant_dim: usize,
    /// (t, h, w) extents of this layer's latent grid.
    pub latent_shape: [usize; 3],
}

impl LayerConfig {
    pub fn token_count(&self) -> usize {
        self.latent_shape.iter().product()
    }
}

/// One main-encoder stage: stride per axis and output width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderStage {
    pub temporal_stride: usize,
    pub spatial_stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stages: Vec<EncoderStage>,
    /// Hidden width of the lightweight compressor / upsampler blocks.
    pub compressor_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    /// (T, H, W, C) of the clips this hierarchy tokenizes.
    pub input_shape: [usize; 4],
    /// Index 0 = densest layer; shapes strictly shrink with the index.
    pub layers: Vec<LayerConfig>,
    /// Required to build the network; token arithmetic works without it.
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    #[serde(default = "default_mask_strategy")]
    pub mask_strategy: MaskStrategy,
    #[serde(default = "default_mask_cap")]
    pub mask_cap: f64,
}

fn default_mask_strategy() -> MaskStrategy {
    MaskStrategy::RepeatPrev
}

fn default_mask_cap() -> f64 {
    mask::DEFAULT_CAP
}

/// Per-layer token counts plus totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenShapes {
    /// (token count, quant_dim) per layer, densest first.
    pub per_layer: Vec<(usize, usize)>,
    pub total_tokens: usize,
    pub total_bits: usize,
}

impl HierarchyConfig {
    /// Desk-scale default: 16x32x32 RGB clips, three layers 4x4x4 (10 bits),
    /// 2x2x2 (8 bits), 1x1x1 (6 bits); CPU-trainable in minutes.
    pub fn desk_default() -> Self {
        HierarchyConfig {
            input_shape: [16, 32, 32, 3],
            layers: vec![
                LayerConfig { quant_dim: 10, latent_shape: [4, 4, 4] },
                LayerConfig { quant_dim: 8, latent_shape: [2, 2, 2] },
                LayerConfig { quant_dim: 6, latent_shape: [1, 1, 1] },
            ],
            encoder: Some(EncoderConfig {
                stages: vec![
                    EncoderStage { temporal_stride: 2, spatial_stride: 2, channels: 32 },
                    EncoderStage { temporal_stride: 2, spatial_stride: 2, channels: 64 },
                    EncoderStage { temporal_stride: 1, spatial_stride: 2, channels: 64 },
                ],
                compressor_channels: 32,
            }),
            mask_strategy: default_mask_strategy(),
            mask_cap: default_mask_cap(),
        }
    }

    /// Full-scale four-layer hierarchy over 64x256x256 clips (stats use).
    pub fn full_scale_multi_layer() -> Self {
        HierarchyConfig {
            input_shape: [64, 256, 256, 3],
            layers: vec![
                LayerConfig { quant_dim: 18, latent_shape: [8, 16, 16] },
                LayerConfig { quant_dim: 16, latent_shape: [4, 8, 8] },
                LayerConfig { quant_dim: 14, latent_shape: [2, 8, 8] },
                LayerConfig { quant_dim: 3, latent_shape: [1, 4, 4] },
            ],
            encoder: Some(EncoderConfig {
                stages: vec![
                    EncoderStage { temporal_stride: 2, spatial_stride: 2, channels: 64 },
                    EncoderStage { temporal_stride: 2, spatial_stride: 2, channels: 128 },
                    EncoderStage { temporal_stride: 2, spatial_stride: 2, channels: 128 },
                    EncoderStage { temporal_stride: 1, spatial_stride: 2, channels: 128 },
                ],
                compressor_channels: 64,
            }),
            mask_strategy: default_mask_strategy(),
            mask_cap: default_mask_cap(),
        }
    }

    /// Single-layer baseline with the latent interpolated to 8x17x17 so the
    /// token count is comparable to the hierarchy (stats only; the grid is
    /// not stride-realizable, so there is no encoder section).
    pub fn full_scale_single_layer() -> Self {
        HierarchyConfig {
            input_shape: [64, 256, 256, 3],
            layers: vec![LayerConfig { quant_dim: 18, latent_shape: [8, 17, 17] }],
            encoder: None,
            mask_strategy: default_mask_strategy(),
            mask_cap: default_mask_cap(),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn token_shapes(&self) -> TokenShapes {
        let per_layer: Vec<(usize, usize)> = self
            .layers
            .iter()
            .map(|l| (l.token_count(), l.quant_dim))
            .collect();
        TokenShapes {
            total_tokens: per_layer.iter().map(|&(n, _)| n).sum(),
            total_bits: per_layer.iter().map(|&(n, qd)| n * qd).sum(),
            per_layer,
        }
    }

    /// Stride of compressor m (mapping layer m-1's grid onto layer m's).
    fn compressor_stride(&self, m: usize) -> [usize; 3] {
        let a = self.layers[m - 1].latent_shape;
        let b = self.layers[m].latent_shape;
        [a[0] / b[0], a[1] / b[1], a[2] / b[2]]
    }

    /// Structural validation; `for_network` additionally checks that the
    /// encoder stage schedule reproduces the layer-0 grid.
    pub fn validate(&self, for_network: bool) -> Result<(), VaeError> {
        if self.layers.is_empty() {
            return Err(VaeError::Config("at least one layer required".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.quant_dim == 0 || l.quant_dim > 30 {
                return Err(VaeError::Config(format!(
                    "layer {} quant_dim {} outside 1..=30",
                    i, l.quant_dim
                )));
            }
            if l.latent_shape.iter().any(|&e| e == 0) {
                return Err(VaeError::Config(format!("layer {} has a zero extent", i)));
            }
        }
        for m in 1..self.layers.len() {
            let a = self.layers[m - 1].latent_shape;
            let b = self.layers[m].latent_shape;
            if a.iter().zip(&b).any(|(x, y)| x < y) || a.iter().product::<usize>() <= b.iter().product::<usize>() {
                return Err(VaeError::Config(format!(
                    "latent shapes must strictly shrink: layer {} {:?} -> layer {} {:?}",
                    m - 1,
                    a,
                    m,
                    b
                )));
            }
            if a.iter().zip(&b).any(|(x, y)| x % y != 0) {
                return Err(VaeError::Config(format!(
                    "layer {} grid {:?} is not an integer multiple of layer {} grid {:?}",
                    m - 1,
                    a,
                    m,
                    b
                )));
            }
        }
        if !(self.mask_cap > 0.0 && self.mask_cap <= 1.0) {
            return Err(VaeError::Config(format!("mask cap {} outside (0, 1]", self.mask_cap)));
        }
        if for_network {
            let enc = self.encoder.as_ref().ok_or_else(|| {
                VaeError::Config("this config has no encoder section; it only supports token arithmetic".into())
            })?;
            if enc.stages.is_empty() {
                return Err(VaeError::Config("encoder needs at least one stage".into()));
            }
            for (i, s) in enc.stages.iter().enumerate() {
                if s.temporal_stride == 0 || s.spatial_stride == 0 || s.channels == 0 {
                    return Err(VaeError::Config(format!("encoder stage {} has a zero field", i)));
                }
                if s.channels % NORM_GROUPS != 0 {
                    return Err(VaeError::Config(format!(
                        "encoder stage {} channels {} not divisible into {} norm groups",
                        i, s.channels, NORM_GROUPS
                    )));
                }
            }
            if enc.compressor_channels == 0 {
                return Err(VaeError::Config("compressor channels must be positive".into()));
            }
            let tp: usize = enc.stages.iter().map(|s| s.temporal_stride).product();
            let sp: usize = enc.stages.iter().map(|s| s.spatial_stride).product();
            let want = self.layers[0].latent_shape;
            let [t, h, w, _c] = self.input_shape;
            if t % tp != 0 || h % sp != 0 || w % sp != 0
                || [t / tp, h / sp, w / sp] != want
            {
                return Err(VaeError::Config(format!(
                    "encoder strides map {}x{}x{} to {}x{}x{}, but layer 0 wants {:?}",
                    t,
                    h,
                    w,
                    t / tp.max(1),
                    h / sp.max(1),
                    w / sp.max(1),
                    want
                )));
            }
        }
        Ok(())
    }

    /// Product of temporal strides (input frames per layer-0 latent frame).
    pub fn temporal_stride_product(&self) -> usize {
        self.encoder
            .as_ref()
            .map(|e| e.stages.iter().map(|s| s.temporal_stride).product())
            .unwrap_or(1)
    }
}

/// Pre-quantization latents and quantized codes per layer (densest first).
#[derive(Clone, Debug)]
pub struct HierLatents<T> {
    pub pre_quant: Vec<Tensor<T>>,
    pub codes: Vec<LfqCodes<T>>,
}

fn down_kernel(stage: usize, s: &EncoderStage) -> [usize; 3] {
    let kt = if s.temporal_stride > 1 { s.temporal_stride } else { 1 };
    if stage == 0 {
        [kt.max(2), 3, 3]
    } else {
        [kt, s.spatial_stride, s.spatial_stride]
    }
}

fn up_kernel(s: &EncoderStage) -> [usize; 3] {
    [s.temporal_stride, s.spatial_stride, s.spatial_stride]
}

/// Initializes every tokenizer parameter with a seeded rng. Draws happen
/// in a fixed order, so the same seed always yields the same store.
pub fn init_params<T: Real>(cfg: &HierarchyConfig, seed: u64) -> Result<ParamStore<T>, VaeError> {
    cfg.validate(true)?;
    let enc = cfg.encoder.as_ref().expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let conv = |store: &mut ParamStore<T>,
                    rng: &mut ChaCha8Rng,
                    name: String,
                    k: [usize; 3],
                    ci: usize,
                    co: usize|
     -> Result<(), VaeError> {
        let bound = fan_in_bound(k.iter().product::<usize>() * ci);
        store.insert(
            &format!("{name}.w"),
            init_uniform(rng, &[k[0], k[1], k[2], ci, co], bound),
        )?;
        // random bias init keeps units non-degenerate on the all-gray
        // background, which maps to exactly zero
        store.insert(&format!("{name}.b"), init_uniform(rng, &[co], bound))?;
        Ok(())
    };
    // transpose convs paint taps/stride contributions per output, so their
    // effective fan-in is (taps/stride) * Cin, not taps * Cin
    let tconv = |store: &mut ParamStore<T>,
                 rng: &mut ChaCha8Rng,
                 name: String,
                 k: [usize; 3],
                 stride: [usize; 3],
                 ci: usize,
                 co: usize|
     -> Result<(), VaeError> {
        let taps: usize = k.iter().product();
        let per_out = (taps / stride.iter().product::<usize>().max(1)).max(1) * ci;
        let bound = fan_in_bound(per_out);
        store.insert(
            &format!("{name}.w"),
            init_uniform(rng, &[k[0], k[1], k[2], ci, co], bound),
        )?;
        store.insert(&format!("{name}.b"), init_uniform(rng, &[co], bound))?;
        Ok(())
    };
    let norm = |store: &mut ParamStore<T>, name: String, c: usize| -> Result<(), VaeError> {
        store.insert(&format!("{name}.gain"), Tensor::full(&[c], T::one()))?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[c]))?;
        Ok(())
    };

    let cin = cfg.input_shape[3];
    let mut prev = cin;
    for (i, s) in enc.stages.iter().enumerate() {
        conv(&mut store, &mut rng, format!("enc.stage{i}.down"), down_kernel(i, s), prev, s.channels)?;
        norm(&mut store, format!("enc.stage{i}.norm"), s.channels)?;
        conv(&mut store, &mut rng, format!("enc.stage{i}.res"), [1, 3, 3], s.channels, s.channels)?;
        prev = s.channels;
    }
    conv(&mut store, &mut rng, "enc.head".into(), [1, 1, 1], prev, cfg.layers[0].quant_dim)?;

    let cc = enc.compressor_channels;
    for m in 1..cfg.layers.len() {
        let stride = cfg.compressor_stride(m);
        let kt = stride[0].max(2);
        conv(&mut store, &mut rng, format!("comp{m}.conv1"), [kt, 3, 3], cfg.layers[m - 1].quant_dim, cc)?;
        conv(&mut store, &mut rng, format!("comp{m}.conv2"), [2, 1, 1], cc, cfg.layers[m].quant_dim)?;
    }
    for m in (1..cfg.layers.len()).rev() {
        let stride = cfg.compressor_stride(m);
        tconv(&mut store, &mut rng, format!("dup{m}.tconv"), stride, stride, cfg.layers[m].quant_dim, cc)?;
        conv(&mut store, &mut rng, format!("dup{m}.conv"), [2, 1, 1], cc, cc)?;
        conv(&mut store, &mut rng, format!("dup{m}.fuse"), [1, 1, 1], cc, cfg.layers[m - 1].quant_dim)?;
    }

    conv(&mut store, &mut rng, "dec.head".into(), [1, 1, 1], cfg.layers[0].quant_dim, enc.stages.last().unwrap().channels)?;
    for (i, s) in enc.stages.iter().enumerate().rev() {
        norm(&mut store, format!("dec.stage{i}.norm"), s.channels)?;
        conv(&mut store, &mut rng, format!("dec.stage{i}.res"), [1, 3, 3], s.channels, s.channels)?;
        let out_ch = if i == 0 { enc.stages[0].channels } else { enc.stages[i - 1].channels };
        let stride = [s.temporal_stride, s.spatial_stride, s.spatial_stride];
        tconv(&mut store, &mut rng, format!("dec.stage{i}.up"), up_kernel(s), stride, s.channels, out_ch)?;
    }
    // small output-conv init: reconstruction starts near mid-gray, so the
    // early optimizer steps grow the code path instead of silencing it
    {
        let ch0 = enc.stages[0].channels;
        let bound = fan_in_bound(9 * ch0) * 0.1;
        store.insert("dec.rgb.w", init_uniform(&mut rng, &[1, 3, 3, ch0, cin], bound))?;
        store.insert("dec.rgb.b", init_uniform(&mut rng, &[cin], bound))?;
    }
    // direct linear render: one transpose conv painting each dense-latent
    // cell's pixel block straight from the fused code vector; added to the
    // trunk output. Its gradient is a plain code-pixel correlation, which
    // is what drags the reconstruction off the all-background optimum of
    // the L1 loss.
    {
        let [t, h, w, _] = cfg.input_shape;
        let l0 = cfg.layers[0].latent_shape;
        let k = [t / l0[0], h / l0[1], w / l0[2]];
        let qd = cfg.layers[0].quant_dim;
        let bound = fan_in_bound(qd) * 0.25;
        store.insert(
            "dec.direct.w",
            init_uniform(&mut rng, &[k[0], k[1], k[2], qd, cin], bound),
        )?;
        store.insert("dec.direct.b", Tensor::zeros(&[cin]))?;
    }

    // learned mask / placeholder tokens start at zero (zero strategy at init)
    for (m, l) in cfg.layers.iter().enumerate() {
        store.insert(&format!("mask.layer{m}.token"), Tensor::zeros(&[l.quant_dim]))?;
    }
    Ok(store)
}

pub type Binding = std::collections::BTreeMap<String, VarId>;

fn bound<'a, T: Real>(g: &Graph<T>, binding: &'a Binding, name: &str) -> Result<VarId, VaeError> {
    let _ = g;
    binding
        .get(name)
        .copied()
        .ok_or_else(|| VaeError::Tensor(TensorError::UnknownParam(name.to_string())))
}

/// Residual unit: x + conv(silu(norm(x))).
fn res_block<T: Real>(
    g: &mut Graph<T>,
    binding: &Binding,
    x: VarId,
    prefix: &str,
) -> Result<VarId, VaeError> {
    let gain = bound(g, binding, &format!("{prefix}.norm.gain"))?;
    let bias = bound(g, binding, &format!("{prefix}.norm.bias"))?;
    let w = bound(g, binding, &format!("{prefix}.res.w"))?;
    let b = bound(g, binding, &format!("{prefix}.res.b"))?;
    let n = g.group_norm(x, gain, bias, NORM_GROUPS)?;
    let a = g.silu(n)?;
    let r = g.conv3d(a, w, b, [1, 1, 1])?;
    Ok(g.add(x, r)?)
}

/// Encoder graph: batched [B, T, H, W, C] in [0, 1] to per-layer
/// pre-quantization latents (densest first).
pub fn encode_nodes<T: Real>(
    g: &mut Graph<T>,
    x: VarId,
    cfg: &HierarchyConfig,
    binding: &Binding,
) -> Result<Vec<VarId>, VaeError> {
    let enc = cfg
        .encoder
        .as_ref()
        .ok_or_else(|| VaeError::Config("config has no encoder section".into()))?;
    // [0,1] -> [-1,1]
    let mut y = g.affine(x, 2.0, -1.0)?;
    for (i, s) in enc.stages.iter().enumerate() {
        let w = bound(g, binding, &format!("enc.stage{i}.down.w"))?;
        let b = bound(g, binding, &format!("enc.stage{i}.down.b"))?;
        y = g.conv3d(y, w, b, [s.temporal_stride, s.spatial_stride, s.spatial_stride])?;
        y = res_block(g, binding, y, &format!("enc.stage{i}"))?;
    }
    let hw = bound(g, binding, "enc.head.w")?;
    let hb = bound(g, binding, "enc.head.b")?;
    let z0 = g.conv3d(y, hw, hb, [1, 1, 1])?;
    let mut pre = vec![z0];
    for m in 1..cfg.layers.len() {
        let w1 = bound(g, binding, &format!("comp{m}.conv1.w"))?;
        let b1 = bound(g, binding, &format!("comp{m}.conv1.b"))?;
        let w2 = bound(g, binding, &format!("comp{m}.conv2.w"))?;
        let b2 = bound(g, binding, &format!("comp{m}.conv2.b"))?;
        let h = g.conv3d(pre[m - 1], w1, b1, cfg.compressor_stride(m))?;
        let h = g.silu(h)?;
        pre.push(g.conv3d(h, w2, b2, [1, 1, 1])?);
    }
    Ok(pre)
}

/// Decoder graph: per-layer sign grids [B, t, h, w, qd] (densest first) to
/// an unclamped [B, T, H, W, C] reconstruction in [0, 1] scale.
pub fn decode_nodes<T: Real>(
    g: &mut Graph<T>,
    signs: &[VarId],
    cfg: &HierarchyConfig,
    binding: &Binding,
) -> Result<VarId, VaeError> {
    let enc = cfg
        .encoder
        .as_ref()
        .ok_or_else(|| VaeError::Config("config has no encoder section".into()))?;
    if signs.len() != cfg.layers.len() {
        return Err(VaeError::MissingLayer(signs.len()));
    }
    let m_count = cfg.layers.len();
    let mut x = signs[m_count - 1];
    for m in (1..m_count).rev() {
        let tw = bound(g, binding, &format!("dup{m}.tconv.w"))?;
        let tb = bound(g, binding, &format!("dup{m}.tconv.b"))?;
        let cw = bound(g, binding, &format!("dup{m}.conv.w"))?;
        let cb = bound(g, binding, &format!("dup{m}.conv.b"))?;
        let fw = bound(g, binding, &format!("dup{m}.fuse.w"))?;
        let fb = bound(g, binding, &format!("dup{m}.fuse.b"))?;
        let u = g.tconv3d(x, tw, tb, cfg.compressor_stride(m))?;
        let u = g.silu(u)?;
        let u = g.conv3d(u, cw, cb, [1, 1, 1])?;
        let contrib = g.conv3d(u, fw, fb, [1, 1, 1])?;
        x = g.add(signs[m - 1], contrib)?;
    }
    let hw = bound(g, binding, "dec.head.w")?;
    let hb = bound(g, binding, "dec.head.b")?;
    let mut y = g.conv3d(x, hw, hb, [1, 1, 1])?;
    for (i, s) in enc.stages.iter().enumerate().rev() {
        y = res_block(g, binding, y, &format!("dec.stage{i}"))?;
        let uw = bound(g, binding, &format!("dec.stage{i}.up.w"))?;
        let ub = bound(g, binding, &format!("dec.stage{i}.up.b"))?;
        y = g.tconv3d(y, uw, ub, [s.temporal_stride, s.spatial_stride, s.spatial_stride])?;
    }
    let rw = bound(g, binding, "dec.rgb.w")?;
    let rb = bound(g, binding, "dec.rgb.b")?;
    let out = g.conv3d(y, rw, rb, [1, 1, 1])?;
    // direct per-block render from the fused dense latent
    let dw = bound(g, binding, "dec.direct.w")?;
    let db = bound(g, binding, "dec.direct.b")?;
    let [t, h, w, _] = cfg.input_shape;
    let l0 = cfg.layers[0].latent_shape;
    let stride = [t / l0[0], h / l0[1], w / l0[2]];
    let direct = g.tconv3d(x, dw, db, stride)?;
    let out = g.add(out, direct)?;
    // [-1,1] scale back to [0,1]; clamping is the caller's choice
    Ok(g.affine(out, 0.5, 0.5)?)
}

fn strip_batch<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    debug_assert_eq!(s[0], 1);
    Tensor::from_vec(&s[1..], t.data().to_vec()).expect("same numel")
}

/// Encodes one clip into per-layer latents and LFQ codes.
pub fn encode<T: Real>(
    video: &VideoBlock,
    cfg: &HierarchyConfig,
    params: &ParamStore<T>,
) -> Result<HierLatents<T>, VaeError> {
    cfg.validate(true)?;
    let [t, h, w, c] = cfg.input_shape;
    if video.shape() != [t, h, w, c] {
        return Err(VaeError::Config(format!(
            "video shape {:?} does not match config input {:?}",
            video.shape(),
            cfg.input_shape
        )));
    }
    let mut g = Graph::new();
    let binding = params.bind(&mut g, false)?;
    let xt = video.to_tensor::<T>();
    let x = g.constant(&[1, t, h, w, c], xt.into_data())?;
    let pre_ids = encode_nodes(&mut g, x, cfg, &binding)?;
    let mut pre_quant = Vec::with_capacity(pre_ids.len());
    let mut codes = Vec::with_capacity(pre_ids.len());
    for (m, &id) in pre_ids.iter().enumerate() {
        let latent = strip_batch(&g.value(id));
        codes.push(lfq::quantize(&latent, cfg.layers[m].quant_dim)?);
        pre_quant.push(latent);
    }
    Ok(HierLatents { pre_quant, codes })
}

/// Decodes per-layer codes back to a clip, optionally substituting masked
/// positions per layer before fusion. Output is clamped to [0, 1].
pub fn decode<T: Real>(
    codes: &[LfqCodes<T>],
    cfg: &HierarchyConfig,
    params: &ParamStore<T>,
    masks: Option<&[Option<MaskPlan>]>,
) -> Result<VideoBlock, VaeError> {
    cfg.validate(true)?;
    if codes.len() != cfg.layers.len() {
        return Err(VaeError::MissingLayer(codes.len().min(cfg.layers.len())));
    }
    let mut g = Graph::new();
    let binding = params.bind(&mut g, false)?;
    let mut sign_ids = Vec::with_capacity(codes.len());
    for (m, layer_codes) in codes.iter().enumerate() {
        let want = cfg.layers[m].latent_shape;
        if layer_codes.grid != want || layer_codes.quant_dim != cfg.layers[m].quant_dim {
            return Err(VaeError::Config(format!(
                "layer {} codes are {:?}/{} bits, config wants {:?}/{} bits",
                m, layer_codes.grid, layer_codes.quant_dim, want, cfg.layers[m].quant_dim
            )));
        }
        let plan = masks.and_then(|ms| ms.get(m)).and_then(|p| p.as_ref());
        let grid_tensor = match plan {
            Some(plan) => {
                let learned_store;
                let learned: Option<&[T]> = match plan.strategy {
                    MaskStrategy::Learned => {
                        let name = format!("mask.layer{m}.token");
                        learned_store = params
                            .get(&name)
                            .map_err(|_| VaeError::LearnedTokenMissing(name.clone()))?
                            .data()
                            .to_vec();
                        Some(&learned_store)
                    }
                    _ => None,
                };
                mask::apply_mask(&layer_codes.signs, plan, learned)?
            }
            None => layer_codes.signs.clone(),
        };
        let mut shape = vec![1usize];
        shape.extend_from_slice(grid_tensor.shape());
        sign_ids.push(g.constant(&shape, grid_tensor.into_data())?);
    }
    let out = decode_nodes(&mut g, &sign_ids, cfg, &binding)?;
    let out = g.clamp(out, 0.0, 1.0)?;
    Ok(VideoBlock::from_tensor(&strip_batch(&g.value(out)))?)
}
