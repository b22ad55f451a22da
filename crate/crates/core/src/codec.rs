//! Bit-exact wire formats and compression accounting.
//!
//! HTVT token streams: magic `HTVT`, version u8 = 1, u8 layer count; per
//! layer (coarsest first) u8 quant_dim, u16 t, u16 h, u16 w; payload is
//! one continuous bitstream over the layers in file order, each index
//! packed MSB-first at quant_dim bits, zero-padded to a byte only at the
//! very end. Masked encode mode sets the top bit of a layer's quant_dim
//! byte, appends a u8 strategy tag after that layer's dims, and replaces
//! the layer's payload with a 1-bit-per-position bitmap followed by only
//! the unmasked indices.
//!
//! HTVV videos: magic `HTVV`, version u8 = 1, u16 t/h/w, u8 c, payload
//! t*h*w*c bytes, frame-major row-major channel-last, u8 <-> [0,1] by /255.
//!
//! All multibyte integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::lfq::{self, LfqCodes};
use crate::mask::{MaskPlan, MaskStrategy};
use crate::tensor::Real;
use crate::vae::HierarchyConfig;
use crate::video::VideoBlock;

pub const TOKEN_MAGIC: &[u8; 4] = b"HTVT";
pub const VIDEO_MAGIC: &[u8; 4] = b"HTVV";
pub const VERSION: u8 = 1;
const MASKED_FLAG: u8 = 0x80;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic: not a {0} file")]
    BadMagic(&'static str),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("truncated payload")]
    Truncated,
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---- bit packing -----------------------------------------------------------

pub struct BitWriter {
    buf: Vec<u8>,
    acc: u8,
    used: u32,
}

impl Default for BitWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter {
            buf: Vec::new(),
            acc: 0,
            used: 0,
        }
    }

    /// Appends `bits` bits of `value`, most significant first.
    pub fn write(&mut self, value: u32, bits: usize) {
        for i in (0..bits).rev() {
            let bit = (value >> i) & 1;
            self.acc = (self.acc << 1) | bit as u8;
            self.used += 1;
            if self.used == 8 {
                self.buf.push(self.acc);
                self.acc = 0;
                self.used = 0;
            }
        }
    }

    /// Zero-pads to a byte boundary and returns the buffer.
    pub fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.acc <<= 8 - self.used;
            self.buf.push(self.acc);
        }
        self.buf
    }

    pub fn bit_len(&self) -> usize {
        self.buf.len() * 8 + self.used as usize
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub fn read(&mut self, bits: usize) -> Result<u32, CodecError> {
        let mut out = 0u32;
        for _ in 0..bits {
            let byte = self.pos / 8;
            if byte >= self.bytes.len() {
                return Err(CodecError::Truncated);
            }
            let bit = (self.bytes[byte] >> (7 - self.pos % 8)) & 1;
            out = (out << 1) | bit as u32;
            self.pos += 1;
        }
        Ok(out)
    }
}

// ---- token streams ---------------------------------------------------------

/// One layer of a token-stream file. `indices` always has one entry per
/// grid position; masked positions hold 0 and are reconstructed by the
/// mask strategy at decode time.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayer {
    pub quant_dim: usize,
    pub grid: [usize; 3],
    pub indices: Vec<u32>,
    pub mask: Option<(MaskStrategy, Vec<bool>)>,
}

impl TokenLayer {
    pub fn token_count(&self) -> usize {
        self.grid.iter().product()
    }
}

/// Layers in file order: coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStreamFile {
    pub layers: Vec<TokenLayer>,
}

impl TokenStreamFile {
    /// Builds a file image from densest-first codes plus optional per-layer
    /// mask plans (also densest-first, matching `vae::decode`).
    pub fn from_codes<T: Real>(
        codes: &[LfqCodes<T>],
        masks: Option<&[Option<MaskPlan>]>,
    ) -> Result<Self, CodecError> {
        let mut layers = Vec::with_capacity(codes.len());
        for (m, c) in codes.iter().enumerate().rev() {
            if c.grid.len() != 3 {
                return Err(CodecError::Malformed(format!(
                    "layer {} grid must be 3-d, got {:?}",
                    m, c.grid
                )));
            }
            let plan = masks.and_then(|ms| ms.get(m)).and_then(|p| p.as_ref());
            let mask = plan.map(|p| (p.strategy, p.mask.clone()));
            if let Some((_, bits)) = &mask {
                if bits.len() != c.indices.len() {
                    return Err(CodecError::Malformed(format!(
                        "layer {} mask length {} vs {} tokens",
                        m,
                        bits.len(),
                        c.indices.len()
                    )));
                }
            }
            let mut indices = c.indices.clone();
            if let Some((_, bits)) = &mask {
                for (i, &masked) in bits.iter().enumerate() {
                    if masked {
                        indices[i] = 0;
                    }
                }
            }
            layers.push(TokenLayer {
                quant_dim: c.quant_dim,
                grid: [c.grid[0], c.grid[1], c.grid[2]],
                indices,
                mask,
            });
        }
        Ok(TokenStreamFile { layers })
    }

    /// Converts back to densest-first codes plus mask plans.
    #[allow(clippy::type_complexity)]
    pub fn to_codes<T: Real>(
        &self,
        cap: f64,
    ) -> Result<(Vec<LfqCodes<T>>, Vec<Option<MaskPlan>>), CodecError> {
        let mut codes = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            let grid = [layer.grid[0], layer.grid[1], layer.grid[2]];
            codes.push(
                lfq::codes_from_indices::<T>(&layer.indices, &grid, layer.quant_dim)
                    .map_err(|e| CodecError::Malformed(e.to_string()))?,
            );
            masks.push(layer.mask.as_ref().map(|(strategy, bits)| MaskPlan {
                grid,
                mask: bits.clone(),
                strategy: *strategy,
                cap,
            }));
        }
        Ok((codes, masks))
    }

    pub fn total_tokens(&self) -> usize {
        self.layers.iter().map(|l| l.token_count()).sum()
    }

    /// Flattened coarse-to-dense index sequence (mask placeholders included).
    pub fn flat_stream(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.total_tokens());
        for l in &self.layers {
            out.extend_from_slice(&l.indices);
        }
        out
    }
}

fn strategy_tag(s: MaskStrategy) -> u8 {
    match s {
        MaskStrategy::RepeatPrev => 0,
        MaskStrategy::Zero => 1,
        MaskStrategy::Learned => 2,
    }
}

fn strategy_from_tag(tag: u8) -> Result<MaskStrategy, CodecError> {
    match tag {
        0 => Ok(MaskStrategy::RepeatPrev),
        1 => Ok(MaskStrategy::Zero),
        2 => Ok(MaskStrategy::Learned),
        other => Err(CodecError::Malformed(format!("unknown mask strategy tag {}", other))),
    }
}

pub fn write_token_stream<W: Write>(file: &TokenStreamFile, mut w: W) -> Result<(), CodecError> {
    if file.layers.len() > u8::MAX as usize {
        return Err(CodecError::Malformed("too many layers".into()));
    }
    w.write_all(TOKEN_MAGIC)?;
    w.write_all(&[VERSION, file.layers.len() as u8])?;
    for layer in &file.layers {
        if layer.quant_dim == 0 || layer.quant_dim > 30 {
            return Err(CodecError::Malformed(format!(
                "quant_dim {} outside 1..=30",
                layer.quant_dim
            )));
        }
        if layer.indices.len() != layer.token_count() {
            return Err(CodecError::Malformed(format!(
                "{} indices for grid {:?}",
                layer.indices.len(),
                layer.grid
            )));
        }
        let mut qd = layer.quant_dim as u8;
        if layer.mask.is_some() {
            qd |= MASKED_FLAG;
        }
        w.write_all(&[qd])?;
        for &e in &layer.grid {
            if e > u16::MAX as usize {
                return Err(CodecError::Malformed(format!("grid extent {} exceeds u16", e)));
            }
            w.write_all(&(e as u16).to_le_bytes())?;
        }
        if let Some((strategy, _)) = &layer.mask {
            w.write_all(&[strategy_tag(*strategy)])?;
        }
    }
    let mut bits = BitWriter::new();
    for layer in &file.layers {
        let limit = 1u32 << layer.quant_dim;
        match &layer.mask {
            None => {
                for &idx in &layer.indices {
                    if idx >= limit {
                        return Err(CodecError::Malformed(format!(
                            "index {} exceeds {}-bit vocabulary",
                            idx, layer.quant_dim
                        )));
                    }
                    bits.write(idx, layer.quant_dim);
                }
            }
            Some((_, mask)) => {
                for &m in mask {
                    bits.write(m as u32, 1);
                }
                for (i, &idx) in layer.indices.iter().enumerate() {
                    if mask[i] {
                        continue;
                    }
                    if idx >= limit {
                        return Err(CodecError::Malformed(format!(
                            "index {} exceeds {}-bit vocabulary",
                            idx, layer.quant_dim
                        )));
                    }
                    bits.write(idx, layer.quant_dim);
                }
            }
        }
    }
    w.write_all(&bits.finish())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CodecError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CodecError::Truncated
        } else {
            CodecError::Io(e)
        }
    })
}

pub fn read_token_stream<R: Read>(mut r: R) -> Result<TokenStreamFile, CodecError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != TOKEN_MAGIC {
        return Err(CodecError::BadMagic("HTVT"));
    }
    let mut head = [0u8; 2];
    read_exact(&mut r, &mut head)?;
    if head[0] != VERSION {
        return Err(CodecError::Version(head[0]));
    }
    let layer_count = head[1] as usize;
    struct Header {
        quant_dim: usize,
        grid: [usize; 3],
        strategy: Option<MaskStrategy>,
    }
    let mut headers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let mut qd = [0u8; 1];
        read_exact(&mut r, &mut qd)?;
        let masked = qd[0] & MASKED_FLAG != 0;
        let quant_dim = (qd[0] & !MASKED_FLAG) as usize;
        if quant_dim == 0 || quant_dim > 30 {
            return Err(CodecError::Malformed(format!("quant_dim {} outside 1..=30", quant_dim)));
        }
        let mut grid = [0usize; 3];
        for g in &mut grid {
            let mut e = [0u8; 2];
            read_exact(&mut r, &mut e)?;
            *g = u16::from_le_bytes(e) as usize;
            if *g == 0 {
                return Err(CodecError::Malformed("zero grid extent".into()));
            }
        }
        let strategy = if masked {
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag)?;
            Some(strategy_from_tag(tag[0])?)
        } else {
            None
        };
        headers.push(Header {
            quant_dim,
            grid,
            strategy,
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    // the payload must be exactly the packed bits rounded up to a byte
    let mut expect_bits = 0usize;
    let mut reader = BitReader::new(&payload);
    let mut layers = Vec::with_capacity(layer_count);
    for h in headers {
        let n: usize = h.grid.iter().product();
        let layer = match h.strategy {
            None => {
                expect_bits += n * h.quant_dim;
                let indices = (0..n)
                    .map(|_| reader.read(h.quant_dim))
                    .collect::<Result<Vec<_>, _>>()?;
                TokenLayer {
                    quant_dim: h.quant_dim,
                    grid: h.grid,
                    indices,
                    mask: None,
                }
            }
            Some(strategy) => {
                let mask = (0..n)
                    .map(|_| reader.read(1).map(|b| b == 1))
                    .collect::<Result<Vec<bool>, _>>()?;
                let unmasked = mask.iter().filter(|&&m| !m).count();
                expect_bits += n + unmasked * h.quant_dim;
                let mut indices = vec![0u32; n];
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        indices[i] = reader.read(h.quant_dim)?;
                    }
                }
                TokenLayer {
                    quant_dim: h.quant_dim,
                    grid: h.grid,
                    indices,
                    mask: Some((strategy, mask)),
                }
            }
        };
        layers.push(layer);
    }
    if payload.len() != expect_bits.div_ceil(8) {
        return Err(CodecError::Malformed(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            expect_bits.div_ceil(8)
        )));
    }
    Ok(TokenStreamFile { layers })
}

pub fn write_token_stream_to_path(file: &TokenStreamFile, path: &Path) -> Result<(), CodecError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_token_stream(file, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_token_stream_from_path(path: &Path) -> Result<TokenStreamFile, CodecError> {
    read_token_stream(std::io::BufReader::new(std::fs::File::open(path)?))
}

// ---- video files -----------------------------------------------------------

pub fn write_video<W: Write>(video: &VideoBlock, mut w: W) -> Result<(), CodecError> {
    for &e in &[video.t, video.h, video.w] {
        if e > u16::MAX as usize {
            return Err(CodecError::Malformed(format!("extent {} exceeds u16", e)));
        }
    }
    if video.c > u8::MAX as usize || video.c == 0 {
        return Err(CodecError::Malformed(format!("channel count {}", video.c)));
    }
    w.write_all(VIDEO_MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(video.t as u16).to_le_bytes())?;
    w.write_all(&(video.h as u16).to_le_bytes())?;
    w.write_all(&(video.w as u16).to_le_bytes())?;
    w.write_all(&[video.c as u8])?;
    let bytes: Vec<u8> = video
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_video<R: Read>(mut r: R) -> Result<VideoBlock, CodecError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != VIDEO_MAGIC {
        return Err(CodecError::BadMagic("HTVV"));
    }
    let mut v = [0u8; 1];
    read_exact(&mut r, &mut v)?;
    if v[0] != VERSION {
        return Err(CodecError::Version(v[0]));
    }
    let mut dim = [0u8; 2];
    read_exact(&mut r, &mut dim)?;
    let t = u16::from_le_bytes(dim) as usize;
    read_exact(&mut r, &mut dim)?;
    let h = u16::from_le_bytes(dim) as usize;
    read_exact(&mut r, &mut dim)?;
    let w = u16::from_le_bytes(dim) as usize;
    let mut c = [0u8; 1];
    read_exact(&mut r, &mut c)?;
    let c = c[0] as usize;
    let mut payload = vec![0u8; t * h * w * c];
    read_exact(&mut r, &mut payload)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CodecError::Malformed("trailing bytes after payload".into()));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    VideoBlock::from_data(t, h, w, c, data).map_err(|e| CodecError::Malformed(e.to_string()))
}

pub fn write_video_to_path(video: &VideoBlock, path: &Path) -> Result<(), CodecError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_video(video, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_video_from_path(path: &Path) -> Result<VideoBlock, CodecError> {
    read_video(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// One binary PPM (P6, maxval 255) per frame, named frame_000000.ppm etc.
pub fn export_frames(video: &VideoBlock, dir: &Path) -> Result<Vec<std::path::PathBuf>, CodecError> {
    if video.c != 3 && video.c != 1 {
        return Err(CodecError::Malformed(format!(
            "PPM export supports 1 or 3 channels, got {}",
            video.c
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(video.t);
    for t in 0..video.t {
        let path = dir.join(format!("frame_{:06}.ppm", t));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write!(w, "P6\n{} {}\n255\n", video.w, video.h)?;
        let frame = video.frame(t);
        let mut bytes = Vec::with_capacity(video.h * video.w * 3);
        for px in frame.chunks_exact(video.c) {
            let rgb = if video.c == 3 {
                [px[0], px[1], px[2]]
            } else {
                [px[0], px[0], px[0]]
            };
            for v in rgb {
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&bytes)?;
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

// ---- compression accounting -------------------------------------------------

/// Input pixel count over token count (the tokenizer ratio convention).
pub fn compression_ratio(input_shape: [usize; 3], total_tokens: usize) -> f64 {
    let pixels: usize = input_shape.iter().product();
    pixels as f64 / total_tokens as f64
}

/// Total code bits over input pixels.
pub fn bits_per_pixel(cfg: &HierarchyConfig) -> f64 {
    let ts = cfg.token_shapes();
    let pixels = cfg.input_shape[0] * cfg.input_shape[1] * cfg.input_shape[2];
    ts.total_bits as f64 / pixels as f64
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CompressionStats {
    /// (tokens, quant_dim) per layer, densest first.
    pub per_layer: Vec<(usize, usize)>,
    pub total_tokens: usize,
    pub total_bits: usize,
    pub compression_ratio: f64,
    pub bits_per_pixel: f64,
    /// Packed payload size, final byte zero-padded.
    pub payload_bytes: usize,
}

pub fn stats(cfg: &HierarchyConfig) -> CompressionStats {
    let ts = cfg.token_shapes();
    let [t, h, w, _] = cfg.input_shape;
    CompressionStats {
        per_layer: ts.per_layer.clone(),
        total_tokens: ts.total_tokens,
        total_bits: ts.total_bits,
        compression_ratio: compression_ratio([t, h, w], ts.total_tokens),
        bits_per_pixel: bits_per_pixel(cfg),
        payload_bytes: ts.total_bits.div_ceil(8),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_file() -> TokenStreamFile {
        TokenStreamFile {
            layers: vec![
                TokenLayer {
                    quant_dim: 6,
                    grid: [1, 1, 1],
                    indices: vec![33],
                    mask: None,
                },
                TokenLayer {
                    quant_dim: 8,
                    grid: [2, 2, 2],
                    indices: (0..8).map(|i| i * 31 % 256).collect(),
                    mask: None,
                },
                TokenLayer {
                    quant_dim: 10,
                    grid: [4, 4, 4],
                    indices: (0..64).map(|i| (i * 13) % 1024).collect(),
                    mask: None,
                },
            ],
        }
    }

    #[test]
    fn desk_payload_is_89_bytes_and_round_trips() {
        let file = sample_file();
        let mut bytes = Vec::new();
        write_token_stream(&file, &mut bytes).unwrap();
        // header: 4 magic + 1 version + 1 count + 3 * (1 + 3*2)
        let header = 6 + 3 * 7;
        assert_eq!(bytes.len() - header, 89);
        let back = read_token_stream(&bytes[..]).unwrap();
        assert_eq!(back, file);
        let mut again = Vec::new();
        write_token_stream(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corrupt_magic_version_truncation_are_distinct_errors() {
        let file = sample_file();
        let mut bytes = Vec::new();
        write_token_stream(&file, &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_token_stream(&bad[..]), Err(CodecError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 3;
        assert!(matches!(read_token_stream(&bad[..]), Err(CodecError::Version(3))));

        let bad = &bytes[..bytes.len() - 4];
        assert!(matches!(read_token_stream(bad), Err(CodecError::Truncated)));
    }

    #[test]
    fn oversized_index_rejected_at_write() {
        let mut file = sample_file();
        file.layers[0].indices[0] = 64; // quant_dim 6 -> max 63
        let mut bytes = Vec::new();
        assert!(matches!(
            write_token_stream(&file, &mut bytes),
            Err(CodecError::Malformed(_))
        ));
    }

    #[test]
    fn masked_layer_round_trips_with_bitmap() {
        let mut file = sample_file();
        let n = file.layers[2].indices.len();
        let mask: Vec<bool> = (0..n).map(|i| i >= 16 && i % 3 == 0).collect();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                file.layers[2].indices[i] = 0;
            }
        }
        file.layers[2].mask = Some((MaskStrategy::RepeatPrev, mask.clone()));
        let mut bytes = Vec::new();
        write_token_stream(&file, &mut bytes).unwrap();
        let back = read_token_stream(&bytes[..]).unwrap();
        assert_eq!(back, file);
        // masked payload beats the unmasked payload when enough is masked
        let unmasked_bits = 6 + 64 + 640;
        let masked_count = mask.iter().filter(|&&m| m).count();
        let masked_bits = 6 + 64 + 64 + (64 - masked_count) * 10;
        let header = 6 + 3 * 7 + 1;
        assert_eq!(bytes.len(), header + masked_bits.div_ceil(8));
        assert!(masked_bits < unmasked_bits);
    }

    #[test]
    fn full_scale_ratio_and_bpp() {
        let cfg = HierarchyConfig::full_scale_multi_layer();
        let s = stats(&cfg);
        assert_eq!(s.total_tokens, 2448);
        assert!((s.compression_ratio - 1713.36).abs() < 0.05, "{}", s.compression_ratio);
        // 2048*18 + 256*16 + 128*14 + 16*3 = 42800 bits over 64*256*256 px
        assert_eq!(s.total_bits, 42800);
        assert!((s.bits_per_pixel - 42800.0 / 4194304.0).abs() < 1e-12);

        // EMU3-style row: 4x512x512 into 4096 tokens
        assert_eq!(compression_ratio([4, 512, 512], 4096), 256.0);
        // tokens == pixels
        assert_eq!(compression_ratio([2, 4, 4], 32), 1.0);
    }

    #[test]
    fn desk_bpp_is_total_bits_over_pixels() {
        let cfg = HierarchyConfig::desk_default();
        let s = stats(&cfg);
        assert_eq!(s.total_bits, 64 * 10 + 8 * 8 + 6);
        assert!((s.bits_per_pixel - 710.0 / 16384.0).abs() < 1e-12);
        assert_eq!(s.payload_bytes, 89);

        let single = HierarchyConfig {
            input_shape: [1, 1, 1, 3],
            layers: vec![crate::vae::LayerConfig { quant_dim: 1, latent_shape: [1, 1, 1] }],
            encoder: None,
            mask_strategy: MaskStrategy::Zero,
            mask_cap: 0.85,
        };
        assert_eq!(bits_per_pixel(&single), 1.0);
    }

    #[test]
    fn video_round_trip_is_bit_exact() {
        let mut v = VideoBlock::new(2, 3, 4, 3);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = (i % 256) as f32 / 255.0;
        }
        let mut bytes = Vec::new();
        write_video(&v, &mut bytes).unwrap();
        let back = read_video(&bytes[..]).unwrap();
        assert_eq!(back, v);
        let mut again = Vec::new();
        write_video(&back, &mut again).unwrap();
        assert_eq!(bytes, again);

        let mut bad = bytes.clone();
        bad[2] = b'!';
        assert!(matches!(read_video(&bad[..]), Err(CodecError::BadMagic(_))));
        assert!(matches!(
            read_video(&bytes[..bytes.len() - 1]),
            Err(CodecError::Truncated)
        ));
    }

    #[test]
    fn ppm_export_writes_one_file_per_frame() {
        let dir = std::env::temp_dir().join("hitok_ppm_test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut v = VideoBlock::new(3, 2, 2, 3);
        v.set(0, 0, 0, 0, 1.0);
        let paths = export_frames(&v, &dir).unwrap();
        assert_eq!(paths.len(), 3);
        let first = std::fs::read(&paths[0]).unwrap();
        assert!(first.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(first.len(), 11 + 12);
        assert_eq!(first[11], 255); // the red pixel
        std::fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn token_stream_round_trip(seed in 0u64..5000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let layer_count = rng.random_range(1..4usize);
            let mut layers = Vec::new();
            for _ in 0..layer_count {
                let qd = rng.random_range(1..=12usize);
                let grid = [
                    rng.random_range(1..4usize),
                    rng.random_range(1..4usize),
                    rng.random_range(1..4usize),
                ];
                let n: usize = grid.iter().product();
                let masked = rng.random_bool(0.4);
                let mask = if masked {
                    let plane = grid[1] * grid[2];
                    let bits: Vec<bool> = (0..n).map(|i| i >= plane && rng.random_bool(0.5)).collect();
                    Some((MaskStrategy::Zero, bits))
                } else {
                    None
                };
                let indices: Vec<u32> = (0..n)
                    .map(|i| {
                        if mask.as_ref().map(|(_, m)| m[i]).unwrap_or(false) {
                            0
                        } else {
                            rng.random_range(0..(1u32 << qd))
                        }
                    })
                    .collect();
                layers.push(TokenLayer { quant_dim: qd, grid, indices, mask });
            }
            let file = TokenStreamFile { layers };
            let mut bytes = Vec::new();
            write_token_stream(&file, &mut bytes).unwrap();
            let back = read_token_stream(&bytes[..]).unwrap();
            prop_assert_eq!(&back, &file);
            let mut again = Vec::new();
            write_token_stream(&back, &mut again).unwrap();
            prop_assert_eq!(bytes, again);
        }

        #[test]
        fn video_round_trip_random(seed in 0u64..2000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (t, h, w, c) = (
                rng.random_range(1..3usize),
                rng.random_range(1..5usize),
                rng.random_range(1..5usize),
                rng.random_range(1..4usize),
            );
            let mut v = VideoBlock::new(t, h, w, c);
            for x in v.data_mut() {
                *x = rng.random_range(0..=255u32) as f32 / 255.0;
            }
            let mut bytes = Vec::new();
            write_video(&v, &mut bytes).unwrap();
            let back = read_video(&bytes[..]).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
