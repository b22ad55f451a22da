//! Procedural video + caption generator and the rule-based oracle that
//! scores caption consistency of (possibly blurry) reconstructions.
//!
//! Scenes are one colored shape moving linearly over a gray background.
//! Colors are pure channels so the color oracle is unambiguous; shapes are
//! classified by the fill ratio of their bounding box (square ~ 1.0,
//! circle ~ pi/4, triangle ~ 0.5) and motion by the sign of the centroid
//! displacement between the first and last frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::video::VideoBlock;

pub const BACKGROUND: f32 = 0.5;
/// Foreground = any channel deviating from the background by more than this.
pub const FG_THRESHOLD: f32 = 0.2;
pub const MIN_OBJECT: usize = 8;
pub const MAX_OBJECT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
pub const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
pub const MOTIONS: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Ideal bounding-box fill ratio used by the oracle's nearest-match.
    pub fn fill_ratio(self) -> f64 {
        match self {
            Shape::Square => 1.0,
            Shape::Circle => std::f64::consts::FRAC_PI_4,
            Shape::Triangle => 0.5,
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }

    fn channel(self) -> usize {
        match self {
            Color::Red => 0,
            Color::Green => 1,
            Color::Blue => 2,
        }
    }
}

impl Motion {
    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
        }
    }

    /// (dx, dy) step per frame at speed 1; y grows downward.
    fn velocity(self) -> (i64, i64) {
        match self {
            Motion::Left => (-1, 0),
            Motion::Right => (1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    /// Pixels per frame along the motion axis.
    pub speed: usize,
    /// Object bounding-box side length in pixels.
    pub size: usize,
    /// Top-left corner of the object in frame 0 (x, y).
    pub start: (usize, usize),
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} moves {}",
            self.color.word(),
            self.shape.word(),
            self.motion.word()
        )
    }
}

/// True if bbox-local pixel (i = row, j = col) belongs to the shape.
fn shape_mask(shape: Shape, size: usize, i: usize, j: usize) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let c = (size as f64 - 1.0) / 2.0;
            let r = size as f64 / 2.0;
            let (di, dj) = (i as f64 - c, j as f64 - c);
            di * di + dj * dj <= r * r
        }
        Shape::Triangle => {
            // apex-up isoceles filling half the box
            let c = (size as f64 - 1.0) / 2.0;
            let half = (i as f64 + 1.0) / 2.0;
            (j as f64 - c).abs() <= half
        }
    }
}

/// Rasterizes the scene; the object is clamped so it stays fully in frame.
pub fn make_clip(spec: &SceneSpec, t: usize, h: usize, w: usize) -> (VideoBlock, String) {
    let mut video = VideoBlock::filled(t, h, w, 3, BACKGROUND);
    let rgb = spec.color.rgb();
    let (vx, vy) = spec.motion.velocity();
    let size = spec.size.min(h).min(w);
    for frame in 0..t {
        let step = (frame * spec.speed) as i64;
        let x = (spec.start.0 as i64 + vx * step).clamp(0, (w - size) as i64) as usize;
        let y = (spec.start.1 as i64 + vy * step).clamp(0, (h - size) as i64) as usize;
        for i in 0..size {
            for j in 0..size {
                if shape_mask(spec.shape, size, i, j) {
                    for (c, &v) in rgb.iter().enumerate() {
                        video.set(frame, y + i, x + j, c, v);
                    }
                }
            }
        }
    }
    (video, spec.caption())
}

/// Draws a spec whose full trajectory fits in frame (start position chosen
/// inside the valid band for the motion direction).
pub fn random_spec(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> SceneSpec {
    let shape = SHAPES[rng.random_range(0..SHAPES.len())];
    let color = COLORS[rng.random_range(0..COLORS.len())];
    let motion = MOTIONS[rng.random_range(0..MOTIONS.len())];
    let max_size = MAX_OBJECT.min(h.saturating_sub(2)).min(w.saturating_sub(2)).max(4);
    let min_size = MIN_OBJECT.min(max_size);
    let size = rng.random_range(min_size..=max_size);
    let speed = 1usize;
    let travel = (t - 1) * speed;
    let band = |extent: usize| -> usize { (extent - size).saturating_sub(travel) };
    let (vx, vy) = motion.velocity();
    let x = if vx > 0 {
        rng.random_range(0..=band(w))
    } else if vx < 0 {
        let lo = (w - size).min(travel);
        rng.random_range(lo..=(w - size))
    } else {
        rng.random_range(0..=(w - size))
    };
    let y = if vy > 0 {
        rng.random_range(0..=band(h))
    } else if vy < 0 {
        let lo = (h - size).min(travel);
        rng.random_range(lo..=(h - size))
    } else {
        rng.random_range(0..=(h - size))
    };
    SceneSpec {
        shape,
        color,
        motion,
        speed,
        size,
        start: (x, y),
    }
}

/// Deterministic dataset of (clip, spec, caption) triples.
pub fn dataset(
    seed: u64,
    count: usize,
    t: usize,
    h: usize,
    w: usize,
) -> Vec<(VideoBlock, SceneSpec, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let spec = random_spec(&mut rng, t, h, w);
            let (clip, caption) = make_clip(&spec, t, h, w);
            (clip, spec, caption)
        })
        .collect()
}

// ---- caption tokens ------------------------------------------------------

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const UNCOND: u32 = 2;

/// Fixed word-level vocabulary: specials then the caption grammar words.
pub const VOCAB: [&str; 15] = [
    "<pad>", "<bos>", "<uncond>", "a", "red", "green", "blue", "square", "circle", "triangle",
    "moves", "left", "right", "up", "down",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("caption length {got} exceeds text length {max}")]
    TooLong { got: usize, max: usize },
}

pub fn word_id(word: &str) -> Result<u32, CaptionError> {
    VOCAB
        .iter()
        .position(|&w| w == word)
        .map(|i| i as u32)
        .ok_or_else(|| CaptionError::UnknownWord(word.to_string()))
}

/// `<bos>` + words, right-padded with `<pad>` to `text_len`.
pub fn tokenize(caption: &str, text_len: usize) -> Result<Vec<u32>, CaptionError> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.len() + 1 > text_len {
        return Err(CaptionError::TooLong {
            got: words.len() + 1,
            max: text_len,
        });
    }
    let mut ids = Vec::with_capacity(text_len);
    ids.push(BOS);
    for w in words {
        ids.push(word_id(w)?);
    }
    ids.resize(text_len, PAD);
    Ok(ids)
}

// ---- oracle ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleReport {
    pub foreground_found: bool,
    pub color_pass: bool,
    pub motion_pass: bool,
    pub shape_pass: bool,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.foreground_found && self.color_pass && self.motion_pass && self.shape_pass
    }

    fn all_fail() -> Self {
        OracleReport {
            foreground_found: false,
            color_pass: false,
            motion_pass: false,
            shape_pass: false,
        }
    }
}

fn parse_caption(caption: &str) -> Option<(Color, Shape, Motion)> {
    let mut color = None;
    let mut shape = None;
    let mut motion = None;
    for word in caption.split_whitespace() {
        if let Some(&c) = COLORS.iter().find(|c| c.word() == word) {
            color = Some(c);
        }
        if let Some(&s) = SHAPES.iter().find(|s| s.word() == word) {
            shape = Some(s);
        }
        if let Some(&m) = MOTIONS.iter().find(|m| m.word() == word) {
            motion = Some(m);
        }
    }
    Some((color?, shape?, motion?))
}

fn foreground(frame: &[f32], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            let dev = (0..3)
                .map(|c| (frame[base + c] - BACKGROUND).abs())
                .fold(0.0f32, f32::max);
            if dev > FG_THRESHOLD {
                pixels.push((x, y));
            }
        }
    }
    pixels
}

fn centroid(pixels: &[(usize, usize)]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let sx: usize = pixels.iter().map(|p| p.0).sum();
    let sy: usize = pixels.iter().map(|p| p.1).sum();
    (sx as f64 / n, sy as f64 / n)
}

/// Per-attribute pass/fail of a clip against its caption. Color comes from
/// the dominant channel over foreground pixels, motion from the first-to-
/// last-frame centroid displacement, shape from the mean bounding-box fill
/// ratio. A clip with no foreground at all fails every attribute.
pub fn caption_oracle(video: &VideoBlock, caption: &str) -> OracleReport {
    let Some((want_color, want_shape, want_motion)) = parse_caption(caption) else {
        return OracleReport::all_fail();
    };
    if video.c != 3 {
        return OracleReport::all_fail();
    }
    let (h, w) = (video.h, video.w);

    let mut channel_votes = [0usize; 3];
    let mut fill_ratios = Vec::new();
    let mut first_centroid = None;
    let mut last_centroid = None;
    let mut any_fg = false;
    for t in 0..video.t {
        let frame = video.frame(t);
        let fg = foreground(frame, h, w);
        if fg.is_empty() {
            continue;
        }
        any_fg = true;
        if t == 0 {
            first_centroid = Some(centroid(&fg));
        }
        if t == video.t - 1 {
            last_centroid = Some(centroid(&fg));
        }
        for &(x, y) in &fg {
            let base = (y * w + x) * 3;
            let mut best = 0;
            for c in 1..3 {
                if frame[base + c] > frame[base + best] {
                    best = c;
                }
            }
            channel_votes[best] += 1;
        }
        let (min_x, max_x) = fg.iter().map(|p| p.0).fold((usize::MAX, 0), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (min_y, max_y) = fg.iter().map(|p| p.1).fold((usize::MAX, 0), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let bbox = (max_x - min_x + 1) * (max_y - min_y + 1);
        fill_ratios.push(fg.len() as f64 / bbox as f64);
    }
    if !any_fg {
        return OracleReport::all_fail();
    }

    let dominant = (0..3).max_by_key(|&c| channel_votes[c]).unwrap();
    let color_pass = dominant == want_color.channel();

    let motion_pass = match (first_centroid, last_centroid) {
        (Some((x0, y0)), Some((x1, y1))) => {
            let (dx, dy) = (x1 - x0, y1 - y0);
            if dx.abs() > dy.abs() {
                matches!(
                    (want_motion, dx > 0.0),
                    (Motion::Right, true) | (Motion::Left, false)
                )
            } else if dy.abs() > dx.abs() {
                matches!(
                    (want_motion, dy > 0.0),
                    (Motion::Down, true) | (Motion::Up, false)
                )
            } else {
                false
            }
        }
        _ => false,
    };

    let mean_fill = fill_ratios.iter().sum::<f64>() / fill_ratios.len() as f64;
    let nearest = SHAPES
        .iter()
        .min_by(|a, b| {
            (a.fill_ratio() - mean_fill)
                .abs()
                .partial_cmp(&(b.fill_ratio() - mean_fill).abs())
                .unwrap()
        })
        .unwrap();
    let shape_pass = *nearest == want_shape;

    OracleReport {
        foreground_found: true,
        color_pass,
        motion_pass,
        shape_pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, color: Color, motion: Motion, size: usize) -> SceneSpec {
        // center-ish start leaves room to move in any direction
        SceneSpec {
            shape,
            color,
            motion,
            speed: 1,
            size,
            start: (10, 10),
        }
    }

    #[test]
    fn speed_zero_clip_is_static() {
        let mut s = spec(Shape::Square, Color::Red, Motion::Right, 8);
        s.speed = 0;
        let (clip, _) = make_clip(&s, 6, 32, 32);
        for t in 1..6 {
            assert_eq!(clip.frame(t), clip.frame(0));
        }
    }

    #[test]
    fn square_moving_right_shifts_centroid_by_one() {
        let s = spec(Shape::Square, Color::Red, Motion::Right, 8);
        let (clip, _) = make_clip(&s, 8, 32, 32);
        let mut prev: Option<f64> = None;
        for t in 0..8 {
            let fg = foreground(clip.frame(t), 32, 32);
            let (cx, _) = centroid(&fg);
            if let Some(p) = prev {
                assert!((cx - p - 1.0).abs() < 1e-9, "dx = {}", cx - p);
            }
            prev = Some(cx);
        }
    }

    #[test]
    fn clips_are_deterministic() {
        let s = spec(Shape::Circle, Color::Blue, Motion::Up, 9);
        let (a, ca) = make_clip(&s, 5, 32, 32);
        let (b, cb) = make_clip(&s, 5, 32, 32);
        assert_eq!(a.data(), b.data());
        assert_eq!(ca, cb);
    }

    #[test]
    fn dataset_is_seed_deterministic_and_covers_grammar() {
        let d1 = dataset(7, 100, 4, 32, 32);
        let d2 = dataset(7, 100, 4, 32, 32);
        assert_eq!(d1.len(), 100);
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.0.data(), b.0.data());
            assert_eq!(a.2, b.2);
        }
        assert_ne!(d1[0].0.data(), d1[1].0.data());

        let big = dataset(11, 1000, 4, 32, 32);
        let mut seen = std::collections::HashSet::new();
        for (_, s, _) in &big {
            seen.insert((s.shape.word(), s.color.word(), s.motion.word()));
        }
        assert_eq!(seen.len(), 36, "all grammar combinations appear");
    }

    #[test]
    fn oracle_passes_every_grammar_spec() {
        for &shape in &SHAPES {
            for &color in &COLORS {
                for &motion in &MOTIONS {
                    for size in [8, 10, 12] {
                        let s = spec(shape, color, motion, size);
                        let (clip, caption) = make_clip(&s, 16, 32, 32);
                        let report = caption_oracle(&clip, &caption);
                        assert!(
                            report.all_pass(),
                            "{} size {}: {:?}",
                            caption,
                            size,
                            report
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_gray_fails_everything() {
        let clip = VideoBlock::filled(4, 32, 32, 3, BACKGROUND);
        let report = caption_oracle(&clip, "a red square moves right");
        assert!(!report.foreground_found);
        assert!(!report.color_pass && !report.motion_pass && !report.shape_pass);
    }

    #[test]
    fn mirrored_clip_fails_motion() {
        for &motion in &[Motion::Left, Motion::Right] {
            let s = spec(Shape::Square, Color::Green, motion, 8);
            let (clip, caption) = make_clip(&s, 16, 32, 32);
            // mirror horizontally
            let mut mirrored = clip.clone();
            for t in 0..clip.t {
                for y in 0..clip.h {
                    for x in 0..clip.w {
                        for c in 0..3 {
                            mirrored.set(t, y, clip.w - 1 - x, c, clip.get(t, y, x, c));
                        }
                    }
                }
            }
            let report = caption_oracle(&mirrored, &caption);
            assert!(!report.motion_pass, "{}", caption);
            assert!(report.color_pass && report.shape_pass);
        }
    }

    #[test]
    fn tokenize_pads_right() {
        let ids = tokenize("a red square moves right", 8).unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[0], BOS);
        assert_eq!(&ids[6..], &[PAD, PAD]);
        assert!(tokenize("a red square moves right", 4).is_err());
        assert!(tokenize("a purple square moves right", 8).is_err());
    }
}
