//! Redundancy detection over quantized latents and mask-plan construction
//! for dynamic encoding / masked decoding.
//!
//! Scores are normalized Hamming distances between a position's sign
//! vector and the same position one frame earlier. Positions scoring
//! strictly below the mean are mask candidates; the plan never exceeds the
//! cap and never touches frame 0.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lfq::LfqCodes;
use crate::tensor::{Real, Tensor, TensorError};

pub const DEFAULT_CAP: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    RepeatPrev,
    Zero,
    Learned,
}

impl MaskStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::RepeatPrev => "repeat",
            MaskStrategy::Zero => "zero",
            MaskStrategy::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "repeat" | "repeat_prev" => Some(MaskStrategy::RepeatPrev),
            "zero" => Some(MaskStrategy::Zero),
            "learned" => Some(MaskStrategy::Learned),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("cap {0} outside (0, 1]")]
    BadCap(f64),
    #[error("mask grid {got:?} does not match latent grid {want:?}")]
    GridMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error("learned strategy requires a learned token vector")]
    LearnedTokenMissing,
    #[error("learned token length {got} does not match channel count {want}")]
    LearnedTokenLength { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-position mask decisions for one layer's latent grid.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    /// Latent grid extents (t, h, w).
    pub grid: [usize; 3],
    /// Raster-ordered mask; true = substituted. Frame 0 is always false.
    pub mask: Vec<bool>,
    pub strategy: MaskStrategy,
    pub cap: f64,
}

impl MaskPlan {
    pub fn empty(grid: [usize; 3], strategy: MaskStrategy, cap: f64) -> Self {
        MaskPlan {
            grid,
            mask: vec![false; grid.iter().product()],
            strategy,
            cap,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Fraction of maskable positions (frames 1..T) currently masked.
    pub fn masked_fraction(&self) -> f64 {
        let maskable = (self.grid[0].saturating_sub(1)) * self.grid[1] * self.grid[2];
        if maskable == 0 {
            0.0
        } else {
            self.masked_count() as f64 / maskable as f64
        }
    }
}

/// Per-position inter-frame code-change scores: the Hamming distance
/// between the sign vectors at (t, h, w) and (t-1, h, w), normalized by
/// quant_dim. Frames 1..T-1 in raster order; frame 0 has no score.
pub fn diff_matrix<T: Real>(codes: &LfqCodes<T>) -> Vec<f64> {
    let [t, h, w] = [codes.grid[0], codes.grid[1], codes.grid[2]];
    let plane = h * w;
    let qd = codes.quant_dim as f64;
    let mut scores = Vec::with_capacity(t.saturating_sub(1) * plane);
    for frame in 1..t {
        for pos in 0..plane {
            let a = codes.indices[frame * plane + pos];
            let b = codes.indices[(frame - 1) * plane + pos];
            scores.push((a ^ b).count_ones() as f64 / qd);
        }
    }
    scores
}

/// Builds a plan from difference scores: candidates score strictly below
/// the mean; if they exceed cap * maskable, a uniform sample without
/// replacement trims them to the cap. Frame 0 is excluded by construction.
pub fn build_mask(
    scores: &[f64],
    grid: [usize; 3],
    strategy: MaskStrategy,
    cap: f64,
    rng: &mut impl Rng,
) -> Result<MaskPlan, MaskError> {
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(MaskError::BadCap(cap));
    }
    let [t, h, w] = grid;
    let plane = h * w;
    let maskable = t.saturating_sub(1) * plane;
    if scores.len() != maskable {
        return Err(MaskError::GridMismatch {
            got: vec![scores.len()],
            want: vec![maskable],
        });
    }
    let mut plan = MaskPlan::empty(grid, strategy, cap);
    if maskable == 0 {
        return Ok(plan);
    }
    let mean = scores.iter().sum::<f64>() / maskable as f64;
    let mut candidates: Vec<usize> = (0..maskable).filter(|&i| scores[i] < mean).collect();
    let cap_count = (cap * maskable as f64).floor() as usize;
    if candidates.len() > cap_count {
        candidates.shuffle(rng);
        candidates.truncate(cap_count);
    }
    for idx in candidates {
        plan.mask[plane + idx] = true; // offset past frame 0
    }
    Ok(plan)
}

/// Substitutes masked positions of a latent grid (last axis = channels).
/// repeat_prev scans t ascending and copies the (t-1) vector, which may
/// itself already be substituted; zero writes the zero vector; learned
/// writes the provided token.
pub fn apply_mask<T: Real>(
    latent: &Tensor<T>,
    plan: &MaskPlan,
    learned_token: Option<&[T]>,
) -> Result<Tensor<T>, MaskError> {
    let shape = latent.shape();
    if shape.len() != 4 || shape[..3] != plan.grid {
        return Err(MaskError::GridMismatch {
            got: shape.to_vec(),
            want: plan.grid.to_vec(),
        });
    }
    let c = shape[3];
    match (plan.strategy, learned_token) {
        (MaskStrategy::Learned, None) => return Err(MaskError::LearnedTokenMissing),
        (MaskStrategy::Learned, Some(tok)) if tok.len() != c => {
            return Err(MaskError::LearnedTokenLength {
                got: tok.len(),
                want: c,
            })
        }
        _ => {}
    }
    let plane = plan.grid[1] * plan.grid[2];
    let mut data = latent.data().to_vec();
    for t in 0..plan.grid[0] {
        for pos in 0..plane {
            if !plan.mask[t * plane + pos] {
                continue;
            }
            let at = (t * plane + pos) * c;
            match plan.strategy {
                MaskStrategy::RepeatPrev => {
                    debug_assert!(t > 0, "frame 0 is never masked");
                    let prev = ((t - 1) * plane + pos) * c;
                    let (before, after) = data.split_at_mut(at);
                    after[..c].copy_from_slice(&before[prev..prev + c]);
                }
                MaskStrategy::Zero => data[at..at + c].iter_mut().for_each(|v| *v = T::zero()),
                MaskStrategy::Learned => {
                    data[at..at + c].copy_from_slice(learned_token.expect("checked above"))
                }
            }
        }
    }
    Ok(Tensor::from_vec(shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lfq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codes_from(indices: Vec<u32>, grid: [usize; 3], qd: usize) -> LfqCodes<f64> {
        lfq::codes_from_indices(&indices, &grid, qd).unwrap()
    }

    #[test]
    fn static_codes_score_zero() {
        let codes = codes_from(vec![5, 3, 5, 3, 5, 3], [3, 1, 2], 3);
        assert_eq!(diff_matrix(&codes), vec![0.0; 4]);
    }

    #[test]
    fn full_bit_flip_scores_one() {
        // frame alternates 000 and 111 at every position
        let codes = codes_from(vec![0, 0, 7, 7, 0, 0], [3, 1, 2], 3);
        assert_eq!(diff_matrix(&codes), vec![1.0; 4]);
    }

    #[test]
    fn diff_matches_bit_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let grid = [3usize, 2, 2];
        let qd = 4usize;
        let indices: Vec<u32> = (0..12).map(|_| rng.random_range(0..16)).collect();
        let codes = codes_from(indices.clone(), grid, qd);
        let scores = diff_matrix(&codes);
        // brute-force comparison of individual sign bits
        let mut want = Vec::new();
        for t in 1..3 {
            for pos in 0..4 {
                let a = lfq::index_to_signs::<f64>(indices[t * 4 + pos], qd).unwrap();
                let b = lfq::index_to_signs::<f64>(indices[(t - 1) * 4 + pos], qd).unwrap();
                let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
                want.push(differing as f64 / qd as f64);
            }
        }
        assert_eq!(scores, want);
    }

    #[test]
    fn equal_scores_mask_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = build_mask(&[0.25; 8], [3, 2, 2], MaskStrategy::Zero, 0.85, &mut rng).unwrap();
        assert_eq!(plan.masked_count(), 0);
    }

    #[test]
    fn below_mean_rule_masks_exactly_the_low_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // five maskable positions, cap 0.85 -> floor(4.25) = 4 allowed
        let scores = [0.0, 0.0, 0.0, 0.0, 10.0];
        let plan = build_mask(&scores, [6, 1, 1], MaskStrategy::Zero, 0.85, &mut rng).unwrap();
        assert_eq!(plan.masked_count(), 4);
        assert_eq!(&plan.mask[..1], &[false]); // frame 0
        assert_eq!(&plan.mask[1..5], &[true, true, true, true]);
        assert!(!plan.mask[5]);
    }

    #[test]
    fn cap_enforced_over_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..1000 {
            let grid = [
                rng.random_range(1..5usize),
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
            ];
            let maskable = (grid[0] - 1) * grid[1] * grid[2];
            let scores: Vec<f64> = (0..maskable).map(|_| rng.random_range(0.0..1.0)).collect();
            let plan = build_mask(&scores, grid, MaskStrategy::RepeatPrev, 0.85, &mut rng).unwrap();
            assert!(
                plan.masked_fraction() <= 0.85 + 1e-12,
                "trial {}: fraction {}",
                trial,
                plan.masked_fraction()
            );
            let plane = grid[1] * grid[2];
            assert!(plan.mask[..plane].iter().all(|&m| !m), "frame 0 masked");
            // strict below-mean rule against a brute-force candidate count
            if maskable > 0 {
                let mean = scores.iter().sum::<f64>() / maskable as f64;
                let candidates = scores.iter().filter(|&&s| s < mean).count();
                let cap_count = (0.85 * maskable as f64).floor() as usize;
                assert_eq!(plan.masked_count(), candidates.min(cap_count));
            }
        }
    }

    #[test]
    fn empty_mask_is_identity() {
        let latent = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        let plan = MaskPlan::empty([2, 1, 1], MaskStrategy::Zero, 0.85);
        let out = apply_mask(&latent, &plan, None).unwrap();
        assert_eq!(out.data(), latent.data());
    }

    #[test]
    fn repeat_prev_cascades_from_frame_zero() {
        let latent =
            Tensor::from_vec(&[4, 1, 1, 2], vec![1.0, 2.0, 9.0, 9.0, 8.0, 8.0, 7.0, 7.0]).unwrap();
        let mut plan = MaskPlan::empty([4, 1, 1], MaskStrategy::RepeatPrev, 1.0);
        for t in 1..4 {
            plan.mask[t] = true;
        }
        let out = apply_mask(&latent, &plan, None).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_strategy_zeroes_only_masked() {
        let latent =
            Tensor::from_vec(&[2, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut plan = MaskPlan::empty([2, 1, 2], MaskStrategy::Zero, 1.0);
        plan.mask[3] = true; // frame 1, second position
        let out = apply_mask(&latent, &plan, None).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn learned_strategy_needs_its_token() {
        let latent = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0; 4]).unwrap();
        let mut plan = MaskPlan::empty([2, 1, 1], MaskStrategy::Learned, 1.0);
        plan.mask[1] = true;
        assert!(matches!(
            apply_mask(&latent, &plan, None),
            Err(MaskError::LearnedTokenMissing)
        ));
        let out = apply_mask(&latent, &plan, Some(&[0.5, -0.5])).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 0.5, -0.5]);
        assert!(matches!(
            apply_mask(&latent, &plan, Some(&[0.5])),
            Err(MaskError::LearnedTokenLength { .. })
        ));
    }

    #[test]
    fn build_then_apply_is_seed_deterministic() {
        let mut scores = vec![0.0f64; 32 * 3];
        for (i, s) in scores.iter_mut().enumerate() {
            *s = (i % 7) as f64 / 7.0;
        }
        let grid = [4usize, 4, 8];
        // cap low enough that the without-replacement sampling must run
        let mk = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            build_mask(&scores, grid, MaskStrategy::RepeatPrev, 0.1, &mut rng).unwrap()
        };
        assert_eq!(mk(5).mask, mk(5).mask);
        assert_ne!(mk(5).mask, mk(6).mask);
    }
}
