//! Reconstruction metrics: PSNR and SSIM over unit-interval clips.
//!
//! SSIM uses uniform (not Gaussian) 8x8 windows at stride 8, computed per
//! channel per frame and averaged; variances are population (divide by N).

use serde::Serialize;
use thiserror::Error;

use crate::video::VideoBlock;

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("frames {0}x{1} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    FrameTooSmall(usize, usize),
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_frame_psnr: Vec<f64>,
    pub per_frame_ssim: Vec<f64>,
}

/// Per-frame 10*log10(1/MSE) with MAX = 1, capped at 99 dB, averaged
/// over frames.
pub fn psnr(a: &VideoBlock, b: &VideoBlock) -> Result<MetricReport, MetricError> {
    let per_frame_psnr = per_frame_psnr(a, b)?;
    let per_frame_ssim = per_frame_ssim(a, b)?;
    Ok(MetricReport {
        psnr_db: mean(&per_frame_psnr),
        ssim: mean(&per_frame_ssim),
        per_frame_psnr,
        per_frame_ssim,
    })
}

/// Mean-of-frames PSNR only (no SSIM pass).
pub fn psnr_only(a: &VideoBlock, b: &VideoBlock) -> Result<f64, MetricError> {
    Ok(mean(&per_frame_psnr(a, b)?))
}

pub fn ssim(a: &VideoBlock, b: &VideoBlock) -> Result<f64, MetricError> {
    Ok(mean(&per_frame_ssim(a, b)?))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_shapes(a: &VideoBlock, b: &VideoBlock) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

fn per_frame_psnr(a: &VideoBlock, b: &VideoBlock) -> Result<Vec<f64>, MetricError> {
    check_shapes(a, b)?;
    let n = (a.h * a.w * a.c) as f64;
    let mut out = Vec::with_capacity(a.t);
    for t in 0..a.t {
        let (fa, fb) = (a.frame(t), b.frame(t));
        let mut se = 0.0f64;
        for (x, y) in fa.iter().zip(fb) {
            let d = *x as f64 - *y as f64;
            se += d * d;
        }
        let mse = se / n;
        let db = if mse == 0.0 {
            PSNR_CAP
        } else {
            (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
        };
        out.push(db);
    }
    Ok(out)
}

fn per_frame_ssim(a: &VideoBlock, b: &VideoBlock) -> Result<Vec<f64>, MetricError> {
    check_shapes(a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(MetricError::FrameTooSmall(a.h, a.w));
    }
    let mut out = Vec::with_capacity(a.t);
    for t in 0..a.t {
        let mut acc = 0.0;
        let mut windows = 0usize;
        for c in 0..a.c {
            for wy in (0..=a.h - SSIM_WINDOW).step_by(SSIM_WINDOW) {
                for wx in (0..=a.w - SSIM_WINDOW).step_by(SSIM_WINDOW) {
                    acc += window_ssim(a, b, t, c, wy, wx);
                    windows += 1;
                }
            }
        }
        out.push(acc / windows as f64);
    }
    Ok(out)
}

fn window_ssim(a: &VideoBlock, b: &VideoBlock, t: usize, c: usize, wy: usize, wx: usize) -> f64 {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for y in wy..wy + SSIM_WINDOW {
        for x in wx..wx + SSIM_WINDOW {
            let va = a.get(t, y, x, c) as f64;
            let vb = b.get(t, y, x, c) as f64;
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let va = saa / n - ma * ma;
    let vb = sbb / n - mb * mb;
    let cov = sab / n - ma * mb;
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> VideoBlock {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        VideoBlock::from_data(t, h, w, 3, data).unwrap()
    }

    #[test]
    fn identical_inputs_hit_the_caps() {
        let a = random_clip(1, 3, 16, 16);
        let r = psnr(&a, &a).unwrap();
        assert_eq!(r.psnr_db, PSNR_CAP);
        assert!(r.per_frame_psnr.iter().all(|&v| v == PSNR_CAP));
        assert!((r.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_gives_twenty_db() {
        let a = VideoBlock::filled(4, 16, 16, 3, 0.4);
        let b = VideoBlock::filled(4, 16, 16, 3, 0.5);
        let db = psnr_only(&a, &b).unwrap();
        assert!((db - 20.0).abs() < 1e-6, "db = {}", db);
    }

    #[test]
    fn psnr_matches_two_loop_mse_oracle() {
        let a = random_clip(2, 2, 16, 16);
        let b = random_clip(3, 2, 16, 16);
        let report = psnr(&a, &b).unwrap();
        // brute-force per-frame MSE
        for t in 0..2 {
            let mut se = 0.0f64;
            for i in 0..16 * 16 * 3 {
                let d = a.frame(t)[i] as f64 - b.frame(t)[i] as f64;
                se += d * d;
            }
            let want = 10.0 * (1.0 / (se / (16.0 * 16.0 * 3.0))).log10();
            assert!((report.per_frame_psnr[t] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_of_inverted_structure_is_below_one() {
        let a = random_clip(4, 2, 16, 16);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v = 1.0 - *v;
        }
        let s = ssim(&a, &b).unwrap();
        assert!(s < 1.0, "s = {}", s);
    }

    #[test]
    fn constant_frames_reduce_to_the_luminance_term() {
        let a = VideoBlock::filled(1, 8, 8, 1, 0.3);
        let b = VideoBlock::filled(1, 8, 8, 1, 0.7);
        let s = ssim(&a, &b).unwrap();
        // the clip stores f32, so the closed form sees the rounded values
        let (x, y) = (0.3f32 as f64, 0.7f32 as f64);
        let want = (2.0 * x * y + C1) / (x * x + y * y + C1);
        assert!((s - want).abs() < 1e-9, "{} vs {}", s, want);
        assert!((s - 0.7241).abs() < 1e-4);
    }

    #[test]
    fn symmetry_under_swap_and_frame_permutation() {
        let a = random_clip(5, 4, 16, 16);
        let b = random_clip(6, 4, 16, 16);
        let r1 = psnr(&a, &b).unwrap();
        let r2 = psnr(&b, &a).unwrap();
        assert_eq!(r1.psnr_db, r2.psnr_db);
        assert_eq!(r1.ssim, r2.ssim);

        // reverse frames of both: per-clip means are invariant
        let rev = |v: &VideoBlock| {
            let mut out = v.clone();
            for t in 0..v.t {
                let n = v.h * v.w * v.c;
                out.data_mut()[t * n..(t + 1) * n].copy_from_slice(v.frame(v.t - 1 - t));
            }
            out
        };
        let r3 = psnr(&rev(&a), &rev(&b)).unwrap();
        assert!((r3.psnr_db - r1.psnr_db).abs() < 1e-12);
        assert!((r3.ssim - r1.ssim).abs() < 1e-12);
    }

    #[test]
    fn shape_and_window_errors() {
        let a = random_clip(7, 2, 16, 16);
        let b = random_clip(7, 2, 16, 8);
        assert!(matches!(psnr(&a, &b), Err(MetricError::ShapeMismatch(..))));
        let tiny = random_clip(8, 1, 4, 4);
        assert!(matches!(ssim(&tiny, &tiny), Err(MetricError::FrameTooSmall(..))));
    }
}
