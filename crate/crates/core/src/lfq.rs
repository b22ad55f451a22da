//! Lookup-free quantization: codes are the elementwise signs of a
//! low-dimensional latent, the code index is the bit pattern of those
//! signs, and there is no learned codebook table.
//!
//! The entropy penalty models each token as a factorized Bernoulli over
//! bits, p_i = sigmoid(2 z_i / tau). The confidence term is the mean over
//! tokens of the summed per-bit binary entropies (it factorizes exactly).
//! The usage term is the entropy of the batch-mean code distribution over
//! all 2^quant_dim codewords: a purely per-bit usage term is satisfiable
//! by a pair of anti-correlated codewords, which lets the codebook
//! collapse while the penalty reports full usage. The full-codebook form
//! costs O(N * 2^quant_dim), fine at trainable quantization widths.

use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, VarId};

pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LfqError {
    #[error("latent channel count {got} does not match quant_dim {want}")]
    ChannelMismatch { got: usize, want: usize },
    #[error("index {index} out of range for quant_dim {quant_dim}")]
    IndexOutOfRange { index: u32, quant_dim: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Quantized codes for one layer: a sign grid (+1/-1 per bit channel) and
/// the per-position integer indices in [0, 2^quant_dim).
#[derive(Clone, Debug)]
pub struct LfqCodes<T> {
    /// Grid extents without the channel axis (t, h, w for a video latent).
    pub grid: Vec<usize>,
    pub quant_dim: usize,
    /// Same layout as the latent: grid ++ [quant_dim], values exactly +-1.
    pub signs: Tensor<T>,
    /// Raster-ordered indices, one per grid position.
    pub indices: Vec<u32>,
}

/// Sign with the deterministic tie-break sign(0) = -1.
#[inline]
fn sign_of<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Packs a sign vector into its code index: bit i is set iff sign_i = +1.
pub fn signs_to_index<T: Real>(signs: &[T]) -> u32 {
    let mut index = 0u32;
    for (i, &s) in signs.iter().enumerate() {
        if s > T::zero() {
            index |= 1 << i;
        }
    }
    index
}

/// Inverse of `signs_to_index`: bit i of `index` sets sign_i.
pub fn index_to_signs<T: Real>(index: u32, quant_dim: usize) -> Result<Vec<T>, LfqError> {
    if quant_dim >= 32 || u64::from(index) >= (1u64 << quant_dim) {
        return Err(LfqError::IndexOutOfRange { index, quant_dim });
    }
    Ok((0..quant_dim)
        .map(|i| {
            if index & (1 << i) != 0 {
                T::one()
            } else {
                -T::one()
            }
        })
        .collect())
}

/// Quantizes a latent grid whose last axis is the bit channel.
pub fn quantize<T: Real>(z: &Tensor<T>, quant_dim: usize) -> Result<LfqCodes<T>, LfqError> {
    let shape = z.shape();
    if shape.is_empty() || shape[shape.len() - 1] != quant_dim {
        return Err(LfqError::ChannelMismatch {
            got: shape.last().copied().unwrap_or(0),
            want: quant_dim,
        });
    }
    let grid = shape[..shape.len() - 1].to_vec();
    let signs_data: Vec<T> = z.data().iter().map(|&v| sign_of(v)).collect();
    let indices = signs_data
        .chunks_exact(quant_dim)
        .map(signs_to_index)
        .collect();
    Ok(LfqCodes {
        grid,
        quant_dim,
        signs: Tensor::from_vec(shape, signs_data)?,
        indices,
    })
}

/// Rebuilds the sign grid from indices (the decode-side entry point).
pub fn codes_from_indices<T: Real>(
    indices: &[u32],
    grid: &[usize],
    quant_dim: usize,
) -> Result<LfqCodes<T>, LfqError> {
    let positions: usize = grid.iter().product();
    if indices.len() != positions {
        return Err(LfqError::ChannelMismatch {
            got: indices.len(),
            want: positions,
        });
    }
    let mut signs = Vec::with_capacity(positions * quant_dim);
    for &idx in indices {
        signs.extend(index_to_signs::<T>(idx, quant_dim)?);
    }
    let mut shape = grid.to_vec();
    shape.push(quant_dim);
    Ok(LfqCodes {
        grid: grid.to_vec(),
        quant_dim,
        signs: Tensor::from_vec(&shape, signs)?,
        indices: indices.to_vec(),
    })
}

/// Builds the entropy penalty for a pre-quantization latent node whose
/// last axis is the bit channel. Returns a scalar node.
pub fn entropy_penalty_node<T: Real>(
    g: &mut Graph<T>,
    z: VarId,
    tau: f64,
    gamma: f64,
) -> Result<VarId, LfqError> {
    if tau <= 0.0 {
        return Err(TensorError::InvalidArg(format!("tau must be positive, got {}", tau)).into());
    }
    let shape = g.shape(z).to_vec();
    let qd = *shape.last().ok_or_else(|| TensorError::ShapeMismatch(
        "entropy penalty needs a channel axis".into(),
    ))?;
    let n = shape.iter().product::<usize>() / qd;
    let zr = g.reshape(z, &[n, qd])?;
    let a = g.affine(zr, 2.0 / tau, 0.0)?;
    let p = g.sigmoid(a)?;
    // stable binary entropy via logits: H(p) = p*softplus(-a) + (1-p)*softplus(a)
    let spp = g.softplus(a)?;
    let na = g.neg(a)?;
    let spn = g.softplus(na)?;
    let t1 = g.mul(p, spn)?;
    let t2 = g.mul(p, spp)?;
    let t3 = g.sub(spp, t2)?;
    let h = g.add(t1, t3)?;
    let per_token = g.reduce_axis(h, 1, false)?;
    let confidence = g.mean_all(per_token)?;

    let usage = g.lfq_usage_entropy(a, qd)?;
    // confidence - gamma * usage
    let neg_usage = g.affine(usage, -gamma, 0.0)?;
    Ok(g.add(confidence, neg_usage)?)
}

/// Evaluates the penalty on a plain tensor (used by tests and reporting).
pub fn entropy_penalty<T: Real>(z: &Tensor<T>, tau: f64, gamma: f64) -> Result<T, LfqError> {
    let mut g = Graph::new();
    let zi = g.leaf(z, false)?;
    let loss = entropy_penalty_node(&mut g, zi, tau, gamma)?;
    Ok(g.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_follows_the_sign_rule() {
        let z = Tensor::from_vec(&[1, 2], vec![0.7f64, -0.3]).unwrap();
        let codes = quantize(&z, 2).unwrap();
        assert_eq!(codes.signs.data(), &[1.0, -1.0]);
        assert_eq!(codes.indices, vec![1]);
    }

    #[test]
    fn zero_latent_ties_break_negative() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let codes = quantize(&z, 3).unwrap();
        assert!(codes.signs.data().iter().all(|&s| s == -1.0));
        assert_eq!(codes.indices, vec![0, 0]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            quantize(&z, 4),
            Err(LfqError::ChannelMismatch { got: 3, want: 4 })
        ));
    }

    #[test]
    fn index_to_signs_examples() {
        assert_eq!(index_to_signs::<f64>(0, 3).unwrap(), vec![-1.0, -1.0, -1.0]);
        assert_eq!(index_to_signs::<f64>(5, 3).unwrap(), vec![1.0, -1.0, 1.0]);
        assert!(matches!(
            index_to_signs::<f64>(8, 3),
            Err(LfqError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn sign_index_bijection_exhaustive() {
        for qd in 1..=12usize {
            for index in 0..(1u32 << qd) {
                let signs = index_to_signs::<f32>(index, qd).unwrap();
                assert_eq!(signs_to_index(&signs), index, "qd={} index={}", qd, index);
            }
        }
    }

    #[test]
    fn codes_are_scale_invariant() {
        let z = Tensor::from_vec(&[4, 3], vec![0.3, -0.1, 0.9, -2.0, 0.0, 0.4, 1.1, -0.7, -0.2, 0.05, 0.6, -1.4]).unwrap();
        let base = quantize(&z, 3).unwrap();
        for c in [0.5f64, 2.0, 117.0] {
            let scaled = Tensor::from_vec(&[4, 3], z.data().iter().map(|v| v * c).collect()).unwrap();
            let codes = quantize(&scaled, 3).unwrap();
            assert_eq!(codes.indices, base.indices, "c = {}", c);
        }
    }

    #[test]
    fn zero_latent_penalty_matches_closed_form() {
        // p = 0.5 everywhere: loss = (1 - gamma) * quant_dim * ln 2
        for (qd, gamma) in [(4usize, 1.0f64), (6, 0.5), (3, 0.0)] {
            let z = Tensor::<f64>::zeros(&[10, qd]);
            let loss = entropy_penalty(&z, 1.0, gamma).unwrap();
            let want = (1.0 - gamma) * qd as f64 * std::f64::consts::LN_2;
            assert!(
                (loss - want).abs() < 1e-6,
                "qd={} gamma={}: {} vs {}",
                qd,
                gamma,
                loss,
                want
            );
        }
    }

    #[test]
    fn diverse_saturated_batch_beats_collapsed() {
        let qd = 4;
        let n = 16;
        // diverse: each bit is +10 for half the tokens, -10 for the other half
        let mut diverse = Vec::with_capacity(n * qd);
        for tok in 0..n {
            for bit in 0..qd {
                let positive = (tok >> bit) & 1 == 1;
                diverse.push(if positive { 10.0 } else { -10.0 });
            }
        }
        let diverse = Tensor::from_vec(&[n, qd], diverse).unwrap();
        let collapsed = Tensor::from_vec(&[n, qd], vec![10.0f64; n * qd]).unwrap();
        let ld = entropy_penalty(&diverse, 1.0, 1.0).unwrap();
        let lc = entropy_penalty(&collapsed, 1.0, 1.0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        // diverse: confidence ~ 0, usage maximal -> about -qd*ln2
        assert!((ld + qd as f64 * ln2).abs() < 1e-3, "ld = {}", ld);
        // collapsed: both terms near zero
        assert!(lc.abs() < 1e-3, "lc = {}", lc);
        assert!(ld < lc, "ordering must be strict: {} vs {}", ld, lc);
    }

    #[test]
    fn penalty_gradient_flows() {
        use crate::tensor::gradcheck;
        let z = Tensor::from_vec(&[3, 2], vec![0.3, -0.8, 1.2, 0.1, -0.4, 0.9]).unwrap();
        let err = gradcheck::max_rel_error(&[z], &|g, ids| {
            entropy_penalty_node(g, ids[0], 1.3, 0.7).map_err(|e| match e {
                LfqError::Tensor(t) => t,
                other => TensorError::InvalidArg(other.to_string()),
            })
        })
        .unwrap();
        assert!(err < 1e-5, "err = {}", err);
    }
}
