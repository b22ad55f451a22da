//! Central finite-difference oracle for backward passes.
//!
//! Rebuilds the forward graph with perturbed inputs, so the numeric side
//! never touches any backward code. Used by the gradient acceptance suite
//! and by per-op unit tests; always runs in f64.

use super::{Graph, Tensor, TensorError, VarId};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss from graph-bound copies of `inputs`.
pub type LossFn = dyn Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId, TensorError>;

/// Compares analytic gradients against central finite differences and
/// returns the maximum relative error over all input elements.
///
/// Relative error uses a floored denominator max(|a|, |n|, 1e-3) so that
/// near-zero gradients compare absolutely instead of amplifying noise.
pub fn max_rel_error(inputs: &[Tensor<f64>], f: &LossFn) -> Result<f64, TensorError> {
    max_rel_error_with_step(inputs, f, FD_STEP)
}

pub fn max_rel_error_with_step(
    inputs: &[Tensor<f64>],
    f: &LossFn,
    h: f64,
) -> Result<f64, TensorError> {
    // analytic gradients
    let mut g = Graph::new();
    let ids: Vec<VarId> = inputs
        .iter()
        .map(|t| g.leaf(t, true))
        .collect::<Result<_, _>>()?;
    let loss = f(&mut g, &ids)?;
    if g.shape(loss).iter().product::<usize>() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(loss).to_vec()));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.data(id).len()]))
        .collect();

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = tensors
            .iter()
            .map(|t| g.leaf(t, false))
            .collect::<Result<_, _>>()?;
        let loss = f(&mut g, &ids)?;
        Ok(g.scalar_value(loss))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// One differentiable-op scenario for the gradient suite.
pub struct OpCheck {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub loss: Box<LossFn>,
}

impl OpCheck {
    pub fn run(&self) -> Result<f64, TensorError> {
        max_rel_error(&self.inputs, &*self.loss)
    }
}

/// Every registered differentiable op as an FD scenario. Inputs are drawn
/// away from kinks (abs, clamp) and poles (ln). The straight-through
/// quantizer is excluded by definition: its backward is identity, not the
/// true (zero) derivative.
pub fn standard_op_checks(seed: u64) -> Vec<OpCheck> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize], lo: f64, hi: f64| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).unwrap()
    };
    // values bounded away from zero: magnitudes in [0.2, 1), alternating sign
    let off_sign = |mut t: Tensor<f64>| -> Tensor<f64> {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % 2 == 1 {
                *v = -*v;
            }
        }
        t
    };

    // weighting constant so losses have non-degenerate gradients
    // (softmax rows sum to one, so an unweighted mean has zero gradient)
    let weighted_mean = |weights: Tensor<f64>| -> Box<LossFn> {
        Box::new(move |g: &mut Graph<f64>, out: &[VarId]| {
            let w = g.leaf(&weights, false)?;
            let prod = g.mul(out[0], w)?;
            g.mean_all(prod)
        })
    };
    let _ = &weighted_mean;

    let mut checks: Vec<OpCheck> = Vec::new();
    let mut push = |name: &'static str, inputs: Vec<Tensor<f64>>, loss: Box<LossFn>| {
        checks.push(OpCheck { name, inputs, loss });
    };

    push(
        "silu",
        vec![rand_t(&[2, 5], -2.0, 2.0)],
        Box::new(|g, ids| {
            let y = g.silu(ids[0])?;
            g.mean_all(y)
        }),
    );
    push(
        "gelu",
        vec![rand_t(&[2, 5], -2.0, 2.0)],
        Box::new(|g, ids| {
            let y = g.gelu(ids[0])?;
            g.mean_all(y)
        }),
    );
    push(
        "sigmoid",
        vec![rand_t(&[7], -3.0, 3.0)],
        Box::new(|g, ids| {
            let y = g.sigmoid(ids[0])?;
            g.mean_all(y)
        }),
    );
    push(
        "softplus",
        vec![rand_t(&[7], -3.0, 3.0)],
        Box::new(|g, ids| {
            let y = g.softplus(ids[0])?;
            g.mean_all(y)
        }),
    );
    push(
        "abs",
        vec![off_sign(rand_t(&[6], 0.2, 1.0))],
        Box::new(|g, ids| {
            let y = g.abs(ids[0])?;
            g.mean_all(y)
        }),
    );
    push(
        "ln",
        vec![rand_t(&[6], 0.2, 2.0)],
        Box::new(|g, ids| {
            let y = g.ln(ids[0])?;
            g.mean_all(y)
        }),
    );
    push(
        "affine",
        vec![rand_t(&[4], -1.0, 1.0)],
        Box::new(|g, ids| {
            let y = g.affine(ids[0], 1.7, -0.3)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    push(
        "add_sub_mul",
        vec![rand_t(&[2, 3], -1.0, 1.0), rand_t(&[2, 3], -1.0, 1.0)],
        Box::new(|g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let d = g.sub(ids[0], ids[1])?;
            let p = g.mul(s, d)?;
            g.mean_all(p)
        }),
    );
    push(
        "bias_add",
        vec![rand_t(&[3, 4], -1.0, 1.0), rand_t(&[4], -1.0, 1.0)],
        Box::new(|g, ids| {
            let y = g.bias_add(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    {
        let w = rand_t(&[2, 2, 3], -1.0, 1.0);
        push(
            "broadcast_vec",
            vec![rand_t(&[3], -1.0, 1.0)],
            weighted_mean_over(w, |g, ids| g.broadcast_vec(ids[0], &[2, 2])),
        );
    }
    {
        let w = rand_t(&[3, 2, 2], -1.0, 1.0);
        push(
            "reshape_permute",
            vec![rand_t(&[2, 2, 3], -1.0, 1.0)],
            weighted_mean_over(w, |g, ids| {
                let r = g.reshape(ids[0], &[2, 6])?;
                let r2 = g.reshape(r, &[2, 2, 3])?;
                g.permute(r2, &[2, 0, 1])
            }),
        );
    }
    {
        let w = rand_t(&[2, 3, 3], -1.0, 1.0);
        push(
            "concat_slice",
            vec![rand_t(&[2, 2, 3], -1.0, 1.0), rand_t(&[2, 2, 3], -1.0, 1.0)],
            weighted_mean_over(w, |g, ids| {
                let c = g.concat(&[ids[0], ids[1]], 1)?;
                g.slice(c, 1, 1, 3)
            }),
        );
    }
    push(
        "reduce_axis",
        vec![rand_t(&[3, 4, 2], -1.0, 1.0)],
        Box::new(|g, ids| {
            let m = g.reduce_axis(ids[0], 1, true)?;
            let s = g.reduce_axis(m, 0, false)?;
            let sq = g.mul(s, s)?;
            g.mean_all(sq)
        }),
    );
    push(
        "linear",
        vec![
            rand_t(&[2, 3, 4], -1.0, 1.0),
            rand_t(&[4, 5], -1.0, 1.0),
            rand_t(&[5], -1.0, 1.0),
        ],
        Box::new(|g, ids| {
            let y = g.linear(ids[0], ids[1], Some(ids[2]))?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    push(
        "matmul_nn",
        vec![rand_t(&[2, 3, 4], -1.0, 1.0), rand_t(&[2, 4, 2], -1.0, 1.0)],
        Box::new(|g, ids| {
            let y = g.matmul_nn(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    push(
        "matmul_nt",
        vec![rand_t(&[2, 3, 4], -1.0, 1.0), rand_t(&[2, 5, 4], -1.0, 1.0)],
        Box::new(|g, ids| {
            let y = g.matmul_nt(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    push(
        "conv3d",
        vec![
            rand_t(&[1, 3, 4, 4, 2], -1.0, 1.0),
            rand_t(&[2, 3, 3, 2, 3], -1.0, 1.0),
            rand_t(&[3], -1.0, 1.0),
        ],
        Box::new(|g, ids| {
            let y = g.conv3d(ids[0], ids[1], ids[2], [2, 2, 2])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    push(
        "conv3d_small_cout",
        vec![
            rand_t(&[1, 2, 4, 4, 17], -1.0, 1.0),
            rand_t(&[1, 3, 3, 17, 2], -1.0, 1.0),
            rand_t(&[2], -1.0, 1.0),
        ],
        Box::new(|g, ids| {
            let y = g.conv3d(ids[0], ids[1], ids[2], [1, 1, 1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    push(
        "tconv3d",
        vec![
            rand_t(&[1, 2, 2, 2, 2], -1.0, 1.0),
            rand_t(&[2, 2, 2, 2, 3], -1.0, 1.0),
            rand_t(&[3], -1.0, 1.0),
        ],
        Box::new(|g, ids| {
            let y = g.tconv3d(ids[0], ids[1], ids[2], [2, 2, 2])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    push(
        "group_norm",
        vec![
            rand_t(&[3, 8], -1.0, 1.0),
            rand_t(&[8], 0.5, 1.5),
            rand_t(&[8], -0.5, 0.5),
        ],
        Box::new(|g, ids| {
            let y = g.group_norm(ids[0], ids[1], ids[2], 2)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    push(
        "layer_norm",
        vec![
            rand_t(&[2, 3, 6], -1.0, 1.0),
            rand_t(&[6], 0.5, 1.5),
            rand_t(&[6], -0.5, 0.5),
        ],
        Box::new(|g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    {
        let w = rand_t(&[3, 5], -1.0, 1.0);
        push(
            "softmax",
            vec![rand_t(&[3, 5], -2.0, 2.0)],
            weighted_mean_over(w, |g, ids| g.softmax_last(ids[0])),
        );
    }
    {
        let w = rand_t(&[1, 4, 4], -1.0, 1.0);
        push(
            "causal_softmax",
            vec![rand_t(&[1, 4, 4], -2.0, 2.0)],
            weighted_mean_over(w, |g, ids| g.causal_softmax(ids[0])),
        );
    }
    {
        let w = rand_t(&[1, 2, 3, 8], -1.0, 1.0);
        let pos: Vec<[u32; 3]> = vec![[0, 0, 0], [1, 2, 0], [3, 1, 2]];
        push(
            "rope3d",
            vec![rand_t(&[1, 2, 3, 8], -1.0, 1.0)],
            Box::new(move |g, ids| {
                let y = g.rope3d(ids[0], [4, 2, 2], &pos)?;
                let wc = g.leaf(&w, false)?;
                let p = g.mul(y, wc)?;
                g.mean_all(p)
            }),
        );
    }
    push(
        "lfq_usage_entropy",
        vec![rand_t(&[6, 3], -2.0, 2.0)],
        Box::new(|g, ids| g.lfq_usage_entropy(ids[0], 3)),
    );
    push(
        "cross_entropy",
        vec![rand_t(&[4, 5], -2.0, 2.0)],
        Box::new(|g, ids| {
            let ce = g.cross_entropy_logits(ids[0], &[1, 0, 4, 2])?;
            g.mean_all(ce)
        }),
    );
    {
        let w = rand_t(&[4, 3], -1.0, 1.0);
        push(
            "embed_lookup",
            vec![rand_t(&[6, 3], -1.0, 1.0)],
            weighted_mean_over(w, |g, ids| g.embed_lookup(ids[0], &[2, 0, 5, 2], &[4])),
        );
    }
    {
        let w = rand_t(&[2, 3, 4], -1.0, 1.0);
        push(
            "segment_embed",
            vec![rand_t(&[2, 3, 4], -1.0, 1.0), rand_t(&[2, 4], -1.0, 1.0)],
            weighted_mean_over(w, |g, ids| g.segment_embed(ids[0], ids[1], &[0, 1, 1])),
        );
    }
    push(
        "dropout",
        vec![rand_t(&[3, 4], -1.0, 1.0)],
        Box::new(|g, ids| {
            // fixed-seed rng per rebuild so the mask is identical across
            // the FD re-evaluations
            use rand::SeedableRng;
            let mut mask_rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let y = g.dropout(ids[0], 0.3, &mut mask_rng)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    push(
        "clamp_interior",
        vec![rand_t(&[6], -0.8, 0.8)],
        Box::new(|g, ids| {
            let y = g.clamp(ids[0], -0.9, 0.9)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
    );
    {
        // scaled-dot-product attention arithmetic composed end to end
        let w = rand_t(&[1, 2, 4, 3], -1.0, 1.0);
        push(
            "attention",
            vec![
                rand_t(&[1, 2, 4, 3], -1.0, 1.0),
                rand_t(&[1, 2, 4, 3], -1.0, 1.0),
                rand_t(&[1, 2, 4, 3], -1.0, 1.0),
            ],
            weighted_mean_over(w, |g, ids| {
                let scores = g.matmul_nt(ids[0], ids[1])?;
                let scaled = g.affine(scores, 1.0 / (3.0f64).sqrt(), 0.0)?;
                let attn = g.causal_softmax(scaled)?;
                g.matmul_nn(attn, ids[2])
            }),
        );
    }
    checks
}

/// Helper: elementwise-weighted mean of an op output as the FD loss.
fn weighted_mean_over<F>(weights: Tensor<f64>, op: F) -> Box<LossFn>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId, TensorError> + 'static,
{
    Box::new(move |g: &mut Graph<f64>, ids: &[VarId]| {
        let y = op(g, ids)?;
        let w = g.leaf(&weights, false)?;
        let p = g.mul(y, w)?;
        g.mean_all(p)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_registered_ops_pass_fd_check() {
        for check in standard_op_checks(42) {
            let err = check.run().unwrap();
            assert!(err < 1e-5, "{}: max rel error {}", check.name, err);
        }
    }

    #[test]
    fn catches_a_correct_gradient() {
        let x = Tensor::from_vec(&[3], vec![0.3, -0.7, 1.2]).unwrap();
        let err = max_rel_error(&[x], &|g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "err = {}", err);
    }

    #[test]
    fn would_catch_a_wrong_gradient() {
        // clamp's analytic gradient is 0 exactly at the boundary while the
        // central difference straddling it gives 0.5; the checker must
        // report that mismatch rather than silently passing
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let err = max_rel_error(&[x], &|g, ids| {
            let c = g.clamp(ids[0], 0.0, 10.0)?;
            g.sum_all(c)
        })
        .unwrap();
        assert!(err > 0.1, "boundary should disagree with FD, err = {}", err);
    }
}
