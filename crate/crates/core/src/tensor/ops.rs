//! Forward/backward kernels for everything except the 3D convolutions.
//!
//! Kernels are pure slice-level functions; backward kernels always
//! accumulate (`+=`) into the destination gradient buffers.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Gelu,
    Sigmoid,
    Softplus,
    Abs,
    Ln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
}

#[inline]
fn sigmoid_stable<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus_stable<T: Real>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn unary_forward<T: Real>(kind: UnaryKind, x: &[T]) -> Vec<T> {
    let half = T::from_f64(0.5);
    match kind {
        UnaryKind::Silu => x.iter().map(|&v| v * sigmoid_stable(v)).collect(),
        UnaryKind::Gelu => {
            let c = T::from_f64(GELU_C);
            let a = T::from_f64(GELU_A);
            x.iter()
                .map(|&v| {
                    let u = c * (v + a * v * v * v);
                    half * v * (T::one() + u.tanh())
                })
                .collect()
        }
        UnaryKind::Sigmoid => x.iter().map(|&v| sigmoid_stable(v)).collect(),
        UnaryKind::Softplus => x.iter().map(|&v| softplus_stable(v)).collect(),
        UnaryKind::Abs => x.iter().map(|&v| v.abs()).collect(),
        UnaryKind::Ln => x.iter().map(|&v| v.ln()).collect(),
    }
}

pub fn unary_backward<T: Real>(kind: UnaryKind, x: &[T], y: &[T], gout: &[T], gx: &mut [T]) {
    let half = T::from_f64(0.5);
    match kind {
        UnaryKind::Silu => {
            for i in 0..x.len() {
                let s = sigmoid_stable(x[i]);
                gx[i] += gout[i] * s * (T::one() + x[i] * (T::one() - s));
            }
        }
        UnaryKind::Gelu => {
            let c = T::from_f64(GELU_C);
            let a = T::from_f64(GELU_A);
            let three = T::from_f64(3.0);
            for i in 0..x.len() {
                let v = x[i];
                let u = c * (v + a * v * v * v);
                let t = u.tanh();
                let du = c * (T::one() + three * a * v * v);
                let d = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                gx[i] += gout[i] * d;
            }
        }
        UnaryKind::Sigmoid => {
            for i in 0..y.len() {
                gx[i] += gout[i] * y[i] * (T::one() - y[i]);
            }
        }
        UnaryKind::Softplus => {
            for i in 0..x.len() {
                gx[i] += gout[i] * sigmoid_stable(x[i]);
            }
        }
        UnaryKind::Abs => {
            for i in 0..x.len() {
                let s = if x[i] > T::zero() {
                    T::one()
                } else if x[i] < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                gx[i] += gout[i] * s;
            }
        }
        UnaryKind::Ln => {
            for i in 0..x.len() {
                gx[i] += gout[i] / x[i];
            }
        }
    }
}

pub fn binary_forward<T: Real>(kind: BinKind, a: &[T], b: &[T]) -> Vec<T> {
    match kind {
        BinKind::Add => a.iter().zip(b).map(|(&x, &y)| x + y).collect(),
        BinKind::Sub => a.iter().zip(b).map(|(&x, &y)| x - y).collect(),
        BinKind::Mul => a.iter().zip(b).map(|(&x, &y)| x * y).collect(),
    }
}

pub fn binary_backward<T: Real>(
    kind: BinKind,
    a: &[T],
    b: &[T],
    gout: &[T],
    ga: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    match kind {
        BinKind::Add => {
            if let Some(ga) = ga {
                for i in 0..gout.len() {
                    ga[i] += gout[i];
                }
            }
            if let Some(gb) = gb {
                for i in 0..gout.len() {
                    gb[i] += gout[i];
                }
            }
        }
        BinKind::Sub => {
            if let Some(ga) = ga {
                for i in 0..gout.len() {
                    ga[i] += gout[i];
                }
            }
            if let Some(gb) = gb {
                for i in 0..gout.len() {
                    gb[i] -= gout[i];
                }
            }
        }
        BinKind::Mul => {
            if let Some(ga) = ga {
                for i in 0..gout.len() {
                    ga[i] += gout[i] * b[i];
                }
            }
            if let Some(gb) = gb {
                for i in 0..gout.len() {
                    gb[i] += gout[i] * a[i];
                }
            }
        }
    }
}

/// y[..., c] = x[..., c] + b[c]
pub fn bias_add_forward<T: Real>(x: &[T], b: &[T]) -> Vec<T> {
    let c = b.len();
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for (v, bv) in row.iter().zip(b) {
            y.push(*v + *bv);
        }
    }
    y
}

pub fn bias_add_backward<T: Real>(
    gout: &[T],
    c: usize,
    gx: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    if let Some(gx) = gx {
        for i in 0..gout.len() {
            gx[i] += gout[i];
        }
    }
    if let Some(gb) = gb {
        for row in gout.chunks_exact(c) {
            for (g, r) in gb.iter_mut().zip(row) {
                *g += *r;
            }
        }
    }
}

/// Linear map on the last axis: y[r, n] = sum_k x[r, k] w[k, n] (+ b[n]).
pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, k: usize, n: usize) -> Vec<T> {
    let rows = x.len() / k;
    let mut y = match b {
        Some(b) => {
            let mut y = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                y.extend_from_slice(b);
            }
            y
        }
        None => vec![T::zero(); rows * n],
    };
    for r in 0..rows {
        let xrow = &x[r * k..(r + 1) * k];
        let yrow = &mut y[r * n..(r + 1) * n];
        for (kk, &xv) in xrow.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wrow = &w[kk * n..(kk + 1) * n];
            for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                *yv += xv * wv;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    k: usize,
    n: usize,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let rows = x.len() / k;
    for r in 0..rows {
        let grow = &gout[r * n..(r + 1) * n];
        if let Some(gx) = gx.as_deref_mut() {
            let gxrow = &mut gx[r * k..(r + 1) * k];
            for (kk, gxv) in gxrow.iter_mut().enumerate() {
                let wrow = &w[kk * n..(kk + 1) * n];
                let mut acc = T::zero();
                for (&g, &wv) in grow.iter().zip(wrow) {
                    acc += g * wv;
                }
                *gxv += acc;
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let xrow = &x[r * k..(r + 1) * k];
            for (kk, &xv) in xrow.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let gwrow = &mut gw[kk * n..(kk + 1) * n];
                for (gwv, &g) in gwrow.iter_mut().zip(grow) {
                    *gwv += xv * g;
                }
            }
        }
    }
    if let Some(gb) = gb {
        for r in 0..rows {
            let grow = &gout[r * n..(r + 1) * n];
            for (gbv, &g) in gb.iter_mut().zip(grow) {
                *gbv += g;
            }
        }
    }
}

/// Batched matmul: for each leading batch, c[m, n] = a[m, k] · b[k, n].
pub fn matmul_nn_forward<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    for bt in 0..batch {
        let abase = bt * m * k;
        let bbase = bt * k * n;
        let cbase = bt * m * n;
        for i in 0..m {
            let arow = &a[abase + i * k..abase + (i + 1) * k];
            let crow = &mut c[cbase + i * n..cbase + (i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let brow = &b[bbase + kk * n..bbase + (kk + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
pub fn matmul_nn_backward<T: Real>(
    a: &[T],
    b: &[T],
    gout: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    mut ga: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    for bt in 0..batch {
        let abase = bt * m * k;
        let bbase = bt * k * n;
        let cbase = bt * m * n;
        for i in 0..m {
            let grow = &gout[cbase + i * n..cbase + (i + 1) * n];
            if let Some(ga) = ga.as_deref_mut() {
                let garow = &mut ga[abase + i * k..abase + (i + 1) * k];
                for (kk, gav) in garow.iter_mut().enumerate() {
                    let brow = &b[bbase + kk * n..bbase + (kk + 1) * n];
                    let mut acc = T::zero();
                    for (&g, &bv) in grow.iter().zip(brow) {
                        acc += g * bv;
                    }
                    *gav += acc;
                }
            }
            if let Some(gb) = gb.as_deref_mut() {
                let arow = &a[abase + i * k..abase + (i + 1) * k];
                for (kk, &av) in arow.iter().enumerate() {
                    if av == T::zero() {
                        continue;
                    }
                    let gbrow = &mut gb[bbase + kk * n..bbase + (kk + 1) * n];
                    for (gbv, &g) in gbrow.iter_mut().zip(grow) {
                        *gbv += av * g;
                    }
                }
            }
        }
    }
}

/// Batched matmul with transposed rhs: c[m, n] = a[m, k] · b[n, k]^T.
pub fn matmul_nt_forward<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    for bt in 0..batch {
        let abase = bt * m * k;
        let bbase = bt * n * k;
        let cbase = bt * m * n;
        for i in 0..m {
            let arow = &a[abase + i * k..abase + (i + 1) * k];
            for j in 0..n {
                let brow = &b[bbase + j * k..bbase + (j + 1) * k];
                let mut acc = T::zero();
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                c[cbase + i * n + j] = acc;
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
pub fn matmul_nt_backward<T: Real>(
    a: &[T],
    b: &[T],
    gout: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    mut ga: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    for bt in 0..batch {
        let abase = bt * m * k;
        let bbase = bt * n * k;
        let cbase = bt * m * n;
        for i in 0..m {
            let grow = &gout[cbase + i * n..cbase + (i + 1) * n];
            if let Some(ga) = ga.as_deref_mut() {
                let garow = &mut ga[abase + i * k..abase + (i + 1) * k];
                for (j, &g) in grow.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    let brow = &b[bbase + j * k..bbase + (j + 1) * k];
                    for (gav, &bv) in garow.iter_mut().zip(brow) {
                        *gav += g * bv;
                    }
                }
            }
            if let Some(gb) = gb.as_deref_mut() {
                let arow = &a[abase + i * k..abase + (i + 1) * k];
                for (j, &g) in grow.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    let gbrow = &mut gb[bbase + j * k..bbase + (j + 1) * k];
                    for (gbv, &av) in gbrow.iter_mut().zip(arow) {
                        *gbv += g * av;
                    }
                }
            }
        }
    }
}

/// Per-position normalization over channel groups on the last axis.
pub fn group_norm_forward<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    channels: usize,
    groups: usize,
    eps: f64,
) -> Vec<T> {
    let gs = channels / groups;
    let eps = T::from_f64(eps);
    let inv_gs = T::one() / T::from_f64(gs as f64);
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(channels) {
        for g in 0..groups {
            let seg = &row[g * gs..(g + 1) * gs];
            let mut mean = T::zero();
            for &v in seg {
                mean += v;
            }
            mean *= inv_gs;
            let mut var = T::zero();
            for &v in seg {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_gs;
            let inv_std = T::one() / (var + eps).sqrt();
            for (i, &v) in seg.iter().enumerate() {
                let c = g * gs + i;
                y.push((v - mean) * inv_std * gain[c] + bias[c]);
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    gout: &[T],
    channels: usize,
    groups: usize,
    eps: f64,
    mut gx: Option<&mut [T]>,
    mut ggain: Option<&mut [T]>,
    mut gbias: Option<&mut [T]>,
) {
    let gs = channels / groups;
    let eps = T::from_f64(eps);
    let inv_gs = T::one() / T::from_f64(gs as f64);
    let rows = x.len() / channels;
    for r in 0..rows {
        let row = &x[r * channels..(r + 1) * channels];
        let grow = &gout[r * channels..(r + 1) * channels];
        for g in 0..groups {
            let seg = &row[g * gs..(g + 1) * gs];
            let gseg = &grow[g * gs..(g + 1) * gs];
            let mut mean = T::zero();
            for &v in seg {
                mean += v;
            }
            mean *= inv_gs;
            let mut var = T::zero();
            for &v in seg {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_gs;
            let inv_std = T::one() / (var + eps).sqrt();
            // w = gout * gain restricted to the group; xhat = (x - mean)/std
            let mut mean_w = T::zero();
            let mut mean_wx = T::zero();
            for i in 0..gs {
                let c = g * gs + i;
                let xhat = (seg[i] - mean) * inv_std;
                let w = gseg[i] * gain[c];
                mean_w += w;
                mean_wx += w * xhat;
            }
            mean_w *= inv_gs;
            mean_wx *= inv_gs;
            for i in 0..gs {
                let c = g * gs + i;
                let xhat = (seg[i] - mean) * inv_std;
                if let Some(gx) = gx.as_deref_mut() {
                    let w = gseg[i] * gain[c];
                    gx[r * channels + c] += (w - mean_w - xhat * mean_wx) * inv_std;
                }
                if let Some(ggain) = ggain.as_deref_mut() {
                    ggain[c] += gseg[i] * xhat;
                }
                if let Some(gbias) = gbias.as_deref_mut() {
                    gbias[c] += gseg[i];
                }
            }
        }
    }
}

/// Row-stable softmax over the last axis.
pub fn softmax_forward<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = T::zero();
        let start = y.len();
        for &v in row {
            let e = (v - mx).exp();
            denom += e;
            y.push(e);
        }
        let inv = T::one() / denom;
        for v in &mut y[start..] {
            *v *= inv;
        }
    }
    y
}

pub fn softmax_backward<T: Real>(y: &[T], gout: &[T], width: usize, gx: &mut [T]) {
    let rows = y.len() / width;
    for r in 0..rows {
        let yrow = &y[r * width..(r + 1) * width];
        let grow = &gout[r * width..(r + 1) * width];
        let mut dot = T::zero();
        for (&yv, &g) in yrow.iter().zip(grow) {
            dot += yv * g;
        }
        let gxrow = &mut gx[r * width..(r + 1) * width];
        for i in 0..width {
            gxrow[i] += yrow[i] * (grow[i] - dot);
        }
    }
}

/// Softmax over square [L, L] blocks where row i only sees columns 0..=i.
/// Columns beyond the diagonal are exactly zero in the output.
pub fn causal_softmax_forward<T: Real>(x: &[T], l: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    let blocks = x.len() / (l * l);
    for blk in 0..blocks {
        let base = blk * l * l;
        for i in 0..l {
            let row = &x[base + i * l..base + i * l + i + 1];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = T::zero();
            let yrow = &mut y[base + i * l..base + i * l + i + 1];
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                denom += e;
                yrow[j] = e;
            }
            let inv = T::one() / denom;
            for v in yrow {
                *v *= inv;
            }
        }
    }
    y
}

pub fn causal_softmax_backward<T: Real>(y: &[T], gout: &[T], l: usize, gx: &mut [T]) {
    let blocks = y.len() / (l * l);
    for blk in 0..blocks {
        let base = blk * l * l;
        for i in 0..l {
            let yrow = &y[base + i * l..base + i * l + i + 1];
            let grow = &gout[base + i * l..base + i * l + i + 1];
            let mut dot = T::zero();
            for (&yv, &g) in yrow.iter().zip(grow) {
                dot += yv * g;
            }
            let gxrow = &mut gx[base + i * l..base + i * l + i + 1];
            for j in 0..=i {
                gxrow[j] += yrow[j] * (grow[j] - dot);
            }
        }
    }
}

/// Per-row cross-entropy with logits: out[n] = logsumexp(l_n) - l_n[target_n].
pub fn cross_entropy_forward<T: Real>(logits: &[T], targets: &[u32], vocab: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(targets.len());
    for (n, row) in logits.chunks_exact(vocab).enumerate() {
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = T::zero();
        for &v in row {
            denom += (v - mx).exp();
        }
        let lse = mx + denom.ln();
        out.push(lse - row[targets[n] as usize]);
    }
    out
}

pub fn cross_entropy_backward<T: Real>(
    logits: &[T],
    targets: &[u32],
    vocab: usize,
    gout: &[T],
    gx: &mut [T],
) {
    for (n, row) in logits.chunks_exact(vocab).enumerate() {
        let g = gout[n];
        if g == T::zero() {
            continue;
        }
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = T::zero();
        for &v in row {
            denom += (v - mx).exp();
        }
        let inv = T::one() / denom;
        let gxrow = &mut gx[n * vocab..(n + 1) * vocab];
        for (j, &v) in row.iter().enumerate() {
            gxrow[j] += g * (v - mx).exp() * inv;
        }
        gxrow[targets[n] as usize] -= g;
    }
}

/// Rotary position angles for one axis block, pair index j of d/2.
#[inline]
pub fn rope_theta(j: usize, d: usize, base: f64) -> f64 {
    base.powf(-2.0 * j as f64 / d as f64)
}

/// Applies 3D rotary embedding in place over x viewed as [outer, L, dim],
/// where dim = alloc.0 + alloc.1 + alloc.2 and position l has coordinates
/// pos[l]. `invert` rotates by the negated angles (used by backward).
pub fn rope3d_apply<T: Real>(
    x: &mut [T],
    outer: usize,
    l: usize,
    alloc: [usize; 3],
    pos: &[[u32; 3]],
    base: f64,
    invert: bool,
) {
    let dim: usize = alloc.iter().sum();
    for o in 0..outer {
        for li in 0..l {
            let row = &mut x[(o * l + li) * dim..(o * l + li + 1) * dim];
            let mut off = 0;
            for (axis, &d) in alloc.iter().enumerate() {
                let p = pos[li][axis] as f64;
                for j in 0..d / 2 {
                    let mut angle = p * rope_theta(j, d, base);
                    if invert {
                        angle = -angle;
                    }
                    let (sin, cos) = angle.sin_cos();
                    let (sin, cos) = (T::from_f64(sin), T::from_f64(cos));
                    let a = row[off + 2 * j];
                    let b = row[off + 2 * j + 1];
                    row[off + 2 * j] = a * cos - b * sin;
                    row[off + 2 * j + 1] = a * sin + b * cos;
                }
                off += d;
            }
        }
    }
}

/// Per-token code probabilities from per-bit Bernoulli logits: for token n,
/// q[n][c] = prod_i sigmoid(a_ni)^{c_i} (1 - sigmoid(a_ni))^{1-c_i}.
fn lfq_code_probs<T: Real>(a: &[T], qd: usize) -> Vec<T> {
    let n = a.len() / qd;
    let codes = 1usize << qd;
    let mut q = vec![T::zero(); n * codes];
    for (tok, row) in a.chunks_exact(qd).enumerate() {
        let out = &mut q[tok * codes..(tok + 1) * codes];
        out[0] = T::one();
        let mut filled = 1usize;
        for (i, &av) in row.iter().enumerate() {
            let p = if av >= T::zero() {
                T::one() / (T::one() + (-av).exp())
            } else {
                let e = av.exp();
                e / (T::one() + e)
            };
            let np = T::one() - p;
            for c in 0..filled {
                let base = out[c];
                out[c] = base * np;
                out[c | (1 << i)] = base * p;
            }
            filled <<= 1;
        }
    }
    q
}

/// Usage entropy of the batch-mean code distribution: H(mean_n q_n) in
/// nats over all 2^qd codes. Input is the logit grid a = 2z/tau, [N, qd].
pub fn lfq_usage_entropy_forward<T: Real>(a: &[T], qd: usize) -> T {
    let n = a.len() / qd;
    let codes = 1usize << qd;
    let q = lfq_code_probs(a, qd);
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut h = T::zero();
    for c in 0..codes {
        let mut pbar = T::zero();
        for tok in 0..n {
            pbar += q[tok * codes + c];
        }
        pbar *= inv_n;
        if pbar > T::zero() {
            h -= pbar * pbar.ln();
        }
    }
    h
}

/// dH/da: for each (token, bit),
///   -1/N * sum_c ln(pbar_c) * q_n(c) * (c_i - p_ni)
/// (the +1 term of the entropy derivative cancels because
///  sum_c q_n(c) * (c_i - p_ni) = 0).
pub fn lfq_usage_entropy_backward<T: Real>(a: &[T], qd: usize, gout: T, gx: &mut [T]) {
    let n = a.len() / qd;
    let codes = 1usize << qd;
    let q = lfq_code_probs(a, qd);
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut ln_pbar = vec![T::zero(); codes];
    for (c, lp) in ln_pbar.iter_mut().enumerate() {
        let mut pbar = T::zero();
        for tok in 0..n {
            pbar += q[tok * codes + c];
        }
        pbar *= inv_n;
        *lp = if pbar > T::zero() { pbar.ln() } else { T::zero() };
    }
    for tok in 0..n {
        let qrow = &q[tok * codes..(tok + 1) * codes];
        let arow = &a[tok * qd..(tok + 1) * qd];
        for i in 0..qd {
            let p = if arow[i] >= T::zero() {
                T::one() / (T::one() + (-arow[i]).exp())
            } else {
                let e = arow[i].exp();
                e / (T::one() + e)
            };
            // split weighted sums by bit i; codes with pbar = 0 have
            // q_n(c) = 0 for every token, so they contribute nothing
            let mut s_hi = T::zero();
            let mut s_lo = T::zero();
            for (c, &qv) in qrow.iter().enumerate() {
                if qv == T::zero() {
                    continue;
                }
                if c & (1 << i) != 0 {
                    s_hi += ln_pbar[c] * qv;
                } else {
                    s_lo += ln_pbar[c] * qv;
                }
            }
            let d = -(inv_n) * (s_hi * (T::one() - p) - s_lo * p);
            gx[tok * qd + i] += gout * d;
        }
    }
}

pub fn permute_forward<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![T::zero(); x.len()];
    let mut idx = vec![0usize; rank];
    for item in out.iter_mut() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *item = x[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Scatter of the permuted gradient back to the input layout.
pub fn permute_backward<T: Real>(gout: &[T], shape: &[usize], perm: &[usize], gx: &mut [T]) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut idx = vec![0usize; rank];
    for &g in gout.iter() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        gx[src] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
