//! Causal 3D convolution kernels.
//!
//! Layout: activations [B, T, H, W, C] (channels fastest), kernels
//! [kt, kh, kw, Cin, Cout] (Cout fastest). Temporal padding is (kt-1)
//! zero frames prepended before the clip only; spatial padding is
//! (k-1)/2 on each side. The transpose op paints each input position
//! into its stride-aligned output block, so output frame t only ever
//! sees input frames <= floor(t/stride).

use super::{Real, TensorError};

/// Distributes per-batch chunks of `data` across `threads` workers.
/// Each chunk is touched by exactly one worker, so results are identical
/// to the sequential order regardless of the thread count.
pub(crate) fn par_chunks_mut<T: Send, F>(data: &mut [T], chunk: usize, threads: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    let n = if chunk == 0 { 0 } else { data.len() / chunk };
    if threads <= 1 || n <= 1 {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
        return;
    }
    let threads = threads.min(n);
    let mut slots: Vec<Vec<(usize, &mut [T])>> = (0..threads).map(|_| Vec::new()).collect();
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        slots[i % threads].push((i, c));
    }
    std::thread::scope(|s| {
        for slot in slots {
            let f = &f;
            s.spawn(move || {
                for (i, c) in slot {
                    f(i, c);
                }
            });
        }
    });
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub stride: [usize; 3],
    pub out: [usize; 3],
}

impl ConvDims {
    /// Validates shapes for the forward (downsampling) convolution and
    /// computes the output extents T' = ceil(T/st), H' = ceil(H/sh), ...
    pub fn conv(
        xshape: &[usize],
        wshape: &[usize],
        blen: usize,
        stride: [usize; 3],
    ) -> Result<Self, TensorError> {
        let mut d = Self::conv_common(xshape, wshape, blen, stride)?;
        let [st, sh, sw] = stride;
        let ot = (d.t - 1) / st + 1;
        let oh = (d.h + 2 * ((d.kh - 1) / 2) - d.kh) / sh + 1;
        let ow = (d.w + 2 * ((d.kw - 1) / 2) - d.kw) / sw + 1;
        let ceil = |a: usize, b: usize| (a - 1) / b + 1;
        if oh != ceil(d.h, sh) || ow != ceil(d.w, sw) {
            return Err(TensorError::ShapeMismatch(format!(
                "spatial extent/kernel/stride combination ({}x{} k={}x{} s={}x{}) does not \
                 preserve ceil-division output",
                d.h, d.w, d.kh, d.kw, sh, sw
            )));
        }
        d.out = [ot, oh, ow];
        Ok(d)
    }

    /// Validates shapes for the transpose (upsampling) convolution:
    /// output extents are input extents times stride.
    pub fn tconv(
        xshape: &[usize],
        wshape: &[usize],
        blen: usize,
        stride: [usize; 3],
    ) -> Result<Self, TensorError> {
        let mut d = Self::conv_common(xshape, wshape, blen, stride)?;
        let [st, sh, sw] = stride;
        if (d.kh as isize - sh as isize) % 2 != 0 || (d.kw as isize - sw as isize) % 2 != 0 {
            return Err(TensorError::InvalidArg(
                "transpose conv spatial kernel and stride must have equal parity".into(),
            ));
        }
        d.out = [d.t * st, d.h * sh, d.w * sw];
        Ok(d)
    }

    fn conv_common(
        xshape: &[usize],
        wshape: &[usize],
        blen: usize,
        stride: [usize; 3],
    ) -> Result<Self, TensorError> {
        if xshape.len() != 5 || wshape.len() != 5 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv3d expects x rank 5 and kernel rank 5, got {:?} and {:?}",
                xshape, wshape
            )));
        }
        let [kt, kh, kw, ci, co] = [wshape[0], wshape[1], wshape[2], wshape[3], wshape[4]];
        if kt < 1 || kh < 1 || kw < 1 {
            return Err(TensorError::InvalidArg("kernel extents must be >= 1".into()));
        }
        if stride.iter().any(|&s| s < 1) {
            return Err(TensorError::InvalidArg("stride must be >= 1".into()));
        }
        if xshape[4] != ci {
            return Err(TensorError::ShapeMismatch(format!(
                "input channels {} vs kernel Cin {}",
                xshape[4], ci
            )));
        }
        if blen != co {
            return Err(TensorError::ShapeMismatch(format!(
                "bias length {} vs kernel Cout {}",
                blen, co
            )));
        }
        Ok(ConvDims {
            batch: xshape[0],
            t: xshape[1],
            h: xshape[2],
            w: xshape[3],
            ci,
            kt,
            kh,
            kw,
            co,
            stride,
            out: [0, 0, 0],
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out[0], self.out[1], self.out[2], self.co]
    }

    fn in_elems(&self) -> usize {
        self.t * self.h * self.w * self.ci
    }

    fn out_elems(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2] * self.co
    }
}

/// With few output channels the Cout-inner loops degrade to scalar code;
/// kernels are then transposed to [taps, Cout, Cin] so the inner loop runs
/// over Cin instead. Pure layout change, identical arithmetic per output.
fn swap_small_cout(d: &ConvDims) -> bool {
    d.co < 16 && d.ci > d.co
}

fn transpose_kernel<T: Real>(w: &[T], d: &ConvDims) -> Vec<T> {
    let taps = d.kt * d.kh * d.kw;
    let (ci, co) = (d.ci, d.co);
    let mut wt = vec![T::zero(); w.len()];
    for t in 0..taps {
        for c in 0..ci {
            for o in 0..co {
                wt[(t * co + o) * ci + c] = w[(t * ci + c) * co + o];
            }
        }
    }
    wt
}

pub fn conv3d_forward<T: Real>(x: &[T], w: &[T], b: &[T], d: &ConvDims, threads: usize) -> Vec<T> {
    let mut y = vec![T::zero(); d.batch * d.out_elems()];
    let in_sz = d.in_elems();
    let wt = swap_small_cout(d).then(|| transpose_kernel(w, d));
    par_chunks_mut(&mut y, d.out_elems(), threads, |bi, yb| {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        match &wt {
            Some(wt) => conv_fwd_one_swapped(xb, wt, b, d, yb),
            None => conv_fwd_one(xb, w, b, d, yb),
        }
    });
    y
}

fn conv_fwd_one<T: Real>(x: &[T], w: &[T], b: &[T], d: &ConvDims, y: &mut [T]) {
    let [st, sh, sw] = d.stride;
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let (ci, co) = (d.ci, d.co);
    let x_t = d.h * d.w * ci;
    let x_h = d.w * ci;
    let mut acc = vec![T::zero(); co];
    let mut oi = 0;
    for ot in 0..d.out[0] {
        for oh in 0..d.out[1] {
            for ow in 0..d.out[2] {
                acc.copy_from_slice(b);
                for dt in 0..d.kt {
                    // temporal zero padding sits before frame 0 only
                    let it = (ot * st + dt) as isize - (d.kt as isize - 1);
                    if it < 0 {
                        continue;
                    }
                    let it = it as usize;
                    for dh in 0..d.kh {
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for dw in 0..d.kw {
                            let iw = (ow * sw + dw) as isize - pw as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            let iw = iw as usize;
                            let xrow = &x[it * x_t + ih * x_h + iw * ci..][..ci];
                            let wbase = ((dt * d.kh + dh) * d.kw + dw) * ci * co;
                            for (c, &xv) in xrow.iter().enumerate() {
                                if xv == T::zero() {
                                    continue;
                                }
                                let krow = &w[wbase + c * co..][..co];
                                for (a, &kv) in acc.iter_mut().zip(krow) {
                                    *a += xv * kv;
                                }
                            }
                        }
                    }
                }
                y[oi..oi + co].copy_from_slice(&acc);
                oi += co;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    d: &ConvDims,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
    threads: usize,
) {
    let in_sz = d.in_elems();
    let out_sz = d.out_elems();
    let swapped = swap_small_cout(d);
    if let Some(gx) = gx {
        let wt = swapped.then(|| transpose_kernel(w, d));
        par_chunks_mut(gx, in_sz, threads, |bi, gxb| {
            let gb = &gout[bi * out_sz..(bi + 1) * out_sz];
            match &wt {
                Some(wt) => conv_bwd_dx_one_swapped(wt, gb, d, gxb),
                None => conv_bwd_dx_one(w, gb, d, gxb),
            }
        });
    }
    if let Some(gw) = gw {
        // per-batch partial kernels summed in index order: results are
        // identical for any thread count
        let wlen = gw.len();
        let mut partial = vec![T::zero(); d.batch * wlen];
        par_chunks_mut(&mut partial, wlen, threads, |bi, pw| {
            let go = &gout[bi * out_sz..(bi + 1) * out_sz];
            let xb = &x[bi * in_sz..(bi + 1) * in_sz];
            if swapped {
                conv_bwd_dw_one_swapped(xb, go, d, pw);
            } else {
                conv_bwd_dw_one(xb, go, d, pw);
            }
        });
        if swapped {
            // partials are in [taps, Cout, Cin] order; fold back transposed
            let taps = d.kt * d.kh * d.kw;
            for chunk in partial.chunks_exact(wlen) {
                for t in 0..taps {
                    for o in 0..d.co {
                        for c in 0..d.ci {
                            gw[(t * d.ci + c) * d.co + o] += chunk[(t * d.co + o) * d.ci + c];
                        }
                    }
                }
            }
        } else {
            for chunk in partial.chunks_exact(wlen) {
                for (g, &p) in gw.iter_mut().zip(chunk) {
                    *g += p;
                }
            }
        }
    }
    if let Some(gb) = gb {
        for row in gout.chunks_exact(d.co) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
}

fn conv_bwd_dx_one<T: Real>(w: &[T], gout: &[T], d: &ConvDims, gx: &mut [T]) {
    let [st, sh, sw] = d.stride;
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let (ci, co) = (d.ci, d.co);
    let x_t = d.h * d.w * ci;
    let x_h = d.w * ci;
    let mut oi = 0;
    for ot in 0..d.out[0] {
        for oh in 0..d.out[1] {
            for ow in 0..d.out[2] {
                let grow = &gout[oi..oi + co];
                oi += co;
                for dt in 0..d.kt {
                    let it = (ot * st + dt) as isize - (d.kt as isize - 1);
                    if it < 0 {
                        continue;
                    }
                    let it = it as usize;
                    for dh in 0..d.kh {
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for dw in 0..d.kw {
                            let iw = (ow * sw + dw) as isize - pw as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            let iw = iw as usize;
                            let gxrow = &mut gx[it * x_t + ih * x_h + iw * ci..][..ci];
                            let wbase = ((dt * d.kh + dh) * d.kw + dw) * ci * co;
                            for (c, gxv) in gxrow.iter_mut().enumerate() {
                                let krow = &w[wbase + c * co..][..co];
                                let mut acc = T::zero();
                                for (&g, &kv) in grow.iter().zip(krow) {
                                    acc += g * kv;
                                }
                                *gxv += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_bwd_dw_one<T: Real>(x: &[T], gout: &[T], d: &ConvDims, gw: &mut [T]) {
    let [st, sh, sw] = d.stride;
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let (ci, co) = (d.ci, d.co);
    let x_t = d.h * d.w * ci;
    let x_h = d.w * ci;
    let mut oi = 0;
    for ot in 0..d.out[0] {
        for oh in 0..d.out[1] {
            for ow in 0..d.out[2] {
                let grow = &gout[oi..oi + co];
                oi += co;
                for dt in 0..d.kt {
                    let it = (ot * st + dt) as isize - (d.kt as isize - 1);
                    if it < 0 {
                        continue;
                    }
                    let it = it as usize;
                    for dh in 0..d.kh {
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for dw in 0..d.kw {
                            let iw = (ow * sw + dw) as isize - pw as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            let iw = iw as usize;
                            let xrow = &x[it * x_t + ih * x_h + iw * ci..][..ci];
                            let wbase = ((dt * d.kh + dh) * d.kw + dw) * ci * co;
                            for (c, &xv) in xrow.iter().enumerate() {
                                if xv == T::zero() {
                                    continue;
                                }
                                let gwrow = &mut gw[wbase + c * co..][..co];
                                for (gwv, &g) in gwrow.iter_mut().zip(grow) {
                                    *gwv += xv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn tconv3d_forward<T: Real>(x: &[T], w: &[T], b: &[T], d: &ConvDims, threads: usize) -> Vec<T> {
    let mut y = vec![T::zero(); d.batch * d.out_elems()];
    let in_sz = d.in_elems();
    par_chunks_mut(&mut y, d.out_elems(), threads, |bi, yb| {
        for row in yb.chunks_exact_mut(d.co) {
            row.copy_from_slice(b);
        }
        tconv_fwd_one(&x[bi * in_sz..(bi + 1) * in_sz], w, d, yb);
    });
    y
}

/// Iterates (input position, kernel tap) pairs and their painted output
/// position. Temporal taps paint forward from it*st (causal); spatial taps
/// are centered with offset (k-s)/2.
#[inline]
fn tconv_target(d: &ConvDims, it: usize, ih: usize, iw: usize, dt: usize, dh: usize, dw: usize) -> Option<(usize, usize, usize)> {
    let [st, sh, sw] = d.stride;
    let ot = it * st + dt;
    if ot >= d.out[0] {
        return None;
    }
    let oh = (ih * sh + dh) as isize - (d.kh as isize - sh as isize) / 2;
    if oh < 0 || oh >= d.out[1] as isize {
        return None;
    }
    let ow = (iw * sw + dw) as isize - (d.kw as isize - sw as isize) / 2;
    if ow < 0 || ow >= d.out[2] as isize {
        return None;
    }
    Some((ot, oh as usize, ow as usize))
}

fn tconv_fwd_one<T: Real>(x: &[T], w: &[T], d: &ConvDims, y: &mut [T]) {
    let (ci, co) = (d.ci, d.co);
    let y_t = d.out[1] * d.out[2] * co;
    let y_h = d.out[2] * co;
    let mut xi = 0;
    for it in 0..d.t {
        for ih in 0..d.h {
            for iw in 0..d.w {
                let xrow = &x[xi..xi + ci];
                xi += ci;
                for dt in 0..d.kt {
                    for dh in 0..d.kh {
                        for dw in 0..d.kw {
                            let Some((ot, oh, ow)) = tconv_target(d, it, ih, iw, dt, dh, dw)
                            else {
                                continue;
                            };
                            let yrow = &mut y[ot * y_t + oh * y_h + ow * co..][..co];
                            let wbase = ((dt * d.kh + dh) * d.kw + dw) * ci * co;
                            for (c, &xv) in xrow.iter().enumerate() {
                                if xv == T::zero() {
                                    continue;
                                }
                                let krow = &w[wbase + c * co..][..co];
                                for (yv, &kv) in yrow.iter_mut().zip(krow) {
                                    *yv += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_fwd_one_swapped<T: Real>(x: &[T], wt: &[T], b: &[T], d: &ConvDims, y: &mut [T]) {
    let [st, sh, sw] = d.stride;
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let (ci, co) = (d.ci, d.co);
    let x_t = d.h * d.w * ci;
    let x_h = d.w * ci;
    let mut oi = 0;
    for ot in 0..d.out[0] {
        for oh in 0..d.out[1] {
            for ow in 0..d.out[2] {
                let yrow = &mut y[oi..oi + co];
                yrow.copy_from_slice(b);
                for dt in 0..d.kt {
                    let it = (ot * st + dt) as isize - (d.kt as isize - 1);
                    if it < 0 {
                        continue;
                    }
                    let it = it as usize;
                    for dh in 0..d.kh {
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for dw in 0..d.kw {
                            let iw = (ow * sw + dw) as isize - pw as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            let iw = iw as usize;
                            let xrow = &x[it * x_t + ih * x_h + iw * ci..][..ci];
                            let wbase = ((dt * d.kh + dh) * d.kw + dw) * ci * co;
                            for (o, yv) in yrow.iter_mut().enumerate() {
                                let wrow = &wt[wbase + o * ci..][..ci];
                                let mut acc = T::zero();
                                for (&xv, &kv) in xrow.iter().zip(wrow) {
                                    acc += xv * kv;
                                }
                                *yv += acc;
                            }
                        }
                    }
                }
                oi += co;
            }
        }
    }
}

fn conv_bwd_dx_one_swapped<T: Real>(wt: &[T], gout: &[T], d: &ConvDims, gx: &mut [T]) {
    let [st, sh, sw] = d.stride;
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let (ci, co) = (d.ci, d.co);
    let x_t = d.h * d.w * ci;
    let x_h = d.w * ci;
    let mut oi = 0;
    for ot in 0..d.out[0] {
        for oh in 0..d.out[1] {
            for ow in 0..d.out[2] {
                let grow = &gout[oi..oi + co];
                oi += co;
                for dt in 0..d.kt {
                    let it = (ot * st + dt) as isize - (d.kt as isize - 1);
                    if it < 0 {
                        continue;
                    }
                    let it = it as usize;
                    for dh in 0..d.kh {
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for dw in 0..d.kw {
                            let iw = (ow * sw + dw) as isize - pw as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            let iw = iw as usize;
                            let gxrow = &mut gx[it * x_t + ih * x_h + iw * ci..][..ci];
                            let wbase = ((dt * d.kh + dh) * d.kw + dw) * ci * co;
                            for (o, &g) in grow.iter().enumerate() {
                                if g == T::zero() {
                                    continue;
                                }
                                let wrow = &wt[wbase + o * ci..][..ci];
                                for (gxv, &kv) in gxrow.iter_mut().zip(wrow) {
                                    *gxv += g * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Writes kernel gradients in the transposed [taps, Cout, Cin] layout.
fn conv_bwd_dw_one_swapped<T: Real>(x: &[T], gout: &[T], d: &ConvDims, gwt: &mut [T]) {
    let [st, sh, sw] = d.stride;
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let (ci, co) = (d.ci, d.co);
    let x_t = d.h * d.w * ci;
    let x_h = d.w * ci;
    let mut oi = 0;
    for ot in 0..d.out[0] {
        for oh in 0..d.out[1] {
            for ow in 0..d.out[2] {
                let grow = &gout[oi..oi + co];
                oi += co;
                for dt in 0..d.kt {
                    let it = (ot * st + dt) as isize - (d.kt as isize - 1);
                    if it < 0 {
                        continue;
                    }
                    let it = it as usize;
                    for dh in 0..d.kh {
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for dw in 0..d.kw {
                            let iw = (ow * sw + dw) as isize - pw as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            let iw = iw as usize;
                            let xrow = &x[it * x_t + ih * x_h + iw * ci..][..ci];
                            let wbase = ((dt * d.kh + dh) * d.kw + dw) * ci * co;
                            for (o, &g) in grow.iter().enumerate() {
                                if g == T::zero() {
                                    continue;
                                }
                                let gwrow = &mut gwt[wbase + o * ci..][..ci];
                                for (gwv, &xv) in gwrow.iter_mut().zip(xrow) {
                                    *gwv += g * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn tconv3d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    d: &ConvDims,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
    threads: usize,
) {
    let in_sz = d.in_elems();
    let out_sz = d.out_elems();
    if let Some(gx) = gx {
        par_chunks_mut(gx, in_sz, threads, |bi, gxb| {
            tconv_bwd_dx_one(w, &gout[bi * out_sz..(bi + 1) * out_sz], d, gxb);
        });
    }
    if let Some(gw) = gw {
        let wlen = gw.len();
        let mut partial = vec![T::zero(); d.batch * wlen];
        par_chunks_mut(&mut partial, wlen, threads, |bi, pw| {
            tconv_bwd_dw_one(
                &x[bi * in_sz..(bi + 1) * in_sz],
                &gout[bi * out_sz..(bi + 1) * out_sz],
                d,
                pw,
            );
        });
        for chunk in partial.chunks_exact(wlen) {
            for (g, &p) in gw.iter_mut().zip(chunk) {
                *g += p;
            }
        }
    }
    if let Some(gb) = gb {
        for row in gout.chunks_exact(d.co) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
}

fn tconv_bwd_dx_one<T: Real>(w: &[T], gout: &[T], d: &ConvDims, gx: &mut [T]) {
    let (ci, co) = (d.ci, d.co);
    let y_t = d.out[1] * d.out[2] * co;
    let y_h = d.out[2] * co;
    let mut xi = 0;
    for it in 0..d.t {
        for ih in 0..d.h {
            for iw in 0..d.w {
                let gxrow = &mut gx[xi..xi + ci];
                xi += ci;
                for dt in 0..d.kt {
                    for dh in 0..d.kh {
                        for dw in 0..d.kw {
                            let Some((ot, oh, ow)) = tconv_target(d, it, ih, iw, dt, dh, dw)
                            else {
                                continue;
                            };
                            let grow = &gout[ot * y_t + oh * y_h + ow * co..][..co];
                            let wbase = ((dt * d.kh + dh) * d.kw + dw) * ci * co;
                            for (c, gxv) in gxrow.iter_mut().enumerate() {
                                let krow = &w[wbase + c * co..][..co];
                                let mut acc = T::zero();
                                for (&g, &kv) in grow.iter().zip(krow) {
                                    acc += g * kv;
                                }
                                *gxv += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Graph, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Brute-force reference: temporal padding of kt-1 zeros before the
    /// clip, spatial padding (k-1)/2 per side, then direct correlation.
    #[allow(clippy::too_many_arguments)]
    fn oracle_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: [usize; 3]) -> Vec<f64> {
        let [bs, t, h, wd, ci] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
        let [kt, kh, kw, _, co] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]];
        let [st, sh, sw] = stride;
        let (ot, oh, ow) = ((t - 1) / st + 1, (h - 1) / sh + 1, (wd - 1) / sw + 1);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let xd = x.data();
        let get = |bi: usize, it: isize, ih: isize, iw: isize, c: usize| -> f64 {
            if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                return 0.0;
            }
            xd[(((bi * t + it as usize) * h + ih as usize) * wd + iw as usize) * ci + c]
        };
        let mut y = Vec::new();
        for bi in 0..bs {
            for p in 0..ot {
                for q in 0..oh {
                    for r in 0..ow {
                        for o in 0..co {
                            let mut acc = b.data()[o];
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        for c in 0..ci {
                                            let it = (p * st + dt) as isize - (kt as isize - 1);
                                            let ih = (q * sh + dh) as isize - ph as isize;
                                            let iw = (r * sw + dw) as isize - pw as isize;
                                            acc += get(bi, it, ih, iw, c)
                                                * w.data()[(((dt * kh + dh) * kw + dw) * ci + c) * co + o];
                                        }
                                    }
                                }
                            }
                            y.push(acc);
                        }
                    }
                }
            }
        }
        y
    }

    /// Brute-force transpose reference: zero-stuff by stride, then run a
    /// direct convolution with temporal taps reaching backward and spatial
    /// taps centered by (k-s)/2.
    fn oracle_tconv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: [usize; 3]) -> Vec<f64> {
        let [bs, t, h, wd, ci] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
        let [kt, kh, kw, _, co] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]];
        let [st, sh, sw] = stride;
        let (ot, oh, ow) = (t * st, h * sh, wd * sw);
        let xd = x.data();
        // zero-stuffed lookup: only stride-aligned positions hold data
        let stuffed = |bi: usize, p: isize, q: isize, r: isize, c: usize| -> f64 {
            if p < 0 || q < 0 || r < 0 || p >= ot as isize || q >= oh as isize || r >= ow as isize {
                return 0.0;
            }
            let (p, q, r) = (p as usize, q as usize, r as usize);
            if p % st != 0 || q % sh != 0 || r % sw != 0 {
                return 0.0;
            }
            xd[(((bi * t + p / st) * h + q / sh) * wd + r / sw) * ci + c]
        };
        let off_h = (kh as isize - sh as isize) / 2;
        let off_w = (kw as isize - sw as isize) / 2;
        let mut y = Vec::new();
        for bi in 0..bs {
            for p in 0..ot as isize {
                for q in 0..oh as isize {
                    for r in 0..ow as isize {
                        for o in 0..co {
                            let mut acc = b.data()[o];
                            for dt in 0..kt as isize {
                                for dh in 0..kh as isize {
                                    for dw in 0..kw as isize {
                                        for c in 0..ci {
                                            acc += stuffed(bi, p - dt, q - dh + off_h, r - dw + off_w, c)
                                                * w.data()[(((dt as usize * kh + dh as usize) * kw
                                                    + dw as usize)
                                                    * ci
                                                    + c)
                                                    * co
                                                    + o];
                                        }
                                    }
                                }
                            }
                            y.push(acc);
                        }
                    }
                }
            }
        }
        y
    }

    fn run_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: [usize; 3],
        transpose: bool,
    ) -> (Vec<usize>, Vec<f64>) {
        let mut g = Graph::new();
        let xi = g.leaf(x, false).unwrap();
        let wi = g.leaf(w, false).unwrap();
        let bi = g.leaf(b, false).unwrap();
        let y = if transpose {
            g.tconv3d(xi, wi, bi, stride).unwrap()
        } else {
            g.conv3d(xi, wi, bi, stride).unwrap()
        };
        (g.shape(y).to_vec(), g.data(y).to_vec())
    }

    #[test]
    fn zero_input_yields_broadcast_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4, 2]);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 2, 5]);
        let b = rand_tensor(&mut rng, &[5]);
        let (shape, y) = run_conv(&x, &w, &b, [1, 1, 1], false);
        assert_eq!(shape, vec![1, 3, 4, 4, 5]);
        for row in y.chunks_exact(5) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn impulse_after_t_leaves_prefix_at_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Tensor::<f64>::zeros(&[1, 6, 2, 2, 1]);
        // unit impulse at frame 3
        let idx = 3 * 2 * 2;
        x.data_mut()[idx] = 1.0;
        let w = rand_tensor(&mut rng, &[2, 1, 1, 1, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let (_, y) = run_conv(&x, &w, &b, [1, 1, 1], false);
        let zero = run_conv(&Tensor::zeros(&[1, 6, 2, 2, 1]), &w, &b, [1, 1, 1], false).1;
        // frames 0..2 are bit-identical to the all-zero response
        let frame = 2 * 2 * 3;
        assert_eq!(&y[..3 * frame], &zero[..3 * frame]);
        assert_ne!(&y[3 * frame..4 * frame], &zero[3 * frame..4 * frame]);
    }

    #[test]
    fn conv_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // the spec's 4x4x4x1, 2x3x3 kernel, stride 1 case
        let x = rand_tensor(&mut rng, &[1, 4, 4, 4, 1]);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 1, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let (_, y) = run_conv(&x, &w, &b, [1, 1, 1], false);
        let want = oracle_conv(&x, &w, &b, [1, 1, 1]);
        for (a, e) in y.iter().zip(&want) {
            assert!((a - e).abs() < 1e-6, "{} vs {}", a, e);
        }
    }

    #[test]
    fn conv_strided_and_small_cout_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (ci, co, k, s) in [
            (32usize, 3usize, [1usize, 3, 3], [1usize, 1, 1]), // swapped path
            (3, 8, [2, 3, 3], [2, 2, 2]),
            (4, 4, [2, 2, 2], [2, 2, 2]),
            (2, 5, [3, 3, 3], [1, 2, 2]),
        ] {
            let x = rand_tensor(&mut rng, &[2, 4, 6, 6, ci]);
            let w = rand_tensor(&mut rng, &[k[0], k[1], k[2], ci, co]);
            let b = rand_tensor(&mut rng, &[co]);
            let (_, y) = run_conv(&x, &w, &b, s, false);
            let want = oracle_conv(&x, &w, &b, s);
            assert_eq!(y.len(), want.len());
            for (a, e) in y.iter().zip(&want) {
                assert!((a - e).abs() < 1e-6, "ci={} co={}: {} vs {}", ci, co, a, e);
            }
        }
    }

    #[test]
    fn tconv_identity_kernel_is_input_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 3, 2, 2, 3]);
        // 1x1x1 identity kernel per channel
        let mut w = Tensor::<f64>::zeros(&[1, 1, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let b = rand_tensor(&mut rng, &[3]);
        let (_, y) = run_conv(&x, &w, &b, [1, 1, 1], true);
        for (i, v) in y.iter().enumerate() {
            let want = x.data()[i] + b.data()[i % 3];
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn tconv_impulse_respects_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut x = Tensor::<f64>::zeros(&[1, 3, 2, 2, 1]);
        x.data_mut()[1 * 2 * 2] = 1.0; // impulse at latent frame 1
        let w = rand_tensor(&mut rng, &[3, 2, 2, 1, 2]);
        let b = rand_tensor(&mut rng, &[2]);
        let (_, y) = run_conv(&x, &w, &b, [2, 2, 2], true);
        let zero = run_conv(&Tensor::zeros(&[1, 3, 2, 2, 1]), &w, &b, [2, 2, 2], true).1;
        // output frames 0..1 (impulse lands at frame 2 = 1*stride) untouched
        let frame = 4 * 4 * 2;
        assert_eq!(&y[..2 * frame], &zero[..2 * frame]);
        assert_ne!(&y[2 * frame..3 * frame], &zero[2 * frame..3 * frame]);
    }

    #[test]
    fn tconv_matches_zero_stuffed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (ci, co, k, s) in [
            (2usize, 3usize, [2usize, 2, 2], [2usize, 2, 2]),
            (3, 2, [1, 2, 2], [1, 2, 2]),
            (2, 2, [2, 3, 3], [1, 1, 1]),
            (4, 3, [3, 4, 4], [2, 2, 2]),
        ] {
            let x = rand_tensor(&mut rng, &[2, 3, 3, 3, ci]);
            let w = rand_tensor(&mut rng, &[k[0], k[1], k[2], ci, co]);
            let b = rand_tensor(&mut rng, &[co]);
            let (_, y) = run_conv(&x, &w, &b, s, true);
            let want = oracle_tconv(&x, &w, &b, s);
            assert_eq!(y.len(), want.len());
            for (a, e) in y.iter().zip(&want) {
                assert!((a - e).abs() < 1e-6, "ci={} co={}: {} vs {}", ci, co, a, e);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_arguments() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4, 3]);
        let w = Tensor::<f64>::zeros(&[2, 3, 3, 2, 4]); // Cin mismatch
        let b = Tensor::<f64>::zeros(&[4]);
        let mut g = Graph::new();
        let xi = g.leaf(&x, false).unwrap();
        let wi = g.leaf(&w, false).unwrap();
        let bi = g.leaf(&b, false).unwrap();
        assert!(g.conv3d(xi, wi, bi, [1, 1, 1]).is_err());
        let w2 = Tensor::<f64>::zeros(&[2, 3, 3, 3, 4]);
        let w2i = g.leaf(&w2, false).unwrap();
        assert!(g.conv3d(xi, w2i, bi, [0, 1, 1]).is_err());
        assert!(g.conv3d(xi, w2i, bi, [1, 1, 1]).is_ok());
    }

    #[test]
    fn parallel_batches_match_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[4, 4, 6, 6, 3]);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3, 8]);
        let b = rand_tensor(&mut rng, &[8]);
        let mut outs = Vec::new();
        let mut gradws = Vec::new();
        for threads in [1usize, 2, 3] {
            let mut g = Graph::<f64>::with_threads(threads);
            let xi = g.leaf(&x, true).unwrap();
            let wi = g.leaf(&w, true).unwrap();
            let bi = g.leaf(&b, true).unwrap();
            let y = g.conv3d(xi, wi, bi, [2, 2, 2]).unwrap();
            let loss = g.mean_all(y).unwrap();
            g.backward(loss).unwrap();
            outs.push(g.data(y).to_vec());
            gradws.push(g.grad(wi).unwrap().to_vec());
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
        assert_eq!(gradws[0], gradws[1]);
        assert_eq!(gradws[0], gradws[2]);
    }
}

fn tconv_bwd_dw_one<T: Real>(x: &[T], gout: &[T], d: &ConvDims, gw: &mut [T]) {
    let (ci, co) = (d.ci, d.co);
    let y_t = d.out[1] * d.out[2] * co;
    let y_h = d.out[2] * co;
    let mut xi = 0;
    for it in 0..d.t {
        for ih in 0..d.h {
            for iw in 0..d.w {
                let xrow = &x[xi..xi + ci];
                xi += ci;
                for dt in 0..d.kt {
                    for dh in 0..d.kh {
                        for dw in 0..d.kw {
                            let Some((ot, oh, ow)) = tconv_target(d, it, ih, iw, dt, dh, dw)
                            else {
                                continue;
                            };
                            let grow = &gout[ot * y_t + oh * y_h + ow * co..][..co];
                            let wbase = ((dt * d.kh + dh) * d.kw + dw) * ci * co;
                            for (c, &xv) in xrow.iter().enumerate() {
                                if xv == T::zero() {
                                    continue;
                                }
                                let gwrow = &mut gw[wbase + c * co..][..co];
                                for (gwv, &g) in gwrow.iter_mut().zip(grow) {
                                    *gwv += xv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
