//! Forward and backward kernels. Convolutions lower to im2col + GEMM per
//! batch item; items run in parallel into disjoint output slices and weight
//! gradients accumulate serially in batch order.

use rayon::prelude::*;

use super::{Real, RoiRect, Tensor4, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_size(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let padded = input + 2 * spec.pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / spec.stride + 1)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TensorError> {
    if cond {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch(msg()))
    }
}

/// Columns of the whole batch, [C*KH*KW, B*OH*OW], built row-parallel in a
/// single pass.
fn im2col_batched<T: Real>(
    x: &Tensor4<T>,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ckk = x.c * kh * kw;
    let n_out = oh * ow;
    let total = x.n * n_out;
    let mut col = vec![T::ZERO; ckk * total];
    let (h, w, c, n) = (x.h, x.w, x.c, x.n);
    col.par_chunks_mut(total).enumerate().for_each(|(row, dst)| {
        let kj = row % kw;
        let ki = (row / kw) % kh;
        let ci = row / (kh * kw);
        for item in 0..n {
            let xi = &x.data[item * c * h * w..(item + 1) * c * h * w];
            let base_out = item * n_out;
            for oy in 0..oh {
                let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                let seg = &mut dst[base_out + oy * ow..base_out + (oy + 1) * ow];
                if iy < 0 || iy >= h as isize {
                    seg.fill(T::ZERO);
                    continue;
                }
                let x_row = (ci * h + iy as usize) * w;
                for (ox, v) in seg.iter_mut().enumerate() {
                    let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                    *v = if ix < 0 || ix >= w as isize { T::ZERO } else { xi[x_row + ix as usize] };
                }
            }
        }
    });
    col
}

/// Adjoint of [`im2col_batched`]: accumulates batch columns back into NCHW,
/// item-parallel.
#[allow(clippy::too_many_arguments)]
fn col2im_batched<T: Real>(
    col: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
) -> Tensor4<T> {
    let n_out = oh * ow;
    let total = n * n_out;
    let mut out = Tensor4::zeros(n, c, h, w);
    out.data
        .par_chunks_mut(c * h * w)
        .enumerate()
        .for_each(|(item, x_item)| {
            for ci in 0..c {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (ci * kh + ki) * kw + kj;
                        let base = row * total + item * n_out;
                        for oy in 0..oh {
                            let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = (ci * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    x_item[x_row + ix as usize] += col[base + oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Few filters at stride 1 make the im2col GEMM memory-bound on the packed
/// column matrix; a direct row-AXPY convolution wins there.
fn use_direct(w: &Tensor4<impl Real>, spec: ConvSpec) -> bool {
    spec.stride == 1 && w.n <= 8
}

/// Direct stride-1 cross-correlation: per (filter, channel, tap), a shifted
/// row accumulation. Items run in parallel.
fn conv2d_direct_s1<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &Tensor4<T>,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor4<T> {
    let (f, c, kh, kw) = (w.n, w.c, w.h, w.w);
    let mut y = Tensor4::zeros(x.n, f, oh, ow);
    y.data
        .par_chunks_mut(f * oh * ow)
        .enumerate()
        .for_each(|(item, y_item)| {
            let xi = x.item_slice(item);
            for fi in 0..f {
                let y_plane = &mut y_item[fi * oh * ow..(fi + 1) * oh * ow];
                y_plane.fill(b.data[fi]);
                for ci in 0..c {
                    let x_plane = &xi[ci * x.h * x.w..(ci + 1) * x.h * x.w];
                    for ky in 0..kh {
                        let w_row = &w.data[((fi * c + ci) * kh + ky) * kw..((fi * c + ci) * kh + ky) * kw + kw];
                        // One pass per row, all kx taps fused.
                        for oy in 0..oh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let y_row = &mut y_plane[oy * ow..oy * ow + ow];
                            for (kx, &wv) in w_row.iter().enumerate() {
                                let (ox0, ix0) =
                                    if kx >= pad { (0usize, kx - pad) } else { (pad - kx, 0usize) };
                                let span = (ow - ox0).min(x.w - ix0);
                                let yr = &mut y_row[ox0..ox0 + span];
                                let xr = &x_row[ix0..ix0 + span];
                                for (yv, &xv) in yr.iter_mut().zip(xr) {
                                    *yv += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Direct weight/bias gradients: dW is the correlation of dy with x.
fn conv2d_direct_s1_backward_wb<T: Real>(
    x: &Tensor4<T>,
    w_shape: (usize, usize, usize, usize),
    dy: &Tensor4<T>,
    pad: usize,
) -> (Tensor4<T>, Tensor4<T>) {
    let (f, c, kh, kw) = w_shape;
    let (oh, ow) = (dy.h, dy.w);
    let mut db = Tensor4::zeros(1, f, 1, 1);
    for item in 0..dy.n {
        let dyi = dy.item_slice(item);
        for fi in 0..f {
            let mut s = T::ZERO;
            for &v in &dyi[fi * oh * ow..(fi + 1) * oh * ow] {
                s += v;
            }
            db.data[fi] += s;
        }
    }
    // Per-item partials reduced in item order keeps determinism.
    let partials: Vec<Vec<T>> = (0..x.n)
        .into_par_iter()
        .map(|item| {
            let xi = x.item_slice(item);
            let dyi = dy.item_slice(item);
            let mut dw = vec![T::ZERO; f * c * kh * kw];
            for fi in 0..f {
                let dy_plane = &dyi[fi * oh * ow..(fi + 1) * oh * ow];
                for ci in 0..c {
                    let x_plane = &xi[ci * x.h * x.w..(ci + 1) * x.h * x.w];
                    for ky in 0..kh {
                        let mut acc = vec![T::ZERO; kw];
                        for oy in 0..oh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let dy_row = &dy_plane[oy * ow..oy * ow + ow];
                            for (kx, a) in acc.iter_mut().enumerate() {
                                let (ox0, ix0) =
                                    if kx >= pad { (0usize, kx - pad) } else { (pad - kx, 0usize) };
                                let span = (ow - ox0).min(x.w - ix0);
                                let mut s = T::ZERO;
                                for (&dv, &xv) in dy_row[ox0..ox0 + span].iter().zip(&x_row[ix0..ix0 + span]) {
                                    s += dv * xv;
                                }
                                *a += s;
                            }
                        }
                        let base = ((fi * c + ci) * kh + ky) * kw;
                        for (kx, &a) in acc.iter().enumerate() {
                            dw[base + kx] += a;
                        }
                    }
                }
            }
            dw
        })
        .collect();
    let mut dw = Tensor4::zeros(f, c, kh, kw);
    for part in &partials {
        for (d, &p) in dw.data.iter_mut().zip(part) {
            *d += p;
        }
    }
    (dw, db)
}

/// Cross-correlation (no kernel flip). x [B,C,H,W] * w [F,C,KH,KW] + b [1,F,1,1].
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &Tensor4<T>,
    spec: ConvSpec,
) -> Result<Tensor4<T>, TensorError> {
    conv2d_forward_cols(x, w, b, spec).map(|(y, _)| y)
}

/// As [`conv2d_forward`], also returning the batch columns so a following
/// backward pass can skip the im2col rebuild.
pub fn conv2d_forward_cols<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &Tensor4<T>,
    spec: ConvSpec,
) -> Result<(Tensor4<T>, Vec<T>), TensorError> {
    check(x.c == w.c, || format!("conv2d channels: input {} vs weight {}", x.c, w.c))?;
    check(b.shape() == (1, w.n, 1, 1), || "conv2d bias shape".into())?;
    let oh = conv_out_size(x.h, w.h, spec)
        .ok_or_else(|| TensorError::ShapeMismatch("conv2d kernel larger than input".into()))?;
    let ow = conv_out_size(x.w, w.w, spec)
        .ok_or_else(|| TensorError::ShapeMismatch("conv2d kernel larger than input".into()))?;
    if use_direct(w, spec) {
        return Ok((conv2d_direct_s1(x, w, b, spec.pad, oh, ow), Vec::new()));
    }
    let f = w.n;
    let ckk = w.c * w.h * w.w;
    let n_out = oh * ow;
    let total = x.n * n_out;
    // One GEMM for the whole batch: y_flat [F x B*OH*OW] = W . col, then a
    // scatter back to NCHW.
    let col = im2col_batched(x, w.h, w.w, spec, oh, ow);
    let mut y_flat = vec![T::ZERO; f * total];
    unsafe {
        T::gemm(
            f,
            ckk,
            total,
            T::ONE,
            w.data.as_ptr(),
            ckk as isize,
            1,
            col.as_ptr(),
            total as isize,
            1,
            T::ZERO,
            y_flat.as_mut_ptr(),
            total as isize,
            1,
        );
    }
    let mut y = Tensor4::zeros(x.n, f, oh, ow);
    y.data
        .par_chunks_mut(f * n_out)
        .enumerate()
        .for_each(|(item, y_item)| {
            for fi in 0..f {
                let bias = b.data[fi];
                let src = &y_flat[fi * total + item * n_out..fi * total + (item + 1) * n_out];
                let dst = &mut y_item[fi * n_out..(fi + 1) * n_out];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias;
                }
            }
        });
    Ok((y, col))
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor4<T>>,
    pub dw: Tensor4<T>,
    pub db: Tensor4<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    spec: ConvSpec,
    need_dx: bool,
) -> ConvGrads<T> {
    conv2d_backward_with(x, w, dy, spec, need_dx, None)
}

pub fn conv2d_backward_with<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    spec: ConvSpec,
    need_dx: bool,
    cached_col: Option<&[T]>,
) -> ConvGrads<T> {
    if use_direct(w, spec) && !need_dx {
        let (dw, db) = conv2d_direct_s1_backward_wb(x, (w.n, w.c, w.h, w.w), dy, spec.pad);
        return ConvGrads { dx: None, dw, db };
    }
    let (f, ckk) = (w.n, w.c * w.h * w.w);
    let (oh, ow) = (dy.h, dy.w);
    let n_out = oh * ow;
    let total = x.n * n_out;

    let mut db = Tensor4::zeros(1, f, 1, 1);
    for item in 0..x.n {
        let dy_item = dy.item_slice(item);
        for fi in 0..f {
            let mut s = T::ZERO;
            for &v in &dy_item[fi * n_out..(fi + 1) * n_out] {
                s += v;
            }
            db.data[fi] += s;
        }
    }

    // dy reshaped to [F x B*n_out]: gather once, reuse for dW and dcol.
    let mut dy_flat = vec![T::ZERO; f * total];
    dy_flat.par_chunks_mut(total).enumerate().for_each(|(fi, dst)| {
        for item in 0..x.n {
            let src = &dy.item_slice(item)[fi * n_out..(fi + 1) * n_out];
            dst[item * n_out..(item + 1) * n_out].copy_from_slice(src);
        }
    });
    let col_owned;
    let col: &[T] = match cached_col {
        Some(c) => c,
        None => {
            col_owned = im2col_batched(x, w.h, w.w, spec, oh, ow);
            &col_owned
        }
    };

    // dW = dy_flat . col^T, one GEMM over the whole batch.
    let mut dw = Tensor4::zeros(w.n, w.c, w.h, w.w);
    unsafe {
        T::gemm(
            f,
            total,
            ckk,
            T::ONE,
            dy_flat.as_ptr(),
            total as isize,
            1,
            col.as_ptr(),
            1,
            total as isize,
            T::ONE,
            dw.data.as_mut_ptr(),
            ckk as isize,
            1,
        );
    }

    let dx = if need_dx {
        // dcol = W^T . dy_flat, then fold columns back per item.
        let mut dcol = vec![T::ZERO; ckk * total];
        unsafe {
            T::gemm(
                ckk,
                f,
                total,
                T::ONE,
                w.data.as_ptr(),
                1,
                ckk as isize,
                dy_flat.as_ptr(),
                total as isize,
                1,
                T::ZERO,
                dcol.as_mut_ptr(),
                total as isize,
                1,
            );
        }
        Some(col2im_batched(&dcol, x.n, x.c, x.h, x.w, w.h, w.w, spec, oh, ow))
    } else {
        None
    };
    ConvGrads { dx, dw, db }
}


/// Stride-1 transposed convolution equals a convolution with the kernel
/// flipped and complementary padding; delegating picks up the direct path.
fn flip_weights<T: Real>(w: &Tensor4<T>) -> Tensor4<T> {
    let (f, c, kh, kw) = (w.n, w.c, w.h, w.w);
    let mut out = Tensor4::zeros(c, f, kh, kw);
    for fi in 0..f {
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    out.data[((ci * f + fi) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                        w.data[((fi * c + ci) * kh + ky) * kw + kx];
                }
            }
        }
    }
    out
}

/// Transposed convolution: the adjoint of `conv2d(.., w, spec)` as an
/// independent forward op. x [B,F,H,W] * w [F,C,KH,KW] -> [B,C,out_h,out_w];
/// (out_h, out_w) must satisfy conv_out_size(out_*, k, spec) == (H, W).
pub fn conv2d_transpose_forward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &Tensor4<T>,
    spec: ConvSpec,
    out_hw: (usize, usize),
) -> Result<Tensor4<T>, TensorError> {
    check(x.c == w.n, || format!("conv2d_transpose channels: input {} vs weight {}", x.c, w.n))?;
    check(b.shape() == (1, w.c, 1, 1), || "conv2d_transpose bias shape".into())?;
    check(
        conv_out_size(out_hw.0, w.h, spec) == Some(x.h)
            && conv_out_size(out_hw.1, w.w, spec) == Some(x.w),
        || format!("conv2d_transpose output size {:?} inconsistent with input", out_hw),
    )?;
    if spec.stride == 1 && w.h > spec.pad && w.w > spec.pad && w.c <= 8 {
        let flipped = flip_weights(w);
        let cspec = ConvSpec { stride: 1, pad: w.h - 1 - spec.pad };
        return conv2d_forward(x, &flipped, b, cspec);
    }
    let (f, c) = (w.n, w.c);
    let ckk = c * w.h * w.w;
    let n_src = x.h * x.w;
    let total = x.n * n_src;
    // x reshaped to [F x B*n_src], one GEMM, then a batched column fold.
    let mut x_flat = vec![T::ZERO; f * total];
    x_flat.par_chunks_mut(total).enumerate().for_each(|(fi, dst)| {
        for item in 0..x.n {
            let src = &x.item_slice(item)[fi * n_src..(fi + 1) * n_src];
            dst[item * n_src..(item + 1) * n_src].copy_from_slice(src);
        }
    });
    let mut col = vec![T::ZERO; ckk * total];
    unsafe {
        T::gemm(
            ckk,
            f,
            total,
            T::ONE,
            w.data.as_ptr(),
            1,
            ckk as isize,
            x_flat.as_ptr(),
            total as isize,
            1,
            T::ZERO,
            col.as_mut_ptr(),
            total as isize,
            1,
        );
    }
    let mut y = col2im_batched(&col, x.n, c, out_hw.0, out_hw.1, w.h, w.w, spec, x.h, x.w);
    let plane = out_hw.0 * out_hw.1;
    y.data.par_chunks_mut(c * plane).for_each(|y_item| {
        for ci in 0..c {
            let bias = b.data[ci];
            for v in &mut y_item[ci * plane..(ci + 1) * plane] {
                *v += bias;
            }
        }
    });
    Ok(y)
}

pub fn conv2d_transpose_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    spec: ConvSpec,
    need_dx: bool,
) -> ConvGrads<T> {
    if spec.stride == 1 && w.h > spec.pad && w.w > spec.pad && w.c <= 8 && !need_dx {
        let flipped = flip_weights(w);
        let cspec = ConvSpec { stride: 1, pad: w.h - 1 - spec.pad };
        let g = conv2d_backward(x, &flipped, dy, cspec, false);
        // dW of the flipped view maps back through the same flip.
        let dw = flip_weights(&g.dw);
        return ConvGrads { dx: g.dx, dw, db: g.db };
    }
    let (f, c) = (w.n, w.c);
    let ckk = c * w.h * w.w;
    let n_src = x.h * x.w;
    let total = x.n * n_src;

    let mut db = Tensor4::zeros(1, c, 1, 1);
    let plane = dy.h * dy.w;
    for item in 0..dy.n {
        let dy_item = dy.item_slice(item);
        for ci in 0..c {
            let mut s = T::ZERO;
            for &v in &dy_item[ci * plane..(ci + 1) * plane] {
                s += v;
            }
            db.data[ci] += s;
        }
    }

    let col = im2col_batched(dy, w.h, w.w, spec, x.h, x.w);
    let mut x_flat = vec![T::ZERO; f * total];
    x_flat.par_chunks_mut(total).enumerate().for_each(|(fi, dst)| {
        for item in 0..x.n {
            let src = &x.item_slice(item)[fi * n_src..(fi + 1) * n_src];
            dst[item * n_src..(item + 1) * n_src].copy_from_slice(src);
        }
    });

    // dW = x_flat [F x total] . col^T [total x CKK]
    let mut dw = Tensor4::zeros(w.n, w.c, w.h, w.w);
    unsafe {
        T::gemm(
            f,
            total,
            ckk,
            T::ONE,
            x_flat.as_ptr(),
            total as isize,
            1,
            col.as_ptr(),
            1,
            total as isize,
            T::ONE,
            dw.data.as_mut_ptr(),
            ckk as isize,
            1,
        );
    }

    let dx = if need_dx {
        // dx_flat = W [F x CKK] . col [CKK x total], scattered back to NCHW.
        let mut dx_flat = vec![T::ZERO; f * total];
        unsafe {
            T::gemm(
                f,
                ckk,
                total,
                T::ONE,
                w.data.as_ptr(),
                ckk as isize,
                1,
                col.as_ptr(),
                total as isize,
                1,
                T::ZERO,
                dx_flat.as_mut_ptr(),
                total as isize,
                1,
            );
        }
        let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
        dx.data
            .par_chunks_mut(f * n_src)
            .enumerate()
            .for_each(|(item, dx_item)| {
                for fi in 0..f {
                    let src = &dx_flat[fi * total + item * n_src..fi * total + (item + 1) * n_src];
                    dx_item[fi * n_src..(fi + 1) * n_src].copy_from_slice(src);
                }
            });
        Some(dx)
    } else {
        None
    };
    ConvGrads { dx, dw, db }
}

/// Saved batch-norm context: per-channel batch mean and inverse std.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Train-mode batch norm over (N, H, W) per channel; updates running stats
/// with momentum 0.1 (unbiased variance in the running estimate).
pub fn batchnorm_train<T: Real>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
) -> Result<(Tensor4<T>, BnSaved<T>), TensorError> {
    check(x.n >= 2, || "batchnorm train mode requires batch >= 2".into())?;
    check(gamma.shape() == (1, x.c, 1, 1) && beta.shape() == (1, x.c, 1, 1), || {
        "batchnorm affine shape".into()
    })?;
    let m = x.n * x.h * x.w;
    let plane = x.h * x.w;
    let eps = T::from_f64(BN_EPS);
    let mom = T::from_f64(BN_MOMENTUM);
    let one_m_mom = T::from_f64(1.0 - BN_MOMENTUM);
    let stats: Vec<(T, T, T)> = (0..x.c)
        .into_par_iter()
        .map(|c| {
            let mut sum = T::ZERO;
            let mut sumsq = T::ZERO;
            for n in 0..x.n {
                let base = (n * x.c + c) * plane;
                for &v in &x.data[base..base + plane] {
                    sum += v;
                    sumsq += v * v;
                }
            }
            let mean = sum / T::from_f64(m as f64);
            let var = (sumsq / T::from_f64(m as f64) - mean * mean).max(T::ZERO);
            let unbiased =
                if m > 1 { var * T::from_f64(m as f64 / (m as f64 - 1.0)) } else { var };
            (mean, var, unbiased)
        })
        .collect();
    let mut saved = BnSaved { mean: vec![T::ZERO; x.c], inv_std: vec![T::ZERO; x.c] };
    for (c, &(mean, var, unbiased)) in stats.iter().enumerate() {
        saved.mean[c] = mean;
        saved.inv_std[c] = T::ONE / (var + eps).sqrt();
        running_mean[c] = one_m_mom * running_mean[c] + mom * mean;
        running_var[c] = one_m_mom * running_var[c] + mom * unbiased;
    }
    let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
    y.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(nc, dst)| {
            let c = nc % x.c;
            let (mean, inv_std) = (saved.mean[c], saved.inv_std[c]);
            let (g, bt) = (gamma.data[c], beta.data[c]);
            let src = &x.data[nc * plane..(nc + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = g * (v - mean) * inv_std + bt;
            }
        });
    Ok((y, saved))
}

pub fn batchnorm_train_backward<T: Real>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    saved: &BnSaved<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let m = x.n * x.h * x.w;
    let plane = x.h * x.w;
    let m_t = T::from_f64(m as f64);
    let sums: Vec<(T, T)> = (0..x.c)
        .into_par_iter()
        .map(|c| {
            let (mean, inv_std) = (saved.mean[c], saved.inv_std[c]);
            let mut sum_dy = T::ZERO;
            let mut sum_dy_xhat = T::ZERO;
            for n in 0..x.n {
                let base = (n * x.c + c) * plane;
                for i in base..base + plane {
                    let xhat = (x.data[i] - mean) * inv_std;
                    sum_dy += dy.data[i];
                    sum_dy_xhat += dy.data[i] * xhat;
                }
            }
            (sum_dy, sum_dy_xhat)
        })
        .collect();
    let mut dgamma = Tensor4::zeros(1, x.c, 1, 1);
    let mut dbeta = Tensor4::zeros(1, x.c, 1, 1);
    for (c, &(sum_dy, sum_dy_xhat)) in sums.iter().enumerate() {
        dgamma.data[c] = sum_dy_xhat;
        dbeta.data[c] = sum_dy;
    }
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    dx.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(nc, dst)| {
            let c = nc % x.c;
            let (mean, inv_std) = (saved.mean[c], saved.inv_std[c]);
            let g = gamma.data[c];
            let mean_dy = sums[c].0 / m_t;
            let mean_dy_xhat = sums[c].1 / m_t;
            let xs = &x.data[nc * plane..(nc + 1) * plane];
            let dys = &dy.data[nc * plane..(nc + 1) * plane];
            for ((d, &xv), &dyv) in dst.iter_mut().zip(xs).zip(dys) {
                let xhat = (xv - mean) * inv_std;
                *d = g * inv_std * (dyv - mean_dy - xhat * mean_dy_xhat);
            }
        });
    (dx, dgamma, dbeta)
}

/// Inference-mode batch norm with frozen running statistics.
pub fn batchnorm_infer<T: Real>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor4<T>, TensorError> {
    check(gamma.shape() == (1, x.c, 1, 1) && beta.shape() == (1, x.c, 1, 1), || {
        "batchnorm affine shape".into()
    })?;
    let plane = x.h * x.w;
    let eps = T::from_f64(BN_EPS);
    let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
    for c in 0..x.c {
        let inv_std = T::ONE / (running_var[c] + eps).sqrt();
        let scale = gamma.data[c] * inv_std;
        let shift = beta.data[c] - scale * running_mean[c];
        for n in 0..x.n {
            let base = (n * x.c + c) * plane;
            for i in base..base + plane {
                y.data[i] = scale * x.data[i] + shift;
            }
        }
    }
    Ok(y)
}

/// dx for infer-mode BN (running stats are constants).
pub fn batchnorm_infer_backward<T: Real>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    running_mean: &[T],
    running_var: &[T],
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let plane = x.h * x.w;
    let eps = T::from_f64(BN_EPS);
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut dgamma = Tensor4::zeros(1, x.c, 1, 1);
    let mut dbeta = Tensor4::zeros(1, x.c, 1, 1);
    for c in 0..x.c {
        let inv_std = T::ONE / (running_var[c] + eps).sqrt();
        let scale = gamma.data[c] * inv_std;
        for n in 0..x.n {
            let base = (n * x.c + c) * plane;
            for i in base..base + plane {
                dx.data[i] = scale * dy.data[i];
                dgamma.data[c] += dy.data[i] * (x.data[i] - running_mean[c]) * inv_std;
                dbeta.data[c] += dy.data[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::ZERO))
}

pub fn relu_backward<T: Real>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        if v <= T::ZERO {
            *d = T::ZERO;
        }
    }
    dx
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::from_f64(super::sigmoid_f64(v.to_f64())))
}

/// Backward given the forward output y.
pub fn sigmoid_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        *d = *d * v * (T::ONE - v);
    }
    dx
}

pub fn softplus_t<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::from_f64(super::softplus(v.to_f64())))
}

pub fn softplus_backward<T: Real>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        *d = *d * T::from_f64(super::sigmoid_f64(v.to_f64()));
    }
    dx
}

/// Per-sample, per-channel scaling: x [B,C,H,W] * s [B,C,1,1].
pub fn channel_scale<T: Real>(x: &Tensor4<T>, s: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    check(s.shape() == (x.n, x.c, 1, 1), || {
        format!("channel_scale: scale shape {:?} for input {:?}", s.shape(), x.shape())
    })?;
    let plane = x.h * x.w;
    let mut y = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            let k = s.data[n * x.c + c];
            let base = (n * x.c + c) * plane;
            for v in &mut y.data[base..base + plane] {
                *v = *v * k;
            }
        }
    }
    Ok(y)
}

pub fn channel_scale_backward<T: Real>(
    x: &Tensor4<T>,
    s: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let plane = x.h * x.w;
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut ds = Tensor4::zeros(s.n, s.c, 1, 1);
    for n in 0..x.n {
        for c in 0..x.c {
            let k = s.data[n * x.c + c];
            let base = (n * x.c + c) * plane;
            let mut acc = T::ZERO;
            for i in base..base + plane {
                dx.data[i] = dy.data[i] * k;
                acc += dy.data[i] * x.data[i];
            }
            ds.data[n * x.c + c] = acc;
        }
    }
    (dx, ds)
}

/// (H, W) -> (1, 1) mean per channel.
pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let plane = x.h * x.w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut y = Tensor4::zeros(x.n, x.c, 1, 1);
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * plane;
            let mut s = T::ZERO;
            for &v in &x.data[base..base + plane] {
                s += v;
            }
            y.data[n * x.c + c] = s * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Real>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let plane = x.h * x.w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    for n in 0..x.n {
        for c in 0..x.c {
            let g = dy.data[n * x.c + c] * inv;
            let base = (n * x.c + c) * plane;
            for v in &mut dx.data[base..base + plane] {
                *v = g;
            }
        }
    }
    dx
}

/// Fully connected on channel vectors: x [B,Cin,1,1] * w [Cout,Cin,1,1] + b.
pub fn dense<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &Tensor4<T>,
) -> Result<Tensor4<T>, TensorError> {
    check(x.h == 1 && x.w == 1, || "dense input must be [B,C,1,1]".into())?;
    check(w.c == x.c && w.h == 1 && w.w == 1, || {
        format!("dense weight {:?} for input {:?}", w.shape(), x.shape())
    })?;
    check(b.shape() == (1, w.n, 1, 1), || "dense bias shape".into())?;
    let (bn, cin, cout) = (x.n, x.c, w.n);
    let mut y = Tensor4::zeros(bn, cout, 1, 1);
    unsafe {
        // y [B x Cout] = x [B x Cin] . w^T [Cin x Cout]
        T::gemm(
            bn,
            cin,
            cout,
            T::ONE,
            x.data.as_ptr(),
            cin as isize,
            1,
            w.data.as_ptr(),
            1,
            cin as isize,
            T::ZERO,
            y.data.as_mut_ptr(),
            cout as isize,
            1,
        );
    }
    for n in 0..bn {
        for c in 0..cout {
            y.data[n * cout + c] += b.data[c];
        }
    }
    Ok(y)
}

pub fn dense_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let (bn, cin, cout) = (x.n, x.c, w.n);
    let mut dx = Tensor4::zeros(bn, cin, 1, 1);
    let mut dw = Tensor4::zeros(cout, cin, 1, 1);
    let mut db = Tensor4::zeros(1, cout, 1, 1);
    unsafe {
        // dx [B x Cin] = dy [B x Cout] . w [Cout x Cin]
        T::gemm(
            bn,
            cout,
            cin,
            T::ONE,
            dy.data.as_ptr(),
            cout as isize,
            1,
            w.data.as_ptr(),
            cin as isize,
            1,
            T::ZERO,
            dx.data.as_mut_ptr(),
            cin as isize,
            1,
        );
        // dw [Cout x Cin] = dy^T [Cout x B] . x [B x Cin]
        T::gemm(
            cout,
            bn,
            cin,
            T::ONE,
            dy.data.as_ptr(),
            1,
            cout as isize,
            x.data.as_ptr(),
            cin as isize,
            1,
            T::ZERO,
            dw.data.as_mut_ptr(),
            cin as isize,
            1,
        );
    }
    for n in 0..bn {
        for c in 0..cout {
            db.data[c] += dy.data[n * cout + c];
        }
    }
    (dx, dw, db)
}

/// Mean squared error over the ROI pixels of every batch item.
pub fn mse_roi<T: Real>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    roi: RoiRect,
) -> Result<T, TensorError> {
    if !pred.same_shape(target) {
        return Err(TensorError::ShapeMismatch(format!(
            "mse_roi: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if roi.area() == 0 {
        return Err(TensorError::EmptyMask);
    }
    check(roi.x1 <= pred.w && roi.y1 <= pred.h, || "ROI outside image".into())?;
    let mut acc = T::ZERO;
    for n in 0..pred.n {
        for c in 0..pred.c {
            for y in roi.y0..roi.y1 {
                let base = ((n * pred.c + c) * pred.h + y) * pred.w;
                for x in roi.x0..roi.x1 {
                    let d = pred.data[base + x] - target.data[base + x];
                    acc += d * d;
                }
            }
        }
    }
    let count = pred.n * pred.c * roi.area();
    Ok(acc / T::from_f64(count as f64))
}

pub fn mse_roi_backward<T: Real>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    roi: RoiRect,
    dloss: T,
) -> Tensor4<T> {
    let count = pred.n * pred.c * roi.area();
    let scale = T::from_f64(2.0 / count as f64) * dloss;
    let mut dp = Tensor4::zeros(pred.n, pred.c, pred.h, pred.w);
    for n in 0..pred.n {
        for c in 0..pred.c {
            for y in roi.y0..roi.y1 {
                let base = ((n * pred.c + c) * pred.h + y) * pred.w;
                for x in roi.x0..roi.x1 {
                    dp.data[base + x] = scale * (pred.data[base + x] - target.data[base + x]);
                }
            }
        }
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(n: usize, c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor4<f64> {
        Tensor4::from_vec(n, c, h, w, (0..n * c * h * w).map(f).collect())
    }

    #[test]
    fn identity_kernel_conv() {
        let x = filled(1, 1, 5, 5, |i| i as f64);
        let w = Tensor4::from_vec(1, 1, 1, 1, vec![1.0]);
        let b = Tensor4::zeros(1, 1, 1, 1);
        let y = conv2d_forward(&x, &w, &b, ConvSpec { stride: 1, pad: 0 }).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn averaging_kernel_on_constant_input() {
        let x = filled(1, 1, 6, 6, |_| 3.0);
        let w = Tensor4::from_vec(1, 1, 3, 3, vec![1.0 / 9.0; 9]);
        let b = Tensor4::zeros(1, 1, 1, 1);
        let y = conv2d_forward(&x, &w, &b, ConvSpec { stride: 1, pad: 1 }).unwrap();
        // Interior of the same-padded output stays the constant.
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((y.at(0, 0, yy, xx) - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        use crate::rng::stream_rng;
        use rand::Rng;
        let mut r = stream_rng(5, 0);
        let mut rand_t = |n, c, h, w| {
            Tensor4::from_vec(
                n,
                c,
                h,
                w,
                (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
            )
        };
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 2), (2, 0)] {
            let spec = ConvSpec { stride, pad };
            let x = rand_t(2, 3, 5, 5);
            let w = rand_t(4, 3, 3, 3);
            let zero_f = Tensor4::zeros(1, 4, 1, 1);
            let zero_c = Tensor4::zeros(1, 3, 1, 1);
            let y = conv2d_forward(&x, &w, &zero_f, spec).unwrap();
            let u = rand_t(y.n, y.c, y.h, y.w);
            let ut = conv2d_transpose_forward(&u, &w, &zero_c, spec, (5, 5)).unwrap();
            let lhs: f64 = y.data.iter().zip(&u.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&ut.data).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "adjointness failed for stride {stride} pad {pad}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn stride_two_shapes_match_contract() {
        let x = Tensor4::<f64>::zeros(1, 4, 72, 72);
        let w9 = Tensor4::<f64>::zeros(32, 4, 9, 9);
        let b = Tensor4::zeros(1, 32, 1, 1);
        let y = conv2d_forward(&x, &w9, &b, ConvSpec { stride: 1, pad: 4 }).unwrap();
        assert_eq!((y.h, y.w), (72, 72));
        let w3 = Tensor4::<f64>::zeros(64, 32, 3, 3);
        let b2 = Tensor4::zeros(1, 64, 1, 1);
        let y2 = conv2d_forward(&y, &w3, &b2, ConvSpec { stride: 2, pad: 1 }).unwrap();
        assert_eq!((y2.h, y2.w), (36, 36));
    }

    #[test]
    fn batchnorm_standardises_per_channel() {
        let x = filled(4, 3, 6, 6, |i| (i % 17) as f64 * 0.37 - 1.0);
        let gamma = Tensor4::from_vec(1, 3, 1, 1, vec![1.0; 3]);
        let beta = Tensor4::zeros(1, 3, 1, 1);
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let (y, _) = batchnorm_train(&x, &gamma, &beta, &mut rm, &mut rv).unwrap();
        let plane = 36;
        for c in 0..3 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for n in 0..4 {
                let base = (n * 3 + c) * plane;
                for &v in &y.data[base..base + plane] {
                    s += v;
                    s2 += v * v;
                }
            }
            let m = (4 * plane) as f64;
            let mean = s / m;
            let var = s2 / m - mean * mean;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_zeroed() {
        let x = filled(2, 1, 3, 3, |_| 5.0);
        let gamma = Tensor4::from_vec(1, 1, 1, 1, vec![1.0]);
        let beta = Tensor4::zeros(1, 1, 1, 1);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (y, _) = batchnorm_train(&x, &gamma, &beta, &mut rm, &mut rv).unwrap();
        assert!(y.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn elementwise_basics() {
        let x = Tensor4::from_vec(1, 1, 1, 2, vec![-1.0, 2.0]);
        assert_eq!(relu(&x).data, vec![0.0, 2.0]);
        let s = sigmoid(&Tensor4::scalar(0.0));
        assert!((s.data[0] - 0.5).abs() < 1e-15);
        let g = global_avg_pool(&filled(1, 1, 4, 4, |_| 2.5));
        assert!((g.data[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn mse_roi_cases() {
        let roi = RoiRect { x0: 1, y0: 1, x1: 3, y1: 3 };
        let a = filled(2, 1, 4, 4, |i| i as f64);
        assert_eq!(mse_roi(&a, &a, roi).unwrap(), 0.0);
        let mut b = a.clone();
        for v in &mut b.data {
            *v += 0.5;
        }
        assert!((mse_roi(&a, &b, roi).unwrap() - 0.25).abs() < 1e-12);
        // error only outside the ROI
        let mut c = a.clone();
        c.data[0] += 100.0;
        assert_eq!(mse_roi(&a, &c, roi).unwrap(), 0.0);
        assert!(matches!(
            mse_roi(&a, &b, RoiRect { x0: 1, y0: 1, x1: 1, y1: 3 }),
            Err(TensorError::EmptyMask)
        ));
    }
}
