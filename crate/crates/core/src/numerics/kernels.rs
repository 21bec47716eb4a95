//! Tape-free forward kernels and their adjoints over raw buffers.
//!
//! Image tensors are `[n, c, h, w]` row-major; dense inputs are `[n, features]`.

use super::Scalar;

/// Unfold one `[c, h, w]` image into `[c*9, h*w]` patch columns (3x3, zero padding 1).
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * 9 * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image gradient.
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d = *d + *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d = *d + *s),
                    }
                }
            }
        }
    }
}

/// 3x3 same-padding convolution (cross-correlation) plus bias.
///
/// When `keep_cols` is given, the unfolded patches of every sample are
/// written there for reuse in the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    bias: &[T],
    mut keep_cols: Option<&mut Vec<T>>,
) -> Vec<T> {
    let hw = h * w;
    let k = cin * 9;
    let mut out = vec![T::zero(); n * cout * hw];
    let mut scratch = Vec::new();
    if let Some(buf) = keep_cols.as_deref_mut() {
        buf.clear();
        buf.resize(n * k * hw, T::zero());
    } else {
        scratch.resize(k * hw, T::zero());
    }
    for s in 0..n {
        let cols: &mut [T] = match keep_cols.as_deref_mut() {
            Some(buf) => &mut buf[s * k * hw..(s + 1) * k * hw],
            None => &mut scratch,
        };
        im2col(&x[s * cin * hw..(s + 1) * cin * hw], cin, h, w, cols);
        let o = &mut out[s * cout * hw..(s + 1) * cout * hw];
        for (co, chunk) in o.chunks_exact_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        T::gemm(cout, k, hw, T::one(), weight, (k as isize, 1), cols, (hw as isize, 1), T::one(), o, (hw as isize, 1));
    }
    out
}

/// Gradients of [`conv2d_forward`] given the saved patch columns.
/// Returns `(dx, dweight, dbias)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = h * w;
    let k = cin * 9;
    let mut dw = vec![T::zero(); cout * k];
    let mut db = vec![T::zero(); cout];
    let mut dx = need_dx.then(|| vec![T::zero(); n * cin * hw]);
    let mut dcols = vec![T::zero(); if need_dx { k * hw } else { 0 }];
    for s in 0..n {
        let g = &dout[s * cout * hw..(s + 1) * cout * hw];
        let c = &cols[s * k * hw..(s + 1) * k * hw];
        for (co, chunk) in g.chunks_exact(hw).enumerate() {
            db[co] = db[co] + chunk.iter().fold(T::zero(), |a, b| a + *b);
        }
        // dW[cout, k] += g[cout, hw] * cols^T[hw, k]
        T::gemm(cout, hw, k, T::one(), g, (hw as isize, 1), c, (1, hw as isize), T::one(), &mut dw, (k as isize, 1));
        if let Some(dx) = dx.as_mut() {
            // dcols[k, hw] = W^T[k, cout] * g[cout, hw]
            T::gemm(k, cout, hw, T::one(), weight, (1, k as isize), g, (hw as isize, 1), T::zero(), &mut dcols, (hw as isize, 1));
            col2im(&dcols, cin, h, w, &mut dx[s * cin * hw..(s + 1) * cin * hw]);
        }
    }
    (dx, dw, db)
}

/// 2x2 stride-2 max pooling. Odd trailing rows/columns are padded with `-inf`.
/// Returns the pooled values and, per output, the flat input index of the winner
/// (first maximum in row-major order).
pub fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, x_) = (2 * oy + dy, 2 * ox + dx);
                        if y >= h || x_ >= w {
                            continue;
                        }
                        let i = base + y * w + x_;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// `y[n, m] = sum_k x[n, k] w[m, k] + b[m]`.
pub fn dense_forward<T: Scalar>(x: &[T], n: usize, inputs: usize, weight: &[T], outputs: usize, bias: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(n * outputs);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    T::gemm(n, inputs, outputs, T::one(), x, (inputs as isize, 1), weight, (1, inputs as isize), T::one(), &mut out, (outputs as isize, 1));
    out
}

pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}
