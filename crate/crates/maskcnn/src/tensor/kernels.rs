//! Raw numeric kernels behind the graph operations.
//!
//! These functions assume shapes were already validated by the caller (the
//! graph ops) and concentrate on doing the arithmetic in a fixed, documented
//! order so results are bit-reproducible run to run:
//!
//! * `conv2d` is im2col + a row-major `ikj` matmul. The inner loop runs over
//!   contiguous output columns (vectorizable without reassociating sums), and
//!   reductions over the batch happen sequentially in image order.
//! * `conv_transpose2d` uses direct scatter loops — it only ever runs on the
//!   few-channel decoder of the segmentation net, where im2col buys nothing.
//! * `maxpool2d` resolves ties to the first maximum in row-major window
//!   order, and the backward pass routes gradient to exactly that element.

use super::{Scalar, Shape4, Tensor};

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ik * bv;
            }
        }
    }
}

/// `a · b` into a fresh buffer.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// Transpose a row-major `rows×cols` buffer.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output spatial size of a convolution along one axis (truncating).
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold one image `(c, h, w)` into columns `(c·k·k, ho·wo)` for kernel `k`,
/// `stride`, `pad`. Out-of-bounds taps read zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    debug_assert_eq!(out.len(), c * k * k * ho * wo);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let seg = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        seg.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, slot) in seg.iter_mut().enumerate() {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        *slot = if iw < 0 || iw >= w as isize {
                            T::ZERO
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold columns back onto an image, accumulating overlaps (adjoint of
/// [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    debug_assert_eq!(cols.len(), c * k * k * ho * wo);
    debug_assert_eq!(out.len(), c * h * w);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst_row[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation forward pass. Returns the output and the im2col buffer
/// (one `(c·k·k) × (ho·wo)` block per image, concatenated), which the
/// backward pass reuses.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Vec<T>) {
    let xs = x.shape();
    let ws = w.shape();
    let (co, ckk) = (ws.n, ws.c * ws.h * ws.w);
    let k = ws.h;
    let ho = conv_out_len(xs.h, k, stride, pad);
    let wo = conv_out_len(xs.w, k, stride, pad);
    let howo = ho * wo;
    let mut out = Tensor::zeros(Shape4::new(xs.n, co, ho, wo));
    let mut cols = vec![T::ZERO; xs.n * ckk * howo];
    let img_len = xs.c * xs.h * xs.w;
    for i in 0..xs.n {
        let col_img = &mut cols[i * ckk * howo..(i + 1) * ckk * howo];
        im2col(
            &x.data()[i * img_len..(i + 1) * img_len],
            xs.c,
            xs.h,
            xs.w,
            k,
            stride,
            pad,
            col_img,
        );
        let out_img = &mut out.data_mut()[i * co * howo..(i + 1) * co * howo];
        matmul_acc(out_img, w.data(), col_img, co, ckk, howo);
        for c in 0..co {
            let bias = b.data()[c];
            for v in &mut out_img[c * howo..(c + 1) * howo] {
                *v += bias;
            }
        }
    }
    (out, cols)
}

/// Weight and bias gradients of [`conv2d_forward`], reusing the forward
/// pass's im2col buffer. (Split from the input gradient so graphs can skip
/// the expensive input half when the input is a data leaf.)
pub fn conv2d_grad_wb<T: Scalar>(
    go: &Tensor<T>,
    w_shape: Shape4,
    cols: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let (co, ckk) = (w_shape.n, w_shape.c * w_shape.h * w_shape.w);
    let os = go.shape();
    let howo = os.h * os.w;
    let mut gw = Tensor::zeros(w_shape);
    let mut gb = Tensor::zeros(Shape4::new(1, co, 1, 1));

    for c in 0..co {
        let mut s = T::ZERO;
        for i in 0..os.n {
            let seg = &go.data()[(i * co + c) * howo..(i * co + c + 1) * howo];
            for &v in seg {
                s += v;
            }
        }
        gb.data_mut()[c] = s;
    }

    for i in 0..os.n {
        let go_img = &go.data()[i * co * howo..(i + 1) * co * howo];
        let col_img = &cols[i * ckk * howo..(i + 1) * ckk * howo];
        // go_img (co×howo) · cols_imgᵀ (howo×ckk), accumulated image by image
        // in batch order so the reduction order is fixed.
        let col_t = transpose(col_img, ckk, howo);
        matmul_acc(gw.data_mut(), go_img, &col_t, co, howo, ckk);
    }
    (gw, gb)
}

/// Input gradient of [`conv2d_forward`].
pub fn conv2d_grad_x<T: Scalar>(
    go: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: Shape4,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let ws = w.shape();
    let (co, ckk) = (ws.n, ws.c * ws.h * ws.w);
    let k = ws.h;
    let os = go.shape();
    let howo = os.h * os.w;
    let mut gx = Tensor::zeros(x_shape);
    let w_t = transpose(w.data(), co, ckk); // (ckk × co)
    let img_len = x_shape.c * x_shape.h * x_shape.w;
    for i in 0..os.n {
        let go_img = &go.data()[i * co * howo..(i + 1) * co * howo];
        let gcols = matmul(&w_t, go_img, ckk, co, howo);
        col2im_acc(
            &gcols,
            x_shape.c,
            x_shape.h,
            x_shape.w,
            k,
            stride,
            pad,
            &mut gx.data_mut()[i * img_len..(i + 1) * img_len],
        );
    }
    gx
}

/// Transposed convolution (fractional-stride upsampling). Weight layout is
/// `(c_in, c_out, k, k)`; `pad` must satisfy `out = stride·in`, which the
/// graph enforces as `pad = (k - stride) / 2`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (ci, co, k) = (ws.n, ws.c, ws.h);
    let oh = stride * (xs.h - 1) + k - 2 * pad;
    let ow = stride * (xs.w - 1) + k - 2 * pad;
    let mut out = Tensor::zeros(Shape4::new(xs.n, co, oh, ow));
    for n in 0..xs.n {
        for c_in in 0..ci {
            for y in 0..xs.h {
                for xx in 0..xs.w {
                    let v = x.at(n, c_in, y, xx);
                    for c_out in 0..co {
                        for u in 0..k {
                            let oy = (y * stride + u) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for t in 0..k {
                                let ox = (xx * stride + t) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                *out.at_mut(n, c_out, oy as usize, ox as usize) +=
                                    v * w.at(c_in, c_out, u, t);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_transpose2d_forward`] w.r.t. input and weight.
pub fn conv_transpose2d_backward<T: Scalar>(
    go: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let ws = w.shape();
    let (ci, co, k) = (ws.n, ws.c, ws.h);
    let os = go.shape();
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    for n in 0..xs.n {
        for c_in in 0..ci {
            for y in 0..xs.h {
                for xx in 0..xs.w {
                    let xv = x.at(n, c_in, y, xx);
                    let mut acc = T::ZERO;
                    for c_out in 0..co {
                        for u in 0..k {
                            let oy = (y * stride + u) as isize - pad as isize;
                            if oy < 0 || oy >= os.h as isize {
                                continue;
                            }
                            for t in 0..k {
                                let ox = (xx * stride + t) as isize - pad as isize;
                                if ox < 0 || ox >= os.w as isize {
                                    continue;
                                }
                                let g = go.at(n, c_out, oy as usize, ox as usize);
                                acc += g * w.at(c_in, c_out, u, t);
                                *gw.at_mut(c_in, c_out, u, t) += xv * g;
                            }
                        }
                    }
                    *gx.at_mut(n, c_in, y, xx) += acc;
                }
            }
        }
    }
    (gx, gw)
}

/// Max-pool with truncation: trailing rows/columns that do not fill a window
/// are dropped. Returns the pooled tensor and, per output element, the flat
/// input index of the (first, in row-major window order) maximum.
pub fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> (Tensor<T>, Vec<u32>) {
    let xs = x.shape();
    let ho = (xs.h - k) / stride + 1;
    let wo = (xs.w - k) / stride + 1;
    let mut out = Tensor::zeros(Shape4::new(xs.n, xs.c, ho, wo));
    let mut argmax = vec![0u32; out.shape().count()];
    let mut oi = 0usize;
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = x.at(n, c, oh * stride, ow * stride);
                    let mut best_idx = xs.idx(n, c, oh * stride, ow * stride);
                    for u in 0..k {
                        for v in 0..k {
                            let val = x.at(n, c, oh * stride + u, ow * stride + v);
                            if val > best {
                                best = val;
                                best_idx = xs.idx(n, c, oh * stride + u, ow * stride + v);
                            }
                        }
                    }
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

/// Scatter pooled gradients back to the recorded argmax positions.
pub fn maxpool2d_backward<T: Scalar>(
    go: &Tensor<T>,
    x_shape: Shape4,
    argmax: &[u32],
) -> Tensor<T> {
    let mut gx = Tensor::zeros(x_shape);
    for (g, &idx) in go.data().iter().zip(argmax) {
        gx.data_mut()[idx as usize] += *g;
    }
    gx
}

/// Fully connected layer on row vectors: `x (n,d) · wᵀ (d,o) + b`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (x.shape().n, x.shape().c);
    let o = w.shape().n;
    let w_t = transpose(w.data(), o, d);
    let mut out = Tensor::from_vec(
        Shape4::new(n, o, 1, 1),
        matmul(x.data(), &w_t, n, d, o),
    )
    .expect("linear output buffer matches shape");
    for row in 0..n {
        for c in 0..o {
            out.data_mut()[row * o + c] += b.data()[c];
        }
    }
    out
}

/// Gradients of [`linear_forward`].
pub fn linear_backward<T: Scalar>(
    go: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (x.shape().n, x.shape().c);
    let o = w.shape().n;
    let gx = Tensor::from_vec(
        Shape4::new(n, d, 1, 1),
        matmul(go.data(), w.data(), n, o, d),
    )
    .expect("linear gx buffer matches shape");
    let go_t = transpose(go.data(), n, o);
    let gw = Tensor::from_vec(
        Shape4::new(o, d, 1, 1),
        matmul(&go_t, x.data(), o, n, d),
    )
    .expect("linear gw buffer matches shape");
    let mut gb = Tensor::zeros(Shape4::new(1, o, 1, 1));
    for row in 0..n {
        for c in 0..o {
            gb.data_mut()[c] += go.data()[row * o + c];
        }
    }
    (gx, gw, gb)
}

/// Row-wise softmax over `(n, k, 1, 1)` logits (inference helper; the
/// differentiable path lives in the graph's cross-entropy op).
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (logits.shape().n, logits.shape().c);
    let mut out = Tensor::zeros(logits.shape());
    for row in 0..n {
        let src = &logits.data()[row * k..(row + 1) * k];
        let mut m = src[0];
        for &v in src {
            m = m.maximum(v);
        }
        let dst = &mut out.data_mut()[row * k..(row + 1) * k];
        let mut sum = T::ZERO;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand::Rng;

    fn random_tensor(shape: Shape4, seed: u64) -> Tensor<f32> {
        let mut rng = seeded_rng(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    /// Independent six-nested-loop cross-correlation used as the oracle for
    /// the im2col implementation.
    fn naive_conv2d(
        x: &Tensor<f32>,
        w: &Tensor<f32>,
        b: Option<&Tensor<f32>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f32> {
        let xs = x.shape();
        let ws = w.shape();
        let k = ws.h;
        let ho = conv_out_len(xs.h, k, stride, pad);
        let wo = conv_out_len(xs.w, k, stride, pad);
        let mut out = Tensor::zeros(Shape4::new(xs.n, ws.n, ho, wo));
        for n in 0..xs.n {
            for co in 0..ws.n {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..xs.c {
                            for u in 0..k {
                                for v in 0..k {
                                    let ih = (oh * stride + u) as isize - pad as isize;
                                    let iw = (ow * stride + v) as isize - pad as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < xs.h
                                        && (iw as usize) < xs.w
                                    {
                                        acc += x.at(n, ci, ih as usize, iw as usize)
                                            * w.at(co, ci, u, v);
                                    }
                                }
                            }
                        }
                        *out.at_mut(n, co, oh, ow) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let (m, k, n) = (5, 7, 4);
        let mut rng = seeded_rng(11);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for t in 0..k {
                    acc += a[i * k + t] * b[t * n + j];
                }
                assert!((got[i * n + j] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transpose_roundtrips() {
        let a: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let t = transpose(&a, 3, 4);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 4.0); // (row 1, col 0) of the original
        assert_eq!(transpose(&t, 4, 3), a);
    }

    #[test]
    fn conv2d_matches_naive_loops_on_random_input() {
        let x = random_tensor(Shape4::new(2, 3, 5, 5), 1);
        let w = random_tensor(Shape4::new(4, 3, 3, 3), 2);
        let b = random_tensor(Shape4::new(1, 4, 1, 1), 3);
        let (got, _) = conv2d_forward(&x, &w, &b, 1, 1);
        let want = naive_conv2d(&x, &w, Some(&b), 1, 1);
        assert_eq!(got.shape(), Shape4::new(2, 4, 5, 5));
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn conv2d_shape_stride_two_no_pad() {
        let x = random_tensor(Shape4::new(1, 2, 5, 5), 4);
        let w = random_tensor(Shape4::new(3, 2, 3, 3), 5);
        let b = Tensor::zeros(Shape4::new(1, 3, 1, 1));
        let (got, _) = conv2d_forward(&x, &w, &b, 2, 0);
        assert_eq!(got.shape(), Shape4::new(1, 3, 2, 2));
        let want = naive_conv2d(&x, &w, None, 2, 0);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_padding_grows_output() {
        // 4×4 input, 3×3 kernel, stride 1, pad 2 → 6×6 output.
        let x = random_tensor(Shape4::new(1, 1, 4, 4), 6);
        let w = random_tensor(Shape4::new(1, 1, 3, 3), 7);
        let b = Tensor::zeros(Shape4::new(1, 1, 1, 1));
        let (got, _) = conv2d_forward(&x, &w, &b, 1, 2);
        assert_eq!(got.shape(), Shape4::new(1, 1, 6, 6));
        let want = naive_conv2d(&x, &w, None, 1, 2);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_backward_matches_naive_weight_gradient() {
        // d(loss)/dw where loss = sum(output): each weight's gradient is the
        // sum over output positions of its input tap — recompute by loops.
        let x = random_tensor(Shape4::new(2, 2, 4, 4), 8);
        let w = random_tensor(Shape4::new(3, 2, 3, 3), 9);
        let b = Tensor::zeros(Shape4::new(1, 3, 1, 1));
        let (out, cols) = conv2d_forward(&x, &w, &b, 1, 1);
        let go = Tensor::filled(out.shape(), 1.0f32);
        let (gw, gb) = conv2d_grad_wb(&go, w.shape(), &cols);
        let os = out.shape();
        for co in 0..3 {
            for ci in 0..2 {
                for u in 0..3 {
                    for v in 0..3 {
                        let mut acc = 0.0f32;
                        for n in 0..2 {
                            for oh in 0..os.h {
                                for ow in 0..os.w {
                                    let ih = (oh + u) as isize - 1;
                                    let iw = (ow + v) as isize - 1;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < 4 && (iw as usize) < 4
                                    {
                                        acc += x.at(n, ci, ih as usize, iw as usize);
                                    }
                                }
                            }
                        }
                        assert!((gw.at(co, ci, u, v) - acc).abs() < 1e-4);
                    }
                }
            }
        }
        // Bias gradient is the output count per channel.
        let per_channel = (2 * os.h * os.w) as f32;
        for co in 0..3 {
            assert!((gb.data()[co] - per_channel).abs() < 1e-4);
        }
    }

    /// Zero-stuffing oracle: a transposed convolution equals an ordinary
    /// convolution over the zero-stuffed input with the kernel flipped and
    /// its channel axes swapped.
    fn zero_stuff_oracle(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: usize) -> Tensor<f32> {
        let xs = x.shape();
        let ws = w.shape();
        let (ci, co, k) = (ws.n, ws.c, ws.h);
        let sh = stride * (xs.h - 1) + 1;
        let sw = stride * (xs.w - 1) + 1;
        let mut stuffed = Tensor::zeros(Shape4::new(xs.n, ci, sh, sw));
        for n in 0..xs.n {
            for c in 0..ci {
                for y in 0..xs.h {
                    for xx in 0..xs.w {
                        *stuffed.at_mut(n, c, y * stride, xx * stride) = x.at(n, c, y, xx);
                    }
                }
            }
        }
        let mut flipped = Tensor::zeros(Shape4::new(co, ci, k, k));
        for a in 0..ci {
            for b in 0..co {
                for u in 0..k {
                    for v in 0..k {
                        *flipped.at_mut(b, a, k - 1 - u, k - 1 - v) = w.at(a, b, u, v);
                    }
                }
            }
        }
        naive_conv2d(&stuffed, &flipped, None, 1, k - 1 - pad)
    }

    #[test]
    fn conv_transpose_matches_zero_stuffing_oracle() {
        let x = random_tensor(Shape4::new(2, 2, 3, 3), 10);
        let w = random_tensor(Shape4::new(2, 3, 4, 4), 11);
        let got = conv_transpose2d_forward(&x, &w, 2, 1);
        assert_eq!(got.shape(), Shape4::new(2, 3, 6, 6)); // 2·3 output
        let want = zero_stuff_oracle(&x, &w, 2, 1);
        assert_eq!(want.shape(), got.shape());
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn conv_transpose_stride_four_doubles_against_oracle() {
        let x = random_tensor(Shape4::new(1, 3, 5, 4), 12);
        let w = random_tensor(Shape4::new(3, 3, 8, 8), 13);
        let got = conv_transpose2d_forward(&x, &w, 4, 2);
        assert_eq!(got.shape(), Shape4::new(1, 3, 20, 16));
        let want = zero_stuff_oracle(&x, &w, 4, 2);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn maxpool_known_grid() {
        // 1..16 ascending, 2×2 stride 2 → maxima 6, 8, 14, 16.
        let x = Tensor::from_fn(Shape4::new(1, 1, 4, 4), |_, _, h, w| (h * 4 + w + 1) as f32);
        let (out, _) = maxpool2d_forward(&x, 2, 2);
        assert_eq!(out.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn maxpool_truncates_odd_edges() {
        // 5×5 input, 2×2 stride 2 → 2×2 output; row/col 4 never pooled.
        let x = Tensor::from_fn(Shape4::new(1, 1, 5, 5), |_, _, h, w| (h * 5 + w) as f32);
        let (out, _) = maxpool2d_forward(&x, 2, 2);
        assert_eq!(out.shape(), Shape4::new(1, 1, 2, 2));
        assert_eq!(out.data(), &[6.0, 8.0, 16.0, 18.0]);
    }

    #[test]
    fn maxpool_backward_routes_to_first_tie_in_row_major_order() {
        // All-equal window: gradient goes to the top-left element only.
        let x = Tensor::filled(Shape4::new(1, 1, 2, 2), 3.5f32);
        let (out, argmax) = maxpool2d_forward(&x, 2, 2);
        assert_eq!(out.data(), &[3.5]);
        let go = Tensor::scalar(1.0f32);
        let gx = maxpool2d_backward(&go, x.shape(), &argmax);
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_matches_naive_loops() {
        let x = random_tensor(Shape4::new(3, 5, 1, 1), 14);
        let w = random_tensor(Shape4::new(2, 5, 1, 1), 15);
        let b = random_tensor(Shape4::new(1, 2, 1, 1), 16);
        let got = linear_forward(&x, &w, &b);
        for n in 0..3 {
            for o in 0..2 {
                let mut acc = b.data()[o];
                for d in 0..5 {
                    acc += x.at(n, d, 0, 0) * w.at(o, d, 0, 0);
                }
                assert!((got.at(n, o, 0, 0) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_is_preserved() {
        let logits =
            Tensor::from_vec(Shape4::new(2, 3, 1, 1), vec![1.0f32, 2.0, 0.5, -1.0, -1.0, 3.0])
                .unwrap();
        let p = softmax_rows(&logits);
        for n in 0..2 {
            let row: Vec<f32> = (0..3).map(|c| p.at(n, c, 0, 0)).collect();
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(p.at(0, 1, 0, 0) > p.at(0, 0, 0, 0));
        assert!(p.at(1, 2, 0, 0) > 0.9);
    }
}
