//! Raw forward/backward kernels behind the tape ops.
//!
//! Layout conventions: activations CHW, conv weights OIHW, biases O. Every
//! kernel partitions work over disjoint output channels (or input channels
//! for `conv2d_backward_input`) and reduces sequentially inside a partition,
//! which keeps results independent of the execution strategy.

use crate::exec;
use crate::tensor::{Scalar, Tensor};

/// `(H + 2*pad - k) / stride + 1`, the usual convolution output extent.
pub fn conv_out_extent(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    debug_assert_eq!(w.shape(), &[co, ci, k, k]);
    debug_assert_eq!(b.shape(), &[co]);
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(wd, k, stride, pad);

    let mut out = Tensor::zeros(&[co, ho, wo]);
    let wdat = w.data();
    let bdat = b.data();
    exec::for_each_chunk(out.data_mut(), ho * wo, |o, out_c| {
        out_c.fill(bdat[o]);
        for i in 0..ci {
            let xc = x.channel(i);
            let wbase = (o * ci + i) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[wbase + ky * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    accumulate_shifted_rows(out_c, xc, wv, h, wd, ho, wo, stride, pad, ky, kx);
                }
            }
        }
    });
    out
}

/// out[y,x] += wv * in[y*stride - pad + ky, x*stride - pad + kx] over the
/// valid index range. The stride-1 inner loop runs on contiguous slices.
#[allow(clippy::too_many_arguments)]
fn accumulate_shifted_rows<T: Scalar>(
    out_c: &mut [T],
    xc: &[T],
    wv: T,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    // y_in = y*stride + ky - pad must land in [0, h)
    let (y0, y1) = valid_out_range(ho, h, stride, pad, ky);
    let (x0, x1) = valid_out_range(wo, w, stride, pad, kx);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let yi = y * stride + ky - pad;
        let row_in = &xc[yi * w..(yi + 1) * w];
        let row_out = &mut out_c[y * wo..(y + 1) * wo];
        if stride == 1 {
            let xi0 = x0 + kx - pad;
            for (ov, iv) in row_out[x0..x1].iter_mut().zip(&row_in[xi0..xi0 + (x1 - x0)]) {
                *ov = *ov + wv * *iv;
            }
        } else {
            for x in x0..x1 {
                row_out[x] = row_out[x] + wv * row_in[x * stride + kx - pad];
            }
        }
    }
}

/// Output indices whose sampled input index is in bounds for one kernel tap.
fn valid_out_range(out_len: usize, in_len: usize, stride: usize, pad: usize, kofs: usize) -> (usize, usize) {
    // in = out*stride + kofs - pad in [0, in_len)
    let lo = if kofs >= pad { 0 } else { (pad - kofs).div_ceil(stride) };
    let mut hi = out_len;
    while hi > lo && (hi - 1) * stride + kofs < pad {
        hi -= 1;
    }
    // upper bound: (out-1)*stride + kofs - pad <= in_len - 1
    let max_in = in_len + pad;
    while hi > lo && (hi - 1) * stride + kofs >= max_in {
        hi -= 1;
    }
    (lo.min(out_len), hi)
}

pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (ci, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (dy.shape()[1], dy.shape()[2]);
    let wdat = w.data();

    let mut dx = Tensor::zeros(x_shape);
    exec::for_each_chunk(dx.data_mut(), h * wd, |i, dx_c| {
        for o in 0..co {
            let dyc = dy.channel(o);
            let wbase = (o * ci + i) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[wbase + ky * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (y0, y1) = valid_out_range(ho, h, stride, pad, ky);
                    let (x0, x1) = valid_out_range(wo, wd, stride, pad, kx);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let yi = y * stride + ky - pad;
                        let row_dy = &dyc[y * wo..(y + 1) * wo];
                        let row_dx = &mut dx_c[yi * wd..(yi + 1) * wd];
                        if stride == 1 {
                            let xi0 = x0 + kx - pad;
                            for (dv, gv) in row_dx[xi0..xi0 + (x1 - x0)].iter_mut().zip(&row_dy[x0..x1]) {
                                *dv = *dv + wv * *gv;
                            }
                        } else {
                            for x in x0..x1 {
                                let xi = x * stride + kx - pad;
                                row_dx[xi] = row_dx[xi] + wv * row_dy[x];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn conv2d_backward_params<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (co, ci, k) = (w_shape[0], w_shape[1], w_shape[2]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (ho, wo) = (dy.shape()[1], dy.shape()[2]);

    let mut dw = Tensor::zeros(w_shape);
    exec::for_each_chunk(dw.data_mut(), ci * k * k, |o, dw_o| {
        let dyc = dy.channel(o);
        for i in 0..ci {
            let xc = x.channel(i);
            for ky in 0..k {
                for kx in 0..k {
                    let (y0, y1) = valid_out_range(ho, h, stride, pad, ky);
                    let (x0, x1) = valid_out_range(wo, wd, stride, pad, kx);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let yi = y * stride + ky - pad;
                        let row_dy = &dyc[y * wo..(y + 1) * wo];
                        let row_x = &xc[yi * wd..(yi + 1) * wd];
                        if stride == 1 && x1 > x0 {
                            let xi0 = x0 + kx - pad;
                            for (gv, xv) in row_dy[x0..x1].iter().zip(&row_x[xi0..xi0 + (x1 - x0)]) {
                                acc = acc + *gv * *xv;
                            }
                        } else {
                            for xo in x0..x1 {
                                acc = acc + row_dy[xo] * row_x[xo * stride + kx - pad];
                            }
                        }
                    }
                    dw_o[(i * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let mut db = Tensor::zeros(&[co]);
    for o in 0..co {
        let mut acc = T::zero();
        for v in dy.channel(o) {
            acc = acc + *v;
        }
        db.data_mut()[o] = acc;
    }
    (dw, db)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Uses the forward *output* as the mask: gradient passes where y > 0.
pub fn relu_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data)
}

/// 2×2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the flat HW index of the winner inside its input channel.
/// Ties resolve to the first element in row-major scan order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 requires even extents, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let mut arg = vec![0u32; c * ho * wo];

    for ch in 0..c {
        let xc = x.channel(ch);
        let base = ch * ho * wo;
        for y in 0..ho {
            for xo in 0..wo {
                let mut best_idx = (2 * y) * w + 2 * xo;
                let mut best = xc[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * w + 2 * xo + dx;
                    if xc[idx] > best {
                        best = xc[idx];
                        best_idx = idx;
                    }
                }
                out.data_mut()[base + y * wo + xo] = best;
                arg[base + y * wo + xo] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[u32], x_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (x_shape[1], x_shape[2]);
    let (ho, wo) = (dy.shape()[1], dy.shape()[2]);
    let mut dx = Tensor::zeros(x_shape);
    for c in 0..x_shape[0] {
        let base = c * ho * wo;
        let dyc = dy.channel(c);
        let dxc = &mut dx.data_mut()[c * h * w..(c + 1) * h * w];
        for (i, &g) in dyc.iter().enumerate() {
            let idx = argmax[base + i] as usize;
            dxc[idx] = dxc[idx] + g;
        }
    }
    dx
}

/// Sub-pixel rearrangement: `[4C, H, W] -> [C, 2H, 2W]` where output pixel
/// `(2y+dy, 2x+dx)` of channel `c` reads input channel `c*4 + dy*2 + dx` at
/// `(y, x)`. A pure index permutation.
pub fn pixel_shuffle2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c4, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(c4 % 4, 0, "pixel shuffle needs a multiple of 4 channels");
    let c = c4 / 4;
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let od = out.data_mut();
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let ic = ch * 4 + dy * 2 + dx;
                let xc = &x.data()[ic * h * w..(ic + 1) * h * w];
                for y in 0..h {
                    let orow = (ch * 2 * h + 2 * y + dy) * 2 * w;
                    for x_ in 0..w {
                        od[orow + 2 * x_ + dx] = xc[y * w + x_];
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[c * 4, h, w]);
    let dd = dx.data_mut();
    for ch in 0..c {
        let dyc = dy.channel(ch);
        for dyofs in 0..2 {
            for dxofs in 0..2 {
                let ic = ch * 4 + dyofs * 2 + dxofs;
                for y in 0..h {
                    let irow = ic * h * w + y * w;
                    let orow = (2 * y + dyofs) * w2;
                    for x_ in 0..w {
                        dd[irow + x_] = dyc[orow + 2 * x_ + dxofs];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor_from(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, vals.to_vec())
    }

    /// Central finite differences of `f` with respect to each element of `x`.
    fn finite_diff(
        x: &Tensor<f64>,
        f: &dyn Fn(&Tensor<f64>) -> f64,
        eps: f64,
    ) -> Vec<f64> {
        let mut grads = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            grads.push((f(&plus) - f(&minus)) / (2.0 * eps));
        }
        grads
    }

    fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
        // xorshift; plenty for test data
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| next()).collect())
    }

    #[test]
    fn conv_forward_known_values() {
        // 1x3x3 input, single 3x3 kernel of ones, pad 1: each output is the
        // sum of the 3x3 neighborhood (zero padded).
        let x = tensor_from(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 1);
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 45.0); // center: sum of all
        assert_eq!(y.data()[0], 1. + 2. + 4. + 5.); // corner
    }

    #[test]
    fn conv_stride2_center_tap_samples_even_grid() {
        let x = seeded(&[1, 8, 8], 3);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 2.0; // center tap
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[1, 4, 4]);
        for yy in 0..4 {
            for xx in 0..4 {
                assert_eq!(y.data()[yy * 4 + xx], 2.0 * x.data()[(2 * yy) * 8 + 2 * xx]);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let x = seeded(&[2, 6, 6], 10 + stride as u64);
            let w = seeded(&[3, 2, 3, 3], 20 + stride as u64);
            let b = seeded(&[3], 30);
            let loss = |y: &Tensor<f64>| y.data().iter().enumerate().map(|(i, v)| v * (i as f64 * 0.37 - 1.0)).sum::<f64>();
            // dy corresponding to the linear loss above
            let y0 = conv2d_forward(&x, &w, &b, stride, pad);
            let dy = Tensor::from_vec(
                y0.shape(),
                (0..y0.len()).map(|i| i as f64 * 0.37 - 1.0).collect(),
            );

            let dx = conv2d_backward_input(&dy, &w, x.shape(), stride, pad);
            let (dw, db) = conv2d_backward_params(&dy, &x, w.shape(), stride, pad);

            let fx = finite_diff(&x, &|xt| loss(&conv2d_forward(xt, &w, &b, stride, pad)), 1e-5);
            let fw = finite_diff(&w, &|wt| loss(&conv2d_forward(&x, wt, &b, stride, pad)), 1e-5);
            let fb = finite_diff(&b, &|bt| loss(&conv2d_forward(&x, &w, bt, stride, pad)), 1e-5);
            for (a, e) in dx.data().iter().zip(&fx) {
                assert!((a - e).abs() < 1e-7, "dx {a} vs {e} (stride {stride})");
            }
            for (a, e) in dw.data().iter().zip(&fw) {
                assert!((a - e).abs() < 1e-7, "dw {a} vs {e} (stride {stride})");
            }
            for (a, e) in db.data().iter().zip(&fb) {
                assert!((a - e).abs() < 1e-7, "db {a} vs {e} (stride {stride})");
            }
        }
    }

    #[test]
    fn maxpool_forward_and_routing() {
        let x = tensor_from(&[1, 4, 4], &[
            1., 2., 0., 0., //
            3., 4., 0., 5., //
            9., 0., 1., 1., //
            0., 0., 1., 1.,
        ]);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data(), &[4., 5., 9., 1.]);
        // tie in the lower-right window resolves to the first scanned
        assert_eq!(arg[3], (2 * 4 + 2) as u32);
        let dy = tensor_from(&[1, 2, 2], &[1., 2., 3., 4.]);
        let dx = maxpool2_backward(&dy, &arg, x.shape());
        assert_eq!(dx.data()[1 * 4 + 1], 1.0);
        assert_eq!(dx.data()[1 * 4 + 3], 2.0);
        assert_eq!(dx.data()[2 * 4 + 0], 3.0);
        assert_eq!(dx.data()[2 * 4 + 2], 4.0);
        assert_eq!(dx.data().iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn pixel_shuffle_roundtrip_is_identity() {
        let x = seeded(&[8, 3, 5], 7);
        let y = pixel_shuffle2_forward(&x);
        assert_eq!(y.shape(), &[2, 6, 10]);
        let back = pixel_shuffle2_backward(&y);
        assert_eq!(back.data(), x.data());
    }
}
