//! Raw convolution and pooling kernels over NCHW slices.
//!
//! These are the forward and adjoint loops used by [`super::Graph`]. They
//! take shapes explicitly and perform no validation beyond debug asserts;
//! the graph layer checks shapes before calling in.

use std::sync::atomic::{AtomicBool, Ordering};

/// Geometry of a 2-D convolution `[n, cin, h, w] * [cout, cin, kh, kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height(), self.out_width()]
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }
}

/// `c = a * b + beta * c` for row-major `a: [m, k]` (or its transpose when
/// `trans_a`), `b: [k, n]` (or transposed when `trans_b`), `c: [m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Output columns `lo..hi` whose input column `ox*stride + kx - padding`
/// lies inside the image.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let ow = g.out_width();
    let lo = g.padding.saturating_sub(kx).div_ceil(g.stride).min(ow);
    let hi = (g.width + g.padding).saturating_sub(kx).div_ceil(g.stride).min(ow);
    (lo, hi.max(lo))
}

/// Unfolds one image `[cin, h, w]` into columns `[cin*kh*kw, oh*ow]`.
fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let p = oh * ow;
    for ci in 0..g.in_channels {
        let plane = &image[ci * h * w..][..h * w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = &mut cols[((ci * g.kernel_h + ky) * g.kernel_w + kx) * p..][..p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..][..ow];
                    let Some(iy) = g.input_row(oy, ky) else {
                        dst.fill(0.0);
                        continue;
                    };
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let src = &plane[iy * w..][..w];
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[lo + kx - g.padding..hi + kx - g.padding]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[cin, h, w]`.
fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let p = oh * ow;
    for ci in 0..g.in_channels {
        let plane = &mut image[ci * h * w..][..h * w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = &cols[((ci * g.kernel_h + ky) * g.kernel_w + kx) * p..][..p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..oh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src = &row[oy * ow..][..ow];
                    let dst = &mut plane[iy * w..][..w];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.padding] += src[ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass. `bias` may be empty for no bias.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = g.out_height() * g.out_width();
    let k = g.in_channels * g.kernel_h * g.kernel_w;
    let in_size = g.in_channels * g.height * g.width;
    let mut out = vec![0.0; g.batch * g.out_channels * p];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.batch {
        im2col(g, &input[n * in_size..][..in_size], &mut cols);
        let out_n = &mut out[n * g.out_channels * p..][..g.out_channels * p];
        if !bias.is_empty() {
            for (co, plane) in out_n.chunks_mut(p).enumerate() {
                plane.fill(bias[co]);
            }
        }
        gemm(g.out_channels, k, p, weight, false, &cols, false, 1.0, out_n);
    }
    out
}

static CONV_BACKWARD_FAULT: AtomicBool = AtomicBool::new(false);

/// Scales the input gradient of [`conv2d_backward`] by 1.01 while set.
/// Process-wide; meant for exercising the gradient checker's failure path.
#[doc(hidden)]
pub fn set_conv_backward_fault(on: bool) {
    CONV_BACKWARD_FAULT.store(on, Ordering::Relaxed);
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.out_height() * g.out_width();
    let k = g.in_channels * g.kernel_h * g.kernel_w;
    let in_size = g.in_channels * g.height * g.width;
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_w = vec![0.0; weight.len()];
    let mut grad_b = vec![0.0; g.out_channels];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.batch {
        let go = &grad_out[n * g.out_channels * p..][..g.out_channels * p];
        for (co, plane) in go.chunks(p).enumerate() {
            grad_b[co] += plane.iter().sum::<f64>();
        }
        im2col(g, &input[n * in_size..][..in_size], &mut cols);
        // dW += dY [cout, p] * cols^T [p, k]
        gemm(g.out_channels, p, k, go, false, &cols, true, 1.0, &mut grad_w);
        // dcols = W^T [k, cout] * dY [cout, p]
        gemm(k, g.out_channels, p, weight, true, go, false, 0.0, &mut cols);
        col2im(g, &cols, &mut grad_in[n * in_size..][..in_size]);
    }
    if CONV_BACKWARD_FAULT.load(Ordering::Relaxed) {
        grad_in.iter_mut().for_each(|v| *v *= 1.01);
    }
    (grad_in, grad_w, grad_b)
}

/// Geometry of a transposed convolution `[n, cin, h, w]` with weight
/// `[cin, cout, kh, kw]` (the same layout as the forward convolution it is
/// the adjoint of) and no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
}

impl ConvTransposeGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - 1) * self.stride + self.kernel_h
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) * self.stride + self.kernel_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height(), self.out_width()]
    }
}

pub fn conv_transpose2d_forward(
    g: &ConvTransposeGeometry,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let hw = g.height * g.width;
    let kk = g.out_channels * g.kernel_h * g.kernel_w;
    let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
    let mut cols = vec![0.0; kk * hw];
    for n in 0..g.batch {
        // cols [cout*kh*kw, h*w] = W^T [cout*kh*kw, cin] * X [cin, h*w]
        gemm(kk, g.in_channels, hw, weight, true, &input[n * g.in_channels * hw..], false, 0.0, &mut cols);
        let out_n = &mut out[n * g.out_channels * oh * ow..][..g.out_channels * oh * ow];
        for (co, plane) in out_n.chunks_mut(oh * ow).enumerate() {
            if !bias.is_empty() {
                plane.fill(bias[co]);
            }
        }
        scatter_transpose(g, &cols, out_n);
    }
    out
}

/// Adds `cols[(co, ky, kx), (iy, ix)]` into `out[co, iy*s + ky, ix*s + kx]`.
fn scatter_transpose(g: &ConvTransposeGeometry, cols: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w, s) = (g.height, g.width, g.stride);
    for co in 0..g.out_channels {
        let plane = &mut out[co * oh * ow..][..oh * ow];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = &cols[((co * g.kernel_h + ky) * g.kernel_w + kx) * h * w..][..h * w];
                for iy in 0..h {
                    let dst = &mut plane[(iy * s + ky) * ow + kx..];
                    for ix in 0..w {
                        dst[ix * s] += row[iy * w + ix];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`scatter_transpose`].
fn gather_transpose(g: &ConvTransposeGeometry, out: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w, s) = (g.height, g.width, g.stride);
    for co in 0..g.out_channels {
        let plane = &out[co * oh * ow..][..oh * ow];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = &mut cols[((co * g.kernel_h + ky) * g.kernel_w + kx) * h * w..][..h * w];
                for iy in 0..h {
                    let src = &plane[(iy * s + ky) * ow + kx..];
                    for ix in 0..w {
                        row[iy * w + ix] = src[ix * s];
                    }
                }
            }
        }
    }
}

pub fn conv_transpose2d_backward(
    g: &ConvTransposeGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let hw = g.height * g.width;
    let kk = g.out_channels * g.kernel_h * g.kernel_w;
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_w = vec![0.0; weight.len()];
    let mut grad_b = vec![0.0; g.out_channels];
    let mut cols = vec![0.0; kk * hw];
    for n in 0..g.batch {
        let go = &grad_out[n * g.out_channels * oh * ow..][..g.out_channels * oh * ow];
        for (co, plane) in go.chunks(oh * ow).enumerate() {
            grad_b[co] += plane.iter().sum::<f64>();
        }
        gather_transpose(g, go, &mut cols);
        let x = &input[n * g.in_channels * hw..][..g.in_channels * hw];
        // dX [cin, hw] = W [cin, kk] * dcols [kk, hw]
        gemm(g.in_channels, kk, hw, weight, false, &cols, false, 0.0, &mut grad_in[n * g.in_channels * hw..]);
        // dW [cin, kk] += X [cin, hw] * dcols^T [hw, kk]
        gemm(g.in_channels, hw, kk, x, false, &cols, true, 1.0, &mut grad_w);
    }
    (grad_in, grad_w, grad_b)
}

/// Non-overlapping `k x k` max pooling. Returns pooled values and the flat
/// input index of each window's maximum (first in row-major order on ties).
pub fn maxpool2d_forward(shape: [usize; 4], input: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * k * w + ox * k;
                let mut best = input[best_idx];
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}
