//! Slice-level kernels behind the tape primitives.
//!
//! Convolution lowers the whole batch to one im2col matrix of shape
//! `[C·kh·kw, N·H'·W']` so each of forward, weight-gradient and
//! input-gradient is a single GEMM with a fixed reduction order.

use super::element::{gemm, Element, MatRef};
use super::{shape_err, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self, TensorError> {
        let (&[batch, in_channels, height, width], &[out_channels, kc, kernel_h, kernel_w]) = (input, kernel) else {
            return Err(shape_err(
                "conv2d",
                format!("expected [N,C,H,W] input and [K,C,kh,kw] kernel, got {input:?} and {kernel:?}"),
            ));
        };
        if kc != in_channels {
            return Err(shape_err(
                "conv2d",
                format!("input has {in_channels} channels but kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let (Some(out_h), Some(out_w)) = (
            out_extent(height, kernel_h, stride, padding),
            out_extent(width, kernel_w, stride, padding),
        ) else {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {kernel_h}x{kernel_w} exceeds padded input {}x{}",
                    height + 2 * padding,
                    width + 2 * padding
                ),
            ));
        };
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn columns(&self) -> usize {
        self.batch * self.out_plane()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<E: Element>(g: &ConvGeometry, input: &[E]) -> Vec<E> {
    let plane = g.height * g.width;
    let out_plane = g.out_plane();
    let ncols = g.columns();
    let mut cols = vec![E::ZERO; g.patch_len() * ncols];
    if g.is_pointwise() {
        for c in 0..g.in_channels {
            let row = &mut cols[c * ncols..(c + 1) * ncols];
            for n in 0..g.batch {
                let src = &input[(n * g.in_channels + c) * plane..][..plane];
                row[n * out_plane..(n + 1) * out_plane].copy_from_slice(src);
            }
        }
        return cols;
    }
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let r = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for n in 0..g.batch {
                    let img = &input[(n * g.in_channels + c) * plane..][..plane];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ky) as isize - pad;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src = &img[ih as usize * g.width..][..g.width];
                        let dst = &mut row[n * out_plane + oh * g.out_w..][..g.out_w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kx) as isize - pad;
                            if iw >= 0 && iw < g.width as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<E: Element>(g: &ConvGeometry, cols: &[E], grad_input: &mut [E]) {
    let plane = g.height * g.width;
    let out_plane = g.out_plane();
    let ncols = g.columns();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let r = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for n in 0..g.batch {
                    let img = &mut grad_input[(n * g.in_channels + c) * plane..][..plane];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ky) as isize - pad;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let dst = &mut img[ih as usize * g.width..][..g.width];
                        let src = &row[n * out_plane + oh * g.out_w..][..g.out_w];
                        for (ow, &s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kx) as isize - pad;
                            if iw >= 0 && iw < g.width as isize {
                                dst[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<E: Element>(g: &ConvGeometry, input: &[E], kernel: &[E], bias: Option<&[E]>) -> Vec<E> {
    let cols = im2col(g, input);
    let ncols = g.columns();
    let mut prod = vec![E::ZERO; g.out_channels * ncols];
    gemm(
        g.out_channels,
        g.patch_len(),
        ncols,
        MatRef::rows(kernel, g.patch_len()),
        MatRef::rows(&cols, ncols),
        E::ZERO,
        &mut prod,
    );
    let out_plane = g.out_plane();
    let mut out = vec![E::ZERO; g.batch * g.out_channels * out_plane];
    for k in 0..g.out_channels {
        let b = bias.map_or(E::ZERO, |b| b[k]);
        let src_row = &prod[k * ncols..(k + 1) * ncols];
        for n in 0..g.batch {
            let dst = &mut out[(n * g.out_channels + k) * out_plane..][..out_plane];
            for (d, &s) in dst.iter_mut().zip(&src_row[n * out_plane..(n + 1) * out_plane]) {
                *d = s + b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<E> {
    pub input: Option<Vec<E>>,
    pub kernel: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

pub(crate) fn conv2d_backward<E: Element>(
    g: &ConvGeometry,
    input: &[E],
    kernel: &[E],
    grad_out: &[E],
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> ConvGrads<E> {
    let ncols = g.columns();
    let out_plane = g.out_plane();
    // [K, N·P] view of the upstream gradient
    let mut dmat = vec![E::ZERO; g.out_channels * ncols];
    for n in 0..g.batch {
        for k in 0..g.out_channels {
            let src = &grad_out[(n * g.out_channels + k) * out_plane..][..out_plane];
            dmat[k * ncols + n * out_plane..][..out_plane].copy_from_slice(src);
        }
    }

    let bias = need_bias.then(|| {
        (0..g.out_channels)
            .map(|k| dmat[k * ncols..(k + 1) * ncols].iter().copied().sum())
            .collect()
    });

    let kernel_grad = need_kernel.then(|| {
        let cols = im2col(g, input);
        let mut dk = vec![E::ZERO; g.out_channels * g.patch_len()];
        gemm(
            g.out_channels,
            ncols,
            g.patch_len(),
            MatRef::rows(&dmat, ncols),
            MatRef::transposed(&cols, ncols),
            E::ZERO,
            &mut dk,
        );
        dk
    });

    let input_grad = need_input.then(|| {
        let mut dcols = vec![E::ZERO; g.patch_len() * ncols];
        gemm(
            g.patch_len(),
            g.out_channels,
            ncols,
            MatRef::transposed(kernel, g.patch_len()),
            MatRef::rows(&dmat, ncols),
            E::ZERO,
            &mut dcols,
        );
        let mut dx = vec![E::ZERO; g.batch * g.in_channels * g.height * g.width];
        col2im(g, &dcols, &mut dx);
        dx
    });

    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(
        op: &'static str,
        input: &[usize],
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let &[batch, channels, height, width] = input else {
            return Err(shape_err(op, format!("expected [N,C,H,W], got {input:?}")));
        };
        if window == 0 || stride == 0 {
            return Err(shape_err(op, "window and stride must be positive"));
        }
        if padding >= window {
            return Err(shape_err(op, "padding must be smaller than the window"));
        }
        let (Some(out_h), Some(out_w)) = (
            out_extent(height, window, stride, padding),
            out_extent(width, window, stride, padding),
        ) else {
            return Err(shape_err(
                op,
                format!("window {window} exceeds padded input {height}x{width} (padding {padding})"),
            ));
        };
        Ok(Self {
            batch,
            channels,
            height,
            width,
            window,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.out_h, self.out_w]
    }

    /// Valid (unpadded) input row and column ranges of output cell `(oh, ow)`.
    fn window_bounds(&self, oh: usize, ow: usize) -> (usize, usize, usize, usize) {
        let y0 = (oh * self.stride) as isize - self.padding as isize;
        let x0 = (ow * self.stride) as isize - self.padding as isize;
        let y1 = (y0 + self.window as isize).min(self.height as isize);
        let x1 = (x0 + self.window as isize).min(self.width as isize);
        (y0.max(0) as usize, y1 as usize, x0.max(0) as usize, x1 as usize)
    }
}

/// Returns pooled values and, per output cell, the flat input index of the
/// first row-major maximum.
pub(crate) fn max_pool_forward<E: Element>(g: &PoolGeometry, input: &[E]) -> (Vec<E>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut out = Vec::with_capacity(planes * out_plane);
    let mut argmax = Vec::with_capacity(planes * out_plane);
    for p in 0..planes {
        let base = p * in_plane;
        let img = &input[base..base + in_plane];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let (y0, y1, x0, x1) = g.window_bounds(oh, ow);
                let mut best = E::NEG_INFINITY;
                let mut best_idx = y0 * g.width + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = img[y * g.width + x];
                        if v > best {
                            best = v;
                            best_idx = y * g.width + x;
                        }
                    }
                }
                out.push(best);
                argmax.push(base + best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool_backward<E: Element>(input_len: usize, argmax: &[usize], grad_out: &[E]) -> Vec<E> {
    let mut dx = vec![E::ZERO; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] += g;
    }
    dx
}

/// Mean over the valid cells of each window; padded cells are excluded.
pub(crate) fn avg_pool_forward<E: Element>(g: &PoolGeometry, input: &[E]) -> Vec<E> {
    let planes = g.batch * g.channels;
    let in_plane = g.height * g.width;
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    for p in 0..planes {
        let img = &input[p * in_plane..(p + 1) * in_plane];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let (y0, y1, x0, x1) = g.window_bounds(oh, ow);
                let mut acc = E::ZERO;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img[y * g.width + x];
                    }
                }
                out.push(acc / E::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<E: Element>(g: &PoolGeometry, grad_out: &[E]) -> Vec<E> {
    let planes = g.batch * g.channels;
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut dx = vec![E::ZERO; planes * in_plane];
    for p in 0..planes {
        let img = &mut dx[p * in_plane..(p + 1) * in_plane];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let (y0, y1, x0, x1) = g.window_bounds(oh, ow);
                let share = grad_out[p * out_plane + oh * g.out_w + ow] / E::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for x in x0..x1 {
                        img[y * g.width + x] += share;
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

    fn naive_conv(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let ih = (oh * g.stride + ky) as isize - g.padding as isize;
                                    let iw = (ow * g.stride + kx) as isize - g.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= g.height as isize || iw >= g.width as isize {
                                        continue;
                                    }
                                    acc += x
                                        [((n * g.in_channels + c) * g.height + ih as usize) * g.width + iw as usize]
                                        * k[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                                }
                            }
                        }
                        out[((n * g.out_channels + o) * g.out_h + oh) * g.out_w + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        for &(stride, padding, kh) in &[(1, 0, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1), (1, 0, 1)] {
            let g = ConvGeometry::new(&[2, 3, 7, 6], &[4, 3, kh, kh], stride, padding).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let k: Vec<f64> = (0..4 * 3 * kh * kh)
                .map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.5)
                .collect();
            let fast = conv2d_forward(&g, &x, &k, None);
            assert_eq!(fast, naive_conv(&g, &x, &k), "stride {stride} pad {padding} k {kh}");
        }
    }

    #[test]
    fn pool_geometry_rejects_oversized_window() {
        assert!(PoolGeometry::new("max_pool2d", &[1, 1, 2, 2], 3, 1, 0).is_err());
        let g = PoolGeometry::new("max_pool2d", &[1, 1, 5, 5], 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 3));
    }
}
