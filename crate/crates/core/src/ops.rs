//! Raw forward/backward kernels on flat `[C, H, W]` buffers.
//!
//! These carry no graph bookkeeping; [`crate::graph`] wires them into the tape.

use crate::tensor::Element;

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output `(H', W')`, or `None` when the geometry does not tile the input.
    pub fn output_size(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.stride == 0 || self.kernel_h > ph || self.kernel_w > pw {
            return None;
        }
        if (ph - self.kernel_h) % self.stride != 0 || (pw - self.kernel_w) % self.stride != 0 {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds the input into a `[C*kH*kW, H'*W']` patch matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeometry, oh: usize, ow: usize) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    let pad = g.padding as isize;
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch-matrix gradient back onto the input, accumulating overlaps.
fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, oh: usize, ow: usize, dx: &mut [T]) {
    let p = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass. Returns `[C_out, H'*W']`.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let (oh, ow) = g.output_size().expect("validated geometry");
    let p = oh * ow;
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.out_channels * p];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_exact_mut(p).enumerate() {
            chunk.fill(b[o]);
        }
    }
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        owned = im2col(x, g, oh, ow);
        &owned
    };
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    // SAFETY: kernel is [out, k], cols is [k, p], out is [out, p], all row-major.
    unsafe {
        T::gemm(
            g.out_channels,
            k,
            p,
            T::one(),
            kernel.as_ptr(),
            k as isize,
            1,
            cols.as_ptr(),
            p as isize,
            1,
            beta,
            out.as_mut_ptr(),
            p as isize,
            1,
        );
    }
    out
}

/// Gradients of a convolution; each output is produced only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (oh, ow) = g.output_size().expect("validated geometry");
    let p = oh * ow;
    let k = g.patch_len();
    let (want_x, want_k, want_b) = want;

    let kernel_grad = want_k.then(|| {
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            owned = im2col(x, g, oh, ow);
            &owned
        };
        let mut dk = vec![T::zero(); g.out_channels * k];
        // SAFETY: dy is [out, p]; cols^T is read as [p, k] through swapped strides.
        unsafe {
            T::gemm(
                g.out_channels,
                p,
                k,
                T::one(),
                dy.as_ptr(),
                p as isize,
                1,
                cols.as_ptr(),
                1,
                p as isize,
                T::zero(),
                dk.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        dk
    });

    let bias_grad = want_b.then(|| {
        dy.chunks_exact(p)
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
            .collect()
    });

    let input_grad = want_x.then(|| {
        let mut dcols = vec![T::zero(); k * p];
        // SAFETY: kernel^T is read as [k, out]; dy is [out, p].
        unsafe {
            T::gemm(
                k,
                g.out_channels,
                p,
                T::one(),
                kernel.as_ptr(),
                1,
                k as isize,
                dy.as_ptr(),
                p as isize,
                1,
                T::zero(),
                dcols.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.in_channels * g.height * g.width];
            col2im(&dcols, g, oh, ow, &mut dx);
            dx
        }
    });

    ConvGrads { input: input_grad, kernel: kernel_grad, bias: bias_grad }
}

/// 2x2/stride-2 max pooling. Returns the pooled values and, per output, the flat
/// input index that won (first in scan order on ties).
pub fn maxpool2_forward<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            let src = &x[(ci * h + oy / 2) * w..(ci * h + oy / 2 + 1) * w];
            let dst = &mut out[(ci * oh + oy) * ow..(ci * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Element>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = (ci * h + oy / 2) * w + ox / 2;
                dx[i] = dx[i] + dy[(ci * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

/// Numerically stable softmax over every element of `x`.
/// Exponentials and their sum are taken in 64-bit so 32-bit outputs still
/// sum to one within a few ulps.
pub fn softmax<T: Element>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max).to_f64().unwrap_or(0.0);
    let exps: Vec<f64> = x.iter().map(|&v| (v.to_f64().unwrap_or(f64::NAN) - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| T::from_f64_lossy(v / total)).collect()
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
