//! Raw forward/backward kernels on flat row-major buffers.
//!
//! These are the numeric bodies behind the tape primitives; the tape owns
//! shape checking and gradient routing.

use crate::real::{matmul_into, Real};

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn oh(&self) -> usize {
        conv_out_extent(self.h, self.kh, self.stride, self.pad)
    }

    pub fn ow(&self) -> usize {
        conv_out_extent(self.w, self.kw, self.stride, self.pad)
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.oh(), g.ow());
    let ohw = oh * ow;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.oh(), g.ow());
    let ohw = oh * ow;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `out[n,f] = Σ_c kernel[f,c] ⋆ x[n,c] + bias[f]` with
/// zero padding. Returns a `[N,F,H',W']` buffer.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    x_shape: [usize; 4],
    kernel: &[T],
    k_shape: [usize; 4],
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let g = ConvGeom {
        n: x_shape[0],
        c: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        f: k_shape[0],
        kh: k_shape[2],
        kw: k_shape[3],
        stride,
        pad,
    };
    conv_forward(&g, x, kernel, bias)
}

pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let ohw = g.oh() * g.ow();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.f * ohw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * ohw]
    };
    for ni in 0..g.n {
        let xn = &x[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w];
        let on = &mut out[ni * g.f * ohw..(ni + 1) * g.f * ohw];
        if let Some(b) = bias {
            for (fi, chunk) in on.chunks_mut(ohw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[fi]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        matmul_into(
            g.f,
            patch,
            ohw,
            kernel,
            false,
            src,
            false,
            on,
            bias.is_some(),
        );
    }
    out
}

/// Accumulates input, kernel and bias gradients for one convolution.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let ohw = g.oh() * g.ow();
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * ohw];
    let mut dcols = vec![T::zero(); patch * ohw];
    let mut dx = dx;
    let mut dk = dk;
    if let Some(db) = db {
        for ni in 0..g.n {
            for fi in 0..g.f {
                let start = (ni * g.f + fi) * ohw;
                db[fi] += dout[start..start + ohw].iter().copied().sum::<T>();
            }
        }
    }
    for ni in 0..g.n {
        let xn = &x[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w];
        let dn = &dout[ni * g.f * ohw..(ni + 1) * g.f * ohw];
        if let Some(dk) = dk.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dK[f, p] += dout[f, s] · cols[p, s]ᵀ
            matmul_into(g.f, ohw, patch, dn, false, src, true, dk, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w];
            if g.is_pointwise() {
                matmul_into(patch, g.f, ohw, kernel, true, dn, false, dxn, true);
            } else {
                matmul_into(patch, g.f, ohw, kernel, true, dn, false, &mut dcols, false);
                col2im(g, &dcols, dxn);
            }
        }
    }
}

/// Non-overlapping max pooling with window `kh×kw`. Returns output and the
/// flat input index chosen for each output (first maximum wins ties).
pub(crate) fn max_pool_forward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    kh: usize,
    kw: usize,
) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / kh, w / kw);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * kh * w + ox * kw;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let idx = base + (oy * kh + dy) * w + ox * kw + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source taps for half-pixel-centre bilinear resampling by an integer
/// factor: output index `o` reads `(i0, i1)` with weights `(w0, w1)` where
/// the source coordinate is `(o + 0.5) / factor - 0.5`, clamped to the
/// valid range.
pub fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = if i0 == in_len - 1 {
                0.0
            } else {
                src - i0 as f64
            };
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], shape: [usize; 4], factor: usize) -> Vec<T> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let top = wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1];
                let bot = wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1];
                dst[oy * ow + ox] = wy0 * top + wy1 * bot;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(
    dout: &[T],
    shape: [usize; 4],
    factor: usize,
    dx: &mut [T],
) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    for plane in 0..n * c {
        let g = &dout[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += wy0 * wx0 * v;
                d[y0 * w + x1] += wy0 * wx1 * v;
                d[y1 * w + x0] += wy1 * wx0 * v;
                d[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
}
