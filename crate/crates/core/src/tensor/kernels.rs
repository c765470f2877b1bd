//! Slice-level forward/backward kernels used by the graph ops.
//!
//! All loops run in a fixed order so results are reproducible bit for bit.

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [c_in, h, w] = input[..] else {
            return Err(Error::dim("conv2d", format!("input must be [C,H,W], got {input:?}")));
        };
        let [c_out, wc_in, kh, kw] = weight[..] else {
            return Err(Error::dim(
                "conv2d",
                format!("weight must be [C_out,C_in,k,k], got {weight:?}"),
            ));
        };
        if wc_in != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if kh != kw || kh == 0 {
            return Err(Error::dim("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {k}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad`
/// falls inside the image.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = (g.pad.saturating_sub(kx) + g.stride - 1) / g.stride;
    // largest ox with ox·stride + kx < w + pad
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.ow) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.oh {
                    let iy = oy * g.stride + ky;
                    if iy < g.pad || iy - g.pad >= g.h || lo >= hi {
                        continue;
                    }
                    let src = &plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    let out_row = &mut dst[oy * g.ow + lo..oy * g.ow + hi];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row.copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, o) in out_row.iter_mut().enumerate() {
                            *o = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.oh {
                    let iy = oy * g.stride + ky;
                    if iy < g.pad || iy - g.pad >= g.h || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    let ix0 = lo * g.stride + kx - g.pad;
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            let d = &mut dst[ix0 + j * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let mut out = vec![T::zero(); g.c_out * p];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        T::gemm(g.c_out, g.c_in, p, weight, false, x, false, &mut out, beta);
    } else {
        let cols = im2col(x, g);
        T::gemm(g.c_out, g.patch_len(), p, weight, false, &cols, false, &mut out, beta);
    }
    out
}

/// Gradients of a conv2d w.r.t. (input, weight, bias); each only when requested.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    g: &ConvGeom,
    want: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_pixels();
    let kk = g.patch_len();
    let gb = want[2].then(|| gout.chunks(p).map(|row| row.iter().copied().sum()).collect());
    let owned_cols;
    let cols: &[T] = if g.is_pointwise() {
        x
    } else if want[1] {
        owned_cols = im2col(x, g);
        &owned_cols
    } else {
        &[]
    };
    let gw = want[1].then(|| {
        let mut gw = vec![T::zero(); g.c_out * kk];
        T::gemm(g.c_out, p, kk, gout, false, cols, true, &mut gw, T::zero());
        gw
    });
    let gx = want[0].then(|| {
        let mut gcols = vec![T::zero(); kk * p];
        T::gemm(kk, g.c_out, p, weight, true, gout, false, &mut gcols, T::zero());
        if g.is_pointwise() {
            gcols
        } else {
            let mut gx = vec![T::zero(); g.c_in * g.h * g.w];
            col2im_add(&gcols, g, &mut gx);
            gx
        }
    });
    (gx, gw, gb)
}

/// Geometry of the 2×2, stride-2 transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl UpGeom {
    pub fn new(input: &[usize], weight: &[usize]) -> Result<Self> {
        let [c_in, h, w] = input[..] else {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("input must be [C,H,W], got {input:?}"),
            ));
        };
        let [wc_in, c_out, kh, kw] = weight[..] else {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("weight must be [C_in,C_out,2,2], got {weight:?}"),
            ));
        };
        if kh != 2 || kw != 2 {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("only 2x2 kernels are supported, got {kh}x{kw}"),
            ));
        }
        if wc_in != c_in {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        Ok(UpGeom { c_in, c_out, h, w })
    }
}

pub fn conv_transpose2_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &UpGeom) -> Vec<T> {
    let p = g.h * g.w;
    let c4 = g.c_out * 4;
    let mut cols = vec![T::zero(); c4 * p];
    T::gemm(c4, g.c_in, p, weight, true, x, false, &mut cols, T::zero());
    let (oh, ow) = (2 * g.h, 2 * g.w);
    let mut out = vec![T::zero(); g.c_out * oh * ow];
    for co in 0..g.c_out {
        let b = bias.map_or(T::zero(), |b| b[co]);
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let src = &cols[(co * 4 + d) * p..(co * 4 + d + 1) * p];
            for y in 0..g.h {
                let dst = &mut out[co * oh * ow + (2 * y + dy) * ow..];
                for x in 0..g.w {
                    dst[2 * x + dx] = src[y * g.w + x] + b;
                }
            }
        }
    }
    out
}

pub fn conv_transpose2_backward<T: Real>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    g: &UpGeom,
    want: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.h * g.w;
    let c4 = g.c_out * 4;
    let (oh, ow) = (2 * g.h, 2 * g.w);
    let mut gcols = vec![T::zero(); c4 * p];
    for co in 0..g.c_out {
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let dst = &mut gcols[(co * 4 + d) * p..(co * 4 + d + 1) * p];
            for y in 0..g.h {
                let src = &gout[co * oh * ow + (2 * y + dy) * ow..];
                for x in 0..g.w {
                    dst[y * g.w + x] = src[2 * x + dx];
                }
            }
        }
    }
    let gb = want[2].then(|| {
        gout.chunks(oh * ow)
            .map(|plane| plane.iter().copied().sum())
            .collect()
    });
    let gx = want[0].then(|| {
        let mut gx = vec![T::zero(); g.c_in * p];
        T::gemm(g.c_in, c4, p, weight, false, &gcols, false, &mut gx, T::zero());
        gx
    });
    let gw = want[1].then(|| {
        let mut gw = vec![T::zero(); g.c_in * c4];
        T::gemm(g.c_in, p, c4, x, false, &gcols, true, &mut gw, T::zero());
        gw
    });
    (gx, gw, gb)
}

/// 2×2 max pooling; returns the pooled values and the flat input index of each winner.
pub fn max_pool2_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                // row-major scan, strict comparison keeps the first maximum
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// `out(c, y·r+dy, x·r+dx) = in(c·r² + dy·r + dx, y, x)`.
pub fn depth_to_space<T: Real>(x: &[T], c_in: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let c = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let src = &x[(ch * r * r + dy * r + dx) * h * w..];
                for y in 0..h {
                    for xx in 0..w {
                        out[ch * oh * ow + (y * r + dy) * ow + xx * r + dx] = src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`depth_to_space`]; `x` is `[c, h, w]` with `h, w` divisible by `r`.
pub fn space_to_depth<T: Real>(x: &[T], c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![T::zero(); c * r * r * oh * ow];
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let dst = &mut out[(ch * r * r + dy * r + dx) * oh * ow..];
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[y * ow + xx] = x[ch * h * w + (y * r + dy) * w + xx * r + dx];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.oh * g.ow];
        for co in 0..g.c_out {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                    }
                    out[(co * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum_over_geometries() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (3, 1, 0), (5, 2, 2), (3, 3, 2), (1, 2, 0)] {
            let (c_in, c_out, h, w) = (2, 3, 7, 6);
            let x: Vec<f64> = (0..c_in * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let wt: Vec<f64> = (0..c_out * c_in * k * k).map(|i| ((i * 5) % 9) as f64 - 4.0).collect();
            let g = ConvGeom::new(&[c_in, h, w], &[c_out, c_in, k, k], stride, pad).unwrap();
            assert_eq!(conv2d_forward(&x, &wt, None, &g), direct_conv(&x, &wt, &g), "k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (5, 2, 2), (3, 3, 2)] {
            let g = ConvGeom::new(&[2, 7, 6], &[1, 2, k, k], stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 42).map(|i| ((i * 3) % 13) as f64).collect();
            let cols = im2col(&x, &g);
            let c: Vec<f64> = (0..cols.len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
            let mut back = vec![0.0; x.len()];
            col2im_add(&c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs);
        }
    }
}
