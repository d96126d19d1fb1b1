//! im2col / col2im convolution kernels over NCHW buffers.

use super::tensor::{gemm, Scalar};
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

/// Geometry of a forward convolution `in_c×in_h×in_w -> out_c×out_h×out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of a strided, padded convolution, or `None` if degenerate.
pub fn conv_out_size(input: usize, kernel: usize, opts: ConvOptions) -> Option<usize> {
    let padded = input + 2 * opts.padding;
    if opts.stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / opts.stride + 1)
}

/// Output extent of a transposed convolution, or `None` if degenerate.
pub fn conv_transpose_out_size(input: usize, kernel: usize, opts: ConvOptions) -> Option<usize> {
    if input == 0 || opts.stride == 0 {
        return None;
    }
    ((input - 1) * opts.stride + kernel).checked_sub(2 * opts.padding)
}

impl ConvGeom {
    pub fn for_conv(x: &[usize], w: &[usize], opts: ConvOptions) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        let (out_h, out_w) = match (
            conv_out_size(x[2], w[2], opts),
            conv_out_size(x[3], w[3], opts),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("input {x:?} too small for kernel {w:?} with {opts:?}"),
                ))
            }
        };
        Ok(Self {
            batch: x[0],
            in_c: x[1],
            in_h: x[2],
            in_w: x[3],
            out_c: w[0],
            k_h: w[2],
            k_w: w[3],
            stride: opts.stride,
            padding: opts.padding,
            out_h,
            out_w,
        })
    }

    /// Geometry of the forward convolution whose adjoint is the transposed
    /// convolution `x (B×Cin×H×W) ⊛ᵀ w (Cin×Cout×kh×kw)`.
    pub fn for_conv_transpose(x: &[usize], w: &[usize], opts: ConvOptions) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[0] {
            return Err(Error::shape("conv_transpose2d", x, w));
        }
        let (out_h, out_w) = match (
            conv_transpose_out_size(x[2], w[2], opts),
            conv_transpose_out_size(x[3], w[3], opts),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::invalid(
                    "conv_transpose2d",
                    format!("degenerate output for input {x:?}, kernel {w:?}, {opts:?}"),
                ))
            }
        };
        // The "forward" direction runs from the transposed output back to its input.
        Ok(Self {
            batch: x[0],
            in_c: w[1],
            in_h: out_h,
            in_w: out_w,
            out_c: x[1],
            k_h: w[2],
            k_w: w[3],
            stride: opts.stride,
            padding: opts.padding,
            out_h: x[2],
            out_w: x[3],
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_plane(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one sample `in_c×in_h×in_w` into `(in_c·k_h·k_w) × (out_h·out_w)`
/// columns; row `r` starts at `cols[r·ld + offset]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, offset: usize) {
    let hw = g.col_cols();
    if g.is_pointwise() {
        for c in 0..g.in_c {
            cols[c * ld + offset..c * ld + offset + hw].copy_from_slice(&x[c * hw..(c + 1) * hw]);
        }
        return;
    }
    let (s, p) = (g.stride as isize, g.padding as isize);
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + hw];
                let (lo, hi) = valid_range(g.out_w, g.in_w, kj, g.stride, g.padding);
                for oh in 0..g.out_h {
                    let ih = oh as isize * s + ki as isize - p;
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize || lo >= hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ow·stride + k − padding` is in bounds.
fn valid_range(out_w: usize, in_w: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    // ow·stride + k − padding ≤ in_w − 1
    let hi = if in_w + padding < k + 1 {
        0
    } else {
        ((in_w + padding - k - 1) / stride + 1).min(out_w)
    };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `in_c×in_h×in_w`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T], ld: usize, offset: usize) {
    let hw = g.col_cols();
    if g.is_pointwise() {
        for c in 0..g.in_c {
            let src = &cols[c * ld + offset..c * ld + offset + hw];
            for (xi, ci) in x[c * hw..(c + 1) * hw].iter_mut().zip(src) {
                *xi += *ci;
            }
        }
        return;
    }
    let (s, p) = (g.stride as isize, g.padding as isize);
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src = &cols[row * ld + offset..row * ld + offset + hw];
                let (lo, hi) = valid_range(g.out_w, g.in_w, kj, g.stride, g.padding);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.padding;
                for oh in 0..g.out_h {
                    let ih = oh as isize * s + ki as isize - p;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    let srow = &src[oh * g.out_w + lo..oh * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(srow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution, one gemm per sample so the unfolded columns stay in
/// cache.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * hw];
    let mut out = vec![T::zero(); g.batch * g.out_plane()];
    for b in 0..g.batch {
        im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], g, &mut cols, hw, 0);
        let yb = &mut out[b * g.out_plane()..(b + 1) * g.out_plane()];
        gemm(g.out_c, rows, hw, w, false, &cols, false, yb, false);
        if let Some(bias) = bias {
            for (o, &bo) in bias.iter().enumerate() {
                for v in &mut yb[o * hw..(o + 1) * hw] {
                    *v += bo;
                }
            }
        }
    }
    out
}

/// Which gradients [`conv2d_backward`] should produce.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvNeeds {
    pub input: bool,
    pub weight: bool,
}

/// Returns `(dx, dw, db)`; `dx`/`dw` are empty when not needed. The columns
/// are unfolded again per sample rather than kept from the forward pass.
pub(crate) fn conv2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    needs: ConvNeeds,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let mut db = vec![T::zero(); g.out_c];
    for b in 0..g.batch {
        for o in 0..g.out_c {
            let src = &dy[(b * g.out_c + o) * hw..(b * g.out_c + o + 1) * hw];
            db[o] += src.iter().copied().sum::<T>();
        }
    }
    let mut dw = Vec::new();
    if needs.weight {
        dw = vec![T::zero(); g.out_c * rows];
        let mut cols = vec![T::zero(); rows * hw];
        for b in 0..g.batch {
            im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], g, &mut cols, hw, 0);
            let dyb = &dy[b * g.out_plane()..(b + 1) * g.out_plane()];
            gemm(g.out_c, hw, rows, dyb, false, &cols, true, &mut dw, b > 0);
        }
    }
    let mut dx = Vec::new();
    if needs.input {
        dx = vec![T::zero(); g.batch * g.in_plane()];
        let mut dcols = vec![T::zero(); rows * hw];
        for b in 0..g.batch {
            let dyb = &dy[b * g.out_plane()..(b + 1) * g.out_plane()];
            gemm(rows, g.out_c, hw, w, true, dyb, false, &mut dcols, false);
            col2im(&dcols, g, &mut dx[b * g.in_plane()..(b + 1) * g.in_plane()], hw, 0);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution; `g` comes from [`ConvGeom::for_conv_transpose`].
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); g.batch * g.in_plane()];
    let mut cols = vec![T::zero(); rows * hw];
    let out_hw = g.in_h * g.in_w;
    for b in 0..g.batch {
        let xb = &x[b * g.out_plane()..(b + 1) * g.out_plane()];
        gemm(rows, g.out_c, hw, w, true, xb, false, &mut cols, false);
        let yb = &mut out[b * g.in_plane()..(b + 1) * g.in_plane()];
        col2im(&cols, g, yb, hw, 0);
        if let Some(bias) = bias {
            for (o, &bo) in bias.iter().enumerate() {
                for v in &mut yb[o * out_hw..(o + 1) * out_hw] {
                    *v += bo;
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let out_hw = g.in_h * g.in_w;
    let mut dx = vec![T::zero(); g.batch * g.out_plane()];
    let mut dw = vec![T::zero(); g.out_c * rows];
    let mut db = vec![T::zero(); g.in_c];
    let mut dcols = vec![T::zero(); rows * hw];
    for b in 0..g.batch {
        let dyb = &dy[b * g.in_plane()..(b + 1) * g.in_plane()];
        im2col(dyb, g, &mut dcols, hw, 0);
        let xb = &x[b * g.out_plane()..(b + 1) * g.out_plane()];
        gemm(g.out_c, rows, hw, w, false, &dcols, false, &mut dx[b * g.out_plane()..(b + 1) * g.out_plane()], false);
        gemm(g.out_c, hw, rows, xb, false, &dcols, true, &mut dw, true);
        for (o, dbo) in db.iter_mut().enumerate() {
            *dbo += dyb[o * out_hw..(o + 1) * out_hw].iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as an independent oracle.
    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], opts: ConvOptions) -> Vec<f64> {
        let oh = conv_out_size(xs[2], ws[2], opts).unwrap();
        let ow = conv_out_size(xs[3], ws[3], opts).unwrap();
        let mut out = vec![0.0; xs[0] * ws[0] * oh * ow];
        for b in 0..xs[0] {
            for o in 0..ws[0] {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..xs[1] {
                            for ki in 0..ws[2] {
                                for kj in 0..ws[3] {
                                    let ih = (i * opts.stride + ki) as isize - opts.padding as isize;
                                    let iw = (j * opts.stride + kj) as isize - opts.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= xs[2] as isize || iw >= xs[3] as isize {
                                        continue;
                                    }
                                    acc += x[((b * xs[1] + c) * xs[2] + ih as usize) * xs[3] + iw as usize]
                                        * w[((o * ws[1] + c) * ws[2] + ki) * ws[3] + kj];
                                }
                            }
                        }
                        out[((b * ws[0] + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn ones_kernel_over_ones_image() {
        let g = ConvGeom::for_conv(&[1, 1, 5, 5], &[1, 1, 3, 3], ConvOptions::default()).unwrap();
        let out = conv2d_forward(&[1.0f64; 25], &[1.0; 9], None, &g);
        assert_eq!((g.out_h, g.out_w), (3, 3));
        assert_eq!(out, vec![9.0; 9]);
    }

    #[test]
    fn matches_direct_convolution() {
        for &(stride, padding, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 3), (3, 2, 3), (1, 3, 3), (1, 0, 1), (2, 1, 1)] {
            let opts = ConvOptions { stride, padding };
            let xs = [2, 3, 7, 6];
            let ws = [4, 3, k, k];
            let x = pseudo(xs.iter().product(), 1);
            let w = pseudo(ws.iter().product(), 2);
            let g = ConvGeom::for_conv(&xs, &ws, opts).unwrap();
            let out = conv2d_forward(&x, &w, None, &g);
            let expect = naive_conv(&x, xs, &w, ws, opts);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        for &(stride, padding, k) in &[(2, 1, 3), (1, 0, 3), (3, 2, 3), (1, 3, 3), (1, 0, 1), (2, 2, 2)] {
            let g = ConvGeom::for_conv(&[1, 2, 5, 4], &[1, 2, k, k], ConvOptions { stride, padding }).unwrap();
            let x = pseudo(g.in_plane(), 3);
            let c = pseudo(g.col_rows() * g.col_cols(), 4);
            let mut cols = vec![0.0; c.len()];
            im2col(&x, &g, &mut cols, g.col_cols(), 0);
            let mut back = vec![0.0; x.len()];
            col2im(&c, &g, &mut back, g.col_cols(), 0);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "stride {stride} padding {padding} k {k}");
        }
    }

    #[test]
    fn transposed_output_size() {
        let opts = ConvOptions { stride: 2, padding: 1 };
        assert_eq!(conv_transpose_out_size(8, 4, opts), Some(16));
        assert_eq!(conv_out_size(16, 4, opts), Some(8));
        assert_eq!(conv_out_size(2, 5, ConvOptions::default()), None);
    }
}
