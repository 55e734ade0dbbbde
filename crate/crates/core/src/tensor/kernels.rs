//! Low-level loops shared by the forward and backward passes.

use crate::error::{Error, Result};

/// `c = alpha * a @ b + beta * c` over strided row/column views.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent along one axis, or an error if the window does not fit.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::shape("conv2d", "stride and dilation must be positive"));
        }
        if padded < span {
            return Err(Error::shape(
                "conv2d",
                format!("axis of extent {input} (padded {padded}) smaller than kernel span {span}"),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub(crate) fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Unfolds one `[cin, h, w]` image into `[cin*kh*kw, oh*ow]` columns.
pub(crate) fn im2col(x: &[f64], d: &ConvDims, g: &Conv2dGeom, cols: &mut [f64]) {
    let p = d.oh * d.ow;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto an image, accumulating.
pub(crate) fn col2im(cols: &[f64], d: &ConvDims, g: &Conv2dGeom, x: &mut [f64]) {
    let p = d.oh * d.ow;
    for c in 0..d.cin {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            dst[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One output coordinate expressed as a weighted sum of input coordinates.
pub(crate) type Taps = Vec<(usize, f64)>;

/// Per-axis resampling weights for bilinear interpolation with half-pixel centers.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            if i0 == i1 || frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

pub(crate) fn nearest_taps(input: usize, output: usize) -> Vec<Taps> {
    (0..output)
        .map(|o| vec![((o * input) / output, 1.0)])
        .collect()
}

/// Applies separable taps to every `[h, w]` plane of `x`.
pub(crate) fn resample_planes(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    rows: &[Taps],
    cols: &[Taps],
) -> Vec<f64> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        acc += wy * wx * src[iy * w + ix];
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`resample_planes`].
pub(crate) fn resample_planes_adjoint(
    dy: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    rows: &[Taps],
    cols: &[Taps],
    dx: &mut [f64],
) {
    let (oh, ow) = (rows.len(), cols.len());
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                let g = src[oy * ow + ox];
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        dst[iy * w + ix] += wy * wx * g;
                    }
                }
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `x` (of `shape`) into the axis order `perm`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_formula() {
        let g = Conv2dGeom::new(2, 1, 1);
        assert_eq!(g.out_extent(32, 4).unwrap(), 16);
        assert_eq!(g.out_extent(2, 4).unwrap(), 1);
        assert!(g.out_extent(1, 4).is_err());
        let dil = Conv2dGeom::new(1, 2, 2);
        assert_eq!(dil.out_extent(8, 3).unwrap(), 8);
    }

    #[test]
    fn bilinear_taps_are_partitions_of_unity() {
        for taps in bilinear_taps(8, 32) {
            let s: f64 = taps.iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let y = permute(&x, &shape, &perm);
        let yshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let back = permute(&y, &yshape, &inverse_perm(&perm));
        assert_eq!(back, x);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = Conv2dGeom::new(2, 1, 2);
        let (cin, h, w, k) = (2, 7, 6, 3);
        let d = ConvDims {
            cin,
            h,
            w,
            kh: k,
            kw: k,
            oh: g.out_extent(h, k).unwrap(),
            ow: g.out_extent(w, k).unwrap(),
        };
        let x: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ncol = cin * k * k * d.oh * d.ow;
        let c: Vec<f64> = (0..ncol).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; ncol];
        im2col(&x, &d, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &d, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
