//! im2col / col2im helpers for square kernels.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.k) / self.stride + 1;
        (ho, wo)
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfolds one `[c, h, w]` image into a `[c*k*k, ho*wo]` patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: ConvGeom, out: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = g.h * g.w;
    for ci in 0..g.c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * ho * wo;
                for oy in 0..ho {
                    let dst = &mut out[row + oy * wo..row + (oy + 1) * wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = g.h * g.w;
    for ci in 0..g.c {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let line = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
