//! Raw slice kernels shared by the forward ops and their adjoints.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

/// `c[rows×cols] += op(a) · op(b)` with `op(a)` of shape `rows×inner` and
/// `op(b)` of shape `inner×cols`. `ta`/`tb` mean the stored buffer is the
/// transpose of the operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], rows: usize, cols: usize, inner: usize, ta: bool, tb: bool) {
    let av = if ta {
        ArrayView2::from_shape((rows, inner).strides((1, rows)), a)
    } else {
        ArrayView2::from_shape((rows, inner), a)
    }
    .expect("lhs buffer matches shape");
    let bv = if tb {
        ArrayView2::from_shape((inner, cols).strides((1, inner)), b)
    } else {
        ArrayView2::from_shape((inner, cols), b)
    }
    .expect("rhs buffer matches shape");
    let mut cv = ArrayViewMut2::from_shape((rows, cols), c).expect("output buffer matches shape");
    general_mat_mul(1.0, &av, &bv, 1.0, &mut cv);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Calls `f(col_row, out_pixel, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let hw_out = self.h_out * self.w_out;
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let inp = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(row * hw_out, oy * self.w_out + ox, inp);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.c_in * g.k * g.k * g.h_out * g.w_out];
    g.for_each_tap(|base, p, i| cols[base + p] = x[i]);
    cols
}

pub(crate) fn col2im_acc(dcols: &[f64], gx: &mut [f64], g: &ConvGeom) {
    g.for_each_tap(|base, p, i| gx[i] += dcols[base + p]);
}

/// Clamp-to-border bilinear taps at continuous `(u, v)` (column, row) of an
/// `h×w` plane: up to four `(flat_index, weight)` pairs summing to one.
pub fn bilinear_taps(h: usize, w: usize, u: f64, v: f64) -> [(usize, f64); 4] {
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    let u1 = (u0 + 1).min(w - 1);
    let v1 = (v0 + 1).min(h - 1);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    [
        (v0 * w + u0, (1.0 - fu) * (1.0 - fv)),
        (v0 * w + u1, fu * (1.0 - fv)),
        (v1 * w + u0, (1.0 - fu) * fv),
        (v1 * w + u1, fu * fv),
    ]
}
