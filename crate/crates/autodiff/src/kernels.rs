//! Slice-level kernels shared by the forward and backward passes.

use crate::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Upper bound on unfolded elements per batched convolution chunk.
const COL_BUDGET: usize = 1 << 23;

/// Images per chunk so that one chunk's unfolded matrix stays in budget.
pub(crate) fn conv_chunk(g: &ConvGeom, batch: usize) -> usize {
    (COL_BUDGET / (g.col_rows() * g.col_cols()).max(1)).clamp(1, batch.max(1))
}

/// Output columns `ox` whose input column `ox*stride + j - pad` is in range.
#[inline]
fn valid_cols(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(j).div_ceil(g.stride);
    let hi = if g.w + g.pad > j { ((g.w + g.pad - j - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `c x h x w` image into a `(c*kh*kw) x (ho*wo)` block of a
/// matrix with row stride `ld`, starting at column `off`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, off: usize) {
    let n = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ld + off..row * ld + off + n];
                let (lo, hi) = valid_cols(g, j);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    let first = lo * g.stride + j - g.pad;
                    if g.stride == 1 {
                        seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in seg[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `dx`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T], ld: usize, off: usize) {
    let n = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ld + off..row * ld + off + n];
                let (lo, hi) = valid_cols(g, j);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let first = lo * g.stride + j - g.pad;
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(seg) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Bilinear neighbourhood of a continuous coordinate. `None` when the
/// coordinate lies outside `[0, w-1] x [0, h-1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub x0: usize,
    pub y0: usize,
    pub fx: f64,
    pub fy: f64,
}

/// Coordinates this far outside the image still count as on the border.
pub const EDGE_TOLERANCE: f64 = 1e-9;

#[inline]
pub(crate) fn bilinear_tap(x: f64, y: f64, w: usize, h: usize) -> Option<Tap> {
    if !(x.is_finite() && y.is_finite()) {
        return None;
    }
    let xmax = (w - 1) as f64;
    let ymax = (h - 1) as f64;
    let tol = EDGE_TOLERANCE;
    if x < -tol || y < -tol || x > xmax + tol || y > ymax + tol {
        return None;
    }
    let (x, y) = (x.clamp(0.0, xmax), y.clamp(0.0, ymax));
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    Some(Tap {
        x0,
        y0,
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

fn skew(v: [f64; 3]) -> [f64; 9] {
    [0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0]
}

fn mat_mul3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    c
}

pub(crate) const SMALL_ANGLE: f64 = 1e-8;

/// Rotation matrix (row-major) of an axis-angle vector.
pub(crate) fn rodrigues(r: [f64; 3]) -> [f64; 9] {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let k = skew(r);
    let k2 = mat_mul3(&k, &k);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0, 0.5)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    let mut out = [0.0; 9];
    for i in 0..9 {
        let id = if i % 4 == 0 { 1.0 } else { 0.0 };
        out[i] = id + a * k[i] + b * k2[i];
    }
    out
}

/// Partial derivatives dR/dr_i of [`rodrigues`], one row-major 3x3 per axis.
pub(crate) fn rodrigues_jacobian(r: [f64; 3]) -> [[f64; 9]; 3] {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let mut out = [[0.0; 9]; 3];
    if theta2.sqrt() < SMALL_ANGLE {
        // Derivative of I + [r]x + [r]x^2 / 2.
        let k = skew(r);
        for (i, slot) in out.iter_mut().enumerate() {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            let ei = skew(e);
            let a = mat_mul3(&ei, &k);
            let b = mat_mul3(&k, &ei);
            for j in 0..9 {
                slot[j] = ei[j] + 0.5 * (a[j] + b[j]);
            }
        }
        return out;
    }
    let rot = rodrigues(r);
    let k = skew(r);
    for (i, slot) in out.iter_mut().enumerate() {
        // (I - R) e_i is column i of I - R.
        let col = [
            (if i == 0 { 1.0 } else { 0.0 }) - rot[i],
            (if i == 1 { 1.0 } else { 0.0 }) - rot[3 + i],
            (if i == 2 { 1.0 } else { 0.0 }) - rot[6 + i],
        ];
        let cross = [
            r[1] * col[2] - r[2] * col[1],
            r[2] * col[0] - r[0] * col[2],
            r[0] * col[1] - r[1] * col[0],
        ];
        let c = skew(cross);
        let mut m = [0.0; 9];
        for j in 0..9 {
            m[j] = (r[i] * k[j] + c[j]) / theta2;
        }
        *slot = mat_mul3(&m, &rot);
    }
    out
}
