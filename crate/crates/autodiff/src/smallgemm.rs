//! GEMM paths for a short left operand. Convolutions at full resolution have
//! few output channels, where a packing GEMM spends most of its time packing.

use num_traits::Float;

/// Left operands with at most this many rows take the direct paths.
pub(crate) const SMALL_M: usize = 32;

const NB: usize = 32;
const LANES: usize = 16;

#[inline(always)]
fn madd<T: Float, const FUSED: bool>(acc: T, a: T, b: T) -> T {
    if FUSED {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

#[inline(always)]
fn nn_impl<T: Float, const FUSED: bool>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    for i0 in (0..m).step_by(2) {
        let two = i0 + 1 < m;
        for j0 in (0..n).step_by(NB) {
            let w = NB.min(n - j0);
            let mut acc = [[T::zero(); NB]; 2];
            if w == NB {
                for p in 0..k {
                    let brow: &[T; NB] = b[p * n + j0..p * n + j0 + NB].try_into().expect("NB wide");
                    let a0 = a[i0 * k + p];
                    let a1 = if two { a[(i0 + 1) * k + p] } else { T::zero() };
                    for j in 0..NB {
                        acc[0][j] = madd::<T, FUSED>(acc[0][j], a0, brow[j]);
                        acc[1][j] = madd::<T, FUSED>(acc[1][j], a1, brow[j]);
                    }
                }
            } else {
                for p in 0..k {
                    let brow = &b[p * n + j0..p * n + j0 + w];
                    let a0 = a[i0 * k + p];
                    let a1 = if two { a[(i0 + 1) * k + p] } else { T::zero() };
                    for j in 0..w {
                        acc[0][j] = madd::<T, FUSED>(acc[0][j], a0, brow[j]);
                        acc[1][j] = madd::<T, FUSED>(acc[1][j], a1, brow[j]);
                    }
                }
            }
            for (r, row) in acc.iter().enumerate().take(if two { 2 } else { 1 }) {
                let dst = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + w];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = if accumulate { *d + v } else { v };
                }
            }
        }
    }
}

#[inline(always)]
fn dot2x2<T: Float, const FUSED: bool>(a0: &[T], a1: &[T], b0: &[T], b1: &[T]) -> [T; 4] {
    let k = a0.len();
    let mut acc = [[T::zero(); LANES]; 4];
    let full = k / LANES * LANES;
    for p in (0..full).step_by(LANES) {
        let x0: &[T; LANES] = a0[p..p + LANES].try_into().expect("lane wide");
        let x1: &[T; LANES] = a1[p..p + LANES].try_into().expect("lane wide");
        let y0: &[T; LANES] = b0[p..p + LANES].try_into().expect("lane wide");
        let y1: &[T; LANES] = b1[p..p + LANES].try_into().expect("lane wide");
        for l in 0..LANES {
            acc[0][l] = madd::<T, FUSED>(acc[0][l], x0[l], y0[l]);
            acc[1][l] = madd::<T, FUSED>(acc[1][l], x0[l], y1[l]);
            acc[2][l] = madd::<T, FUSED>(acc[2][l], x1[l], y0[l]);
            acc[3][l] = madd::<T, FUSED>(acc[3][l], x1[l], y1[l]);
        }
    }
    let mut out = [T::zero(); 4];
    for (o, lanes) in out.iter_mut().zip(&acc) {
        *o = lanes.iter().fold(T::zero(), |s, &v| s + v);
    }
    for p in full..k {
        out[0] = madd::<T, FUSED>(out[0], a0[p], b0[p]);
        out[1] = madd::<T, FUSED>(out[1], a0[p], b1[p]);
        out[2] = madd::<T, FUSED>(out[2], a1[p], b0[p]);
        out[3] = madd::<T, FUSED>(out[3], a1[p], b1[p]);
    }
    out
}

#[inline(always)]
fn nt_impl<T: Float, const FUSED: bool>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    for i0 in (0..m).step_by(2) {
        let i1 = (i0 + 1).min(m - 1);
        let (a0, a1) = (&a[i0 * k..(i0 + 1) * k], &a[i1 * k..(i1 + 1) * k]);
        for j0 in (0..n).step_by(2) {
            let j1 = (j0 + 1).min(n - 1);
            let (b0, b1) = (&b[j0 * k..(j0 + 1) * k], &b[j1 * k..(j1 + 1) * k]);
            let d = dot2x2::<T, FUSED>(a0, a1, b0, b1);
            let mut put = |i: usize, j: usize, v: T| {
                let dst = &mut c[i * n + j];
                *dst = if accumulate { *dst + v } else { v };
            };
            put(i0, j0, d[0]);
            if j1 != j0 {
                put(i0, j1, d[1]);
            }
            if i1 != i0 {
                put(i1, j0, d[2]);
                if j1 != j0 {
                    put(i1, j1, d[3]);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn nn_fma<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    nn_impl::<T, true>(m, k, n, a, b, c, accumulate)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn nt_fma<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    nt_impl::<T, true>(m, k, n, a, b, c, accumulate)
}

fn has_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `c (+)= a b` with `a: [m, k]`, `b: [k, n]`, all row-major.
pub(crate) fn gemm_nn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { nn_fma(m, k, n, a, b, c, accumulate) };
    }
    nn_impl::<T, false>(m, k, n, a, b, c, accumulate)
}

/// `c (+)= a b^T` with `a: [m, k]`, `b: [n, k]`, all row-major.
pub(crate) fn gemm_nt<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { nt_fma(m, k, n, a, b, c, accumulate) };
    }
    nt_impl::<T, false>(m, k, n, a, b, c, accumulate)
}
