use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumCast};

/// Element type of a [`Tensor`](crate::Tensor). Implemented for `f32` (runtime)
/// and `f64` (reference precision and gradient checks).
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("float converts to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if m <= crate::smallgemm::SMALL_M && !trans_a {
                    if trans_b {
                        crate::smallgemm::gemm_nt(m, k, n, a, b, c, accumulate);
                    } else {
                        crate::smallgemm::gemm_nn(m, k, n, a, b, c, accumulate);
                    }
                    return;
                }
                if n <= crate::smallgemm::SMALL_M && !trans_a {
                    if trans_b {
                        crate::smallgemm::gemm_nt(m, k, n, a, b, c, accumulate);
                    } else {
                        let mut bt = vec![<$t>::default(); n * k];
                        for (p, row) in b[..k * n].chunks(n).enumerate() {
                            for (j, &v) in row.iter().enumerate() {
                                bt[j * k + p] = v;
                            }
                        }
                        crate::smallgemm::gemm_nt(m, k, n, a, &bt, c, accumulate);
                    }
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe contiguous
                // row-major buffers of the asserted sizes.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
