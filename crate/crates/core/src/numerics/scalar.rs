use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type of the engine. Training runs in `f32`;
/// `f64` exists so finite-difference checks are not swamped by rounding.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    /// `c <- alpha * a * b + beta * c` for row/column-strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (isize, isize),
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs buffer too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs buffer too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output buffer too short");
                // SAFETY: every index touched by the kernel lies inside the spans checked above.
                unsafe {
                    $gemm(
                        m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), rsc, csc,
                    );
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
