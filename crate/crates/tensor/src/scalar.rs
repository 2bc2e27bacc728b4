use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, NumAssign};
use rustfft::FftNum;

/// Real element type of a graph. Complex values use `Complex<T>` of the same precision.
pub trait Scalar:
    Float + FloatConst + NumAssign + FftNum + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Largest representable value that does not exceed `v`.
    fn from_f64_floor(v: f64) -> Self;

    /// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`
    /// and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // element (i, j) of op(x) where op(x) is rows x cols
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn from_f64_floor(v: f64) -> Self {
                let c = v as $t;
                if (c as f64) > v {
                    <$t>::from_bits(if c > 0.0 {
                        c.to_bits() - 1
                    } else if c == 0.0 {
                        (-<$t>::from_bits(1)).to_bits()
                    } else {
                        c.to_bits() + 1
                    })
                } else {
                    c
                }
            }

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(trans_a, m, k);
                let (rsb, csb) = gemm_strides(trans_b, k, n);
                // SAFETY: slice lengths checked above; strides describe in-bounds
                // row-major (or transposed) views of those slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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

impl_scalar!(f32, "real32", matrixmultiply::sgemm);
impl_scalar!(f64, "real64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm(false, false, 2, 4, 3, 1.0, &a, &b, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) times c (2x4)
        let mut d = vec![0.0; 12];
        f64::gemm(true, false, 3, 4, 2, 1.0, &a, &c, 0.0, &mut d);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|p| a[p * 3 + i] * c[p * 4 + j]).sum();
                assert_eq!(d[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn floor_conversion_never_rounds_up() {
        let v = 1.561_234_567_890_123e-6_f64;
        let f = f32::from_f64_floor(v);
        assert!((f as f64) <= v);
        assert!(((f as f64) - v).abs() < 1e-12);
        assert_eq!(f64::from_f64_floor(v), v);
    }
}
