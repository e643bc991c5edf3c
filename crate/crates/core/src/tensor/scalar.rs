use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the engine.
///
/// Training runs in `f32`; `f64` exists for gradient checks and other
/// oracle comparisons.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints (byte width of one element).
    const DTYPE: u8;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a * b` for row-major `a: [m, k]`, `b: [k, n]` (or `b: [n, k]`
    /// when `trans_b`), accumulating into `c` when `accumulate` is set.
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
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: u8 = $tag;

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $tag];
                buf.copy_from_slice(&bytes[..$tag]);
                <$t>::from_le_bytes(buf)
            }

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
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.iter_mut().for_each(|x| *x = 0.0);
                    }
                    return;
                }
                if m <= SMALL_ROWS && !trans_a {
                    small_rows_gemm(m, k, n, a, b, trans_b, c, accumulate);
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: strides describe the dense row-major buffers checked above.
                unsafe {
                    $gemm(
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

/// Row counts at or below this skip the packing kernel.
const SMALL_ROWS: usize = 4;

/// Direct loops for a few rows of `a`, where packing costs more than it saves.
#[allow(clippy::too_many_arguments)]
fn small_rows_gemm<T: Float + AddAssign>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        if !accumulate {
            crow.iter_mut().for_each(|x| *x = T::zero());
        }
        if trans_b {
            for (j, cj) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (x, y) in arow.iter().zip(brow) {
                    acc += *x * *y;
                }
                *cj += acc;
            }
        } else {
            for (p, &ap) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj += ap * bj;
                }
            }
        }
    }
}

impl_scalar!(f32, 4, matrixmultiply::sgemm);
impl_scalar!(f64, 8, matrixmultiply::dgemm);
