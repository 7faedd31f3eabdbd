//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the attention math is written against: `f32` or `f64`.
///
/// The pipeline itself runs in `f64`; the kernels stay generic so they can be
/// checked against lower precision or reused elsewhere.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal, rounding to the nearest representable value.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// `x ← exp(x)` for inputs `≤ 0`, as in a max-shifted softmax row.
    fn exp_nonpositive(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    /// `C ← A·B + β·C` on strided row-major views (`A` is `m × k`, `B` is
    /// `k × n`). Strides are in elements as `(row, col)`.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing regions of
    /// the stated shapes; `c` must be writable.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_stride: (isize, isize),
        b: *const Self,
        b_stride: (isize, isize),
        beta: Self,
        c: *mut Self,
        c_stride: (isize, isize),
    );
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        (rsa, csa): (isize, isize),
        b: *const f32,
        (rsb, csb): (isize, isize),
        beta: f32,
        c: *mut f32,
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

// exp(x) = 2^k · exp(r), x = k·ln2 + r, |r| ≤ ln2/2, with exp(r) a degree-13
// Taylor polynomial (truncation below 1e-17). Branch-free so it vectorizes.
const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
// 1.5 · 2^52: adding it rounds to an integer held in the low mantissa bits.
const ROUNDER: f64 = 6_755_399_441_055_744.0;
const UNDERFLOW: f64 = -708.0;

#[inline(always)]
#[allow(clippy::eq_op)]
fn exp_kernel(x: f64) -> f64 {
    let xc = if x > UNDERFLOW { x } else { UNDERFLOW };
    let t = xc * LOG2_E + ROUNDER;
    let k = t - ROUNDER;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let ki = (t.to_bits() as i64).wrapping_sub(ROUNDER.to_bits() as i64);
    let scale = f64::from_bits(((ki + 1023) as u64) << 52);
    if x < UNDERFLOW {
        0.0
    } else {
        // `x − x` is 0 for finite x and NaN for NaN, which `max` swallowed.
        p * scale + (x - x)
    }
}

#[inline(always)]
fn exp_slice(xs: &mut [f64]) {
    for x in xs {
        *x = exp_kernel(*x);
    }
}

// Same loop compiled for wider lanes. No FMA is enabled and every operation
// is IEEE-exact per lane, so results match the baseline build bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn exp_slice_avx2(xs: &mut [f64]) {
    exp_slice(xs)
}

impl Scalar for f64 {
    fn exp_nonpositive(xs: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { exp_slice_avx2(xs) };
        }
        exp_slice(xs)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        (rsa, csa): (isize, isize),
        b: *const f64,
        (rsb, csb): (isize, isize),
        beta: f64,
        c: *mut f64,
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
