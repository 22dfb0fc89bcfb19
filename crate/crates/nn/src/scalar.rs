//! Element-type abstraction. Models train at `f32`; gradient checks and
//! schedule algebra instantiate the same code at `f64`.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand_distr::{Distribution, StandardNormal, StandardUniform};

pub trait Scalar:
    Copy
    + Clone
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Tag written into tensor archives.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
    fn is_finite(self) -> bool;

    fn standard_normal(rng: &mut crate::Rng) -> Self;
    /// Uniform in [0, 1).
    fn uniform(rng: &mut crate::Rng) -> Self;

    /// Row-major GEMM with explicit strides: `C = alpha * A x B + beta * C`.
    ///
    /// `A` is `m x k` with strides `(rsa, csa)`, `B` is `k x n` with strides
    /// `(rsb, csb)`, `C` is `m x n` contiguous row-major.
    ///
    /// # Safety
    /// Pointers must be valid for the strided extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
    );

    fn write_le_bytes(data: &[Self], out: &mut Vec<u8>);
    fn read_le_bytes(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        f32::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f32::min(self, o)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn standard_normal(rng: &mut crate::Rng) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform(rng: &mut crate::Rng) -> Self {
        StandardUniform.sample(rng)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1)
    }

    fn write_le_bytes(data: &[Self], out: &mut Vec<u8>) {
        out.reserve(data.len() * 4);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le_bytes(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        f64::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f64::min(self, o)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn standard_normal(rng: &mut crate::Rng) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform(rng: &mut crate::Rng) -> Self {
        StandardUniform.sample(rng)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1)
    }

    fn write_le_bytes(data: &[Self], out: &mut Vec<u8>) {
        out.reserve(data.len() * 8);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le_bytes(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    }
}
