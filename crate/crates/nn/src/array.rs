//! Dense row-major tensor. Cheap to clone (shared `Arc` storage); mutation
//! copies on demand.

use std::sync::Arc;

use crate::scalar::Scalar;

#[derive(Clone)]
pub struct Array<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Array<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn randn(rng: &mut crate::Rng, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::standard_normal(rng)).collect();
        Self::from_vec(shape, data)
    }

    pub fn rand_uniform(rng: &mut crate::Rng, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::uniform(rng)).collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view; copies the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same storage, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Self { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip_map");
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Self::from_vec(&self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data_mut()[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in idx.iter().zip(self.shape.iter()).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for dim {i} of extent {d}");
            off = off * d + ix;
        }
        off
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.sum_f64() / self.len() as f64
        }
    }

    pub fn max_abs_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array::from_vec(&self.shape, self.data.iter().map(|v| U::from_f64(v.to_f64())).collect())
    }

    /// Plain row-major matrix product for 2-D arrays (no tape involved).
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.ndim(), 2);
        assert_eq!(other.ndim(), 2);
        let (m, k) = (self.dim(0), self.dim(1));
        let (k2, n) = (other.dim(0), other.dim(1));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::ZERO; m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                T::ZERO,
                out.as_mut_ptr(),
            );
        }
        Self::from_vec(&[m, n], out)
    }
}

impl<T: Scalar> std::fmt::Debug for Array<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Array{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data())
        } else {
            write!(f, " [{} elements]", self.len())
        }
    }
}
