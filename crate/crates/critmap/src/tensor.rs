//! Dense row-major tensors over f32 or f64.
//!
//! Tensors are immutable values once constructed; every op in [`crate::ops`]
//! is a pure function, so tensors can be shared freely across workers.
//! Regardless of storage dtype, kernels accumulate in f64 and round once on
//! store, which keeps results independent of batch and summation order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element of a tensor. All kernel math goes through f64.
pub trait Scalar: Copy + PartialEq + Send + Sync + 'static {
    const DTYPE: Dtype;
    fn to64(self) -> f64;
    fn from64(x: f64) -> Self;
    fn wrap(v: Vec<Self>) -> Buffer;
    fn slice(t: &Tensor) -> &[Self];
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline]
    fn to64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from64(x: f64) -> Self {
        x as f32
    }
    fn wrap(v: Vec<Self>) -> Buffer {
        Buffer::F32(v)
    }
    fn slice(t: &Tensor) -> &[Self] {
        match &t.data {
            Buffer::F32(v) => v,
            Buffer::F64(_) => panic!("dtype mismatch: expected f32 tensor"),
        }
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline]
    fn to64(self) -> f64 {
        self
    }
    #[inline]
    fn from64(x: f64) -> Self {
        x
    }
    fn wrap(v: Vec<Self>) -> Buffer {
        Buffer::F64(v)
    }
    fn slice(t: &Tensor) -> &[Self] {
        match &t.data {
            Buffer::F64(v) => v,
            Buffer::F32(_) => panic!("dtype mismatch: expected f64 tensor"),
        }
    }
}

/// Backing storage, one vector per dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Dense n-dimensional array, contiguous row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Buffer,
}

impl Tensor {
    /// Zero-filled tensor.
    pub fn zeros(shape: &[usize], dtype: Dtype) -> Tensor {
        let n = shape.iter().product();
        let data = match dtype {
            Dtype::F32 => Buffer::F32(vec![0.0; n]),
            Dtype::F64 => Buffer::F64(vec![0.0; n]),
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: f64, dtype: Dtype) -> Tensor {
        let n = shape.iter().product();
        let data = match dtype {
            Dtype::F32 => Buffer::F32(vec![value as f32; n]),
            Dtype::F64 => Buffer::F64(vec![value; n]),
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Build from a typed vector; `v.len()` must match the shape product.
    pub fn from_vec<T: Scalar>(shape: &[usize], v: Vec<T>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if v.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (= {} elements)",
                v.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: T::wrap(v),
        })
    }

    /// Build from f64 values, rounding into `dtype`.
    pub fn from_f64s(shape: &[usize], values: &[f64], dtype: Dtype) -> Result<Tensor> {
        match dtype {
            Dtype::F32 => Tensor::from_vec(shape, values.iter().map(|&x| x as f32).collect()),
            Dtype::F64 => Tensor::from_vec(shape, values.to_vec()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        match &self.data {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match &self.data {
            Buffer::F32(_) => Dtype::F32,
            Buffer::F64(_) => Dtype::F64,
        }
    }

    /// Flat element access as f64.
    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        match &self.data {
            Buffer::F32(v) => v[i] as f64,
            Buffer::F64(v) => v[i],
        }
    }

    /// All elements widened to f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Buffer::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::F64(v) => v.clone(),
        }
    }

    /// Typed view of the storage. Panics on dtype mismatch; callers dispatch
    /// on [`Tensor::dtype`] first.
    pub fn as_slice<T: Scalar>(&self) -> &[T] {
        T::slice(self)
    }

    /// Raw little-endian bytes of the buffer, for serialization.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            Buffer::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Buffer::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Rebuild from little-endian bytes as written by [`Tensor::to_le_bytes`].
    pub fn from_le_bytes(shape: &[usize], dtype: Dtype, bytes: &[u8]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * dtype.size_bytes() {
            return Err(Error::shape(format!(
                "blob of {} bytes does not match shape {:?} with dtype {}",
                bytes.len(),
                shape,
                dtype
            )));
        }
        match dtype {
            Dtype::F32 => {
                let v = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_vec(shape, v)
            }
            Dtype::F64 => {
                let v = bytes
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect();
                Tensor::from_vec(shape, v)
            }
        }
    }

    /// Cast to another dtype (identity when equal).
    pub fn cast(&self, dtype: Dtype) -> Tensor {
        if self.dtype() == dtype {
            return self.clone();
        }
        Tensor::from_f64s(&self.shape, &self.to_f64_vec(), dtype).expect("shape preserved")
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        match &self.data {
            Buffer::F32(v) => v.iter().all(|x| x.is_finite()),
            Buffer::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Elementwise map in f64, rounded back into the tensor dtype.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = match &self.data {
            Buffer::F32(v) => Buffer::F32(v.iter().map(|&x| f(x as f64) as f32).collect()),
            Buffer::F64(v) => Buffer::F64(v.iter().map(|&x| f(x)).collect()),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Elementwise sum; shapes and dtypes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add: shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        if self.dtype() != other.dtype() {
            return Err(Error::shape("add: dtypes differ".to_string()));
        }
        let data = match (&self.data, &other.data) {
            (Buffer::F32(a), Buffer::F32(b)) => {
                Buffer::F32(a.iter().zip(b).map(|(&x, &y)| x + y).collect())
            }
            (Buffer::F64(a), Buffer::F64(b)) => {
                Buffer::F64(a.iter().zip(b).map(|(&x, &y)| x + y).collect())
            }
            _ => unreachable!(),
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            worst = worst.max((self.at(i) - other.at(i)).abs());
        }
        worst
    }

    /// Fill a fresh tensor with normal(mu, sigma) draws.
    pub fn rand_normal(
        shape: &[usize],
        mu: f64,
        sigma: f64,
        rng: &mut Rng,
        dtype: Dtype,
    ) -> Result<Tensor> {
        if !(sigma > 0.0) {
            return Err(Error::param(format!("normal: sigma must be > 0, got {sigma}")));
        }
        let n = shape.iter().product();
        let mut buf = vec![0.0f64; n];
        rng.fill_normal(&mut buf, mu, sigma);
        Tensor::from_f64s(shape, &buf, dtype)
    }

    /// Fill a fresh tensor with uniform(a, b) draws.
    pub fn rand_uniform(
        shape: &[usize],
        a: f64,
        b: f64,
        rng: &mut Rng,
        dtype: Dtype,
    ) -> Result<Tensor> {
        if !(a < b) {
            return Err(Error::param(format!("uniform: need a < b, got [{a}, {b})")));
        }
        let n = shape.iter().product();
        let mut buf = vec![0.0f64; n];
        rng.fill_uniform(&mut buf, a, b);
        Tensor::from_f64s(shape, &buf, dtype)
    }
}

/// Kahan compensated accumulator, used where sums must be insensitive to
/// input order well below 1e-12.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_invariant() {
        let t = Tensor::zeros(&[2, 3, 4], Dtype::F32);
        assert_eq!(t.len(), 24);
        assert!(Tensor::from_vec(&[2, 2], vec![1.0f32; 3]).is_err());
    }

    #[test]
    fn le_bytes_round_trip_is_bit_exact() {
        let mut rng = Rng::new(3);
        let t = Tensor::rand_normal(&[3, 5], 0.0, 1.0, &mut rng, Dtype::F32).unwrap();
        let back = Tensor::from_le_bytes(t.shape(), t.dtype(), &t.to_le_bytes()).unwrap();
        assert_eq!(t, back);

        let t = Tensor::rand_uniform(&[7], -2.0, 2.0, &mut rng, Dtype::F64).unwrap();
        let back = Tensor::from_le_bytes(t.shape(), t.dtype(), &t.to_le_bytes()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn same_seed_same_draws() {
        let a = Tensor::rand_normal(&[16], 0.0, 1.0, &mut Rng::new(9), Dtype::F32).unwrap();
        let b = Tensor::rand_normal(&[16], 0.0, 1.0, &mut Rng::new(9), Dtype::F32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_distribution_params_error() {
        let mut rng = Rng::new(0);
        assert!(Tensor::rand_normal(&[4], 0.0, 0.0, &mut rng, Dtype::F32).is_err());
        assert!(Tensor::rand_uniform(&[4], 1.0, 1.0, &mut rng, Dtype::F32).is_err());
        assert!(Tensor::rand_uniform(&[4], 2.0, 1.0, &mut rng, Dtype::F32).is_err());
    }

    #[test]
    fn kahan_sum_tracks_permutations() {
        let mut rng = Rng::new(4);
        let mut xs = vec![0.0f64; 2000];
        rng.fill_uniform(&mut xs, 0.0, 1.0);
        let mut fwd = KahanSum::new();
        for &x in &xs {
            fwd.add(x);
        }
        let mut rev = KahanSum::new();
        for &x in xs.iter().rev() {
            rev.add(x);
        }
        assert!((fwd.value() - rev.value()).abs() < 1e-12);
    }
}
