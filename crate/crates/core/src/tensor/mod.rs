//! Dense row-major tensors and a small reverse-mode differentiation tape.
//!
//! The operator set is closed (see [`Op`]); everything the model needs is
//! expressed in terms of it, so the gradient-check surface stays bounded.

mod fd;
mod kernels;
mod op;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fd::finite_difference_gradient;
pub use op::Op;
pub use tape::{Entry, GradientSet, Tape, Var};

/// Storage width of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating point element type. Implemented for `f32` (training default) and
/// `f64` (verification runs).
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// All pointer/stride combinations must stay inside their allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
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
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
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
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Immutable dense tensor. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, buffer has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![T::zero(); numel(shape)]) }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; numel(shape)]) }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![value]) }
    }

    /// Builds a tensor from a function of the flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(f).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Copy-on-write access to the buffer.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    /// Value of a rank-0 (or single element) tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
