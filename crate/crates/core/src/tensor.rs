//! Dense row-major tensors and the handful of kernels the encoder needs.
//!
//! Every reduction runs sequentially over its leading axis so results are
//! bit-reproducible on a given platform. Element type is generic over
//! [`Scalar`]: `f32` for training and inference, `f64` for gradient checks.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{bail, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    const BYTES: usize;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts")
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>);

    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Dimension, "shape {shape:?} has a zero dimension");
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Dimension, "shape {shape:?} needs {n} elements, got {}", data.len());
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let Some(first) = rows.first() else {
            bail!(Dimension, "from_rows needs at least one row");
        };
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                bail!(Dimension, "ragged rows: {} vs {}", r.len(), cols);
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of the tensor viewed as a matrix (leading dims flattened).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// True when every entry is finite.
    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.extend_le_bytes(&mut out);
        }
        out
    }

    pub fn transpose2(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }
}

fn check_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        bail!(Dimension, "{what} must be a matrix, got shape {:?}", t.shape);
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `out += a · b` over raw row-major buffers, `a` m×k, `b` k×n.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out += aᵀ · b`, `a` m×k, `b` m×n, `out` k×n.
pub(crate) fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out += a · bᵀ`, `a` m×n, `b` k×n, `out` m×k.
pub(crate) fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    gemm_acc(a, &bt, out, m, n, k);
}

/// Standard matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_matrix(a, "lhs")?;
    let (k2, n) = check_matrix(b, "rhs")?;
    if k != k2 {
        bail!(Dimension, "matmul inner dimensions differ: {:?} × {:?}", a.shape, b.shape);
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_acc(&a.data, &b.data, &mut out.data, m, k, n);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if !t.is_valid() {
        bail!(Input, "softmax input contains non-finite values");
    }
    let mut out = t.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Which GELU formula the encoder uses. Recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluVariant {
    Tanh,
    Erf,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl GeluVariant {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        let half = T::of(0.5);
        match self {
            GeluVariant::Tanh => {
                let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
                half * x * (T::one() + inner.tanh())
            }
            GeluVariant::Erf => {
                let z = x.as_f64() / core::f64::consts::SQRT_2;
                half * x * (T::one() + T::of(libm::erf(z)))
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let half = T::of(0.5);
        match self {
            GeluVariant::Tanh => {
                let c = T::of(SQRT_2_OVER_PI);
                let a = T::of(GELU_CUBIC);
                let th = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + th)
                    + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x)
            }
            GeluVariant::Erf => {
                let xf = x.as_f64();
                let cdf = 0.5 * (1.0 + libm::erf(xf / core::f64::consts::SQRT_2));
                let pdf = libm::exp(-0.5 * xf * xf) / libm::sqrt(2.0 * core::f64::consts::PI);
                T::of(cdf + xf * pdf)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = T::zero();
                for p in 0..k {
                    s = s + a.data[i * k + p] * b.data[p * n + j];
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_selection() {
        let id = Tensor::<f32>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let e = Tensor::<f32>::from_rows(&[&[1.0, 0.0]]).unwrap();
        let col = Tensor::from_rows(&[&[2.0], &[5.0]]).unwrap();
        assert_eq!(matmul(&e, &col).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::<f32>::new(&[3, 4], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::<f32>::new(&[4, 2], (0..8).map(|i| (i as f32 * 1.3).cos()).collect()).unwrap();
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] × [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::<f32>::from_rows(&[&[0.0, 0.0], &[1000.0, 1000.0]]).unwrap();
        let s = softmax_rows(&t).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);

        let t = Tensor::<f32>::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&t).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            let want = ((i + 1) as f64).exp() / z;
            assert!((*v as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::<f32>::from_rows(&[&[f32::NAN, 0.0]]).unwrap();
        assert!(softmax_rows(&t).is_err());
        assert!(!t.is_valid());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(GeluVariant::Tanh.apply(0.0f32), 0.0);
        assert!((GeluVariant::Tanh.apply(10.0f32) - 10.0).abs() < 1e-3);
        let want = 0.5 * (1.0 + (SQRT_2_OVER_PI * (1.0 + GELU_CUBIC)).tanh());
        assert!((GeluVariant::Tanh.apply(1.0f32) as f64 - want).abs() < 1e-6);
        // erf(1/sqrt 2) = 0.6826894921370859
        let want_erf = 0.5 * (1.0 + 0.682_689_492_137_085_9);
        assert!((GeluVariant::Erf.apply(1.0f64) - want_erf).abs() < 1e-12);
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
