//! Dense arithmetic, reverse-mode differentiation and the Adam optimizer.
//!
//! Only the handful of operations the mask estimators need are provided.
//! Everything is generic over [`Real`], which is implemented for `f32`
//! (training, inference) and `f64` (gradient checks, DSP verification).

mod adam;
mod gradcheck;
mod graph;
mod store;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, ProbeResult};
pub use graph::{Backward, Gradients, Graph, NodeId};
pub use store::{ParamId, Parameter, ParameterStore};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Scalar type used throughout the crate.
pub trait Real:
    Float + realfft::FftNum + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Bit width, for reports.
    const BITS: u32;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Floating-point width selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = NumericsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(NumericsError::Parse(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data has {len} entries but shape {shape:?} needs {expected}")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    EmptyExtent(Vec<usize>),
    #[error("backward needs a scalar node, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("optimizer state does not match the parameter store: {0}")]
    UninitializedOptimizer(String),
    #[error("{0}")]
    Parse(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(NumericsError::EmptyExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NumericsError::DataLength {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Element-wise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl FromStr for Activation {
    type Err = NumericsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(NumericsError::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    pub(crate) fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    // Split on sign so exp never overflows.
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `W x + b` on plain tensors.
pub fn affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_affine_shapes(x.shape(), w.shape(), b.shape())?;
    let mut out = b.data().to_vec();
    matvec_add(w.data(), x.data(), &mut out);
    Ok(Tensor::vector(out))
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| kind.apply(v)).collect(),
    }
}

pub(crate) fn check_affine_shapes(x: &[usize], w: &[usize], b: &[usize]) -> Result<()> {
    if w.len() != 2 || x.len() != 1 || w[1] != x[0] {
        return Err(NumericsError::Dimension {
            op: "affine(W, x)",
            left: w.to_vec(),
            right: x.to_vec(),
        });
    }
    if b.len() != 1 || b[0] != w[0] {
        return Err(NumericsError::Dimension {
            op: "affine(W, b)",
            left: w.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

/// `out += W x` for row-major `W` with `out.len()` rows.
#[inline]
pub(crate) fn matvec_add<T: Real>(w: &[T], x: &[T], out: &mut [T]) {
    let n = x.len();
    debug_assert_eq!(w.len(), out.len() * n);
    for (row, o) in w.chunks_exact(n).zip(out.iter_mut()) {
        *o = *o + dot(row, x);
    }
}

/// `out += Wᵀ g`.
#[inline]
pub(crate) fn matvec_t_add<T: Real>(w: &[T], g: &[T], out: &mut [T]) {
    let n = out.len();
    for (row, &gi) in w.chunks_exact(n).zip(g) {
        if gi != T::zero() {
            axpy(gi, row, out);
        }
    }
}

/// `w += g ⊗ x`.
#[inline]
pub(crate) fn outer_add<T: Real>(g: &[T], x: &[T], w: &mut [T]) {
    let n = x.len();
    for (row, &gi) in w.chunks_exact_mut(n).zip(g) {
        if gi != T::zero() {
            axpy(gi, x, row);
        }
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four accumulators give the optimizer room to vectorize.
    let mut acc = [T::zero(); 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        acc[0] = acc[0] + ca[0] * cb[0];
        acc[1] = acc[1] + ca[1] * cb[1];
        acc[2] = acc[2] + ca[2] * cb[2];
        acc[3] = acc[3] + ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in rem_a.iter().zip(rem_b) {
        s = s + x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_and_zero_weights() {
        let x = Tensor::vector(vec![3.0, -1.0]);
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_b = Tensor::zeros(&[2]);
        assert_eq!(affine(&x, &eye, &zero_b).unwrap().data(), &[3.0, -1.0]);

        let zw = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::vector(vec![5.0, 5.0]);
        assert_eq!(affine(&x, &zw, &b).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn affine_hand_arithmetic() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::vector(vec![1.0, 1.0]);
        let x = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let w = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::zeros(&[2]);
        let err = affine(&x, &w, &b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::Dimension {
                op: "affine(W, x)",
                left: vec![2, 3],
                right: vec![2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2]"));
    }

    #[test]
    fn activations() {
        let x = Tensor::vector(vec![-2.0, 0.0, 3.0]);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(sigmoid(0.0f64), 0.5);
        let t = activation(&Tensor::vector(vec![1.0f64]), Activation::Tanh);
        // tanh(1) = (e² − 1)/(e² + 1)
        let e2 = std::f64::consts::E * std::f64::consts::E;
        assert!((t.data()[0] - (e2 - 1.0) / (e2 + 1.0)).abs() < 1e-15);
        assert!((t.data()[0] - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert!("gelu".parse::<Activation>().is_err());
    }

    #[test]
    fn sigmoid_is_finite_at_extremes() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!(sigmoid(-80.0f32) > 0.0);
    }

    #[test]
    fn tensor_rejects_bad_lengths() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0f32; 3]),
            Err(NumericsError::DataLength { .. })
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![0, 2], vec![]),
            Err(NumericsError::EmptyExtent(_))
        ));
        let mut t = Tensor::<f64>::zeros(&[2]);
        assert!(t.is_finite());
        t.data_mut()[1] = f64::NAN;
        assert!(!t.is_finite());
    }
}
