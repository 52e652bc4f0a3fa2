//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The op set is exactly what the conversion networks need: conv2d and its
//! transpose, batched matmul, softmax, elementwise nonlinearities, reductions,
//! spectral normalization, and Adam. Training runs in `f32`; gradient checks
//! run the same code in `f64`.

mod adam;
mod conv;
pub mod gradcheck;
mod spectral;
mod tape;

pub use adam::AdamState;
pub use spectral::power_iteration;
pub use tape::{Padding, Tape, Var};

use std::fmt::Debug;

/// Scalar element type the tape can operate on.
pub trait Element:
    num_traits::Float + num_traits::FromPrimitive + num_traits::NumAssign + Debug + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn cast_from(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).unwrap()
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Element for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                csc,
            )
        }
    }
}

impl Element for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            )
        }
    }
}

/// Dense row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Element> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        TensorData { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        TensorData {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named trainable tensor, optionally carrying a persisted left singular
/// vector estimate for spectral normalization.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: TensorData<T>,
    pub sn_u: Option<Vec<T>>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: TensorData<T>) -> Self {
        Param {
            name: name.into(),
            value,
            sn_u: None,
        }
    }

    /// Rows of the 2-D view used by spectral normalization.
    pub fn sn_rows(&self) -> usize {
        self.value.shape[0]
    }

    pub fn sn_cols(&self) -> usize {
        self.value.len() / self.value.shape[0]
    }
}
