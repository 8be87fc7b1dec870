use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Result, TensorError};

/// Floating-point element type of tensors and tapes (`f32` or `f64`).
pub trait Real:
    Float + NumAssign + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        if dims.is_empty() {
            return Err(TensorError::Config("tensor rank must be at least 1".into()));
        }
        Ok(Self {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self::new(dims, vec![T::zero(); len]).expect("zeros shape")
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = dims.iter().product();
        let data = (0..len).map(&mut f).collect();
        Self::new(dims, data).expect("from_fn shape")
    }

    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "set_grad",
                lhs: self.dims.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Shape this tensor takes on a tape: all leading axes folded into rows.
    pub fn matrix_shape(&self) -> (usize, usize) {
        let cols = *self.dims.last().expect("rank >= 1");
        (self.data.len() / cols.max(1), cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let conv = |x: &T| U::from_f64(x.to_f64().expect("finite")).expect("castable");
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(conv).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(conv).collect()),
        }
    }
}
