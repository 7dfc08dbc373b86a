//! Dense f64 tensors, the forward/backward kernels the hybrid network uses,
//! Adam, and a central-difference gradient checker.

mod adam;
mod gradcheck;
mod ops;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use ops::*;

use crate::{Error, Result};

/// Row-major dense tensor of finite f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Tensor {
        Tensor {
            dims: dims.to_vec(),
            values: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("dims {dims:?} contain a zero")));
        }
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at {i}")));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            values,
        })
    }

    pub fn vector(values: Vec<f64>) -> Result<Tensor> {
        let n = values.len();
        Tensor::from_vec(&[n], values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }
}
