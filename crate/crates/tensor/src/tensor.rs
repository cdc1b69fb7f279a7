//! Plain dense tensor values: contiguous row-major f64 with a shape.

use crate::error::{Result, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                op: "Tensor::new",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { data, shape })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            data: vec![value],
            shape: vec![1],
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of rows when viewed as a matrix of rows over the last axis.
    pub fn rows(&self) -> usize {
        let last = self.shape.last().copied().unwrap_or(1).max(1);
        self.numel() / last
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Contract check: data must hold no NaN or Inf.
    pub fn validate(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { ctx: ctx.to_string() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![1.0, 2.0], vec![3]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], vec![3]).is_ok());
    }

    #[test]
    fn validate_flags_nan_and_inf() {
        let t = Tensor::new(vec![1.0, f64::NAN], vec![2]).unwrap();
        assert!(t.validate("test").is_err());
        let t = Tensor::new(vec![1.0, f64::INFINITY], vec![2]).unwrap();
        assert!(t.validate("test").is_err());
        let t = Tensor::new(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(t.validate("test").is_ok());
    }
}
