//! Named dense f32 tensors.

use crate::error::{Error, Result};

/// Row-major n-dimensional array of `f32` with a name.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the product of `shape`.
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(Error::Validation(format!(
                "tensor '{name}' has a zero dimension in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Corruption(format!(
                "tensor '{name}': shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { name, shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(name: impl Into<String>, data: Vec<f32>) -> Result<Self> {
        let len = data.len();
        Tensor::new(name, vec![len], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rejects NaN and infinite values.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Validation(format!(
                "tensor '{}' has non-finite value {} at index {i}",
                self.name, self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Smallest and largest element. `None` for an empty tensor.
    pub fn min_max(&self) -> Option<(f32, f32)> {
        min_max(&self.data)
    }

    pub fn with_data(&self, data: Vec<f32>) -> Result<Tensor> {
        Tensor::new(self.name.clone(), self.shape.clone(), data)
    }
}

pub(crate) fn min_max(values: &[f32]) -> Option<(f32, f32)> {
    let first = *values.first()?;
    Some(
        values
            .iter()
            .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).is_ok());
        assert!(matches!(
            Tensor::new("w", vec![2, 3], vec![1.0; 4]),
            Err(Error::Corruption(_))
        ));
        assert!(Tensor::new("w", vec![0], vec![]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let t = Tensor::from_vec("x", vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.check_finite(), Err(Error::Validation(_))));
        let t = Tensor::from_vec("x", vec![f32::INFINITY]).unwrap();
        assert!(t.check_finite().is_err());
    }

    #[test]
    fn min_max_of_values() {
        let t = Tensor::from_vec("x", vec![3.0, -1.0, 2.0]).unwrap();
        assert_eq!(t.min_max(), Some((-1.0, 3.0)));
    }
}
