use crate::error::{Error, Result};

/// Element type for all numeric work. The default build uses f64; the `f32`
/// feature switches the whole stack to f32 (only smoke-tested, see README).
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Dense row-major tensor. `data.len()` always equals the product of `shape`;
/// `grad`, when present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<Scalar>,
    pub requires_grad: bool,
    pub grad: Option<Vec<Scalar>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: Scalar) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: Scalar) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Accumulates `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[Scalar]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor length {}",
                delta.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }
}

/// Row-major offset for a 3D index into a [C, H, W] tensor.
#[inline]
pub fn idx3(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (c * h + y) * w + x
}

/// Row-major offset for a 2D index into an [R, C] tensor.
#[inline]
pub fn idx2(r: usize, c: usize, cols: usize) -> usize {
    r * cols + c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Tensor::from_vec(vec![2], vec![1.0, Scalar::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            Tensor::from_vec(vec![1], vec![Scalar::INFINITY]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn grad_accumulates_and_checks_length() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(t.grad.as_deref().unwrap(), &[2.0, 2.0, 2.0]);
        assert!(t.accumulate_grad(&[0.0; 2]).is_err());
    }

    #[test]
    fn index_helpers_are_row_major() {
        // [C=2, H=2, W=3]: element (1, 0, 2) follows the first 2x3 plane.
        assert_eq!(idx3(1, 0, 2, 2, 3), 8);
        assert_eq!(idx2(1, 2, 3), 5);
    }
}
