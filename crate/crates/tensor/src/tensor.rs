use crate::element::Element;
use crate::error::{Result, TensorError};

/// Row-major dense array. The shape never changes once built; reshaping
/// produces a new tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::from_f64_lossy(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type through `f64`.
    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| G::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }

    /// Contiguous sub-block `[start, start+len)` of the leading axis.
    pub fn narrow_outer(&self, start: usize, len: usize) -> Result<Self> {
        let outer = *self.shape.first().unwrap_or(&1);
        if len == 0 || start + len > outer {
            return Err(TensorError::InvalidArgument {
                op: "narrow_outer",
                msg: format!("range {start}..{} outside axis of length {outer}", start + len),
            });
        }
        let inner = self.numel() / outer;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    /// Concatenates along the leading axis.
    pub fn cat_outer(parts: &[&Tensor<F>]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "cat_outer",
            msg: "no tensors".into(),
        })?;
        let tail = &first.shape[1..];
        let mut outer = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "cat_outer",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> Option<F> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a - *b).abs())
                .fold(F::zero(), F::max),
        )
    }
}
