//! Dense double-precision tensors with a define-by-run tape for reverse-mode
//! differentiation.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Graph`] and
//! addressed through copyable [`Var`] handles. Calling [`Graph::backward`] on a
//! scalar node replays the tape in reverse and leaves `dLoss/dNode` on every
//! node that requires a gradient.

mod attention;
pub mod checkpoint;
mod gemm;
mod graph;
mod optim;
mod params;

pub use attention::{multi_head_attention, Attention};
pub use graph::{Graph, Var};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState};
pub use params::{Binding, ParamId, ParamStore};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range (size {size}) in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row count and column count of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::ShapeMismatch {
                op: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// `(outer, extent, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax of a plain tensor along `axis`, without touching any tape.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let s = g.softmax(v, axis)?;
    Ok(g.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::InvalidShape { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let l2 = 2f64.ln();
        let s = softmax(&Tensor::vector(vec![l2, 0.0, 0.0]), 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.25).abs() < 1e-15);
        assert!((s.data()[2] - 0.25).abs() < 1e-15);
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!(s.data().iter().all(|v| v.is_finite()));
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let r = softmax(&Tensor::vector(vec![f64::NAN, 0.0]), 0);
        assert!(matches!(r, Err(TensorError::NonFinite(_))));
        let r = softmax(&Tensor::vector(vec![f64::INFINITY, 0.0]), 0);
        assert!(matches!(r, Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn softmax_on_inner_axis() {
        // 2x3 tensor, softmax down the columns
        let x = Tensor::matrix(&[&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]]);
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        let s = softmax(&x, 1).unwrap();
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(matches!(softmax(&x, 2), Err(TensorError::BadAxis { .. })));
    }
}
