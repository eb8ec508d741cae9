//! Dense row-major `f64` tensors and the handful of kernels the residual MLP needs.
//!
//! Everything above this module (model, losses, tape) goes through the same
//! kernels, so a taped forward and a plain forward perform identical arithmetic.

mod loss;
mod optim;
mod tape;

pub use loss::{cross_entropy, kl_divergence, kl_divergence_masked, softmax, LOG_CLAMP};
pub use optim::{cosine_lr, sgd_step, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    /// One-hot encoding of `labels` over `classes` columns.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() || classes == 0 {
            return Err(Error::shape("one_hot", "empty labels or zero classes"));
        }
        let mut out = Tensor::zeros(&[labels.len(), classes]);
        for (r, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::OutOfRange {
                    index: c,
                    len: classes,
                });
            }
            out.data[r * classes + c] = 1.0;
        }
        Ok(out)
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

    /// Leading dimension; the batch size for matrices.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects a subset of rows, in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= self.rows() {
                return Err(Error::OutOfRange {
                    index: r,
                    len: self.rows(),
                });
            }
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, data)
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a matrix, got {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

/// `x · wᵀ + b` for `x: b×in`, `w: out×in`, `b: out`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, fan_in) = x.expect_matrix("linear")?;
    let (fan_out, w_in) = w.expect_matrix("linear")?;
    if w_in != fan_in || b.len() != fan_out {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape, w.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; batch * fan_out];
    for r in 0..batch {
        let xr = x.row(r);
        let yr = &mut out[r * fan_out..(r + 1) * fan_out];
        for (o, y) in yr.iter_mut().enumerate() {
            let wo = &w.data[o * fan_in..(o + 1) * fan_in];
            let dot: f64 = xr.iter().zip(wo).map(|(a, b)| a * b).sum();
            *y = dot + b.data[o];
        }
    }
    Tensor::new(vec![batch, fan_out], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect(),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_same_shape(b, "add")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Index of the largest entry in each row; ties resolve to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
