//! Minimal dense-matrix kernel with a recording tape for reverse-mode
//! differentiation.
//!
//! Everything here is generic over [`crate::Scalar`]; the training stack uses
//! the `f64` aliases from the crate root. Shapes are strictly two-dimensional
//! (row vectors are `1 x n`); there is no broadcasting beyond what the
//! individual primitives define.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, ValueId};
pub(crate) use tape::{log_softmax_raw, softmax_raw};

use crate::{Error, Result, Scalar};

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor2<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("{} values for a {}x{} tensor", data.len(), rows, cols),
            });
        }
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor entry");
        Ok(Tensor2 { rows, cols, data })
    }

    /// `1 x 1` wrapper, handy for scalar losses.
    pub fn scalar(v: S) -> Self {
        Tensor2 {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<S> {
        if self.rows * self.cols != 1 {
            return Err(Error::Shape {
                op: "item",
                detail: format!("expected 1x1, got {}x{}", self.rows, self.cols),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor2<S>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add_assign",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }
}
