//! Constant sparse row mixing: `y_i = sum_k c_ik * x_{j_ik}`.
//!
//! Trilinear lookups, neighborhood means and voxel averaging are all linear
//! maps with fixed coefficients, so one operator covers them on the tape.

use crate::error::{contract, Result};
use crate::tensor::{axpy, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMix {
    n_in: usize,
    row_ptr: Vec<usize>,
    index: Vec<usize>,
    coef: Vec<f64>,
}

impl SparseMix {
    pub fn builder(n_in: usize) -> SparseMixBuilder {
        SparseMixBuilder {
            mix: SparseMix {
                n_in,
                row_ptr: vec![0],
                index: Vec::new(),
                coef: Vec::new(),
            },
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.index[a..b]
            .iter()
            .copied()
            .zip(self.coef[a..b].iter().copied())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.n_in {
            return Err(contract(format!(
                "sparse mix expects {} input rows, got {}",
                self.n_in,
                x.rows()
            )));
        }
        let mut y = Tensor::zeros(self.n_out(), x.cols());
        for i in 0..self.n_out() {
            let out = y.row_mut(i);
            for (j, c) in self.row(i) {
                axpy(c, x.row(j), out);
            }
        }
        Ok(y)
    }

    /// `gx += M^T gy`.
    pub fn apply_transpose_add(&self, gy: &Tensor, gx: &mut Tensor) {
        for i in 0..self.n_out() {
            let g = gy.row(i);
            for (j, c) in self.row(i) {
                axpy(c, g, gx.row_mut(j));
            }
        }
    }
}

pub struct SparseMixBuilder {
    mix: SparseMix,
}

impl SparseMixBuilder {
    pub fn push(&mut self, j: usize, c: f64) {
        debug_assert!(j < self.mix.n_in);
        self.mix.index.push(j);
        self.mix.coef.push(c);
    }

    pub fn end_row(&mut self) {
        self.mix.row_ptr.push(self.mix.index.len());
    }

    pub fn build(self) -> SparseMix {
        self.mix
    }
}
