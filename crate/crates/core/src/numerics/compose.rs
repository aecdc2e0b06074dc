//! Operations composed from the tape primitives.

use super::{Factor, Tape, Tensor, Var};
use crate::error::Result;

impl Tape<'_> {
    /// `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, Factor::Const(-1.0))?;
        self.add(a, neg)
    }

    /// Adds a length-`c` bias to every row of an `n × c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let b = self.broadcast(bias, &shape)?;
        self.add(x, b)
    }

    /// `x · w + b` with `w` of shape `in × out` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// Sum of all entries of a matrix, as a `1 × 1` value.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims(x)?;
        let left = self.input(Tensor::full(&[1, n], 1.0));
        let right = self.input(Tensor::full(&[m, 1], 1.0));
        let rows = self.matmul(left, x)?;
        self.matmul(rows, right)
    }

    /// Column means of an `n × c` matrix, as a `1 × c` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.dims(x)?;
        let left = self.input(Tensor::full(&[1, n], 1.0 / n as f64));
        self.matmul(left, x)
    }

    fn dims(&self, x: Var) -> Result<(usize, usize)> {
        self.value(x).dims2()
    }
}
