//! Row-major `batch x time x feature` tensors.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linop::DomainShape;

/// Dense tensor on a global-state domain, flattened as `((j * n_t) + t) * n + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub n_x: usize,
    pub n_t: usize,
    pub n: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n_x: usize, n_t: usize, n: usize) -> Self {
        Self {
            n_x,
            n_t,
            n,
            data: vec![0.0; n_x * n_t * n],
        }
    }

    pub fn from_vec(n_x: usize, n_t: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_x * n_t * n {
            return Err(Error::InvalidShape(format!(
                "tensor data of length {} does not fit {n_x}x{n_t}x{n}",
                data.len()
            )));
        }
        Ok(Self { n_x, n_t, n, data })
    }

    /// Assemble from per-step matrices of shape `n x n_x` (column = trial).
    pub fn from_steps(steps: &[DMatrix<f64>]) -> Self {
        let n_t = steps.len();
        let (n, n_x) = steps.first().map(|m| m.shape()).unwrap_or((0, 0));
        let mut out = Self::zeros(n_x, n_t, n);
        for (t, m) in steps.iter().enumerate() {
            out.set_step(t, m);
        }
        out
    }

    pub fn from_fn(n_x: usize, n_t: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(n_x, n_t, n);
        for j in 0..n_x {
            for t in 0..n_t {
                for i in 0..n {
                    out.data[(j * n_t + t) * n + i] = f(j, t, i);
                }
            }
        }
        out
    }

    pub fn shape(&self) -> DomainShape {
        DomainShape::state(self.n_x, self.n_t, self.n)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, j: usize, t: usize, i: usize) -> usize {
        (j * self.n_t + t) * self.n + i
    }

    pub fn get(&self, j: usize, t: usize, i: usize) -> f64 {
        self.data[self.index(j, t, i)]
    }

    pub fn set(&mut self, j: usize, t: usize, i: usize, v: f64) {
        let k = self.index(j, t, i);
        self.data[k] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Slice at time `t` as an `n x n_x` matrix.
    pub fn step(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n_x, |i, j| self.get(j, t, i))
    }

    pub fn set_step(&mut self, t: usize, m: &DMatrix<f64>) {
        assert_eq!(m.shape(), (self.n, self.n_x), "set_step: shape mismatch");
        for j in 0..self.n_x {
            for i in 0..self.n {
                self.set(j, t, i, m[(i, j)]);
            }
        }
    }

    pub fn steps(&self) -> Vec<DMatrix<f64>> {
        (0..self.n_t).map(|t| self.step(t)).collect()
    }

    /// The `(n_x * n_t) x n` matrix whose rows are indexed by `j * n_t + t`.
    pub fn to_rows(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_x * self.n_t, self.n, &self.data)
    }

    pub fn from_rows(n_x: usize, n_t: usize, m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self {
            n_x,
            n_t,
            n: m.ncols(),
            data,
        }
    }

    /// Sub-tensor of the listed time steps.
    pub fn select_times(&self, times: &[usize]) -> Tensor3 {
        Tensor3::from_fn(self.n_x, times.len(), self.n, |j, t, i| self.get(j, times[t], i))
    }

    pub fn norm(&self) -> f64 {
        crate::numerics::norm(&self.data)
    }

    /// First `(batch, time)` carrying a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        let k = self.data.iter().position(|v| !v.is_finite())?;
        let row = k / self.n;
        Some((row / self.n_t, row % self.n_t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_batch_time_feature() {
        let t = Tensor3::from_fn(2, 3, 4, |j, t, i| (100 * j + 10 * t + i) as f64);
        assert_eq!(t.as_slice()[t.index(1, 2, 3)], 123.0);
        assert_eq!(t.index(1, 0, 0), 12);
        let rows = t.to_rows();
        assert_eq!(rows[(1 * 3 + 2, 3)], 123.0);
        assert_eq!(Tensor3::from_rows(2, 3, &rows), t);
        let s = t.step(2);
        assert_eq!(s[(3, 1)], 123.0);
        assert_eq!(Tensor3::from_steps(&t.steps()), t);
    }
}
