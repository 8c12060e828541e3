//! Dense LU factorization with partial pivoting for the small (N x N) implicit
//! stage matrices. N stays in the single digits here, so a fresh factorization
//! per step is cheaper than anything clever and keeps results deterministic.
//! The factorization object is reusable so the propagator allocates nothing
//! per step.

use ndarray::{Array2, ArrayViewMut2};

use crate::error::{Error, Result};

/// Pivot magnitudes at or below this are treated as singular.
const PIVOT_TOL: f64 = 1e-300;

/// Writes `dst = I + scale * m` for square `m`, reusing `dst`'s storage.
pub fn shifted_identity(dst: &mut Array2<f64>, m: &Array2<f64>, scale: f64) {
    dst.zip_mut_with(m, |d, &v| *d = scale * v);
    for i in 0..dst.nrows() {
        dst[[i, i]] += 1.0;
    }
}

pub struct Lu {
    lu: Array2<f64>,
    piv: Vec<usize>,
}

impl Lu {
    pub fn new(n: usize) -> Self {
        Self { lu: Array2::zeros((n, n)), piv: vec![0; n] }
    }

    pub fn dim(&self) -> usize {
        self.lu.nrows()
    }

    /// Factors `a` as P*A = L*U into this buffer. Fails on a pivot that is
    /// numerically zero or not finite.
    pub fn factor(&mut self, a: &Array2<f64>) -> Result<()> {
        let n = self.dim();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "LU buffer is {n}x{n}, matrix is {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let lu = &mut self.lu;
        lu.assign(a);
        for col in 0..n {
            let mut best = col;
            let mut best_mag = lu[[col, col]].abs();
            for row in col + 1..n {
                let mag = lu[[row, col]].abs();
                if mag > best_mag {
                    best = row;
                    best_mag = mag;
                }
            }
            // Negated comparison so NaN pivots are rejected too.
            if !(best_mag > PIVOT_TOL) {
                return Err(Error::SingularMatrix { pivot: best_mag });
            }
            self.piv[col] = best;
            if best != col {
                for k in 0..n {
                    lu.swap([col, k], [best, k]);
                }
            }
            let inv = 1.0 / lu[[col, col]];
            for row in col + 1..n {
                let factor = lu[[row, col]] * inv;
                lu[[row, col]] = factor;
                for k in col + 1..n {
                    lu[[row, k]] -= factor * lu[[col, k]];
                }
            }
        }
        Ok(())
    }

    /// Solves A*X = B in place for every column of `b`, using the most recent
    /// factorization.
    pub fn solve_into(&self, mut b: ArrayViewMut2<'_, f64>) {
        let n = self.dim();
        assert_eq!(b.nrows(), n, "rhs row count must match matrix dimension");
        for (col, &p) in self.piv.iter().enumerate() {
            if p != col {
                for j in 0..b.ncols() {
                    b.swap([col, j], [p, j]);
                }
            }
        }
        // Forward substitution with unit lower triangle.
        for row in 1..n {
            for k in 0..row {
                let l = self.lu[[row, k]];
                if l != 0.0 {
                    for j in 0..b.ncols() {
                        b[[row, j]] -= l * b[[k, j]];
                    }
                }
            }
        }
        // Back substitution.
        for row in (0..n).rev() {
            for k in row + 1..n {
                let u = self.lu[[row, k]];
                if u != 0.0 {
                    for j in 0..b.ncols() {
                        b[[row, j]] -= u * b[[k, j]];
                    }
                }
            }
            let inv = 1.0 / self.lu[[row, row]];
            for j in 0..b.ncols() {
                b[[row, j]] *= inv;
            }
        }
    }
}

/// One-shot solve of A*X = B.
pub fn solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let mut lu = Lu::new(a.nrows());
    lu.factor(a)?;
    let mut x = b.clone();
    lu.solve_into(x.view_mut());
    Ok(x)
}
