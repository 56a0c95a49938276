//! Cubic B-spline basis with equally spaced knots and difference penalties
//! (P-splines).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A B-spline basis over a fixed range, with a difference penalty on the
/// coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PSplineBasis {
    pub degree: usize,
    pub num_basis: usize,
    pub penalty_order: usize,
    /// Full padded knot vector, length `num_basis + degree + 1`.
    pub knots: Vec<f64>,
    pub range: (f64, f64),
}

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_NUM_BASIS: usize = 10;
pub const DEFAULT_PENALTY_ORDER: usize = 2;

impl PSplineBasis {
    /// Equally spaced knots over `[lo, hi]` with `degree` padding knots on
    /// each side, giving `num_basis` basis functions that form a partition of
    /// unity on the interior.
    pub fn new(lo: f64, hi: f64, num_basis: usize, penalty_order: usize) -> Result<Self> {
        let degree = DEFAULT_DEGREE;
        if num_basis < penalty_order + 2 {
            return Err(Error::Config(format!(
                "num_basis {num_basis} must be >= penalty_order + 2 = {}",
                penalty_order + 2
            )));
        }
        if num_basis <= degree {
            return Err(Error::Config(format!(
                "num_basis {num_basis} must exceed spline degree {degree}"
            )));
        }
        if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Domain(format!(
                "degenerate spline range [{lo}, {hi}]"
            )));
        }
        let n_seg = num_basis - degree;
        let h = (hi - lo) / n_seg as f64;
        let knots: Vec<f64> = (0..num_basis + degree + 1)
            .map(|i| lo + (i as f64 - degree as f64) * h)
            .collect();
        Ok(PSplineBasis {
            degree,
            num_basis,
            penalty_order,
            knots,
            range: (lo, hi),
        })
    }

    /// Evaluate all basis functions at `x`. Points outside the fit range are
    /// clamped to the boundary.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let (lo, hi) = self.range;
        let x = x.clamp(lo, hi);
        let deg = self.degree;
        let n_seg = self.num_basis - deg;

        // Knot span j with knots[j] <= x < knots[j+1]; the last interior span
        // is closed at hi.
        let h = (hi - lo) / n_seg as f64;
        let mut seg = ((x - lo) / h).floor() as usize;
        if seg >= n_seg {
            seg = n_seg - 1;
        }
        let j = seg + deg;

        // de Boor's algorithm for the deg+1 nonzero basis values at x.
        let mut vals = vec![0.0f64; deg + 1];
        let mut left = vec![0.0f64; deg + 1];
        let mut right = vec![0.0f64; deg + 1];
        vals[0] = 1.0;
        for d in 1..=deg {
            left[d] = x - self.knots[j + 1 - d];
            right[d] = self.knots[j + d] - x;
            let mut saved = 0.0;
            for r in 0..d {
                let tmp = vals[r] / (right[r + 1] + left[d - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[d - r] * tmp;
            }
            vals[d] = saved;
        }

        let mut out = vec![0.0f64; self.num_basis];
        for (r, v) in vals.iter().enumerate() {
            out[j - deg + r] = *v;
        }
        out
    }

    /// Difference matrix of the configured order, shape
    /// `(num_basis - order) x num_basis`.
    pub fn difference_matrix(&self) -> DMatrix<f64> {
        difference_matrix(self.num_basis, self.penalty_order)
    }

    /// Penalty matrix `D^T D`; symmetric positive semidefinite.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let d = self.difference_matrix();
        d.transpose() * d
    }
}

pub fn difference_matrix(k: usize, order: usize) -> DMatrix<f64> {
    assert!(k > order);
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        let mut next = DMatrix::<f64>::zeros(rows, k);
        for r in 0..rows {
            for c in 0..k {
                next[(r, c)] = d[(r + 1, c)] - d[(r, c)];
            }
        }
        d = next;
    }
    d
}
