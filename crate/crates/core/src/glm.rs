//! Unpenalized GLM fitting: weighted least squares (gaussian) and IRLS to the
//! score-equation root (binomial).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::formula::Family;

pub const IRLS_SCORE_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coef: DVector<f64>,
    pub family: Family,
    pub iterations: usize,
    pub score_norm: f64,
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Check full column rank via column-pivoted QR; on failure report the rank
/// and the pivot order so the collinear columns can be located.
pub fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let p = x.ncols();
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let kmax = p.min(r.nrows());
    let rmax = (0..kmax).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
    let rank = (0..kmax)
        .filter(|&i| r[(i, i)].abs() > RANK_TOL * rmax.max(1e-300))
        .count();
    if rank < p {
        // Columns pivoted past the rank are linear combinations of earlier ones.
        let mut order = nalgebra::RowDVector::<usize>::from_iterator(p, 0..p);
        qr.p().permute_columns(&mut order);
        let culprits: Vec<usize> = order.iter().skip(rank).copied().collect();
        return Err(Error::Singular(format!(
            "design matrix is rank deficient: rank {rank} < {p} columns; collinear columns {culprits:?}"
        )));
    }
    Ok(())
}

/// Fit a GLM. Gaussian gives the (weighted) least-squares solution; binomial
/// runs IRLS until the score's max-norm drops below 1e-8.
pub fn fit_glm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    weights: Option<&DVector<f64>>,
) -> Result<GlmFit> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Data(format!(
            "response length {} does not match design rows {n}",
            y.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|v| *v < 0.0) {
            return Err(Error::Data("weights must be nonnegative, length n".into()));
        }
    }
    check_full_rank(x)?;
    match family {
        Family::Gaussian => {
            let w = weights.cloned().unwrap_or_else(|| DVector::from_element(n, 1.0));
            let xw = scale_rows(x, &w);
            let gram = x.transpose() * &xw;
            let rhs = xw.transpose() * y;
            let coef = solve_spd(&gram, &rhs)
                .ok_or_else(|| Error::Singular("normal equations not solvable".into()))?;
            Ok(GlmFit {
                coef,
                family,
                iterations: 0,
                score_norm: 0.0,
            })
        }
        Family::Binomial => {
            if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::Data("binomial responses must be 0/1".into()));
            }
            irls_binomial(x, y, weights, None, IRLS_SCORE_TOL, IRLS_MAX_ITER)
        }
    }
}

/// Binomial IRLS with optional prior weights and optional quadratic penalty
/// matrix added to the Hessian (and its gradient to the score).
pub fn irls_binomial(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: Option<&DVector<f64>>,
    penalty: Option<&DMatrix<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<GlmFit> {
    irls_binomial_from(x, y, weights, penalty, tol, max_iter, None)
}

pub fn irls_binomial_from(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: Option<&DVector<f64>>,
    penalty: Option<&DMatrix<f64>>,
    tol: f64,
    max_iter: usize,
    start: Option<DVector<f64>>,
) -> Result<GlmFit> {
    let n = x.nrows();
    let p = x.ncols();
    let w_prior = weights.cloned().unwrap_or_else(|| DVector::from_element(n, 1.0));
    let mut coef = start.unwrap_or_else(|| DVector::zeros(p));
    let mut trace: Vec<f64> = Vec::new();

    let score_of = |coef: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let eta = x * coef;
        let mu = eta.map(expit);
        let resid = DVector::from_iterator(
            n,
            (0..n).map(|i| w_prior[i] * (y[i] - mu[i])),
        );
        let mut score = x.transpose() * &resid;
        if let Some(pen) = penalty {
            score -= pen * coef;
        }
        (score, mu)
    };

    let (mut score, mut mu) = score_of(&coef);
    let mut norm = score.amax();
    for iter in 1..=max_iter {
        if norm < tol {
            return Ok(GlmFit {
                coef,
                family: Family::Binomial,
                iterations: iter - 1,
                score_norm: norm,
            });
        }
        // Newton scoring step.
        let wv = DVector::from_iterator(
            n,
            (0..n).map(|i| w_prior[i] * (mu[i] * (1.0 - mu[i])).max(1e-10)),
        );
        let xw = scale_rows(x, &wv);
        let mut hess = x.transpose() * &xw;
        if let Some(pen) = penalty {
            hess += pen;
        }
        let step = solve_spd(&hess, &score).ok_or_else(|| {
            Error::Singular("IRLS information matrix is singular (possible separation)".into())
        })?;

        // Step-halving on non-decreasing score norm.
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..30 {
            let cand = &coef + scale * &step;
            let (s2, mu2) = score_of(&cand);
            let n2 = s2.amax();
            if n2 < norm || n2 < tol {
                coef = cand;
                score = s2;
                mu = mu2;
                norm = n2;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        trace.push(norm);
        if !accepted {
            return Err(Error::NonConvergence {
                iterations: iter,
                last_norm: norm,
                msg: format!(
                    "IRLS stalled (possible separation); score trace {:?}",
                    tail(&trace)
                ),
            });
        }
    }
    if norm < tol {
        return Ok(GlmFit {
            coef,
            family: Family::Binomial,
            iterations: max_iter,
            score_norm: norm,
        });
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last_norm: norm,
        msg: format!("IRLS hit max iterations; score trace {:?}", tail(&trace)),
    })
}

fn tail(v: &[f64]) -> Vec<f64> {
    v.iter().rev().take(5).rev().copied().collect()
}

pub fn scale_rows(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}

/// Cholesky solve with LU fallback.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.solve(b));
    }
    a.clone().lu().solve(b)
}
