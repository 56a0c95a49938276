//! Design-matrix construction from formulas, with counterfactual treatment
//! override.
//!
//! Spline terms are materialized once against the fitting data: knot range,
//! sum-to-zero constraint and penalty are frozen there, so predictions on new
//! rows (or with the treatment column overridden) evaluate the same basis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::PSplineBasis;
use crate::data::MrtPanel;
use crate::error::{Error, Result};
use crate::formula::{Family, FormulaSpec, Term};

/// Row-major access to model variables. `t` resolves to the decision-point
/// index; anything else is a covariate by name.
pub trait VarSource {
    fn n_rows(&self) -> usize;
    fn var(&self, name: &str) -> Result<Vec<f64>>;
    fn treat(&self) -> Vec<f64>;
}

/// A subset of panel records selected by flat row indices.
pub struct PanelRows<'a> {
    pub panel: &'a MrtPanel,
    pub rows: Vec<usize>,
}

impl<'a> PanelRows<'a> {
    pub fn new(panel: &'a MrtPanel, rows: Vec<usize>) -> Self {
        PanelRows { panel, rows }
    }

    pub fn all(panel: &'a MrtPanel) -> Self {
        PanelRows {
            rows: (0..panel.records().len()).collect(),
            panel,
        }
    }

    /// Available rows (I_t = 1); the only rows that enter nuisance fits.
    pub fn available(panel: &'a MrtPanel) -> Self {
        PanelRows {
            rows: (0..panel.records().len())
                .filter(|&i| panel.records()[i].avail == 1)
                .collect(),
            panel,
        }
    }

    /// Available rows with observed outcome (I_t = 1, R = 1).
    pub fn observed(panel: &'a MrtPanel) -> Self {
        PanelRows {
            rows: (0..panel.records().len())
                .filter(|&i| {
                    let r = &panel.records()[i];
                    r.avail == 1 && r.obs_flag == 1
                })
                .collect(),
            panel,
        }
    }

    pub fn outcomes(&self) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(self.rows.len());
        for (k, &i) in self.rows.iter().enumerate() {
            v[k] = self.panel.records()[i].outcome.ok_or_else(|| {
                Error::Data(format!("row {i} has no observed outcome"))
            })?;
        }
        Ok(v)
    }

    pub fn obs_flags(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|&i| self.panel.records()[i].obs_flag as f64),
        )
    }

    pub fn treats(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|&i| self.panel.records()[i].treat as f64),
        )
    }
}

impl VarSource for PanelRows<'_> {
    fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn var(&self, name: &str) -> Result<Vec<f64>> {
        if name == "t" {
            return Ok(self
                .rows
                .iter()
                .map(|&i| self.panel.records()[i].t as f64)
                .collect());
        }
        let idx = self
            .panel
            .covariate_index(name)
            .ok_or_else(|| Error::Config(format!("unknown variable {name:?}")))?;
        Ok(self
            .rows
            .iter()
            .map(|&i| self.panel.records()[i].covariates[idx])
            .collect())
    }

    fn treat(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|&i| self.panel.records()[i].treat as f64)
            .collect()
    }
}

/// Plain columnar data, used for fixtures and generic fitting.
pub struct ColumnSource {
    pub n: usize,
    pub vars: Vec<(String, Vec<f64>)>,
    pub treat: Vec<f64>,
}

impl VarSource for ColumnSource {
    fn n_rows(&self) -> usize {
        self.n
    }

    fn var(&self, name: &str) -> Result<Vec<f64>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Config(format!("unknown variable {name:?}")))
    }

    fn treat(&self) -> Vec<f64> {
        self.treat.clone()
    }
}

/// A spline term frozen against the fitting data: basis plus the sum-to-zero
/// reparameterization that keeps the additive design full rank next to the
/// intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplinePiece {
    pub var: String,
    pub basis: PSplineBasis,
    /// K x (K-1) orthonormal complement of the column-sum vector of the
    /// fitting-data basis matrix.
    pub constraint: DMatrix<f64>,
    /// Transformed penalty, (K-1) x (K-1).
    pub penalty: DMatrix<f64>,
}

impl SplinePiece {
    /// Evaluate the constrained basis row for a single value.
    fn eval_row(&self, x: f64) -> Vec<f64> {
        let raw = DVector::from_vec(self.basis.eval(x));
        let out = self.constraint.transpose() * raw;
        out.iter().copied().collect()
    }

    pub fn n_cols(&self) -> usize {
        self.basis.num_basis - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub term_idx: usize,
    pub label: String,
    pub treat_interacted: bool,
    pub is_treat_main: bool,
}

/// A block of columns sharing a spline penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBlock {
    pub start: usize,
    pub len: usize,
    pub spline: usize,
}

/// A formula materialized against fitting data, ready to emit design matrices
/// for arbitrary rows and counterfactual arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializedSpec {
    pub family: Family,
    pub terms: Vec<Term>,
    pub splines: Vec<SplinePiece>,
    pub columns: Vec<ColumnMeta>,
    pub penalty_blocks: Vec<PenaltyBlock>,
}

fn spline_signature(term: &Term) -> Option<(&str, usize, usize)> {
    match term {
        Term::Spline {
            var,
            num_basis,
            penalty_order,
        } => Some((var, *num_basis, *penalty_order)),
        _ => None,
    }
}

/// Freeze spline ranges, constraints and penalties against `source`.
pub fn materialize(spec: &FormulaSpec, source: &dyn VarSource) -> Result<MaterializedSpec> {
    let mut splines: Vec<SplinePiece> = Vec::new();
    let mut signatures: Vec<(String, usize, usize)> = Vec::new();

    let mut ensure_spline = |term: &Term| -> Result<()> {
        let Some((var, k, order)) = spline_signature(term) else {
            return Ok(());
        };
        if signatures.iter().any(|(v, kk, oo)| v == var && *kk == k && *oo == order) {
            return Ok(());
        }
        let values = source.var(var)?;
        let mut distinct = values.clone();
        distinct.sort_by(|a, b| a.total_cmp(b));
        distinct.dedup();
        if distinct.len() < k {
            return Err(Error::Domain(format!(
                "spline variable {var:?} has only {} distinct values, need >= {k}",
                distinct.len()
            )));
        }
        let lo = *distinct.first().unwrap();
        let hi = *distinct.last().unwrap();
        let basis = PSplineBasis::new(lo, hi, k, order)?;

        // Column sums of the raw basis over the fitting rows define the
        // sum-to-zero constraint direction.
        let mut colsum = DVector::zeros(k);
        for &x in &values {
            for (j, b) in basis.eval(x).iter().enumerate() {
                colsum[j] += *b;
            }
        }
        let constraint = householder_complement(&colsum);
        let penalty = constraint.transpose() * basis.penalty_matrix() * &constraint;
        splines.push(SplinePiece {
            var: var.to_string(),
            basis,
            constraint,
            penalty,
        });
        signatures.push((var.to_string(), k, order));
        Ok(())
    };

    for term in &spec.terms {
        match term {
            Term::Spline { .. } => ensure_spline(term)?,
            Term::TreatInteract(inner) => ensure_spline(inner)?,
            Term::Linear(v) => {
                source.var(v)?;
            }
            _ => {}
        }
    }

    let spline_index = |term: &Term| -> Option<usize> {
        let (var, k, order) = spline_signature(term)?;
        signatures
            .iter()
            .position(|(v, kk, oo)| v == var && *kk == k && *oo == order)
    };

    let mut columns = Vec::new();
    let mut penalty_blocks = Vec::new();
    for (term_idx, term) in spec.terms.iter().enumerate() {
        let (base, interacted): (&Term, bool) = match term {
            Term::TreatInteract(inner) => (inner.as_ref(), true),
            other => (other, false),
        };
        let start = columns.len();
        match base {
            Term::Intercept => columns.push(ColumnMeta {
                term_idx,
                label: "(intercept)".into(),
                treat_interacted: interacted,
                is_treat_main: false,
            }),
            Term::TreatMain => columns.push(ColumnMeta {
                term_idx,
                label: "a".into(),
                treat_interacted: false,
                is_treat_main: true,
            }),
            Term::Linear(v) => columns.push(ColumnMeta {
                term_idx,
                label: if interacted {
                    format!("a:{v}")
                } else {
                    v.clone()
                },
                treat_interacted: interacted,
                is_treat_main: false,
            }),
            Term::Spline { var, .. } => {
                let si = spline_index(base).unwrap();
                let ncols = splines[si].n_cols();
                for j in 0..ncols {
                    columns.push(ColumnMeta {
                        term_idx,
                        label: if interacted {
                            format!("a:s({var}).{j}")
                        } else {
                            format!("s({var}).{j}")
                        },
                        treat_interacted: interacted,
                        is_treat_main: false,
                    });
                }
                penalty_blocks.push(PenaltyBlock {
                    start,
                    len: ncols,
                    spline: si,
                });
            }
            Term::TreatInteract(_) => unreachable!("validated in FormulaSpec"),
        }
    }

    Ok(MaterializedSpec {
        family: spec.family,
        terms: spec.terms.clone(),
        splines,
        columns,
        penalty_blocks,
    })
}

impl MaterializedSpec {
    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    /// Build the design matrix for `source`, optionally overriding the
    /// treatment column (interaction columns are recomputed accordingly).
    pub fn build_design(
        &self,
        source: &dyn VarSource,
        treat_override: Option<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = source.n_rows();
        let p = self.n_cols();
        let treat: Vec<f64> = match treat_override {
            Some(a) => vec![a; n],
            None => source.treat(),
        };
        let mut x = DMatrix::zeros(n, p);
        let mut col = 0usize;
        let spline_lookup = |term: &Term| -> usize {
            let (var, k, order) = spline_signature(term).unwrap();
            self.splines
                .iter()
                .position(|s| {
                    s.var == var && s.basis.num_basis == k && s.basis.penalty_order == order
                })
                .unwrap()
        };
        for term in &self.terms {
            let (base, interacted) = match term {
                Term::TreatInteract(inner) => (inner.as_ref(), true),
                other => (other, false),
            };
            match base {
                Term::Intercept => {
                    for i in 0..n {
                        x[(i, col)] = if interacted { treat[i] } else { 1.0 };
                    }
                    col += 1;
                }
                Term::TreatMain => {
                    for i in 0..n {
                        x[(i, col)] = treat[i];
                    }
                    col += 1;
                }
                Term::Linear(v) => {
                    let vals = source.var(v)?;
                    for i in 0..n {
                        x[(i, col)] = if interacted { treat[i] * vals[i] } else { vals[i] };
                    }
                    col += 1;
                }
                Term::Spline { .. } => {
                    let piece = &self.splines[spline_lookup(base)];
                    let vals = source.var(&piece.var)?;
                    let ncols = piece.n_cols();
                    for i in 0..n {
                        let row = piece.eval_row(vals[i]);
                        let scale = if interacted { treat[i] } else { 1.0 };
                        for j in 0..ncols {
                            x[(i, col + j)] = scale * row[j];
                        }
                    }
                    col += ncols;
                }
                Term::TreatInteract(_) => unreachable!(),
            }
        }
        debug_assert_eq!(col, p);
        Ok(x)
    }

    /// Full-dimension penalty matrix for a given lambda (zero outside spline
    /// blocks).
    pub fn penalty_matrix(&self, lambda: f64) -> DMatrix<f64> {
        let p = self.n_cols();
        let mut pen = DMatrix::zeros(p, p);
        for block in &self.penalty_blocks {
            let pb = &self.splines[block.spline].penalty;
            for i in 0..block.len {
                for j in 0..block.len {
                    pen[(block.start + i, block.start + j)] += lambda * pb[(i, j)];
                }
            }
        }
        pen
    }

    pub fn has_penalty(&self) -> bool {
        !self.penalty_blocks.is_empty()
    }
}

/// Orthonormal basis of the hyperplane orthogonal to `u`, as the trailing
/// K-1 columns of the Householder reflector sending `u` to a multiple of e1.
fn householder_complement(u: &DVector<f64>) -> DMatrix<f64> {
    let k = u.len();
    let norm = u.norm();
    assert!(norm > 0.0, "constraint vector must be nonzero");
    let mut v = u.clone();
    v[0] += u[0].signum() * norm;
    let vtv = v.dot(&v);
    let mut h = DMatrix::identity(k, k);
    for i in 0..k {
        for j in 0..k {
            h[(i, j)] -= 2.0 * v[i] * v[j] / vtv;
        }
    }
    h.columns(1, k - 1).into_owned()
}
