//! The estimating-equation core: stabilized weights, residuals, the augmented
//! per-record estimating function, and the Stage-2 solvers for identity and
//! log links.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::MrtPanel;
use crate::design::PanelRows;
use crate::error::{Error, Result};
use crate::model::{CeeModel, Link, PiMode};
use crate::nuisance::{
    fit_missingness, fit_numerator, fit_outcome, Engine, FittedNuisance, Numerator, NumeratorMode,
};
use crate::variance;

/// Condition-number threshold separating model misspecification from
/// numerical noise.
pub const COND_LIMIT: f64 = 1e10;
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 100;

/// Per-record stabilized weight and window weight. Unavailable records carry
/// w = 0 as a marker; they contribute nothing downstream.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub w: Vec<f64>,
    pub w_delta: Vec<f64>,
}

/// Stabilized inverse probability weights and the post-decision window
/// weights changing the regime from p to pi.
pub fn compute_weights(panel: &MrtPanel, ptilde: &[f64], model: &CeeModel) -> Result<WeightSet> {
    let records = panel.records();
    if ptilde.len() != records.len() {
        return Err(Error::Data("ptilde length mismatch".into()));
    }
    let t_max = panel.t_max();
    let mut w = vec![0.0; records.len()];
    let mut w_delta = vec![1.0; records.len()];
    for (idx, rec) in records.iter().enumerate() {
        if rec.avail == 0 {
            continue;
        }
        let p = rec.prob_treat;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Data(format!(
                "available record (individual {}, t={}) has prob_treat {} outside (0,1); \
                 run validate_positivity",
                rec.individual_id, rec.t, p
            )));
        }
        let pt = ptilde[idx];
        w[idx] = if rec.treat == 1 { pt / p } else { (1.0 - pt) / (1.0 - p) };

        if model.delta > 1 {
            let i = idx / t_max as usize;
            let mut prod = 1.0;
            for u in rec.t + 1..rec.t + model.delta {
                if u > t_max {
                    break;
                }
                let ru = &records[panel.record_index(i, u)];
                if ru.avail == 0 {
                    // A_u = 0 deterministically and pi_u = 0; the factor is 1.
                    continue;
                }
                let pi_u = match model.pi_mode {
                    PiMode::Constant(c) => c,
                    PiMode::Column => ru.pi_prob.ok_or_else(|| {
                        Error::Data(format!(
                            "delta > 1 needs pi_prob at individual {}, t={}",
                            ru.individual_id, ru.t
                        ))
                    })?,
                    PiMode::Irrelevant => unreachable!("validated in CeeModel"),
                };
                let pu = ru.prob_treat;
                if !(pu > 0.0 && pu < 1.0) {
                    return Err(Error::Data(format!(
                        "prob_treat {} outside (0,1) at individual {}, t={}",
                        pu, ru.individual_id, ru.t
                    )));
                }
                prod *= if ru.treat == 1 {
                    pi_u / pu
                } else {
                    (1.0 - pi_u) / (1.0 - pu)
                };
            }
            w_delta[idx] = prod;
        }
    }
    Ok(WeightSet { w, w_delta })
}

/// Nuisance functions evaluated per panel record: missingness propensity at
/// the observed arm, outcome regression at both arms, numerator probability.
#[derive(Debug, Clone)]
pub struct EvaluatedNuisances {
    pub e: Vec<f64>,
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
    pub ptilde: Vec<f64>,
}

impl EvaluatedNuisances {
    pub fn from_fits(
        panel: &MrtPanel,
        e_fit: &FittedNuisance,
        mu_fit: &FittedNuisance,
        numerator: &Numerator,
    ) -> Result<Self> {
        let rows = PanelRows::all(panel);
        Ok(EvaluatedNuisances {
            e: e_fit.predict(&rows)?,
            mu1: mu_fit.predict_arm(&rows, 1)?,
            mu0: mu_fit.predict_arm(&rows, 0)?,
            ptilde: numerator.predict(&rows)?,
        })
    }

    /// Complete-data regime: missingness propensity identically 1.
    pub fn with_unit_e(mut self) -> Self {
        self.e.iter_mut().for_each(|v| *v = 1.0);
        self
    }
}

/// epsilon_t for the identity link:
/// Y - (A + p - 1) f'beta - (1 - p) mu1 - p mu0.
pub fn residual_identity(y: f64, a: f64, p: f64, mu1: f64, mu0: f64, fbeta: f64) -> f64 {
    y - (a + p - 1.0) * fbeta - (1.0 - p) * mu1 - p * mu0
}

/// epsilon_t for the log link:
/// exp(-A f'beta) Y - (1 - p) exp(-f'beta) mu1 - p mu0.
pub fn residual_log(y: f64, a: f64, p: f64, mu1: f64, mu0: f64, fbeta: f64) -> Result<f64> {
    let e1 = guarded_exp(-a * fbeta)?;
    let e2 = guarded_exp(-fbeta)?;
    Ok(e1 * y - (1.0 - p) * e2 * mu1 - p * mu0)
}

fn guarded_exp(x: f64) -> Result<f64> {
    if x > 700.0 {
        return Err(Error::Domain(format!("exp overflow: exp({x})")));
    }
    Ok(x.exp())
}

/// The augmented estimating-function scalar for one record (everything except
/// the (A - ptilde) f factor). When R = 0 the outcome term is structurally
/// absent.
#[allow(clippy::too_many_arguments)]
fn utilde_scalar(
    link: Link,
    r: f64,
    e: f64,
    y: Option<f64>,
    a: f64,
    p: f64,
    mu1: f64,
    mu0: f64,
    fbeta: f64,
) -> Result<f64> {
    let obs_part = if r == 1.0 {
        let y = y.ok_or_else(|| Error::Data("R=1 record without outcome".into()))?;
        let centered = y - a * mu1 - (1.0 - a) * mu0;
        match link {
            Link::Identity => centered / e,
            Link::Log => guarded_exp(-a * fbeta)? * centered / e,
        }
    } else {
        0.0
    };
    let aug = match link {
        Link::Identity => (a + p - 1.0) * (mu1 - mu0 - fbeta),
        Link::Log => (a + p - 1.0) * (guarded_exp(-fbeta)? * mu1 - mu0),
    };
    Ok(obs_part + aug)
}

/// The per-record augmented estimating function (a p-vector). Unavailable
/// records short-circuit to zero before any nuisance value is touched.
#[allow(clippy::too_many_arguments)]
pub fn utilde(
    panel: &MrtPanel,
    idx: usize,
    nuis: &EvaluatedNuisances,
    weights: &WeightSet,
    fmat: &DMatrix<f64>,
    beta: &DVector<f64>,
    link: Link,
) -> Result<DVector<f64>> {
    let rec = &panel.records()[idx];
    let p_dim = beta.len();
    if rec.avail == 0 {
        return Ok(DVector::zeros(p_dim));
    }
    let f = fmat.row(idx).transpose();
    let fbeta = f.dot(beta);
    let s = utilde_scalar(
        link,
        rec.obs_flag as f64,
        nuis.e[idx],
        rec.outcome,
        rec.treat as f64,
        rec.prob_treat,
        nuis.mu1[idx],
        nuis.mu0[idx],
        fbeta,
    )?;
    let scale = weights.w[idx] * weights.w_delta[idx] * s * (rec.treat as f64 - nuis.ptilde[idx]);
    Ok(scale * f)
}

/// Per-individual sums of the estimating function over t = 1..T.
pub fn utilde_individual_sums(
    panel: &MrtPanel,
    nuis: &EvaluatedNuisances,
    weights: &WeightSet,
    fmat: &DMatrix<f64>,
    beta: &DVector<f64>,
    link: Link,
) -> Result<Vec<DVector<f64>>> {
    let n = panel.n_individuals();
    let t_max = panel.t_max() as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum = DVector::zeros(beta.len());
        for k in 0..t_max {
            sum += utilde(panel, i * t_max + k, nuis, weights, fmat, beta, link)?;
        }
        out.push(sum);
    }
    Ok(out)
}

/// Empirical average over individuals of the per-individual sums.
pub fn estfn_total(
    panel: &MrtPanel,
    nuis: &EvaluatedNuisances,
    weights: &WeightSet,
    fmat: &DMatrix<f64>,
    beta: &DVector<f64>,
    link: Link,
) -> Result<DVector<f64>> {
    let sums = utilde_individual_sums(panel, nuis, weights, fmat, beta, link)?;
    let n = sums.len() as f64;
    Ok(sums.into_iter().sum::<DVector<f64>>() / n)
}

/// Analytic derivative of the averaged estimating function with respect to
/// beta, reused as the sandwich bread.
pub fn estfn_jacobian(
    panel: &MrtPanel,
    nuis: &EvaluatedNuisances,
    weights: &WeightSet,
    fmat: &DMatrix<f64>,
    beta: &DVector<f64>,
    link: Link,
) -> Result<DMatrix<f64>> {
    let p_dim = beta.len();
    let mut jac = DMatrix::zeros(p_dim, p_dim);
    for (idx, rec) in panel.records().iter().enumerate() {
        if rec.avail == 0 {
            continue;
        }
        let f = fmat.row(idx).transpose();
        let a = rec.treat as f64;
        let p = rec.prob_treat;
        let ww = weights.w[idx] * weights.w_delta[idx];
        let centered_scale = a - nuis.ptilde[idx];
        let ds = match link {
            Link::Identity => -(a + p - 1.0),
            Link::Log => {
                let fbeta = f.dot(beta);
                let r = rec.obs_flag as f64;
                let mut v = -(a + p - 1.0) * guarded_exp(-fbeta)? * nuis.mu1[idx];
                if r == 1.0 {
                    let y = rec.outcome.expect("validated");
                    let centered = y - a * nuis.mu1[idx] - (1.0 - a) * nuis.mu0[idx];
                    v += -a * guarded_exp(-a * fbeta)? * centered / nuis.e[idx];
                }
                v
            }
        };
        jac += (ww * centered_scale * ds) * (&f * f.transpose());
    }
    Ok(jac / panel.n_individuals() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    ClosedForm,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    Parametric,
    Nonparametric,
}

/// The fitted causal excursion effect: point estimate, sandwich covariance
/// and solver diagnostics.
#[derive(Debug, Clone)]
pub struct CeeEstimate {
    pub beta: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub solver: SolverKind,
    pub iterations: usize,
    pub final_estfn_norm: f64,
    pub variance_kind: VarianceKind,
    pub feature_labels: Vec<String>,
    pub min_e_hat: f64,
    pub warnings: Vec<String>,
}

impl CeeEstimate {
    pub fn se(&self) -> Vec<f64> {
        (0..self.beta.len())
            .map(|j| self.vcov[(j, j)].max(0.0).sqrt())
            .collect()
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Closed-form root for the identity link: the estimating function is linear
/// in beta, U(beta) = b - M beta.
pub fn solve_identity(
    panel: &MrtPanel,
    nuis: &EvaluatedNuisances,
    weights: &WeightSet,
    fmat: &DMatrix<f64>,
) -> Result<(DVector<f64>, usize)> {
    let p_dim = fmat.ncols();
    let zero = DVector::zeros(p_dim);
    // -Jacobian at any beta is M; the total at beta=0 is b.
    let m = -estfn_jacobian(panel, nuis, weights, fmat, &zero, Link::Identity)?;
    let b = estfn_total(panel, nuis, weights, fmat, &zero, Link::Identity)?;
    let cond = condition_number(&m);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::Estimability(format!(
            "estimating-equation system has condition number {cond:.3e}; \
             the effect-modifier features are (nearly) collinear - consider a smaller feature map"
        )));
    }
    let beta = m
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Estimability("singular estimating-equation system".into()))?;
    Ok((beta, 0))
}

/// Newton iterations with analytic Jacobian and step-halving for the log
/// link.
pub fn solve_log(
    panel: &MrtPanel,
    nuis: &EvaluatedNuisances,
    weights: &WeightSet,
    fmat: &DMatrix<f64>,
    init: Option<DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    let p_dim = fmat.ncols();
    let mut beta = init.unwrap_or_else(|| DVector::zeros(p_dim));
    let mut u = estfn_total(panel, nuis, weights, fmat, &beta, Link::Log)?;
    let mut norm = u.amax();
    let mut trace = Vec::new();
    for iter in 1..=max_iter {
        if norm < tol {
            return Ok((beta, iter - 1));
        }
        let jac = estfn_jacobian(panel, nuis, weights, fmat, &beta, Link::Log)?;
        let step = jac
            .lu()
            .solve(&u)
            .ok_or_else(|| Error::Singular("singular Jacobian in Newton solve".into()))?;
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..40 {
            let cand = &beta - scale * &step;
            // An Err here means overflow at this step length; halve and retry.
            if let Ok(u2) = estfn_total(panel, nuis, weights, fmat, &cand, Link::Log) {
                let n2 = u2.amax();
                if n2 < norm || n2 < tol {
                    beta = cand;
                    u = u2;
                    norm = n2;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        trace.push(norm);
        if !accepted {
            return Err(Error::NonConvergence {
                iterations: iter,
                last_norm: norm,
                msg: format!("Newton stalled; norm trace {trace:?}"),
            });
        }
    }
    if norm < tol {
        return Ok((beta, max_iter));
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last_norm: norm,
        msg: format!("Newton hit max iterations; norm trace {trace:?}"),
    })
}

/// Stage-1 configuration for the full two-stage estimator.
#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub e_spec: crate::formula::FormulaSpec,
    pub mu_spec: crate::formula::FormulaSpec,
    pub engine: Engine,
    pub numerator: NumeratorMode,
    pub variance: VarianceSelect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceSelect {
    /// Parametric stacking for GLM Stage 1, nonparametric plug-in for GAM.
    Auto,
    Parametric,
    Nonparametric,
}

/// Stage-1 fits kept alongside the estimate for variance stacking and
/// diagnostics.
#[derive(Debug, Clone)]
pub struct StageOneFits {
    pub e_fit: FittedNuisance,
    pub mu_fit: FittedNuisance,
    pub numerator: Numerator,
}

/// The full two-stage doubly robust estimator: fit nuisances, solve the
/// estimating equation, estimate the sandwich covariance.
pub fn estimate_cee(
    panel: &MrtPanel,
    model: &CeeModel,
    stage1: &Stage1Config,
) -> Result<(CeeEstimate, StageOneFits)> {
    let e_fit = fit_missingness(panel, &stage1.e_spec, &stage1.engine)?;
    let mu_fit = fit_outcome(panel, &stage1.mu_spec, &stage1.engine)?;
    let numerator = fit_numerator(panel, &stage1.numerator)?;
    let nuis = EvaluatedNuisances::from_fits(panel, &e_fit, &mu_fit, &numerator)?;

    let variance_kind = match (stage1.variance, &stage1.engine) {
        (VarianceSelect::Parametric, _) => VarianceKind::Parametric,
        (VarianceSelect::Nonparametric, _) => VarianceKind::Nonparametric,
        (VarianceSelect::Auto, Engine::Glm) => VarianceKind::Parametric,
        (VarianceSelect::Auto, Engine::Gam { .. }) => VarianceKind::Nonparametric,
    };

    let mut est = estimate_with_nuisances(panel, model, &nuis, VarianceKind::Nonparametric)?;
    if variance_kind == VarianceKind::Parametric {
        est.vcov = variance::sandwich_parametric(
            panel, &e_fit, &mu_fit, &nuis, &est.beta, model,
        )?;
        est.variance_kind = VarianceKind::Parametric;
    }

    Ok((
        est,
        StageOneFits {
            e_fit,
            mu_fit,
            numerator,
        },
    ))
}

/// Stage 2 only: solve and attach a sandwich covariance given already
/// evaluated nuisance values. This is the entry point for oracle-nuisance
/// runs and the complete-data reduction.
pub fn estimate_with_nuisances(
    panel: &MrtPanel,
    model: &CeeModel,
    nuis: &EvaluatedNuisances,
    variance_kind: VarianceKind,
) -> Result<CeeEstimate> {
    if variance_kind == VarianceKind::Parametric {
        return Err(Error::Config(
            "parametric variance needs Stage-1 fits; use estimate_cee".into(),
        ));
    }
    let fmat = model.feature_matrix(panel)?;
    let weights = compute_weights(panel, &nuis.ptilde, model)?;

    let (beta, iterations, solver) = match model.link {
        Link::Identity => {
            let (b, it) = solve_identity(panel, nuis, &weights, &fmat)?;
            (b, it, SolverKind::ClosedForm)
        }
        Link::Log => {
            let (b, it) = solve_log(
                panel,
                nuis,
                &weights,
                &fmat,
                None,
                NEWTON_TOL,
                NEWTON_MAX_ITER,
            )?;
            (b, it, SolverKind::Newton)
        }
    };
    let final_norm = estfn_total(panel, nuis, &weights, &fmat, &beta, model.link)?.amax();

    let vcov = variance::sandwich_nonparametric(panel, nuis, &weights, &fmat, &beta, model)?;

    let mut warnings = Vec::new();
    let min_e_hat = panel
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.avail == 1)
        .map(|(i, _)| nuis.e[i])
        .fold(f64::INFINITY, f64::min);
    if min_e_hat < 0.01 {
        warnings.push(format!(
            "min fitted missingness propensity {min_e_hat:.2e} < 0.01; positivity for the \
             missingness process is implausible"
        ));
    }

    Ok(CeeEstimate {
        beta,
        vcov,
        solver,
        iterations,
        final_estfn_norm: final_norm,
        variance_kind,
        feature_labels: model.features.iter().map(|f| f.label()).collect(),
        min_e_hat,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DecisionRecord;
    use crate::model::Feature;
    use approx::assert_abs_diff_eq;

    #[allow(clippy::too_many_arguments)]
    fn rec(
        id: &str,
        t: u32,
        avail: u8,
        treat: u8,
        p: f64,
        obs: u8,
        y: Option<f64>,
        z: f64,
    ) -> DecisionRecord {
        DecisionRecord {
            individual_id: id.into(),
            t,
            avail,
            treat,
            prob_treat: p,
            obs_flag: obs,
            outcome: y,
            covariates: vec![z],
            pi_prob: None,
        }
    }

    fn const_nuis(n: usize, e: f64, mu1: f64, mu0: f64, pt: f64) -> EvaluatedNuisances {
        EvaluatedNuisances {
            e: vec![e; n],
            mu1: vec![mu1; n],
            mu0: vec![mu0; n],
            ptilde: vec![pt; n],
        }
    }

    #[test]
    fn stabilized_weight_hand_values() {
        let recs = vec![
            rec("a", 1, 1, 1, 0.4, 1, Some(0.0), 0.0),
            rec("b", 1, 1, 0, 0.4, 1, Some(0.0), 0.0),
        ];
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model = CeeModel::marginal(Link::Identity);
        let ws = compute_weights(&panel, &[0.6, 0.6], &model).unwrap();
        assert_abs_diff_eq!(ws.w[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ws.w[1], 0.4 / 0.6, epsilon = 1e-12);
        assert!(ws.w_delta.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ptilde_equal_p_gives_unit_weights() {
        let recs = vec![
            rec("a", 1, 1, 1, 0.4, 1, Some(0.0), 0.0),
            rec("a", 2, 0, 0, 0.0, 1, Some(0.0), 0.0),
            rec("b", 1, 1, 0, 0.4, 1, Some(0.0), 0.0),
            rec("b", 2, 1, 1, 0.4, 1, Some(0.0), 0.0),
        ];
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model = CeeModel::marginal(Link::Identity);
        let ws = compute_weights(&panel, &[0.4; 4], &model).unwrap();
        for (idx, r) in panel.records().iter().enumerate() {
            if r.avail == 1 {
                assert_abs_diff_eq!(ws.w[idx], 1.0, epsilon = 1e-12);
            } else {
                assert_eq!(ws.w[idx], 0.0);
            }
        }
    }

    #[test]
    fn window_weight_pi_zero_hand_product() {
        // Delta = 3, pi = 0, A_{t+1} = A_{t+2} = 0, p_u = 0.4:
        // w_delta = (1/0.6)^2.
        let mut recs = Vec::new();
        for id in ["a", "b"] {
            recs.push(rec(id, 1, 1, 1, 0.4, 1, Some(0.0), 0.0));
            recs.push(rec(id, 2, 1, 0, 0.4, 1, Some(0.0), 0.0));
            recs.push(rec(id, 3, 1, 0, 0.4, 1, Some(0.0), 0.0));
        }
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 3).unwrap();
        let model = CeeModel::new(
            Link::Identity,
            vec![Feature::Intercept],
            3,
            PiMode::Constant(0.0),
        )
        .unwrap();
        let ws = compute_weights(&panel, &[0.4; 6], &model).unwrap();
        let idx = panel.record_index(0, 1);
        assert_abs_diff_eq!(ws.w_delta[idx], (1.0f64 / 0.6).powi(2), epsilon = 1e-12);
    }

    #[test]
    fn residual_identity_hand_values() {
        // Y=2, A=1, p=0.5, mu1=1, mu0=0.5, fbeta=0.3.
        let eps = residual_identity(2.0, 1.0, 0.5, 1.0, 0.5, 0.3);
        assert_abs_diff_eq!(eps, 2.0 - 0.15 - 0.5 - 0.25, epsilon = 1e-12);
        // All corrections vanish.
        assert_abs_diff_eq!(residual_identity(3.7, 1.0, 0.4, 0.0, 0.0, 0.0), 3.7);
        // Symmetric centering: p=0.5, A=0, mu1=mu0=m, beta=0.
        assert_abs_diff_eq!(residual_identity(1.0, 0.0, 0.5, 0.8, 0.8, 0.0), 1.0 - 0.8);
    }

    #[test]
    fn residual_log_hand_values() {
        // beta = 0: plain centering.
        assert_abs_diff_eq!(
            residual_log(2.0, 1.0, 0.3, 1.0, 0.5, 0.0).unwrap(),
            2.0 - 0.7 - 0.15,
            epsilon = 1e-12
        );
        // exp(-ln 2) = 1/2.
        assert_abs_diff_eq!(
            residual_log(1.0, 1.0, 0.4, 0.0, 0.0, 2f64.ln()).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        // A=0, Y=0.8, p=0.4, mu1=1, mu0=0.5, fbeta=ln 2.
        assert_abs_diff_eq!(
            residual_log(0.8, 0.0, 0.4, 1.0, 0.5, 2f64.ln()).unwrap(),
            0.8 - 0.6 * 0.5 - 0.4 * 0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn utilde_unavailable_is_zero() {
        let recs = vec![
            rec("a", 1, 0, 0, 0.0, 0, None, 0.0),
            rec("b", 1, 1, 1, 0.4, 1, Some(1.0), 0.0),
        ];
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model = CeeModel::marginal(Link::Identity);
        let fmat = model.feature_matrix(&panel).unwrap();
        let nuis = const_nuis(2, 0.5, 0.0, 0.0, 0.4);
        let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
        let u = utilde(&panel, 0, &nuis, &ws, &fmat, &DVector::zeros(1), Link::Identity).unwrap();
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn utilde_hand_evaluation_identity() {
        // f=(1,Z), Z=2, A=1, p=0.4, ptilde=0.6, R=1, e=0.5, Y=3, mu1=2, mu0=1,
        // beta=(0.5,0.25), w_delta=1 -> (1.2, 2.4).
        let recs = vec![
            rec("a", 1, 1, 1, 0.4, 1, Some(3.0), 2.0),
            rec("b", 1, 1, 0, 0.4, 1, Some(0.0), 0.0),
        ];
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model = CeeModel::new(
            Link::Identity,
            vec![Feature::Intercept, Feature::Covariate("z".into())],
            1,
            PiMode::Irrelevant,
        )
        .unwrap();
        let fmat = model.feature_matrix(&panel).unwrap();
        let nuis = const_nuis(2, 0.5, 2.0, 1.0, 0.6);
        let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
        let beta = DVector::from_vec(vec![0.5, 0.25]);
        let u = utilde(&panel, 0, &nuis, &ws, &fmat, &beta, Link::Identity).unwrap();
        assert_abs_diff_eq!(u[0], 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 2.4, epsilon = 1e-12);
    }

    #[test]
    fn reduction_to_full_data_estimating_function() {
        // With R=1 and e=1, utilde equals I w w_delta eps (A - ptilde) f for
        // random inputs, both links.
        let mut state = 99u64;
        let mut unif = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let a = if unif() < 0.5 { 1 } else { 0 };
            let p = 0.2 + 0.6 * unif();
            let y = 4.0 * unif() + 0.5;
            let z = 4.0 * unif() - 2.0;
            let recs = vec![
                rec("a", 1, 1, a, p, 1, Some(y), z),
                rec("b", 1, 1, 0, 0.4, 1, Some(0.0), 0.0),
            ];
            let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
            for link in [Link::Identity, Link::Log] {
                let model = CeeModel::new(
                    link,
                    vec![Feature::Intercept, Feature::Covariate("z".into())],
                    1,
                    PiMode::Irrelevant,
                )
                .unwrap();
                let fmat = model.feature_matrix(&panel).unwrap();
                let mu1 = 2.0 * unif();
                let mu0 = unif();
                let pt = 0.3 + 0.4 * unif();
                let nuis = const_nuis(2, 1.0, mu1, mu0, pt);
                let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
                let beta = DVector::from_vec(vec![0.4 * unif(), 0.2 * unif()]);
                let idx = panel.record_index(0, 1);
                let u = utilde(&panel, idx, &nuis, &ws, &fmat, &beta, link).unwrap();
                let f = fmat.row(idx).transpose();
                let fbeta = f.dot(&beta);
                let af = panel.records()[idx].treat as f64;
                let pf = panel.records()[idx].prob_treat;
                let eps = match link {
                    Link::Identity => residual_identity(y, af, pf, mu1, mu0, fbeta),
                    Link::Log => residual_log(y, af, pf, mu1, mu0, fbeta).unwrap(),
                };
                let want = ws.w[idx] * ws.w_delta[idx] * eps * (af - pt) * f;
                for j in 0..2 {
                    assert_abs_diff_eq!(u[j], want[j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn estfn_single_available_record() {
        let recs = vec![
            rec("a", 1, 1, 1, 0.4, 1, Some(2.0), 1.0),
            rec("a", 2, 0, 0, 0.0, 0, None, 0.0),
        ];
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model = CeeModel::marginal(Link::Identity);
        let fmat = model.feature_matrix(&panel).unwrap();
        let nuis = const_nuis(2, 0.8, 0.5, 0.2, 0.4);
        let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
        let beta = DVector::from_vec(vec![0.1]);
        let total = estfn_total(&panel, &nuis, &ws, &fmat, &beta, Link::Identity).unwrap();
        let u = utilde(&panel, 0, &nuis, &ws, &fmat, &beta, Link::Identity).unwrap();
        assert_abs_diff_eq!(total[0], u[0], epsilon = 1e-14);
    }

    #[test]
    fn solve_identity_is_exact_root() {
        let mut recs = Vec::new();
        let mut state = 3u64;
        let mut unif = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for i in 0..6 {
            for t in 1..=3 {
                let a = if unif() < 0.4 { 1 } else { 0 };
                let obs = if unif() < 0.8 { 1 } else { 0 };
                let z = 4.0 * unif() - 2.0;
                let y = if obs == 1 {
                    Some(1.0 + 1.5 * a as f64 + 0.5 * z + unif())
                } else {
                    None
                };
                recs.push(rec(&format!("i{i}"), t, 1, a, 0.4, obs, y, z));
            }
        }
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model = CeeModel::new(
            Link::Identity,
            vec![Feature::Intercept, Feature::Covariate("z".into())],
            1,
            PiMode::Irrelevant,
        )
        .unwrap();
        let fmat = model.feature_matrix(&panel).unwrap();
        let n = panel.records().len();
        let nuis = const_nuis(n, 0.8, 1.0, 0.3, 0.4);
        let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
        let (beta, _) = solve_identity(&panel, &nuis, &ws, &fmat).unwrap();
        let total = estfn_total(&panel, &nuis, &ws, &fmat, &beta, Link::Identity).unwrap();
        assert!(total.amax() < 1e-12, "residual {}", total.amax());
    }

    #[test]
    fn solve_identity_noiseless_saturated_effect() {
        // Y = 1.5 A + baseline exactly, nuisances exact: beta = 1.5.
        let mut recs = Vec::new();
        for (i, id) in ["a", "b", "c", "d"].iter().enumerate() {
            for t in 1..=2 {
                let a = ((i + t as usize) % 2) as u8;
                let y = 1.5 * a as f64 + 0.7;
                recs.push(rec(id, t, 1, a, 0.4, 1, Some(y), 0.0));
            }
        }
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model = CeeModel::marginal(Link::Identity);
        let fmat = model.feature_matrix(&panel).unwrap();
        let nuis = const_nuis(8, 1.0, 2.2, 0.7, 0.4);
        let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
        let (beta, _) = solve_identity(&panel, &nuis, &ws, &fmat).unwrap();
        assert_abs_diff_eq!(beta[0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn collinear_features_raise_estimability_error() {
        let mut recs = Vec::new();
        for id in ["a", "b", "c"] {
            for t in 1..=2 {
                recs.push(rec(id, t, 1, (t % 2) as u8, 0.4, 1, Some(1.0), 3.0));
            }
        }
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model = CeeModel::new(
            Link::Identity,
            vec![Feature::Intercept, Feature::Covariate("z".into())],
            1,
            PiMode::Irrelevant,
        )
        .unwrap();
        let fmat = model.feature_matrix(&panel).unwrap();
        let nuis = const_nuis(6, 1.0, 0.0, 0.0, 0.4);
        let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
        let err = solve_identity(&panel, &nuis, &ws, &fmat).unwrap_err();
        assert!(matches!(err, Error::Estimability(_)), "{err}");
    }

    #[test]
    fn newton_matches_bisection_oracle_scalar() {
        // 2-record toy panel, f=(1): compare against bisection on the scalar
        // estimating function.
        let recs = vec![
            rec("a", 1, 1, 1, 0.4, 1, Some(2.0), 0.0),
            rec("b", 1, 1, 0, 0.4, 1, Some(0.8), 0.0),
        ];
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model = CeeModel::new(
            Link::Log,
            vec![Feature::Intercept],
            1,
            PiMode::Irrelevant,
        )
        .unwrap();
        let fmat = model.feature_matrix(&panel).unwrap();
        let nuis = const_nuis(2, 0.9, 1.4, 0.9, 0.5);
        let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
        let (beta, _) =
            solve_log(&panel, &nuis, &ws, &fmat, None, 1e-12, 200).unwrap();

        let eval = |b: f64| {
            estfn_total(
                &panel,
                &nuis,
                &ws,
                &fmat,
                &DVector::from_vec(vec![b]),
                Link::Log,
            )
            .unwrap()[0]
        };
        let (mut lo, mut hi) = (-5.0, 5.0);
        assert!(eval(lo) * eval(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if eval(lo) * eval(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert_abs_diff_eq!(beta[0], 0.5 * (lo + hi), epsilon = 1e-10);
    }

    #[test]
    fn newton_converges_from_far_init() {
        let recs = vec![
            rec("a", 1, 1, 1, 0.4, 1, Some(2.0), 0.0),
            rec("b", 1, 1, 0, 0.4, 1, Some(0.8), 0.0),
        ];
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let model =
            CeeModel::new(Link::Log, vec![Feature::Intercept], 1, PiMode::Irrelevant).unwrap();
        let fmat = model.feature_matrix(&panel).unwrap();
        let nuis = const_nuis(2, 0.9, 1.4, 0.9, 0.5);
        let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
        let far = DVector::from_vec(vec![10.0]);
        let (b_far, _) =
            solve_log(&panel, &nuis, &ws, &fmat, Some(far), 1e-12, 500).unwrap();
        let (b_zero, _) = solve_log(&panel, &nuis, &ws, &fmat, None, 1e-12, 500).unwrap();
        assert_abs_diff_eq!(b_far[0], b_zero[0], epsilon = 1e-9);
    }

    #[test]
    fn scaling_features_rescales_beta_inverse() {
        let mut recs = Vec::new();
        let mut state = 11u64;
        let mut unif = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for i in 0..8 {
            for t in 1..=3 {
                let a = if unif() < 0.4 { 1 } else { 0 };
                let z = 4.0 * unif() - 2.0;
                let y = 1.0 + 2.0 * a as f64 + 0.3 * z + unif();
                recs.push(rec(&format!("i{i}"), t, 1, a, 0.4, 1, Some(y), z));
            }
        }
        let panel = MrtPanel::from_records(recs.clone(), vec!["z".into()], 1).unwrap();
        let n = panel.records().len();
        let nuis = const_nuis(n, 1.0, 0.0, 0.0, 0.4);

        let model = CeeModel::new(
            Link::Identity,
            vec![Feature::Intercept, Feature::Covariate("z".into())],
            1,
            PiMode::Irrelevant,
        )
        .unwrap();
        let fmat = model.feature_matrix(&panel).unwrap();
        let ws = compute_weights(&panel, &nuis.ptilde, &model).unwrap();
        let (beta, _) = solve_identity(&panel, &nuis, &ws, &fmat).unwrap();

        let scaled = fmat.clone() * 4.0;
        let (beta_s, _) = solve_identity(&panel, &nuis, &ws, &scaled).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(beta_s[j] * 4.0, beta[j], epsilon = 1e-8);
        }
        // Fitted CEE values unchanged.
        let fit1 = fmat * beta;
        let fit2 = scaled * beta_s;
        for i in 0..n {
            assert_abs_diff_eq!(fit1[i], fit2[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn individual_order_invariance() {
        let recs = vec![
            rec("b", 1, 1, 1, 0.4, 1, Some(2.0), 0.5),
            rec("a", 1, 1, 0, 0.4, 1, Some(0.8), -0.5),
            rec("c", 1, 1, 1, 0.4, 0, None, 1.0),
        ];
        let mut rev = recs.clone();
        rev.reverse();
        let p1 = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let p2 = MrtPanel::from_records(rev, vec!["z".into()], 1).unwrap();
        assert_eq!(p1, p2);
    }
}
