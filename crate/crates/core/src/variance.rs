//! Sandwich covariance estimators: a nonparametric plug-in form treating the
//! nuisance values as fixed, and a stacked parametric form propagating the
//! Stage-1 GLM estimation error. Also Wald intervals and the normal quantile
//! / CDF helpers they need.

use nalgebra::{DMatrix, DVector};

use crate::data::MrtPanel;
use crate::design::PanelRows;
use crate::error::{Error, Result};
use crate::estimator::{
    compute_weights, estfn_jacobian, estfn_total, utilde_individual_sums, EvaluatedNuisances,
    WeightSet,
};
use crate::formula::Family;
use crate::model::CeeModel;
use crate::nuisance::FittedNuisance;

/// Relative step for the finite-difference cross blocks of the stacked bread.
pub const FD_REL_STEP: f64 = 1e-6;

fn invert_sandwich(bread: &DMatrix<f64>, meat: &DMatrix<f64>, n: f64) -> Result<DMatrix<f64>> {
    let lu = bread.clone().lu();
    let x = lu
        .solve(meat)
        .ok_or_else(|| Error::Singular("singular sandwich bread".into()))?;
    let y = lu
        .solve(&x.transpose())
        .ok_or_else(|| Error::Singular("singular sandwich bread".into()))?;
    Ok(y.transpose() / n)
}

fn meat_from_sums(sums: &[DVector<f64>]) -> DMatrix<f64> {
    let d = sums[0].len();
    let mut m = DMatrix::zeros(d, d);
    for s in sums {
        m += s * s.transpose();
    }
    m / sums.len() as f64
}

/// Plug-in sandwich (1/n) B^{-1} M B^{-T} with the fitted nuisance values
/// treated as known.
pub fn sandwich_nonparametric(
    panel: &MrtPanel,
    nuis: &EvaluatedNuisances,
    weights: &WeightSet,
    fmat: &DMatrix<f64>,
    beta: &DVector<f64>,
    model: &CeeModel,
) -> Result<DMatrix<f64>> {
    let bread = estfn_jacobian(panel, nuis, weights, fmat, beta, model.link)?;
    let sums = utilde_individual_sums(panel, nuis, weights, fmat, beta, model.link)?;
    let meat = meat_from_sums(&sums);
    invert_sandwich(&bread, &meat, panel.n_individuals() as f64)
}

/// Per-individual score sums of the missingness GLM: sum_t I_t x_t (R_t - e_t).
fn score_sums_e(panel: &MrtPanel, e_fit: &FittedNuisance) -> Result<Vec<DVector<f64>>> {
    let rows = PanelRows::available(panel);
    let x = e_fit.mat.build_design(&rows, None)?;
    let ehat = e_fit.predict(&rows)?;
    let q = e_fit.coef.len();
    let t_max = panel.t_max() as usize;
    let mut sums = vec![DVector::zeros(q); panel.n_individuals()];
    for (k, &idx) in rows.rows.iter().enumerate() {
        let rec = &panel.records()[idx];
        let resid = rec.obs_flag as f64 - ehat[k];
        sums[idx / t_max] += resid * x.row(k).transpose();
    }
    Ok(sums)
}

/// Per-individual score sums of the outcome GLM on observed rows:
/// gaussian sum I R x (Y - x'gamma); binomial sum I R x (Y - mu).
fn score_sums_mu(panel: &MrtPanel, mu_fit: &FittedNuisance) -> Result<Vec<DVector<f64>>> {
    let rows = PanelRows::observed(panel);
    let x = mu_fit.mat.build_design(&rows, None)?;
    let fitted = mu_fit.predict(&rows)?;
    let q = mu_fit.coef.len();
    let t_max = panel.t_max() as usize;
    let mut sums = vec![DVector::zeros(q); panel.n_individuals()];
    for (k, &idx) in rows.rows.iter().enumerate() {
        let rec = &panel.records()[idx];
        let y = rec
            .outcome
            .ok_or_else(|| Error::Data("observed row without outcome".into()))?;
        sums[idx / t_max] += (y - fitted[k]) * x.row(k).transpose();
    }
    Ok(sums)
}

/// Analytic negative information block for the missingness GLM:
/// -(1/n) sum I x x' e(1-e).
fn bread_block_e(panel: &MrtPanel, e_fit: &FittedNuisance) -> Result<DMatrix<f64>> {
    let rows = PanelRows::available(panel);
    let x = e_fit.mat.build_design(&rows, None)?;
    let ehat = e_fit.predict(&rows)?;
    let q = e_fit.coef.len();
    let mut b = DMatrix::zeros(q, q);
    for (k, eh) in ehat.iter().enumerate() {
        let xr = x.row(k).transpose();
        b -= eh * (1.0 - eh) * (&xr * xr.transpose());
    }
    Ok(b / panel.n_individuals() as f64)
}

/// Analytic negative information block for the outcome GLM.
fn bread_block_mu(panel: &MrtPanel, mu_fit: &FittedNuisance) -> Result<DMatrix<f64>> {
    let rows = PanelRows::observed(panel);
    let x = mu_fit.mat.build_design(&rows, None)?;
    let q = mu_fit.coef.len();
    let mut b = DMatrix::zeros(q, q);
    match mu_fit.family() {
        Family::Gaussian => {
            for k in 0..rows.rows.len() {
                let xr = x.row(k).transpose();
                b -= &xr * xr.transpose();
            }
        }
        Family::Binomial => {
            let fitted = mu_fit.predict(&rows)?;
            for (k, m) in fitted.iter().enumerate() {
                let xr = x.row(k).transpose();
                b -= m * (1.0 - m) * (&xr * xr.transpose());
            }
        }
    }
    Ok(b / panel.n_individuals() as f64)
}

/// Central finite difference of the averaged estimating function with respect
/// to one Stage-1 coefficient, re-evaluating the perturbed nuisance.
#[allow(clippy::too_many_arguments)]
fn fd_cross_column(
    panel: &MrtPanel,
    fit: &FittedNuisance,
    which: NuisanceRole,
    j: usize,
    nuis: &EvaluatedNuisances,
    weights: &WeightSet,
    fmat: &DMatrix<f64>,
    beta: &DVector<f64>,
    model: &CeeModel,
) -> Result<DVector<f64>> {
    let h = FD_REL_STEP * fit.coef[j].abs().max(1.0);
    let all = PanelRows::all(panel);
    let eval = |sign: f64| -> Result<DVector<f64>> {
        let mut pert = fit.clone();
        pert.coef[j] += sign * h;
        let mut n2 = nuis.clone();
        match which {
            NuisanceRole::Missingness => n2.e = pert.predict(&all)?,
            NuisanceRole::Outcome => {
                n2.mu1 = pert.predict_arm(&all, 1)?;
                n2.mu0 = pert.predict_arm(&all, 0)?;
            }
        }
        estfn_total(panel, &n2, weights, fmat, beta, model.link)
    };
    let plus = eval(1.0)?;
    let minus = eval(-1.0)?;
    Ok((plus - minus) / (2.0 * h))
}

#[derive(Clone, Copy)]
enum NuisanceRole {
    Missingness,
    Outcome,
}

/// Stacked parametric sandwich over theta = (beta, gamma_e, gamma_mu); the
/// returned matrix is the beta block of (1/n) B^{-1} M B^{-T}.
pub fn sandwich_parametric(
    panel: &MrtPanel,
    e_fit: &FittedNuisance,
    mu_fit: &FittedNuisance,
    nuis: &EvaluatedNuisances,
    beta: &DVector<f64>,
    model: &CeeModel,
) -> Result<DMatrix<f64>> {
    if e_fit.lambda.is_some() || mu_fit.lambda.is_some() {
        return Err(Error::Config(
            "parametric stacking assumes unpenalized GLM Stage-1 fits".into(),
        ));
    }
    let fmat = model.feature_matrix(panel)?;
    let weights = compute_weights(panel, &nuis.ptilde, model)?;

    let p = beta.len();
    let qe = e_fit.coef.len();
    let qm = mu_fit.coef.len();
    let d = p + qe + qm;

    // Meat: per-individual stacked scores.
    let u_sums = utilde_individual_sums(panel, nuis, &weights, &fmat, beta, model.link)?;
    let e_sums = score_sums_e(panel, e_fit)?;
    let m_sums = score_sums_mu(panel, mu_fit)?;
    let mut stacked = Vec::with_capacity(u_sums.len());
    for i in 0..u_sums.len() {
        let mut s = DVector::zeros(d);
        s.rows_mut(0, p).copy_from(&u_sums[i]);
        s.rows_mut(p, qe).copy_from(&e_sums[i]);
        s.rows_mut(p + qe, qm).copy_from(&m_sums[i]);
        stacked.push(s);
    }
    let meat = meat_from_sums(&stacked);

    // Bread: block upper-triangular in (beta; gamma_e; gamma_mu) since the
    // Stage-1 scores do not involve beta or each other.
    let mut bread = DMatrix::zeros(d, d);
    bread
        .view_mut((0, 0), (p, p))
        .copy_from(&estfn_jacobian(panel, nuis, &weights, &fmat, beta, model.link)?);
    for j in 0..qe {
        let col = fd_cross_column(
            panel,
            e_fit,
            NuisanceRole::Missingness,
            j,
            nuis,
            &weights,
            &fmat,
            beta,
            model,
        )?;
        bread.view_mut((0, p + j), (p, 1)).copy_from(&col);
    }
    for j in 0..qm {
        let col = fd_cross_column(
            panel,
            mu_fit,
            NuisanceRole::Outcome,
            j,
            nuis,
            &weights,
            &fmat,
            beta,
            model,
        )?;
        bread.view_mut((0, p + qe + j), (p, 1)).copy_from(&col);
    }
    bread
        .view_mut((p, p), (qe, qe))
        .copy_from(&bread_block_e(panel, e_fit)?);
    bread
        .view_mut((p + qe, p + qe), (qm, qm))
        .copy_from(&bread_block_mu(panel, mu_fit)?);

    let full = invert_sandwich(&bread, &meat, panel.n_individuals() as f64)?;
    Ok(full.view((0, 0), (p, p)).into_owned())
}

/// One coefficient's Wald summary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WaldRow {
    pub label: String,
    pub estimate: f64,
    pub std_err: f64,
    pub lower: f64,
    pub upper: f64,
    pub z_value: f64,
    pub p_value: f64,
}

/// Two-sided Wald intervals and tests at the given confidence level.
pub fn wald_rows(
    labels: &[String],
    beta: &DVector<f64>,
    vcov: &DMatrix<f64>,
    level: f64,
) -> Result<Vec<WaldRow>> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0,1)")));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    let mut out = Vec::with_capacity(beta.len());
    for j in 0..beta.len() {
        let se = vcov[(j, j)].max(0.0).sqrt();
        let zv = if se > 0.0 { beta[j] / se } else { f64::INFINITY };
        out.push(WaldRow {
            label: labels.get(j).cloned().unwrap_or_else(|| format!("beta{j}")),
            estimate: beta[j],
            std_err: se,
            lower: beta[j] - z * se,
            upper: beta[j] + z * se,
            z_value: zv,
            p_value: 2.0 * (1.0 - normal_cdf(zv.abs())),
        });
    }
    Ok(out)
}

/// Inverse standard normal CDF by Acklam's rational approximation
/// (relative error below 1.15e-9 over (0,1)).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument {p} outside (0,1)");
    // Coefficients of the central and tail rational approximations.
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error below 1.5e-7).
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    const A1: f64 = 0.254829592;
    const A2: f64 = -0.284496736;
    const A3: f64 = 1.421413741;
    const A4: f64 = -1.453152027;
    const A5: f64 = 1.061405429;
    const P: f64 = 0.3275911;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + P * x);
    let y = 1.0 - (((((A5 * t + A4) * t) + A3) * t + A2) * t + A1) * t * (-x * x).exp();
    sign * y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DecisionRecord;
    use crate::estimator::{estimate_cee, Stage1Config, VarianceSelect};
    use crate::formula::{FormulaSpec, Term};
    use crate::model::{CeeModel, Feature, Link, PiMode};
    use crate::nuisance::{Engine, NumeratorMode};
    use approx::assert_abs_diff_eq;

    #[test]
    fn quantile_reference_values() {
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.995), 2.5758293035489004, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.95), 1.6448536269514722, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-9);
        for p in [0.001, 0.01, 0.2, 0.4, 0.77, 0.999] {
            assert_abs_diff_eq!(normal_quantile(p), -normal_quantile(1.0 - p), epsilon = 1e-8);
        }
    }

    #[test]
    fn cdf_and_quantile_are_inverse() {
        for p in [0.01, 0.1, 0.3, 0.5, 0.8, 0.975, 0.99] {
            assert_abs_diff_eq!(normal_cdf(normal_quantile(p)), p, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(normal_cdf(1.96), 0.9750021048517795, epsilon = 1e-6);
    }

    fn rec(
        id: &str,
        t: u32,
        treat: u8,
        obs: u8,
        y: Option<f64>,
        z: f64,
    ) -> DecisionRecord {
        DecisionRecord {
            individual_id: id.into(),
            t,
            avail: 1,
            treat,
            prob_treat: 0.4,
            obs_flag: obs,
            outcome: y,
            covariates: vec![z],
            pi_prob: None,
        }
    }

    fn synth_panel(n: usize, t_max: u32, seed: u64) -> crate::data::MrtPanel {
        let mut state = seed;
        let mut unif = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut recs = Vec::new();
        for i in 0..n {
            for t in 1..=t_max {
                let z = 4.0 * unif() - 2.0;
                let a = if unif() < 0.4 { 1u8 } else { 0 };
                let e = crate::glm::expit(0.5 + 0.5 * z);
                let obs = if unif() < e { 1u8 } else { 0 };
                let noise = unif() + unif() + unif() - 1.5;
                let y = if obs == 1 {
                    Some(0.4 * z + a as f64 * (1.0 + 0.5 * z) + noise)
                } else {
                    None
                };
                recs.push(rec(&format!("i{i}"), t, a, obs, y, z));
            }
        }
        crate::data::MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap()
    }

    fn glm_config() -> Stage1Config {
        Stage1Config {
            e_spec: FormulaSpec::new(
                vec![Term::Intercept, Term::Linear("z".into())],
                crate::formula::Family::Binomial,
            )
            .unwrap(),
            mu_spec: FormulaSpec::new(
                vec![
                    Term::Intercept,
                    Term::Linear("z".into()),
                    Term::TreatMain,
                    Term::TreatInteract(Box::new(Term::Linear("z".into()))),
                ],
                crate::formula::Family::Gaussian,
            )
            .unwrap(),
            engine: Engine::Glm,
            numerator: NumeratorMode::EmpiricalMean,
            variance: VarianceSelect::Auto,
        }
    }

    fn model() -> CeeModel {
        CeeModel::new(
            Link::Identity,
            vec![Feature::Intercept, Feature::Covariate("z".into())],
            1,
            PiMode::Irrelevant,
        )
        .unwrap()
    }

    #[test]
    fn bread_beta_block_matches_finite_differences() {
        let panel = synth_panel(25, 6, 7);
        let cee = model();
        let fmat = cee.feature_matrix(&panel).unwrap();
        let n = panel.records().len();
        let nuis = EvaluatedNuisances {
            e: vec![0.7; n],
            mu1: vec![0.8; n],
            mu0: vec![0.2; n],
            ptilde: vec![0.4; n],
        };
        let ws = compute_weights(&panel, &nuis.ptilde, &cee).unwrap();
        for link in [Link::Identity, Link::Log] {
            let beta = DVector::from_vec(vec![0.3, -0.1]);
            let jac = estfn_jacobian(&panel, &nuis, &ws, &fmat, &beta, link).unwrap();
            let h = 1e-6;
            for j in 0..2 {
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[j] += h;
                bm[j] -= h;
                let up = estfn_total(&panel, &nuis, &ws, &fmat, &bp, link).unwrap();
                let um = estfn_total(&panel, &nuis, &ws, &fmat, &bm, link).unwrap();
                let fd = (up - um) / (2.0 * h);
                for r in 0..2 {
                    assert_abs_diff_eq!(jac[(r, j)], fd[r], epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn nonparametric_sandwich_symmetric_psd_and_halves_on_duplication() {
        let panel = synth_panel(30, 5, 3);
        let (est, _) = estimate_cee(
            &panel,
            &model(),
            &Stage1Config {
                variance: VarianceSelect::Nonparametric,
                ..glm_config()
            },
        )
        .unwrap();
        let v = &est.vcov;
        for i in 0..2 {
            assert!(v[(i, i)] > 0.0);
            for j in 0..2 {
                assert_abs_diff_eq!(v[(i, j)], v[(j, i)], epsilon = 1e-12);
            }
        }
        assert!(v[(0, 1)] * v[(0, 1)] <= v[(0, 0)] * v[(1, 1)]);

        // Duplicate every individual under fresh ids: same beta, half vcov.
        let mut recs: Vec<DecisionRecord> = panel.records().to_vec();
        for r in panel.records() {
            let mut r2 = r.clone();
            r2.individual_id = format!("{}_dup", r.individual_id);
            recs.push(r2);
        }
        let doubled =
            crate::data::MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        let (est2, _) = estimate_cee(
            &doubled,
            &model(),
            &Stage1Config {
                variance: VarianceSelect::Nonparametric,
                ..glm_config()
            },
        )
        .unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(est2.beta[j], est.beta[j], epsilon = 1e-8);
            assert_abs_diff_eq!(est2.vcov[(j, j)], est.vcov[(j, j)] / 2.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn parametric_sandwich_runs_and_is_symmetric_psd() {
        let panel = synth_panel(40, 6, 11);
        let (est, _) = estimate_cee(&panel, &model(), &glm_config()).unwrap();
        assert_eq!(est.variance_kind, crate::estimator::VarianceKind::Parametric);
        let v = &est.vcov;
        assert_eq!(v.nrows(), 2);
        for i in 0..2 {
            assert!(v[(i, i)] > 0.0, "diag {}", v[(i, i)]);
            for j in 0..2 {
                assert_abs_diff_eq!(v[(i, j)], v[(j, i)], epsilon = 1e-10);
            }
        }
        let eig = v.clone().symmetric_eigen();
        for ev in eig.eigenvalues.iter() {
            assert!(*ev > -1e-12);
        }
    }

    #[test]
    fn parametric_and_nonparametric_agree_in_order_of_magnitude() {
        let panel = synth_panel(60, 8, 19);
        let (p_est, _) = estimate_cee(&panel, &model(), &glm_config()).unwrap();
        let (np_est, _) = estimate_cee(
            &panel,
            &model(),
            &Stage1Config {
                variance: VarianceSelect::Nonparametric,
                ..glm_config()
            },
        )
        .unwrap();
        for j in 0..2 {
            let r = p_est.vcov[(j, j)] / np_est.vcov[(j, j)];
            assert!(r > 0.2 && r < 5.0, "variance ratio {r}");
        }
    }

    #[test]
    fn wald_rows_hand_check() {
        let beta = DVector::from_vec(vec![2.0, -1.0]);
        let vcov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0]));
        let rows = wald_rows(
            &["a".to_string(), "b".to_string()],
            &beta,
            &vcov,
            0.95,
        )
        .unwrap();
        let z = normal_quantile(0.975);
        assert_abs_diff_eq!(rows[0].std_err, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].lower, 2.0 - z * 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(rows[0].upper, 2.0 + z * 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(rows[0].z_value, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[1].p_value, 2.0 * (1.0 - normal_cdf(1.0)), epsilon = 1e-12);
        assert!(wald_rows(&[], &beta, &vcov, 1.5).is_err());
    }
}
