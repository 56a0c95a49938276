//! Stage-1 nuisance engines: fitted missingness, outcome-regression and
//! numerator-probability models with counterfactual-arm prediction.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::MrtPanel;
use crate::design::{materialize, MaterializedSpec, PanelRows, VarSource};
use crate::error::{Error, Result};
use crate::formula::{Family, FormulaSpec};
use crate::gam::fit_pspline_gam;
use crate::glm::{expit, fit_glm};

/// Clip bound for binomial predictions; keeps downstream divisions by the
/// fitted missingness probability finite.
pub const EPS_CLIP: f64 = 1e-6;

/// How Stage-1 models are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Engine {
    /// Unpenalized GLM (parametric Stage 1; Theorem-1 style inference).
    Glm,
    /// Penalized splines with GCV over the given lambda grid.
    Gam { lambda_grid: Vec<f64> },
}

impl Engine {
    pub fn default_gam() -> Engine {
        Engine::Gam {
            lambda_grid: crate::gam::default_lambda_grid(),
        }
    }
}

/// A fitted Stage-1 model. Prediction is deterministic given the frozen
/// materialized spec and coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedNuisance {
    pub mat: MaterializedSpec,
    pub coef: DVector<f64>,
    /// Selected smoothing parameter (penalized fits only).
    pub lambda: Option<f64>,
    /// Dimension of the fitting estimating function, for sandwich stacking.
    pub estfn_dim: usize,
    pub iterations: usize,
}

impl FittedNuisance {
    pub fn family(&self) -> Family {
        self.mat.family
    }

    fn apply_link(&self, eta: DVector<f64>) -> Vec<f64> {
        match self.mat.family {
            Family::Gaussian => eta.iter().copied().collect(),
            Family::Binomial => eta
                .iter()
                .map(|&e| expit(e).clamp(EPS_CLIP, 1.0 - EPS_CLIP))
                .collect(),
        }
    }

    /// Predict at the observed treatment.
    pub fn predict(&self, source: &dyn VarSource) -> Result<Vec<f64>> {
        let x = self.mat.build_design(source, None)?;
        Ok(self.apply_link(x * &self.coef))
    }

    /// Predict with the treatment column overridden to `arm`; interaction
    /// columns are recomputed.
    pub fn predict_arm(&self, source: &dyn VarSource, arm: u8) -> Result<Vec<f64>> {
        let x = self.mat.build_design(source, Some(arm as f64))?;
        Ok(self.apply_link(x * &self.coef))
    }
}

/// Fit a nuisance model on the given rows.
pub fn fit_nuisance(
    spec: &FormulaSpec,
    source: &dyn VarSource,
    response: &DVector<f64>,
    engine: &Engine,
) -> Result<FittedNuisance> {
    let mat = materialize(spec, source)?;
    let x = mat.build_design(source, None)?;
    match engine {
        Engine::Gam { lambda_grid } if mat.has_penalty() => {
            let fit = fit_pspline_gam(&mat, &x, response, lambda_grid)?;
            Ok(FittedNuisance {
                estfn_dim: fit.coef.len(),
                coef: fit.coef,
                lambda: Some(fit.lambda),
                iterations: fit.iterations,
                mat,
            })
        }
        _ => {
            let fit = fit_glm(&x, response, mat.family, None)?;
            Ok(FittedNuisance {
                estfn_dim: fit.coef.len(),
                coef: fit.coef,
                lambda: None,
                iterations: fit.iterations,
                mat,
            })
        }
    }
}

/// Fit the missingness propensity e_t on available rows (response R).
pub fn fit_missingness(
    panel: &MrtPanel,
    spec: &FormulaSpec,
    engine: &Engine,
) -> Result<FittedNuisance> {
    if spec.family != Family::Binomial {
        return Err(Error::Config("missingness model must be binomial".into()));
    }
    let rows = PanelRows::available(panel);
    let response = rows.obs_flags();
    fit_nuisance(spec, &rows, &response, engine)
}

/// Fit the outcome regression mu_t on available rows with observed outcome.
pub fn fit_outcome(
    panel: &MrtPanel,
    spec: &FormulaSpec,
    engine: &Engine,
) -> Result<FittedNuisance> {
    let rows = PanelRows::observed(panel);
    if rows.rows.is_empty() {
        return Err(Error::Data("no observed outcomes to fit on".into()));
    }
    let response = rows.outcomes()?;
    fit_nuisance(spec, &rows, &response, engine)
}

/// The numerator probability p~: either a constant or a fitted model of the
/// treatment on effect modifiers, over available rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Numerator {
    Constant(f64),
    Fitted(FittedNuisance),
}

impl Numerator {
    /// Evaluate per record of `source`.
    pub fn predict(&self, source: &dyn VarSource) -> Result<Vec<f64>> {
        match self {
            Numerator::Constant(c) => Ok(vec![*c; source.n_rows()]),
            Numerator::Fitted(f) => f.predict(source),
        }
    }
}

/// Numerator-probability configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NumeratorMode {
    /// Fixed scalar in (0,1).
    Constant(f64),
    /// Empirical mean of the treatment over available records.
    EmpiricalMean,
    /// Logistic model of A on S_t features.
    Formula(FormulaSpec),
}

pub fn fit_numerator(panel: &MrtPanel, mode: &NumeratorMode) -> Result<Numerator> {
    match mode {
        NumeratorMode::Constant(c) => {
            if !(*c > 0.0 && *c < 1.0) {
                return Err(Error::Config(format!(
                    "constant numerator probability {c} must lie in (0,1)"
                )));
            }
            Ok(Numerator::Constant(*c))
        }
        NumeratorMode::EmpiricalMean => {
            let rows = PanelRows::available(panel);
            if rows.rows.is_empty() {
                return Err(Error::Data("no available records".into()));
            }
            let mean =
                rows.treats().iter().sum::<f64>() / rows.rows.len() as f64;
            let mean = mean.clamp(EPS_CLIP, 1.0 - EPS_CLIP);
            Ok(Numerator::Constant(mean))
        }
        NumeratorMode::Formula(spec) => {
            if spec.family != Family::Binomial {
                return Err(Error::Config("numerator model must be binomial".into()));
            }
            if spec.has_treat_terms() {
                return Err(Error::Config(
                    "numerator model regresses the treatment; it cannot contain treatment terms"
                        .into(),
                ));
            }
            let rows = PanelRows::available(panel);
            let response = rows.treats();
            let fit = fit_nuisance(spec, &rows, &response, &Engine::Glm)?;
            Ok(Numerator::Fitted(fit))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DecisionRecord, MrtPanel};
    use crate::design::ColumnSource;
    use crate::formula::Term;
    use approx::assert_abs_diff_eq;

    fn rec(id: &str, t: u32, treat: u8, obs: u8, y: Option<f64>, z: f64) -> DecisionRecord {
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

    fn panel() -> MrtPanel {
        let mut recs = Vec::new();
        for (i, id) in ["a", "b", "c", "d", "e"].iter().enumerate() {
            for t in 1..=4 {
                let treat = ((i + t as usize) % 2) as u8;
                let z = (i as f64) - 2.0 + 0.1 * t as f64;
                recs.push(rec(id, t, treat, 1, Some(1.0 + 2.0 * treat as f64 + 0.5 * z), z));
            }
        }
        MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap()
    }

    #[test]
    fn predict_arm_hand_evaluation() {
        // Gaussian fit gamma = (1, 2, 0.5) on {intercept, a, z}; row z=2, arm 1
        // gives 1 + 2 + 1 = 4.
        let spec = FormulaSpec::new(
            vec![
                Term::Intercept,
                Term::TreatMain,
                Term::Linear("z".into()),
            ],
            Family::Gaussian,
        )
        .unwrap();
        let src = ColumnSource {
            n: 3,
            vars: vec![("z".into(), vec![0.0, 1.0, 2.0])],
            treat: vec![0.0, 1.0, 0.0],
        };
        let mat = materialize(&spec, &src).unwrap();
        let fit = FittedNuisance {
            mat,
            coef: DVector::from_vec(vec![1.0, 2.0, 0.5]),
            lambda: None,
            estfn_dim: 3,
            iterations: 0,
        };
        let row = ColumnSource {
            n: 1,
            vars: vec![("z".into(), vec![2.0])],
            treat: vec![0.0],
        };
        let pred = fit.predict_arm(&row, 1).unwrap();
        assert_abs_diff_eq!(pred[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn arm_independent_model_ignores_arm() {
        let p = panel();
        let spec = FormulaSpec::new(
            vec![Term::Intercept, Term::Linear("z".into())],
            Family::Gaussian,
        )
        .unwrap();
        let fit = fit_outcome(&p, &spec, &Engine::Glm).unwrap();
        let rows = PanelRows::all(&p);
        assert_eq!(
            fit.predict_arm(&rows, 0).unwrap(),
            fit.predict_arm(&rows, 1).unwrap()
        );
    }

    #[test]
    fn observed_arm_prediction_matches_in_sample_fit() {
        let p = panel();
        let spec = FormulaSpec::new(
            vec![Term::Intercept, Term::TreatMain, Term::Linear("z".into())],
            Family::Gaussian,
        )
        .unwrap();
        let fit = fit_outcome(&p, &spec, &Engine::Glm).unwrap();
        let rows = PanelRows::observed(&p);
        let in_sample = fit.predict(&rows).unwrap();
        for (k, &i) in rows.rows.clone().iter().enumerate() {
            let arm = p.records()[i].treat;
            let single = PanelRows::new(&p, vec![i]);
            let v = fit.predict_arm(&single, arm).unwrap();
            assert_abs_diff_eq!(v[0], in_sample[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn binomial_prediction_is_clipped() {
        let spec = FormulaSpec::new(vec![Term::Intercept], Family::Binomial).unwrap();
        let src = ColumnSource {
            n: 1,
            vars: vec![],
            treat: vec![0.0],
        };
        let mat = materialize(&spec, &src).unwrap();
        let fit = FittedNuisance {
            mat,
            coef: DVector::from_vec(vec![40.0]),
            lambda: None,
            estfn_dim: 1,
            iterations: 0,
        };
        let pred = fit.predict(&src).unwrap();
        assert_eq!(pred[0], 1.0 - EPS_CLIP);
    }

    #[test]
    fn numerator_constant_and_bounds() {
        let p = panel();
        let c = fit_numerator(&p, &NumeratorMode::Constant(0.6)).unwrap();
        let rows = PanelRows::all(&p);
        assert!(c.predict(&rows).unwrap().iter().all(|&v| v == 0.6));
        assert!(fit_numerator(&p, &NumeratorMode::Constant(1.2)).is_err());
    }

    #[test]
    fn numerator_intercept_logistic_recovers_mean() {
        let p = panel();
        let rows = PanelRows::available(&p);
        let mean = rows.treats().iter().sum::<f64>() / rows.rows.len() as f64;
        let spec = FormulaSpec::new(vec![Term::Intercept], Family::Binomial).unwrap();
        let fit = fit_numerator(&p, &NumeratorMode::Formula(spec)).unwrap();
        let pred = fit.predict(&rows).unwrap();
        for v in pred {
            assert_abs_diff_eq!(v, mean, epsilon = 1e-7);
        }
    }
}
