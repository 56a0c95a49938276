//! Simulation study machinery: benchmark data generators, the four Stage-1
//! implementations, comparator baselines, and a deterministic replication
//! harness with bias/MSE/coverage aggregation.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DecisionRecord, MrtPanel};
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_with_nuisances, CeeEstimate, EvaluatedNuisances, SolverKind, VarianceKind,
};
use crate::formula::{Family, FormulaSpec, Term};
use crate::glm::expit;
use crate::model::{CeeModel, Feature, Link, PiMode};
use crate::nuisance::{
    fit_missingness, fit_numerator, fit_outcome, Engine, FittedNuisance, NumeratorMode,
};
use crate::variance::{normal_quantile, sandwich_parametric};

/// The three benchmark shapes for the generating functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Linear,
    SimpleNonlinear,
    Periodic,
}

/// Beta(2,2) density 6x(1-x) on [0,1].
pub fn q22(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("q22 argument {x} outside [0,1]")));
    }
    Ok(6.0 * x * (1.0 - x))
}

/// The benchmark generating functions. `t` enters `sin(t)` as the raw integer
/// decision-point index in radians.
pub fn g_fn(pattern: Pattern, a0: f64, a1: f64, t: u32, t_max: u32, z: f64) -> Result<f64> {
    let tf = t as f64 / t_max as f64;
    Ok(match pattern {
        Pattern::Linear => a0 + a1 * (tf + z / 6.0),
        Pattern::SimpleNonlinear => a0 + a1 * (q22(z / 6.0 + 0.5)? + q22(tf)?),
        Pattern::Periodic => a0 + a1 * ((t as f64).sin() + z.sin()),
    })
}

/// Intercept/slope for the missingness generating function, per pattern.
pub fn alpha_e(pattern: Pattern) -> (f64, f64) {
    match pattern {
        Pattern::Linear => (-0.5, 1.5),
        Pattern::SimpleNonlinear => (-2.0, 1.5),
        Pattern::Periodic => (0.5, 1.5),
    }
}

/// Intercept/slope for the baseline outcome generating function.
pub const ALPHA_MU0: (f64, f64) = (0.5, 1.5);

/// One simulated trial configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub pattern_e: Pattern,
    pub pattern_mu0: Pattern,
    pub n: usize,
    pub t_max: u32,
    pub p_treat: f64,
    pub beta_true: [f64; 2],
    pub link: Link,
}

impl SimScenario {
    /// Identity-link benchmark scenario with the published defaults.
    pub fn identity(pattern_e: Pattern, pattern_mu0: Pattern, n: usize) -> Result<SimScenario> {
        SimScenario {
            pattern_e,
            pattern_mu0,
            n,
            t_max: 20,
            p_treat: 0.4,
            beta_true: [1.5, 2.1],
            link: Link::Identity,
        }
        .validated()
    }

    /// Log-link scenario with a binary outcome:
    /// P(Y=1 | A, t, Z) = exp(A(b0 + b1 Z)) q(t, Z) with
    /// q = 0.15 + 0.1 expit(g_mu0), which keeps probabilities inside (0,1)
    /// for the default effect sizes.
    pub fn log_link(pattern_e: Pattern, pattern_mu0: Pattern, n: usize) -> Result<SimScenario> {
        SimScenario {
            pattern_e,
            pattern_mu0,
            n,
            t_max: 20,
            p_treat: 0.4,
            beta_true: [0.2, 0.1],
            link: Link::Log,
        }
        .validated()
    }

    pub fn validated(self) -> Result<SimScenario> {
        if self.n < 2 {
            return Err(Error::Config("scenario needs n >= 2".into()));
        }
        if self.t_max < 1 {
            return Err(Error::Config("scenario needs t_max >= 1".into()));
        }
        if !(self.p_treat > 0.0 && self.p_treat < 1.0) {
            return Err(Error::Config(format!(
                "p_treat {} outside (0,1)",
                self.p_treat
            )));
        }
        if self.link == Link::Log {
            let peak = (self.beta_true[0].abs() + 2.0 * self.beta_true[1].abs()).exp() * 0.25;
            if peak >= 1.0 {
                return Err(Error::Config(format!(
                    "log-link effect sizes give success probability up to {peak:.3} >= 1"
                )));
            }
        }
        Ok(self)
    }

    fn mu0_star(&self, t: u32, z: f64) -> Result<f64> {
        let g = g_fn(self.pattern_mu0, ALPHA_MU0.0, ALPHA_MU0.1, t, self.t_max, z)?;
        Ok(match self.link {
            Link::Identity => g,
            Link::Log => 0.15 + 0.1 * expit(g),
        })
    }

    fn mu1_star(&self, t: u32, z: f64) -> Result<f64> {
        let cee = self.beta_true[0] + self.beta_true[1] * z;
        Ok(match self.link {
            Link::Identity => self.mu0_star(t, z)? + cee,
            Link::Log => self.mu0_star(t, z)? * cee.exp(),
        })
    }

    fn e_star(&self, t: u32, z: f64) -> Result<f64> {
        let (a0, a1) = alpha_e(self.pattern_e);
        Ok(expit(g_fn(self.pattern_e, a0, a1, t, self.t_max, z)?))
    }
}

/// Exact nuisance values retained alongside a generated panel, one entry per
/// record, for oracle-nuisance runs.
#[derive(Debug, Clone)]
pub struct LatentTruth {
    pub e: Vec<f64>,
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratedPanel {
    pub panel: MrtPanel,
    pub truth: LatentTruth,
}

impl GeneratedPanel {
    /// Oracle nuisances with a constant numerator probability.
    pub fn oracle_nuisances(&self, ptilde: f64) -> EvaluatedNuisances {
        let n = self.truth.e.len();
        EvaluatedNuisances {
            e: self.truth.e.clone(),
            mu1: self.truth.mu1.clone(),
            mu0: self.truth.mu0.clone(),
            ptilde: vec![ptilde; n],
        }
    }
}

/// Generate one replication's panel. Replications are independent
/// counter-based RNG streams of the master seed, so results do not depend on
/// how replications are scheduled.
pub fn generate_panel(
    scenario: &SimScenario,
    master_seed: u64,
    rep_index: u64,
) -> Result<GeneratedPanel> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep_index);

    let total = scenario.n * scenario.t_max as usize;
    let mut records = Vec::with_capacity(total);
    let mut truth = LatentTruth {
        e: Vec::with_capacity(total),
        mu1: Vec::with_capacity(total),
        mu0: Vec::with_capacity(total),
    };
    let width = (scenario.n - 1).to_string().len();
    for i in 0..scenario.n {
        for t in 1..=scenario.t_max {
            let z = rng.random_range(-2.0..2.0);
            let a = u8::from(rng.random_bool(scenario.p_treat));
            let e = scenario.e_star(t, z)?;
            let r = u8::from(rng.random_bool(e));
            let mu0 = scenario.mu0_star(t, z)?;
            let mu1 = scenario.mu1_star(t, z)?;
            let mean = if a == 1 { mu1 } else { mu0 };
            let y = match scenario.link {
                Link::Identity => {
                    let noise: f64 = rng.sample(StandardNormal);
                    mean + noise
                }
                Link::Log => f64::from(rng.random_bool(mean)),
            };
            records.push(DecisionRecord {
                individual_id: format!("i{i:0width$}"),
                t,
                avail: 1,
                treat: a,
                prob_treat: scenario.p_treat,
                obs_flag: r,
                outcome: (r == 1).then_some(y),
                covariates: vec![z],
                pi_prob: None,
            });
            truth.e.push(e);
            truth.mu1.push(mu1);
            truth.mu0.push(mu0);
        }
    }
    let panel = MrtPanel::from_records(records, vec!["z".into()], 1)?;
    Ok(GeneratedPanel { panel, truth })
}

/// The effect model every benchmark method fits: f = (1, Z).
pub fn benchmark_model(link: Link) -> CeeModel {
    CeeModel::new(
        link,
        vec![Feature::Intercept, Feature::Covariate("z".into())],
        1,
        PiMode::Irrelevant,
    )
    .expect("static model")
}

/// The four Stage-1 implementations: which nuisance models are correctly
/// specified (carry the Z terms) and which are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Implementation {
    /// Both models correct.
    A,
    /// Missingness model drops the Z spline.
    B,
    /// Outcome model drops the Z terms.
    C,
    /// Both models misspecified.
    D,
}

impl fmt::Display for Implementation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl Implementation {
    pub const ALL: [Implementation; 4] = [
        Implementation::A,
        Implementation::B,
        Implementation::C,
        Implementation::D,
    ];

    pub fn e_is_full(self) -> bool {
        matches!(self, Implementation::A | Implementation::C)
    }
}

fn e_spec(full: bool) -> FormulaSpec {
    let mut terms = vec![Term::Intercept];
    if full {
        terms.push(Term::spline("z"));
    }
    terms.push(Term::spline("t"));
    FormulaSpec::new(terms, Family::Binomial).expect("static spec")
}

fn mu_spec(which: Implementation) -> FormulaSpec {
    let terms = match which {
        Implementation::A | Implementation::B => vec![
            Term::Intercept,
            Term::spline("z"),
            Term::spline("t"),
            Term::TreatMain,
            Term::TreatInteract(Box::new(Term::spline("z"))),
            Term::TreatInteract(Box::new(Term::spline("t"))),
        ],
        Implementation::C => vec![
            Term::Intercept,
            Term::spline("t"),
            Term::TreatMain,
            Term::TreatInteract(Box::new(Term::spline("t"))),
        ],
        Implementation::D => vec![Term::Intercept, Term::spline("z"), Term::spline("t")],
    };
    FormulaSpec::new(terms, Family::Gaussian).expect("static spec")
}

/// Stage-1 formula pair (missingness, outcome) for one implementation.
pub fn implementation_spec(which: Implementation) -> (FormulaSpec, FormulaSpec) {
    (e_spec(which.e_is_full()), mu_spec(which))
}

fn err_text(e: &Error) -> Error {
    Error::Data(format!("shared nuisance fit failed: {e}"))
}

/// Fit the doubly robust estimator for several implementations on one panel,
/// sharing the nuisance fits that implementations have in common (at most
/// two missingness fits and three outcome fits for all four).
pub fn fit_dr_estimates(
    panel: &MrtPanel,
    model: &CeeModel,
    impls: &[Implementation],
    engine: &Engine,
    numerator: &NumeratorMode,
) -> Result<Vec<(Implementation, Result<CeeEstimate>)>> {
    let num = fit_numerator(panel, numerator)?;

    let mut e_fits: [Option<Result<FittedNuisance>>; 2] = [None, None];
    let mut mu_fits: std::collections::HashMap<Implementation, Result<FittedNuisance>> =
        std::collections::HashMap::new();
    for &imp in impls {
        let slot = usize::from(imp.e_is_full());
        if e_fits[slot].is_none() {
            e_fits[slot] = Some(fit_missingness(panel, &e_spec(imp.e_is_full()), engine));
        }
        let mu_key = match imp {
            Implementation::A | Implementation::B => Implementation::A,
            other => other,
        };
        mu_fits
            .entry(mu_key)
            .or_insert_with(|| fit_outcome(panel, &mu_spec(mu_key), engine));
    }

    let mut out = Vec::with_capacity(impls.len());
    for &imp in impls {
        let e_fit = match e_fits[usize::from(imp.e_is_full())].as_ref().unwrap() {
            Ok(f) => f,
            Err(e) => {
                out.push((imp, Err(err_text(e))));
                continue;
            }
        };
        let mu_key = match imp {
            Implementation::A | Implementation::B => Implementation::A,
            other => other,
        };
        let mu_fit = match mu_fits.get(&mu_key).unwrap() {
            Ok(f) => f,
            Err(e) => {
                out.push((imp, Err(err_text(e))));
                continue;
            }
        };
        let est = (|| {
            let nuis = EvaluatedNuisances::from_fits(panel, e_fit, mu_fit, &num)?;
            let mut est =
                estimate_with_nuisances(panel, model, &nuis, VarianceKind::Nonparametric)?;
            if matches!(engine, Engine::Glm) {
                est.vcov = sandwich_parametric(panel, e_fit, mu_fit, &nuis, &est.beta, model)?;
                est.variance_kind = VarianceKind::Parametric;
            }
            Ok(est)
        })();
        out.push((imp, est));
    }
    Ok(out)
}

/// The non-doubly-robust baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Weighted-centered least squares on complete cases only.
    CompleteCase,
    /// Missing outcomes replaced by zero, then the complete-data estimator.
    ImputeZero,
    /// Missing outcomes replaced by the individual's observed mean; all-missing
    /// individuals are dropped with a warning.
    ImputeMean,
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Baseline::CompleteCase => "complete_case",
            Baseline::ImputeZero => "impute_zero",
            Baseline::ImputeMean => "impute_mean",
        };
        f.write_str(s)
    }
}

/// Weighted-centered least squares on the given per-record working outcomes
/// (`None` drops the record from the estimating equation). Identity link
/// only.
fn wcls_identity(
    panel: &MrtPanel,
    model: &CeeModel,
    y_work: &[Option<f64>],
    include_individual: &[bool],
    mut warnings: Vec<String>,
) -> Result<CeeEstimate> {
    if model.link != Link::Identity {
        return Err(Error::Config("baseline estimators support the identity link only".into()));
    }
    if model.delta != 1 {
        return Err(Error::Config("baseline estimators support delta = 1 only".into()));
    }
    let n_eff = include_individual.iter().filter(|&&b| b).count();
    if n_eff == 0 {
        return Err(Error::Data("no individuals left for baseline estimator".into()));
    }
    let fmat = model.feature_matrix(panel)?;
    let t_max = panel.t_max() as usize;

    // Numerator probability: empirical treatment rate on the used rows.
    let mut a_sum = 0.0;
    let mut a_n = 0usize;
    for (idx, rec) in panel.records().iter().enumerate() {
        if rec.avail == 1 && include_individual[idx / t_max] && y_work[idx].is_some() {
            a_sum += rec.treat as f64;
            a_n += 1;
        }
    }
    if a_n == 0 {
        return Err(Error::Data("no usable records for baseline estimator".into()));
    }
    let ptilde = (a_sum / a_n as f64).clamp(1e-6, 1.0 - 1e-6);

    let p_dim = model.dim();
    let mut m = DMatrix::zeros(p_dim, p_dim);
    let mut b = DVector::zeros(p_dim);
    let row_w = |rec: &DecisionRecord| {
        if rec.treat == 1 {
            ptilde / rec.prob_treat
        } else {
            (1.0 - ptilde) / (1.0 - rec.prob_treat)
        }
    };
    for (idx, rec) in panel.records().iter().enumerate() {
        if rec.avail == 0 || !include_individual[idx / t_max] {
            continue;
        }
        let Some(y) = y_work[idx] else { continue };
        let f = fmat.row(idx).transpose();
        let a = rec.treat as f64;
        let c = row_w(rec) * (a - ptilde);
        m += c * (a + rec.prob_treat - 1.0) * (&f * f.transpose());
        b += c * y * f;
    }
    m /= n_eff as f64;
    b /= n_eff as f64;

    let svd = m.clone().svd(false, false);
    let cond = svd.singular_values.max() / svd.singular_values.min();
    if !cond.is_finite() || cond > crate::estimator::COND_LIMIT {
        return Err(Error::Estimability(format!(
            "baseline normal equations have condition number {cond:.3e}"
        )));
    }
    let beta = m
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Estimability("singular baseline system".into()))?;

    // Nonparametric sandwich with bread -M.
    let mut sums = vec![DVector::zeros(p_dim); panel.n_individuals()];
    for (idx, rec) in panel.records().iter().enumerate() {
        if rec.avail == 0 || !include_individual[idx / t_max] {
            continue;
        }
        let Some(y) = y_work[idx] else { continue };
        let f = fmat.row(idx).transpose();
        let a = rec.treat as f64;
        let resid = y - (a + rec.prob_treat - 1.0) * f.dot(&beta);
        sums[idx / t_max] += row_w(rec) * (a - ptilde) * resid * f;
    }
    let mut meat = DMatrix::zeros(p_dim, p_dim);
    for (i, s) in sums.iter().enumerate() {
        if include_individual[i] {
            meat += s * s.transpose();
        }
    }
    meat /= n_eff as f64;
    let lu = m.lu();
    let x = lu
        .solve(&meat)
        .ok_or_else(|| Error::Singular("singular baseline bread".into()))?;
    let vcov = lu
        .solve(&x.transpose())
        .ok_or_else(|| Error::Singular("singular baseline bread".into()))?
        .transpose()
        / n_eff as f64;

    if n_eff < panel.n_individuals() {
        warnings.push(format!(
            "{} individual(s) dropped (no observed outcomes)",
            panel.n_individuals() - n_eff
        ));
    }
    Ok(CeeEstimate {
        beta,
        vcov,
        solver: SolverKind::ClosedForm,
        iterations: 0,
        final_estfn_norm: 0.0,
        variance_kind: VarianceKind::Nonparametric,
        feature_labels: model.features.iter().map(|f| f.label()).collect(),
        min_e_hat: 1.0,
        warnings,
    })
}

/// Run one comparator baseline on a panel.
pub fn comparator_estimate(
    panel: &MrtPanel,
    model: &CeeModel,
    baseline: Baseline,
) -> Result<CeeEstimate> {
    let records = panel.records();
    let t_max = panel.t_max() as usize;
    let mut include = vec![true; panel.n_individuals()];
    let y_work: Vec<Option<f64>> = match baseline {
        Baseline::CompleteCase => records
            .iter()
            .map(|r| if r.obs_flag == 1 { r.outcome } else { None })
            .collect(),
        Baseline::ImputeZero => records
            .iter()
            .map(|r| {
                if r.avail == 0 {
                    None
                } else if r.obs_flag == 1 {
                    r.outcome
                } else {
                    Some(0.0)
                }
            })
            .collect(),
        Baseline::ImputeMean => {
            let mut means = Vec::with_capacity(panel.n_individuals());
            for (i, inc) in include.iter_mut().enumerate() {
                let obs: Vec<f64> = panel
                    .individual_records(i)
                    .iter()
                    .filter_map(|r| r.outcome)
                    .collect();
                if obs.is_empty() {
                    *inc = false;
                    means.push(f64::NAN);
                } else {
                    means.push(obs.iter().sum::<f64>() / obs.len() as f64);
                }
            }
            records
                .iter()
                .enumerate()
                .map(|(idx, r)| {
                    if r.avail == 0 || !include[idx / t_max] {
                        None
                    } else if r.obs_flag == 1 {
                        r.outcome
                    } else {
                        Some(means[idx / t_max])
                    }
                })
                .collect()
        }
    };
    wcls_identity(panel, model, &y_work, &include, Vec::new())
}

/// One estimation method in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dr(Implementation),
    Baseline(Baseline),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Dr(i) => write!(f, "dr_{i}"),
            Method::Baseline(b) => write!(f, "{b}"),
        }
    }
}

/// A replication study configuration.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub scenario: SimScenario,
    pub n_reps: u64,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub engine: Engine,
    /// Nominal two-sided confidence level for coverage, default 0.95.
    pub level: f64,
}

impl StudyConfig {
    pub fn new(scenario: SimScenario, n_reps: u64, seed: u64, methods: Vec<Method>) -> StudyConfig {
        StudyConfig {
            scenario,
            n_reps,
            seed,
            methods,
            engine: Engine::default_gam(),
            level: 0.95,
        }
    }
}

/// One successful replication's output for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepEstimate {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
}

/// Aggregates for one coefficient of one method. Monte Carlo SD uses the
/// population denominator so that MSE = bias^2 + mc_sd^2 holds exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefMetrics {
    pub bias: f64,
    pub mse: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub mc_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_failed: u64,
    pub coef: Vec<CoefMetrics>,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub n: usize,
    pub n_reps: u64,
    pub beta_true: Vec<f64>,
    pub summaries: Vec<MethodSummary>,
    /// Per method, per replication; `None` marks a failed replication.
    pub estimates: Vec<Vec<Option<RepEstimate>>>,
    /// True when any method failed on more than 5% of replications.
    pub flagged: bool,
}

fn run_rep(cfg: &StudyConfig, rep: u64) -> Result<Vec<Option<RepEstimate>>> {
    let generated = generate_panel(&cfg.scenario, cfg.seed, rep)?;
    let model = benchmark_model(cfg.scenario.link);

    let impls: Vec<Implementation> = cfg
        .methods
        .iter()
        .filter_map(|m| match m {
            Method::Dr(i) => Some(*i),
            Method::Baseline(_) => None,
        })
        .collect();
    let dr = if impls.is_empty() {
        Vec::new()
    } else {
        fit_dr_estimates(
            &generated.panel,
            &model,
            &impls,
            &cfg.engine,
            &NumeratorMode::EmpiricalMean,
        )?
    };

    let to_rep = |est: Result<CeeEstimate>| -> Option<RepEstimate> {
        est.ok().map(|e| RepEstimate {
            se: e.se(),
            beta: e.beta.iter().copied().collect(),
        })
    };

    let mut dr_iter = dr.into_iter();
    let mut out = Vec::with_capacity(cfg.methods.len());
    for method in &cfg.methods {
        match method {
            Method::Dr(_) => {
                let (_, est) = dr_iter.next().expect("aligned with impls");
                out.push(to_rep(est));
            }
            Method::Baseline(b) => {
                out.push(to_rep(comparator_estimate(&generated.panel, &model, *b)));
            }
        }
    }
    Ok(out)
}

/// Run the full replication study. Deterministic for a fixed seed regardless
/// of the worker count: replications draw from independent RNG streams and
/// are aggregated in replication order.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    if cfg.n_reps < 1 {
        return Err(Error::Config("n_reps must be >= 1".into()));
    }
    if !(0.0 < cfg.level && cfg.level < 1.0) {
        return Err(Error::Config(format!("level {} outside (0,1)", cfg.level)));
    }
    if cfg.methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    cfg.scenario.clone().validated()?;

    let per_rep: Vec<Result<Vec<Option<RepEstimate>>>> = (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| run_rep(cfg, rep))
        .collect();

    let n_methods = cfg.methods.len();
    let mut estimates: Vec<Vec<Option<RepEstimate>>> = vec![Vec::new(); n_methods];
    for rep_result in per_rep {
        // Generator failures are config bugs, not MC noise: propagate.
        let per_method = rep_result?;
        for (m, est) in per_method.into_iter().enumerate() {
            estimates[m].push(est);
        }
    }

    let truth = &cfg.scenario.beta_true;
    let z = normal_quantile(0.5 + cfg.level / 2.0);
    let p_dim = truth.len();
    let mut summaries = Vec::with_capacity(n_methods);
    let mut flagged = false;
    for (m, method) in cfg.methods.iter().enumerate() {
        let ok: Vec<&RepEstimate> = estimates[m].iter().flatten().collect();
        let n_failed = cfg.n_reps - ok.len() as u64;
        if (n_failed as f64) > 0.05 * cfg.n_reps as f64 {
            flagged = true;
        }
        let mut coef = Vec::with_capacity(p_dim);
        for (j, truth_j) in truth.iter().enumerate() {
            if ok.is_empty() {
                coef.push(CoefMetrics {
                    bias: f64::NAN,
                    mse: f64::NAN,
                    coverage: f64::NAN,
                    mean_se: f64::NAN,
                    mc_sd: f64::NAN,
                });
                continue;
            }
            let k = ok.len() as f64;
            let mean = ok.iter().map(|r| r.beta[j]).sum::<f64>() / k;
            let bias = mean - truth_j;
            let var = ok.iter().map(|r| (r.beta[j] - mean).powi(2)).sum::<f64>() / k;
            let mse = ok.iter().map(|r| (r.beta[j] - truth_j).powi(2)).sum::<f64>() / k;
            let mean_se = ok.iter().map(|r| r.se[j]).sum::<f64>() / k;
            let coverage = ok
                .iter()
                .filter(|r| (r.beta[j] - truth_j).abs() <= z * r.se[j])
                .count() as f64
                / k;
            coef.push(CoefMetrics {
                bias,
                mse,
                coverage,
                mean_se,
                mc_sd: var.sqrt(),
            });
        }
        summaries.push(MethodSummary {
            method: method.to_string(),
            n_failed,
            coef,
        });
    }

    Ok(StudyResult {
        n: cfg.scenario.n,
        n_reps: cfg.n_reps,
        beta_true: truth.to_vec(),
        summaries,
        estimates,
        flagged,
    })
}

/// One row of the wide metrics table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub n: usize,
    pub n_reps: u64,
    pub coefficient: String,
    pub bias: f64,
    pub mse: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub mc_sd: f64,
    pub n_failed: u64,
}

pub fn metrics_rows(study: &StudyResult) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for s in &study.summaries {
        for (j, c) in s.coef.iter().enumerate() {
            rows.push(MetricsRow {
                method: s.method.clone(),
                n: study.n,
                n_reps: study.n_reps,
                coefficient: format!("beta{j}"),
                bias: c.bias,
                mse: c.mse,
                coverage: c.coverage,
                mean_se: c.mean_se,
                mc_sd: c.mc_sd,
                n_failed: s.n_failed,
            });
        }
    }
    rows
}

/// Wide metrics CSV: one row per method x n x coefficient.
pub fn write_metrics_csv(path: &std::path::Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready long CSV: one row per method x n x coefficient x metric.
pub fn write_long_csv(path: &std::path::Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "n", "coefficient", "metric", "value"])?;
    for r in rows {
        for (name, value) in [
            ("bias", r.bias),
            ("mse", r.mse),
            ("coverage", r.coverage),
            ("mean_se", r.mean_se),
            ("mc_sd", r.mc_sd),
        ] {
            w.write_record([
                r.method.as_str(),
                &r.n.to_string(),
                &r.coefficient,
                name,
                &format!("{value}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
