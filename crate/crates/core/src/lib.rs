//! Two-stage doubly robust estimation of causal excursion effects in
//! micro-randomized trials with outcomes missing at random.
//!
//! The crate is organized bottom-up:
//! - [`data`]: the decision-point panel, CSV ingestion and validation;
//! - [`basis`], [`formula`], [`design`]: P-spline bases and additive-model
//!   design construction;
//! - [`glm`], [`gam`]: the Stage-1 fitting engines;
//! - [`nuisance`]: missingness, outcome-regression and numerator models;
//! - [`model`], [`estimator`]: the estimand and the Stage-2 weighted,
//!   augmented estimating equation;
//! - [`variance`]: sandwich covariance and Wald inference;
//! - [`sim`]: data generators, benchmark scenarios and the replication
//!   harness.

pub mod basis;
pub mod data;
pub mod design;
pub mod error;
pub mod estimator;
pub mod formula;
pub mod gam;
pub mod glm;
pub mod model;
pub mod nuisance;
pub mod sim;
pub mod variance;

pub use data::{load_csv, validate_positivity, CsvSchema, DecisionRecord, MrtPanel};
pub use error::{Error, Result};
pub use estimator::{
    estimate_cee, estimate_with_nuisances, CeeEstimate, Stage1Config, VarianceSelect,
};
pub use formula::{Family, FormulaSpec, Term};
pub use model::{CeeModel, Feature, Link, PiMode};
pub use nuisance::{Engine, NumeratorMode};
pub use variance::{normal_quantile, wald_rows, WaldRow};
