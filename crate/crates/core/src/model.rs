//! The estimand specification: link function, effect-modifier feature map,
//! window length and reference policy.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::MrtPanel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
}

/// Signature of a custom effect-modifier transform of (t, covariates).
pub type FeatureFn = dyn Fn(u32, &[f64]) -> f64 + Send + Sync;

/// One entry of the effect-modifier feature map f_t(S_t).
#[derive(Clone)]
pub enum Feature {
    Intercept,
    Covariate(String),
    TimeIndex,
    /// Arbitrary transform of (t, covariate vector); covariates are in panel
    /// column order.
    Custom {
        name: String,
        f: Arc<FeatureFn>,
    },
}

impl fmt::Debug for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::Intercept => write!(f, "Intercept"),
            Feature::Covariate(c) => write!(f, "Covariate({c})"),
            Feature::TimeIndex => write!(f, "TimeIndex"),
            Feature::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl Feature {
    pub fn label(&self) -> String {
        match self {
            Feature::Intercept => "(intercept)".into(),
            Feature::Covariate(c) => c.clone(),
            Feature::TimeIndex => "t".into(),
            Feature::Custom { name, .. } => name.clone(),
        }
    }

    /// Parse a feature list like `"1 + t"`, `"1 + z"`, `"1 + is_weekday"`.
    pub fn parse_list(text: &str) -> Result<Vec<Feature>> {
        let mut out = Vec::new();
        for raw in text.split('+') {
            let tok = raw.trim();
            match tok {
                "" => return Err(Error::Config("empty feature term".into())),
                "1" => out.push(Feature::Intercept),
                "t" => out.push(Feature::TimeIndex),
                name if name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') => {
                    out.push(Feature::Covariate(name.to_string()))
                }
                other => return Err(Error::Config(format!("bad feature term {other:?}"))),
            }
        }
        if out.is_empty() {
            return Err(Error::Config("feature map is empty".into()));
        }
        Ok(out)
    }
}

/// How the reference-policy probabilities pi_u are supplied for delta > 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiMode {
    /// Delta = 1: the reference policy plays no role.
    Irrelevant,
    /// Read from the panel's pi_prob column.
    Column,
    /// Constant probability for every available decision point.
    Constant(f64),
}

/// The causal excursion effect model CEE(t; s) = g-contrast = f_t(s)' beta.
#[derive(Debug, Clone)]
pub struct CeeModel {
    pub link: Link,
    pub features: Vec<Feature>,
    pub delta: u32,
    pub pi_mode: PiMode,
}

impl CeeModel {
    pub fn new(link: Link, features: Vec<Feature>, delta: u32, pi_mode: PiMode) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Config("feature map must have dimension >= 1".into()));
        }
        if delta < 1 {
            return Err(Error::Config("delta must be >= 1".into()));
        }
        if delta == 1 && pi_mode != PiMode::Irrelevant {
            return Err(Error::Config(
                "delta = 1 makes the reference policy irrelevant; use PiMode::Irrelevant".into(),
            ));
        }
        if delta > 1 && pi_mode == PiMode::Irrelevant {
            return Err(Error::Config(
                "delta > 1 requires a reference policy (column or constant)".into(),
            ));
        }
        if let PiMode::Constant(c) = pi_mode {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("pi constant {c} outside [0,1]")));
            }
        }
        Ok(CeeModel {
            link,
            features,
            delta,
            pi_mode,
        })
    }

    /// Marginal identity-link model with delta = 1.
    pub fn marginal(link: Link) -> CeeModel {
        CeeModel {
            link,
            features: vec![Feature::Intercept],
            delta: 1,
            pi_mode: PiMode::Irrelevant,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    /// Evaluate the feature matrix, one row per panel record.
    pub fn feature_matrix(&self, panel: &MrtPanel) -> Result<DMatrix<f64>> {
        let n = panel.records().len();
        let p = self.dim();
        let mut idx = Vec::with_capacity(p);
        for feat in &self.features {
            if let Feature::Covariate(name) = feat {
                let j = panel
                    .covariate_index(name)
                    .ok_or_else(|| Error::Config(format!("unknown effect modifier {name:?}")))?;
                idx.push(Some(j));
            } else {
                idx.push(None);
            }
        }
        let mut out = DMatrix::zeros(n, p);
        for (i, rec) in panel.records().iter().enumerate() {
            for (j, feat) in self.features.iter().enumerate() {
                let v = match feat {
                    Feature::Intercept => 1.0,
                    Feature::TimeIndex => rec.t as f64,
                    Feature::Covariate(_) => rec.covariates[idx[j].unwrap()],
                    Feature::Custom { f, .. } => f(rec.t, &rec.covariates),
                };
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "non-finite feature {} at individual {} t={}",
                        feat.label(),
                        rec.individual_id,
                        rec.t
                    )));
                }
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}
