//! TOML run configuration: one block per subcommand, scalar fields
//! overridable from the command line.

use serde::Deserialize;

use mrtdr_core::{Error, Family, Result};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub estimate: Option<EstimateConfig>,
    pub simulate: Option<SimulateConfig>,
    pub report: Option<ReportConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub data: String,
    #[serde(default = "default_link")]
    pub link: String,
    /// Effect-modifier feature list, e.g. "1 + t" or "1 + is_weekday".
    #[serde(default = "default_f")]
    pub f: String,
    #[serde(default = "default_delta")]
    pub delta: u32,
    /// Reference-policy probability for delta > 1; mutually exclusive with
    /// `pi_column`.
    pub pi_constant: Option<f64>,
    #[serde(default)]
    pub pi_column: bool,
    /// Numerator probability: a constant, a formula, or (default) the
    /// empirical treatment rate.
    pub ptilde_constant: Option<f64>,
    pub ptilde_formula: Option<String>,
    pub e_formula: String,
    pub mu_formula: String,
    #[serde(default = "default_gaussian")]
    pub mu_family: String,
    #[serde(default = "default_engine")]
    pub engine: String,
    #[serde(default = "default_variance")]
    pub variance: String,
    #[serde(default = "default_level")]
    pub level: f64,
    pub output: Option<String>,
    #[serde(default)]
    pub schema: SchemaConfig,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub id: Option<String>,
    pub t: Option<String>,
    pub avail: Option<String>,
    pub treat: Option<String>,
    pub prob_treat: Option<String>,
    pub obs_flag: Option<String>,
    pub outcome: Option<String>,
    pub pi_prob: Option<String>,
    pub covariates: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub pattern_e: String,
    pub pattern_mu0: String,
    /// Sample sizes to sweep.
    pub n: Vec<usize>,
    #[serde(default = "default_t_max")]
    pub t_max: u32,
    #[serde(default = "default_p_treat")]
    pub p_treat: f64,
    pub beta_true: Option<[f64; 2]>,
    #[serde(default = "default_link")]
    pub link: String,
    pub n_reps: u64,
    pub seed: u64,
    pub methods: Vec<String>,
    #[serde(default = "default_engine")]
    pub engine: String,
    #[serde(default = "default_level")]
    pub level: f64,
    pub metrics_csv: Option<String>,
    pub long_csv: Option<String>,
    /// Simulation worker threads; default all available cores.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default = "default_format")]
    pub format: String,
}

fn default_link() -> String {
    "identity".into()
}
fn default_f() -> String {
    "1".into()
}
fn default_delta() -> u32 {
    1
}
fn default_gaussian() -> String {
    "gaussian".into()
}
fn default_engine() -> String {
    "gam".into()
}
fn default_variance() -> String {
    "auto".into()
}
fn default_level() -> f64 {
    0.95
}
fn default_t_max() -> u32 {
    20
}
fn default_p_treat() -> f64 {
    0.4
}
fn default_format() -> String {
    "text".into()
}

pub fn load_config(path: &std::path::Path) -> Result<(FileConfig, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: FileConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    Ok((cfg, text))
}

pub fn parse_link(s: &str) -> Result<mrtdr_core::Link> {
    match s {
        "identity" => Ok(mrtdr_core::Link::Identity),
        "log" => Ok(mrtdr_core::Link::Log),
        other => Err(Error::Config(format!("unknown link {other:?}"))),
    }
}

pub fn parse_family(s: &str) -> Result<Family> {
    match s {
        "gaussian" => Ok(Family::Gaussian),
        "binomial" => Ok(Family::Binomial),
        other => Err(Error::Config(format!("unknown family {other:?}"))),
    }
}

pub fn parse_engine(s: &str) -> Result<mrtdr_core::Engine> {
    match s {
        "glm" => Ok(mrtdr_core::Engine::Glm),
        "gam" => Ok(mrtdr_core::Engine::default_gam()),
        other => Err(Error::Config(format!("unknown engine {other:?}"))),
    }
}

pub fn parse_variance(s: &str) -> Result<mrtdr_core::VarianceSelect> {
    match s {
        "auto" => Ok(mrtdr_core::VarianceSelect::Auto),
        "parametric" => Ok(mrtdr_core::VarianceSelect::Parametric),
        "nonparametric" => Ok(mrtdr_core::VarianceSelect::Nonparametric),
        other => Err(Error::Config(format!("unknown variance mode {other:?}"))),
    }
}

pub fn parse_pattern(s: &str) -> Result<mrtdr_core::sim::Pattern> {
    use mrtdr_core::sim::Pattern;
    match s {
        "linear" => Ok(Pattern::Linear),
        "simple_nonlinear" => Ok(Pattern::SimpleNonlinear),
        "periodic" => Ok(Pattern::Periodic),
        other => Err(Error::Config(format!("unknown pattern {other:?}"))),
    }
}

pub fn parse_method(s: &str) -> Result<mrtdr_core::sim::Method> {
    use mrtdr_core::sim::{Baseline, Implementation, Method};
    match s {
        "dr_A" | "A" => Ok(Method::Dr(Implementation::A)),
        "dr_B" | "B" => Ok(Method::Dr(Implementation::B)),
        "dr_C" | "C" => Ok(Method::Dr(Implementation::C)),
        "dr_D" | "D" => Ok(Method::Dr(Implementation::D)),
        "complete_case" => Ok(Method::Baseline(Baseline::CompleteCase)),
        "impute_zero" => Ok(Method::Baseline(Baseline::ImputeZero)),
        "impute_mean" => Ok(Method::Baseline(Baseline::ImputeMean)),
        other => Err(Error::Config(format!("unknown method {other:?}"))),
    }
}

/// FNV-1a 64-bit hash of the raw config text, recorded in run metadata.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
