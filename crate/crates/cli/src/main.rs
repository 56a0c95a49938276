//! Batch front door: `estimate` on a CSV panel, `simulate` for scenario
//! sweeps, `report` to render result tables.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical error.

mod config;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mrtdr_core::sim::{self, SimScenario, StudyConfig};
use mrtdr_core::{
    estimate_cee, load_csv, wald_rows, CeeModel, CsvSchema, Error, Feature, FormulaSpec,
    NumeratorMode, PiMode, Result, Stage1Config,
};

use config::{
    config_hash, load_config, parse_engine, parse_family, parse_link, parse_method, parse_pattern,
    parse_variance, EstimateConfig, ReportConfig, SimulateConfig,
};

#[derive(Parser)]
#[command(name = "mrtdr", version, about = "Doubly robust causal excursion effect estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate causal excursion effects from a panel CSV.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Override the data path in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the JSON artifact path in the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override the Stage-1 engine (glm | gam).
        #[arg(long)]
        engine: Option<String>,
        /// Override the variance mode (auto | parametric | nonparametric).
        #[arg(long)]
        variance: Option<String>,
    },
    /// Run a replication study over the benchmark generators.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<u64>,
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
        #[arg(long)]
        long_csv: Option<PathBuf>,
    },
    /// Render estimate artifacts and metrics CSVs as tables.
    Report {
        /// Estimate JSON and/or metrics CSV files.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// text | csv | json
        #[arg(long)]
        format: Option<String>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Schema(_)
        | Error::Value { .. }
        | Error::Consistency { .. }
        | Error::Structure(_)
        | Error::Data(_)
        | Error::Io(_)
        | Error::Csv(_) => 3,
        Error::Singular(_)
        | Error::Estimability(_)
        | Error::NonConvergence { .. }
        | Error::Domain(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Estimate {
            config,
            data,
            output,
            engine,
            variance,
        } => cmd_estimate(&config, data, output, engine, variance),
        Cmd::Simulate {
            config,
            seed,
            reps,
            metrics_csv,
            long_csv,
        } => cmd_simulate(&config, seed, reps, metrics_csv, long_csv),
        Cmd::Report {
            inputs,
            config,
            format,
        } => cmd_report(inputs, config, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[derive(Serialize)]
struct Metadata {
    version: String,
    config_hash: String,
    config_path: String,
    seed: Option<u64>,
}

fn metadata(config_path: &Path, config_text: &str, seed: Option<u64>) -> Metadata {
    Metadata {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(config_text),
        config_path: config_path.display().to_string(),
        seed,
    }
}

#[derive(Serialize)]
struct NuisanceDiagnostics {
    engine: String,
    e_dim: usize,
    mu_dim: usize,
    e_lambda: Option<f64>,
    mu_lambda: Option<f64>,
    min_e_hat: f64,
}

#[derive(Serialize)]
struct EstimateArtifact {
    coefficients: Vec<mrtdr_core::WaldRow>,
    vcov: Vec<Vec<f64>>,
    link: String,
    solver: mrtdr_core::estimator::SolverKind,
    iterations: usize,
    final_estfn_norm: f64,
    variance: mrtdr_core::estimator::VarianceKind,
    level: f64,
    nuisance: NuisanceDiagnostics,
    warnings: Vec<String>,
    metadata: Metadata,
}

fn build_schema(cfg: &EstimateConfig) -> CsvSchema {
    let mut schema = CsvSchema::canonical();
    let s = &cfg.schema;
    let set = |target: &mut String, v: &Option<String>| {
        if let Some(v) = v {
            *target = v.clone();
        }
    };
    set(&mut schema.id, &s.id);
    set(&mut schema.t, &s.t);
    set(&mut schema.avail, &s.avail);
    set(&mut schema.treat, &s.treat);
    set(&mut schema.prob_treat, &s.prob_treat);
    set(&mut schema.obs_flag, &s.obs_flag);
    set(&mut schema.outcome, &s.outcome);
    schema.pi_prob = s.pi_prob.clone();
    schema.covariates = s.covariates.clone();
    schema
}

fn cmd_estimate(
    config_path: &Path,
    data_override: Option<PathBuf>,
    output_override: Option<PathBuf>,
    engine_override: Option<String>,
    variance_override: Option<String>,
) -> Result<()> {
    let (file_cfg, text) = load_config(config_path)?;
    let mut cfg = file_cfg
        .estimate
        .ok_or_else(|| Error::Config("config has no [estimate] block".into()))?;
    if let Some(d) = data_override {
        cfg.data = d.display().to_string();
    }
    if let Some(o) = output_override {
        cfg.output = Some(o.display().to_string());
    }
    if let Some(e) = engine_override {
        cfg.engine = e;
    }
    if let Some(v) = variance_override {
        cfg.variance = v;
    }

    let link = parse_link(&cfg.link)?;
    let features = Feature::parse_list(&cfg.f)?;
    let pi_mode = if cfg.delta == 1 {
        if cfg.pi_column || cfg.pi_constant.is_some() {
            return Err(Error::Config(
                "delta = 1 makes the reference policy irrelevant; drop pi settings".into(),
            ));
        }
        PiMode::Irrelevant
    } else if cfg.pi_column {
        if cfg.pi_constant.is_some() {
            return Err(Error::Config("set pi_column or pi_constant, not both".into()));
        }
        PiMode::Column
    } else if let Some(c) = cfg.pi_constant {
        PiMode::Constant(c)
    } else {
        return Err(Error::Config("delta > 1 needs pi_column or pi_constant".into()));
    };
    let model = CeeModel::new(link, features, cfg.delta, pi_mode)?;

    let numerator = match (&cfg.ptilde_constant, &cfg.ptilde_formula) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "set ptilde_constant or ptilde_formula, not both".into(),
            ))
        }
        (Some(c), None) => NumeratorMode::Constant(*c),
        (None, Some(f)) => NumeratorMode::Formula(FormulaSpec::parse(
            f,
            mrtdr_core::Family::Binomial,
        )?),
        (None, None) => NumeratorMode::EmpiricalMean,
    };

    let stage1 = Stage1Config {
        e_spec: FormulaSpec::parse(&cfg.e_formula, mrtdr_core::Family::Binomial)?,
        mu_spec: FormulaSpec::parse(&cfg.mu_formula, parse_family(&cfg.mu_family)?)?,
        engine: parse_engine(&cfg.engine)?,
        numerator,
        variance: parse_variance(&cfg.variance)?,
    };

    let schema = build_schema(&cfg);
    let panel = load_csv(Path::new(&cfg.data), &schema, cfg.delta)?;
    let (est, fits) = estimate_cee(&panel, &model, &stage1)?;
    let rows = wald_rows(&est.feature_labels, &est.beta, &est.vcov, cfg.level)?;

    let p = est.beta.len();
    let artifact = EstimateArtifact {
        coefficients: rows.clone(),
        vcov: (0..p)
            .map(|i| (0..p).map(|j| est.vcov[(i, j)]).collect())
            .collect(),
        link: cfg.link.clone(),
        solver: est.solver,
        iterations: est.iterations,
        final_estfn_norm: est.final_estfn_norm,
        variance: est.variance_kind,
        level: cfg.level,
        nuisance: NuisanceDiagnostics {
            engine: cfg.engine.clone(),
            e_dim: fits.e_fit.coef.len(),
            mu_dim: fits.mu_fit.coef.len(),
            e_lambda: fits.e_fit.lambda,
            mu_lambda: fits.mu_fit.lambda,
            min_e_hat: est.min_e_hat,
        },
        warnings: est.warnings.clone(),
        metadata: metadata(config_path, &text, None),
    };
    if let Some(out) = &cfg.output {
        let json = serde_json::to_string_pretty(&artifact)
            .map_err(|e| Error::Data(format!("artifact serialization: {e}")))?;
        std::fs::write(out, json)?;
    }

    println!("{}", render::coefficient_table(&rows, cfg.level));
    println!(
        "link={}  solver={:?}  variance={:?}  iterations={}  |U|={:.2e}  min_e_hat={:.4}",
        cfg.link, est.solver, est.variance_kind, est.iterations, est.final_estfn_norm, est.min_e_hat
    );
    for w in &est.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_simulate(
    config_path: &Path,
    seed_override: Option<u64>,
    reps_override: Option<u64>,
    metrics_override: Option<PathBuf>,
    long_override: Option<PathBuf>,
) -> Result<()> {
    let (file_cfg, text) = load_config(config_path)?;
    let mut cfg: SimulateConfig = file_cfg
        .simulate
        .ok_or_else(|| Error::Config("config has no [simulate] block".into()))?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    if let Some(r) = reps_override {
        cfg.n_reps = r;
    }
    if let Some(p) = metrics_override {
        cfg.metrics_csv = Some(p.display().to_string());
    }
    if let Some(p) = long_override {
        cfg.long_csv = Some(p.display().to_string());
    }
    if cfg.n.is_empty() {
        return Err(Error::Config("simulate needs at least one sample size".into()));
    }
    let methods = cfg
        .methods
        .iter()
        .map(|m| parse_method(m))
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(Error::Config("simulate needs at least one method".into()));
    }
    let engine = parse_engine(&cfg.engine)?;
    let link = parse_link(&cfg.link)?;

    let run_all = || -> Result<Vec<sim::MetricsRow>> {
        let mut all_rows = Vec::new();
        for &n in &cfg.n {
            let mut scenario = SimScenario {
                pattern_e: parse_pattern(&cfg.pattern_e)?,
                pattern_mu0: parse_pattern(&cfg.pattern_mu0)?,
                n,
                t_max: cfg.t_max,
                p_treat: cfg.p_treat,
                beta_true: [1.5, 2.1],
                link,
            };
            if let Some(b) = cfg.beta_true {
                scenario.beta_true = b;
            } else if link == mrtdr_core::Link::Log {
                scenario.beta_true = [0.2, 0.1];
            }
            let study_cfg = StudyConfig {
                scenario: scenario.validated()?,
                n_reps: cfg.n_reps,
                seed: cfg.seed,
                methods: methods.clone(),
                engine: engine.clone(),
                level: cfg.level,
            };
            let study = sim::run_study(&study_cfg)?;
            if study.flagged {
                eprintln!(
                    "warning: n={n}: some method failed on more than 5% of replications"
                );
            }
            all_rows.extend(sim::metrics_rows(&study));
        }
        Ok(all_rows)
    };
    let rows = match cfg.threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(run_all)?
        }
        None => run_all()?,
    };

    if let Some(path) = &cfg.metrics_csv {
        sim::write_metrics_csv(Path::new(path), &rows)?;
    }
    if let Some(path) = &cfg.long_csv {
        sim::write_long_csv(Path::new(path), &rows)?;
    }

    let meta = metadata(config_path, &text, Some(cfg.seed));
    println!(
        "# seed={} reps={} config_hash={} version={}",
        cfg.seed, cfg.n_reps, meta.config_hash, meta.version
    );
    print_metric_rows(&rows);
    Ok(())
}

fn print_metric_rows(rows: &[sim::MetricsRow]) {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.n.to_string(),
                r.coefficient.clone(),
                format!("{:.4}", r.bias),
                format!("{:.4}", r.mse),
                format!("{:.3}", r.coverage),
                format!("{:.4}", r.mean_se),
                format!("{:.4}", r.mc_sd),
                r.n_failed.to_string(),
            ]
        })
        .collect();
    println!(
        "{}",
        render::table(
            &["method", "n", "coef", "bias", "mse", "coverage", "mean_se", "mc_sd", "failed"],
            &body
        )
    );
}

fn cmd_report(
    mut inputs: Vec<PathBuf>,
    config_path: Option<PathBuf>,
    format_override: Option<String>,
) -> Result<()> {
    let mut format = "text".to_string();
    if let Some(path) = &config_path {
        let (file_cfg, _) = load_config(path)?;
        let rc: ReportConfig = file_cfg.report.unwrap_or_default();
        inputs.extend(rc.inputs.iter().map(PathBuf::from));
        format = rc.format;
    }
    if let Some(f) = format_override {
        format = f;
    }
    if !matches!(format.as_str(), "text" | "csv" | "json") {
        return Err(Error::Config(format!("unknown report format {format:?}")));
    }
    if inputs.is_empty() {
        eprintln!("warning: no report inputs; nothing to do");
        return Ok(());
    }

    let mut json_docs = Vec::new();
    let mut coef_rows: Vec<(String, mrtdr_core::WaldRow)> = Vec::new();
    let mut metric_rows: Vec<sim::MetricsRow> = Vec::new();
    for path in &inputs {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "json" => {
                let text = std::fs::read_to_string(path)?;
                let doc: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("{}: bad JSON: {e}", path.display())))?;
                if let Some(coefs) = doc.get("coefficients").and_then(|c| c.as_array()) {
                    for c in coefs {
                        let row: mrtdr_core::WaldRow = serde_json::from_value(c.clone())
                            .map_err(|e| {
                                Error::Data(format!("{}: bad coefficient row: {e}", path.display()))
                            })?;
                        coef_rows.push((path.display().to_string(), row));
                    }
                }
                json_docs.push(doc);
            }
            "csv" => {
                let mut reader = csv::Reader::from_path(path)?;
                for rec in reader.deserialize::<sim::MetricsRow>() {
                    metric_rows.push(rec.map_err(|e| {
                        Error::Data(format!("{}: bad metrics row: {e}", path.display()))
                    })?);
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unsupported report input extension {other:?} ({})",
                    path.display()
                )))
            }
        }
    }

    match format.as_str() {
        "json" => {
            let out = serde_json::json!({
                "estimates": json_docs,
                "metrics": metric_rows,
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        "csv" => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            if !coef_rows.is_empty() {
                w.write_record([
                    "source", "term", "estimate", "std_err", "lower", "upper", "starred",
                ])?;
                for (src, r) in &coef_rows {
                    w.write_record([
                        src.as_str(),
                        &r.label,
                        &format!("{}", r.estimate),
                        &format!("{}", r.std_err),
                        &format!("{}", r.lower),
                        &format!("{}", r.upper),
                        if render::ci_star(r.lower, r.upper) == "*" { "1" } else { "0" },
                    ])?;
                }
            }
            for m in &metric_rows {
                w.serialize(m)?;
            }
            w.flush()?;
        }
        _ => {
            if !coef_rows.is_empty() {
                let body: Vec<Vec<String>> = coef_rows
                    .iter()
                    .map(|(src, r)| {
                        vec![
                            src.clone(),
                            r.label.clone(),
                            format!("{:.4}", r.estimate),
                            format!(
                                "({:.4}, {:.4}){}",
                                r.lower,
                                r.upper,
                                render::ci_star(r.lower, r.upper)
                            ),
                        ]
                    })
                    .collect();
                println!(
                    "{}",
                    render::table(&["source", "term", "estimate", "CI"], &body)
                );
            }
            if !metric_rows.is_empty() {
                print_metric_rows(&metric_rows);
            }
        }
    }
    Ok(())
}
