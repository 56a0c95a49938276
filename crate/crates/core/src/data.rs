//! Longitudinal MRT panel data model: long-format CSV ingestion, structural
//! validation, and positivity checks.
//!
//! One row per (individual, decision point). Treatment and covariates are
//! always observed; the proximal outcome may be missing, encoded as an empty
//! CSV cell (never a sentinel number).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// A single (individual, decision point) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub individual_id: String,
    /// Decision-point index, 1..=T.
    pub t: u32,
    /// Availability indicator.
    pub avail: u8,
    /// Treatment assignment; forced to 0 when unavailable.
    pub treat: u8,
    /// Randomization probability for the treatment at this decision point.
    pub prob_treat: f64,
    /// Whether the proximal outcome was observed.
    pub obs_flag: u8,
    /// Proximal outcome; present iff `obs_flag == 1`.
    pub outcome: Option<f64>,
    /// Covariate payload, aligned with `MrtPanel::covariate_names`.
    pub covariates: Vec<f64>,
    /// Reference-policy probability for the post-decision window (delta > 1 only).
    pub pi_prob: Option<f64>,
}

/// A validated, immutable panel of `n` individuals x `T` decision points.
///
/// Records are sorted by (individual id, t) and stored contiguously per
/// individual, so individual `i` occupies `records[i*T .. (i+1)*T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MrtPanel {
    records: Vec<DecisionRecord>,
    individuals: Vec<String>,
    n_individuals: usize,
    t_max: u32,
    covariate_names: Vec<String>,
    delta: u32,
}

impl MrtPanel {
    /// Build a panel from loose records, sorting and validating structure.
    ///
    /// Single-individual panels are accepted here for programmatic use (unit
    /// contributions, toy fixtures); `load_csv` additionally requires n >= 2
    /// since variance estimation needs at least two independent units.
    pub fn from_records(
        mut records: Vec<DecisionRecord>,
        covariate_names: Vec<String>,
        delta: u32,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Structure("panel has no records".into()));
        }
        if delta < 1 {
            return Err(Error::Structure("delta must be >= 1".into()));
        }
        records.sort_by(|a, b| {
            (a.individual_id.as_str(), a.t).cmp(&(b.individual_id.as_str(), b.t))
        });

        for (row, r) in records.iter().enumerate() {
            if r.avail > 1 || r.treat > 1 || r.obs_flag > 1 {
                return Err(Error::Value {
                    row,
                    msg: "avail, treat and obs_flag must be binary".into(),
                });
            }
            if r.avail == 0 && (r.treat != 0 || r.prob_treat != 0.0) {
                return Err(Error::Structure(format!(
                    "individual {} t={}: unavailable decision point must have treat=0 and \
                     prob_treat=0 (treatment is deterministic when unavailable)",
                    r.individual_id, r.t
                )));
            }
            if !(0.0..=1.0).contains(&r.prob_treat) {
                return Err(Error::Value {
                    row,
                    msg: format!("prob_treat {} outside [0,1]", r.prob_treat),
                });
            }
            match (r.obs_flag, r.outcome) {
                (0, Some(_)) => {
                    return Err(Error::Consistency {
                        row,
                        msg: format!(
                            "individual {} t={}: outcome present but obs_flag=0",
                            r.individual_id, r.t
                        ),
                    })
                }
                (1, None) => {
                    return Err(Error::Consistency {
                        row,
                        msg: format!(
                            "individual {} t={}: obs_flag=1 but outcome missing",
                            r.individual_id, r.t
                        ),
                    })
                }
                (1, Some(y)) if !y.is_finite() => {
                    return Err(Error::Value {
                        row,
                        msg: "outcome must be finite".into(),
                    })
                }
                _ => {}
            }
            if let Some(pi) = r.pi_prob {
                if !(0.0..=1.0).contains(&pi) {
                    return Err(Error::Value {
                        row,
                        msg: format!("pi_prob {pi} outside [0,1]"),
                    });
                }
                if r.avail == 0 && pi != 0.0 {
                    return Err(Error::Structure(format!(
                        "individual {} t={}: pi_prob must be 0 when unavailable",
                        r.individual_id, r.t
                    )));
                }
            }
            if r.covariates.len() != covariate_names.len() {
                return Err(Error::Structure(format!(
                    "individual {} t={}: {} covariates, expected {}",
                    r.individual_id,
                    r.t,
                    r.covariates.len(),
                    covariate_names.len()
                )));
            }
            if r.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::Value {
                    row,
                    msg: "non-finite covariate".into(),
                });
            }
        }

        // Group and check each individual covers t = 1..=T with no gaps.
        let mut groups: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for r in &records {
            groups.entry(&r.individual_id).or_default().push(r.t);
        }
        let t_max = records.iter().map(|r| r.t).max().unwrap();
        let mut ragged = Vec::new();
        for (id, ts) in &groups {
            let expected: Vec<u32> = (1..=t_max).collect();
            if *ts != expected {
                ragged.push((*id).to_string());
            }
        }
        if !ragged.is_empty() {
            return Err(Error::Structure(format!(
                "ragged panel: individuals without exactly t=1..{} records: {}",
                t_max,
                ragged.join(", ")
            )));
        }
        let individuals: Vec<String> = groups.keys().map(|s| s.to_string()).collect();
        let n_individuals = individuals.len();

        Ok(MrtPanel {
            records,
            individuals,
            n_individuals,
            t_max,
            covariate_names,
            delta,
        })
    }

    pub fn records(&self) -> &[DecisionRecord] {
        &self.records
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    /// Decision points per individual.
    pub fn t_max(&self) -> u32 {
        self.t_max
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn delta(&self) -> u32 {
        self.delta
    }

    pub fn individuals(&self) -> &[String] {
        &self.individuals
    }

    /// Records of individual `i` (contiguous slice, t ascending).
    pub fn individual_records(&self, i: usize) -> &[DecisionRecord] {
        let t = self.t_max as usize;
        &self.records[i * t..(i + 1) * t]
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Flat record index of individual `i`, decision point `t` (1-based).
    pub fn record_index(&self, i: usize, t: u32) -> usize {
        i * self.t_max as usize + (t as usize - 1)
    }
}

/// Column-name mapping from CSV headers to the required roles.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub id: String,
    pub t: String,
    pub avail: String,
    pub treat: String,
    pub prob_treat: String,
    pub obs_flag: String,
    pub outcome: String,
    pub pi_prob: Option<String>,
    /// Explicit covariate columns; when `None`, every unmapped numeric column
    /// is taken as a covariate.
    pub covariates: Option<Vec<String>>,
}

impl CsvSchema {
    /// Schema using the canonical column names this crate writes.
    pub fn canonical() -> Self {
        CsvSchema {
            id: "id".into(),
            t: "t".into(),
            avail: "avail".into(),
            treat: "treat".into(),
            prob_treat: "prob_treat".into(),
            obs_flag: "obs_flag".into(),
            outcome: "outcome".into(),
            pi_prob: None,
            covariates: None,
        }
    }
}

fn parse_binary(cell: &str, role: &str, row: usize) -> Result<u8> {
    match cell.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Value {
            row,
            msg: format!("{role} must be 0 or 1, got {other:?}"),
        }),
    }
}

fn parse_f64(cell: &str, role: &str, row: usize) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::Value {
        row,
        msg: format!("{role} is not numeric: {cell:?}"),
    })
}

/// Load a long-format panel CSV.
///
/// Rows are sorted by (individual id, t); the result is independent of input
/// row order. The outcome cell must be empty exactly when `obs_flag` is 0.
pub fn load_csv(path: &Path, schema: &CsvSchema, delta: u32) -> Result<MrtPanel> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();

    let col = |name: &str, role: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?} for role {role}")))
    };
    let c_id = col(&schema.id, "id")?;
    let c_t = col(&schema.t, "t")?;
    let c_avail = col(&schema.avail, "avail")?;
    let c_treat = col(&schema.treat, "treat")?;
    let c_prob = col(&schema.prob_treat, "prob_treat")?;
    let c_obs = col(&schema.obs_flag, "obs_flag")?;
    let c_out = col(&schema.outcome, "outcome")?;
    let c_pi = match &schema.pi_prob {
        Some(name) => Some(col(name, "pi_prob")?),
        None => headers.iter().position(|h| h == "pi_prob"),
    };

    let mapped: Vec<usize> = [c_id, c_t, c_avail, c_treat, c_prob, c_obs, c_out]
        .into_iter()
        .chain(c_pi)
        .collect();

    let raw_rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;

    // Covariates: explicit list, or every unmapped column whose cells all parse
    // as numbers.
    let covariate_cols: Vec<(String, usize)> = match &schema.covariates {
        Some(names) => {
            let mut cols = Vec::new();
            for name in names {
                cols.push((name.clone(), col(name, "covariate")?));
            }
            cols
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !mapped.contains(i))
            .filter(|(i, _)| {
                raw_rows
                    .iter()
                    .all(|r| r.get(*i).is_some_and(|c| c.trim().parse::<f64>().is_ok()))
            })
            .map(|(i, h)| (h.clone(), i))
            .collect(),
    };
    let covariate_names: Vec<String> = covariate_cols.iter().map(|(n, _)| n.clone()).collect();

    let mut records = Vec::with_capacity(raw_rows.len());
    for (row, rec) in raw_rows.iter().enumerate() {
        let get = |i: usize| rec.get(i).unwrap_or("");
        let t = get(c_t)
            .trim()
            .parse::<u32>()
            .map_err(|_| Error::Value {
                row,
                msg: format!("t is not a positive integer: {:?}", get(c_t)),
            })?;
        let obs_flag = parse_binary(get(c_obs), "obs_flag", row)?;
        let out_cell = get(c_out).trim();
        let outcome = match (obs_flag, out_cell.is_empty()) {
            (0, true) => None,
            (1, false) => Some(parse_f64(out_cell, "outcome", row)?),
            (0, false) => {
                return Err(Error::Consistency {
                    row,
                    msg: format!("obs_flag=0 but outcome cell is {out_cell:?}"),
                })
            }
            (1, true) => {
                return Err(Error::Consistency {
                    row,
                    msg: "obs_flag=1 but outcome cell is empty".into(),
                })
            }
            _ => unreachable!(),
        };
        let pi_prob = match c_pi {
            Some(i) if !get(i).trim().is_empty() => Some(parse_f64(get(i), "pi_prob", row)?),
            _ => None,
        };
        let covariates = covariate_cols
            .iter()
            .map(|(n, i)| parse_f64(get(*i), n, row))
            .collect::<Result<Vec<f64>>>()?;
        records.push(DecisionRecord {
            individual_id: get(c_id).trim().to_string(),
            t,
            avail: parse_binary(get(c_avail), "avail", row)?,
            treat: parse_binary(get(c_treat), "treat", row)?,
            prob_treat: parse_f64(get(c_prob), "prob_treat", row)?,
            obs_flag,
            outcome,
            covariates,
            pi_prob,
        });
    }

    let panel = MrtPanel::from_records(records, covariate_names, delta)?;
    if panel.n_individuals() < 2 {
        return Err(Error::Structure(
            "panel must contain at least 2 individuals".into(),
        ));
    }
    Ok(panel)
}

/// Write a panel back to CSV using the canonical column names.
pub fn write_csv(panel: &MrtPanel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let has_pi = panel.records().iter().any(|r| r.pi_prob.is_some());
    let mut header = vec![
        "id".to_string(),
        "t".into(),
        "avail".into(),
        "treat".into(),
        "prob_treat".into(),
        "obs_flag".into(),
        "outcome".into(),
    ];
    if has_pi {
        header.push("pi_prob".into());
    }
    header.extend(panel.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for r in panel.records() {
        let mut row = vec![
            r.individual_id.clone(),
            r.t.to_string(),
            r.avail.to_string(),
            r.treat.to_string(),
            fmt_f64(r.prob_treat),
            r.obs_flag.to_string(),
            r.outcome.map(fmt_f64).unwrap_or_default(),
        ];
        if has_pi {
            row.push(r.pi_prob.map(fmt_f64).unwrap_or_default());
        }
        row.extend(r.covariates.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Canonical decimal formatting: shortest representation that round-trips.
fn fmt_f64(v: f64) -> String {
    let mut buf = ryu_like(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // `{}` on f64 is the shortest round-tripping decimal in Rust.
    format!("{v}")
}

/// One positivity violation: an available record with `prob_treat` outside
/// the `[c, 1-c]` margin.
#[derive(Debug, Clone, PartialEq)]
pub struct PositivityViolation {
    pub individual_id: String,
    pub t: u32,
    pub prob_treat: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PositivityReport {
    pub margin: f64,
    pub violations: Vec<PositivityViolation>,
}

impl PositivityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check the treatment-positivity margin on available records.
///
/// Unavailable records are excluded: positivity conditions on I_t = 1.
pub fn validate_positivity(panel: &MrtPanel, margin: f64) -> PositivityReport {
    let mut report = PositivityReport {
        margin,
        violations: Vec::new(),
    };
    for r in panel.records() {
        if r.avail == 1 && (r.prob_treat < margin || r.prob_treat > 1.0 - margin) {
            report.violations.push(PositivityViolation {
                individual_id: r.individual_id.clone(),
                t: r.t,
                prob_treat: r.prob_treat,
            });
        }
    }
    report
}

/// Default positivity margin; the design guarantees existence of some c > 0
/// but not its value.
pub const DEFAULT_POSITIVITY_MARGIN: f64 = 0.01;

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn record(
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

    fn toy_panel() -> MrtPanel {
        let mut recs = Vec::new();
        for id in ["a", "b"] {
            for t in 1..=3 {
                recs.push(record(id, t, 1, (t % 2) as u8, 0.4, 1, Some(t as f64), 0.1));
            }
        }
        MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap()
    }

    #[test]
    fn well_formed_panel_round_trips() {
        let p = toy_panel();
        assert_eq!(p.n_individuals(), 2);
        assert_eq!(p.t_max(), 3);
        assert_eq!(p.records().len(), 6);
    }

    #[test]
    fn unavailable_with_treatment_rejected() {
        let mut recs = vec![record("a", 1, 0, 1, 0.0, 1, Some(1.0), 0.0)];
        recs.push(record("b", 1, 1, 0, 0.4, 1, Some(1.0), 0.0));
        let err = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err}");
    }

    #[test]
    fn outcome_obsflag_mismatch_rejected() {
        let recs = vec![record("a", 1, 1, 0, 0.4, 0, Some(5.2), 0.0)];
        let err = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap_err();
        assert!(matches!(err, Error::Consistency { .. }), "{err}");
    }

    #[test]
    fn ragged_panel_names_offenders() {
        let recs = vec![
            record("a", 1, 1, 0, 0.4, 1, Some(1.0), 0.0),
            record("a", 2, 1, 0, 0.4, 1, Some(1.0), 0.0),
            record("b", 1, 1, 0, 0.4, 1, Some(1.0), 0.0),
        ];
        let err = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap_err();
        match err {
            Error::Structure(msg) => assert!(msg.contains('b'), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn csv_load_sorts_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "id,t,avail,treat,prob_treat,obs_flag,outcome,z").unwrap();
        // Deliberately shuffled row order.
        writeln!(f, "b,2,1,0,0.4,0,,1.5").unwrap();
        writeln!(f, "a,1,1,1,0.4,1,2.5,-0.5").unwrap();
        writeln!(f, "b,1,1,1,0.4,1,1.0,0.0").unwrap();
        writeln!(f, "a,2,0,0,0,1,3.0,0.25").unwrap();
        let panel = load_csv(&path, &CsvSchema::canonical(), 1).unwrap();
        assert_eq!(panel.n_individuals(), 2);
        assert_eq!(panel.t_max(), 2);
        assert_eq!(panel.covariate_names(), ["z"]);
        assert_eq!(panel.records()[0].individual_id, "a");
        assert_eq!(panel.records()[0].t, 1);
        assert_eq!(panel.records()[3].outcome, None);
    }

    #[test]
    fn csv_missing_column_names_role() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "id,t,avail,treat,obs_flag,outcome").unwrap();
        writeln!(f, "a,1,1,0,1,1.0").unwrap();
        let err = load_csv(&path, &CsvSchema::canonical(), 1).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("prob_treat"), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn csv_outcome_present_with_obsflag_zero_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "id,t,avail,treat,prob_treat,obs_flag,outcome").unwrap();
        writeln!(f, "a,1,1,0,0.4,0,5.2").unwrap();
        writeln!(f, "b,1,1,0,0.4,1,1.0").unwrap();
        let err = load_csv(&path, &CsvSchema::canonical(), 1).unwrap_err();
        assert!(matches!(err, Error::Consistency { row: 0, .. }), "{err}");
    }

    #[test]
    fn positivity_report() {
        let mut recs = Vec::new();
        for id in ["a", "b"] {
            recs.push(record(id, 1, 1, 0, 0.4, 1, Some(0.0), 0.0));
            recs.push(record(id, 2, 0, 0, 0.0, 1, Some(0.0), 0.0));
        }
        let panel = MrtPanel::from_records(recs, vec!["z".into()], 1).unwrap();
        // All available probs at 0.4: clean report, unavailable p=0 excluded.
        assert!(validate_positivity(&panel, 0.05).is_ok());

        let recs2 = vec![
            record("a", 1, 1, 1, 0.999, 1, Some(0.0), 0.0),
            record("b", 1, 1, 0, 0.4, 1, Some(0.0), 0.0),
        ];
        let panel2 = MrtPanel::from_records(recs2, vec!["z".into()], 1).unwrap();
        let rep = validate_positivity(&panel2, 0.05);
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].individual_id, "a");
    }

    #[test]
    fn write_then_load_is_identity() {
        let p = toy_panel();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_csv(&p, &path).unwrap();
        let p2 = load_csv(&path, &CsvSchema::canonical(), 1).unwrap();
        assert_eq!(p, p2);
    }
}
