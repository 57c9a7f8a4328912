//! CSV and JSON persistence for every stage's outputs.
//!
//! Floats are written with 17 significant digits so they read back bit for
//! bit; NaN is an empty field.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::biasest::{BiasEstimate, EstimateKind};
use crate::covariates::{ColumnSpec, Design, SchoolFeatureRow};
use crate::matching::{MatchPair, MatchedSample};
use crate::meta::MetaCellResult;
use crate::nullsim::{Cell, FailedReplicate, NullMode, NullReference};
use crate::propensity::BalanceReport;
use crate::stats::{mean, sample_sd, sample_variance};
use crate::synthpop::{
    seed_serde, GenerationDiagnostics, HistoryPoint, PopulationSnapshot, ScenarioConfig, SchoolUnit, StudentUnit,
};
use crate::{Error, Outcome, Result, SchoolId, StudentId};

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.16e}")
    }
}

pub fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    if s.is_empty() {
        Ok(f64::NAN)
    } else {
        s.parse().map_err(|e| format!("bad number `{s}`: {e}"))
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Header and string records of a CSV file.
struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Table { header, rows })
    }

    fn col(&self, path: &Path, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format_err(path, format!("missing column `{name}`")))
    }
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let s = rec.get(i).unwrap_or("");
    s.parse().map_err(|e| format_err(path, format!("bad value `{s}`: {e}")))
}

fn float(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<f64> {
    parse_f64(rec.get(i).unwrap_or("")).map_err(|e| format_err(path, e))
}

fn opt_float(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<Option<f64>> {
    let v = float(path, rec, i)?;
    Ok((!v.is_nan()).then_some(v))
}

fn bool01(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn parse_bool01(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<bool> {
    match rec.get(i) {
        Some("1") => Ok(true),
        Some("0") => Ok(false),
        other => Err(format_err(path, format!("expected 0/1, found {other:?}"))),
    }
}

fn parse_outcome(path: &Path, s: &str) -> Result<Outcome> {
    Outcome::parse(s).ok_or_else(|| format_err(path, format!("unknown outcome `{s}`")))
}

pub const SCHOOLS_CSV: &str = "schools.csv";
pub const STUDENTS_CSV: &str = "students.csv";
pub const POPULATION_JSON: &str = "population.json";

/// Population sidecar: everything in the snapshot that is not per-unit data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationSidecar {
    pub config: ScenarioConfig,
    pub school_covariate_names: Vec<String>,
    pub student_covariate_names: Vec<String>,
    pub history_years: Vec<i32>,
    pub true_bias: [f64; 3],
    pub diagnostics: GenerationDiagnostics,
    pub n_schools: usize,
    pub n_students: usize,
}

/// Write `schools.csv`, `students.csv` and `population.json` into `dir`.
pub fn write_population(dir: &Path, pop: &PopulationSnapshot) -> Result<()> {
    let mut years: Vec<i32> = pop
        .schools
        .iter()
        .flat_map(|s| s.outcome_history.iter().map(|h| h.year))
        .collect();
    years.sort_unstable();
    years.dedup();

    let mut w = csv_writer(&dir.join(SCHOOLS_CSV))?;
    let mut header: Vec<String> = ["school_id", "selected", "treated", "hidden_u"].map(String::from).to_vec();
    header.extend(pop.school_covariate_names.iter().cloned());
    header.extend(years.iter().map(|y| format!("academic_{y}")));
    header.extend(years.iter().map(|y| format!("grade_level_{y}")));
    w.write_record(&header)?;
    for s in &pop.schools {
        let mut rec = vec![
            s.school_id.0.to_string(),
            bool01(s.selected).into(),
            bool01(s.treated).into(),
            fmt_f64(s.hidden_u),
        ];
        rec.extend(s.covariates.iter().map(|&v| fmt_f64(v)));
        let by_year: BTreeMap<i32, &HistoryPoint> = s.outcome_history.iter().map(|h| (h.year, h)).collect();
        rec.extend(years.iter().map(|y| by_year.get(y).map(|h| fmt_f64(h.academic)).unwrap_or_default()));
        rec.extend(years.iter().map(|y| by_year.get(y).map(|h| fmt_f64(h.grade_level)).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join(STUDENTS_CSV))?;
    let mut header: Vec<String> = ["student_id", "school_id"].map(String::from).to_vec();
    header.extend(pop.student_covariate_names.iter().cloned());
    header.extend(Outcome::ALL.iter().map(|o| o.name().to_string()));
    w.write_record(&header)?;
    for st in &pop.students {
        let mut rec = vec![st.student_id.0.to_string(), st.school_id.0.to_string()];
        rec.extend(st.covariates.iter().map(|&v| fmt_f64(v)));
        rec.extend(st.outcomes.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;

    write_json(
        &dir.join(POPULATION_JSON),
        &PopulationSidecar {
            config: pop.config.clone(),
            school_covariate_names: pop.school_covariate_names.clone(),
            student_covariate_names: pop.student_covariate_names.clone(),
            history_years: years,
            true_bias: pop.true_bias,
            diagnostics: pop.diagnostics,
            n_schools: pop.schools.len(),
            n_students: pop.students.len(),
        },
    )
}

pub fn read_population(dir: &Path) -> Result<PopulationSnapshot> {
    let side: PopulationSidecar = read_json(&dir.join(POPULATION_JSON))?;

    let path = dir.join(SCHOOLS_CSV);
    let t = Table::read(&path)?;
    let id = t.col(&path, "school_id")?;
    let sel = t.col(&path, "selected")?;
    let trt = t.col(&path, "treated")?;
    let u = t.col(&path, "hidden_u")?;
    let covs = side
        .school_covariate_names
        .iter()
        .map(|n| t.col(&path, n))
        .collect::<Result<Vec<_>>>()?;
    let acad = side
        .history_years
        .iter()
        .map(|y| t.col(&path, &format!("academic_{y}")))
        .collect::<Result<Vec<_>>>()?;
    let grade = side
        .history_years
        .iter()
        .map(|y| t.col(&path, &format!("grade_level_{y}")))
        .collect::<Result<Vec<_>>>()?;
    let mut schools = Vec::with_capacity(t.rows.len());
    for rec in &t.rows {
        let mut history = Vec::new();
        for (k, &year) in side.history_years.iter().enumerate() {
            if rec.get(acad[k]).unwrap_or("").is_empty() {
                continue;
            }
            history.push(HistoryPoint {
                year,
                academic: float(&path, rec, acad[k])?,
                grade_level: float(&path, rec, grade[k])?,
            });
        }
        schools.push(SchoolUnit {
            school_id: SchoolId(field(&path, rec, id)?),
            covariates: covs.iter().map(|&c| float(&path, rec, c)).collect::<Result<_>>()?,
            hidden_u: float(&path, rec, u)?,
            selected: parse_bool01(&path, rec, sel)?,
            treated: parse_bool01(&path, rec, trt)?,
            outcome_history: history,
        });
    }

    let path = dir.join(STUDENTS_CSV);
    let t = Table::read(&path)?;
    let sid = t.col(&path, "student_id")?;
    let sch = t.col(&path, "school_id")?;
    let covs = side
        .student_covariate_names
        .iter()
        .map(|n| t.col(&path, n))
        .collect::<Result<Vec<_>>>()?;
    let outs = Outcome::ALL
        .iter()
        .map(|o| t.col(&path, o.name()))
        .collect::<Result<Vec<_>>>()?;
    let mut students = Vec::with_capacity(t.rows.len());
    for rec in &t.rows {
        students.push(StudentUnit {
            student_id: StudentId(field(&path, rec, sid)?),
            school_id: SchoolId(field(&path, rec, sch)?),
            covariates: covs.iter().map(|&c| float(&path, rec, c)).collect::<Result<_>>()?,
            outcomes: [
                float(&path, rec, outs[0])?,
                float(&path, rec, outs[1])?,
                float(&path, rec, outs[2])?,
            ],
        });
    }
    if schools.len() != side.n_schools || students.len() != side.n_students {
        return Err(format_err(dir, "row counts disagree with population.json"));
    }
    Ok(PopulationSnapshot {
        config: side.config,
        school_covariate_names: side.school_covariate_names,
        student_covariate_names: side.student_covariate_names,
        schools,
        students,
        true_bias: side.true_bias,
        diagnostics: side.diagnostics,
    })
}

pub const DESIGN_CSV: &str = "design.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignManifest {
    pub columns: Vec<ColumnSpec>,
    pub warnings: Vec<String>,
    pub dropped_schools: Vec<(SchoolId, String)>,
    pub n_rows: usize,
}

/// `design.csv` holds standardised features then `raw_`-prefixed values;
/// `manifest.json` describes the columns.
pub fn write_design(dir: &Path, design: &Design) -> Result<()> {
    let mut w = csv_writer(&dir.join(DESIGN_CSV))?;
    let mut header: Vec<String> = vec!["school_id".into(), "n_students".into()];
    header.extend(design.columns.iter().map(|c| c.name.clone()));
    header.extend(design.columns.iter().map(|c| format!("raw_{}", c.name)));
    w.write_record(&header)?;
    for r in &design.rows {
        let mut rec = vec![r.school_id.0.to_string(), r.n_students.to_string()];
        rec.extend(r.features.iter().map(|&v| fmt_f64(v)));
        rec.extend(r.raw_means.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(
        &dir.join(MANIFEST_JSON),
        &DesignManifest {
            columns: design.columns.clone(),
            warnings: design.warnings.clone(),
            dropped_schools: design.dropped_schools.clone(),
            n_rows: design.rows.len(),
        },
    )
}

pub fn read_design(dir: &Path) -> Result<Design> {
    let m: DesignManifest = read_json(&dir.join(MANIFEST_JSON))?;
    let path = dir.join(DESIGN_CSV);
    let t = Table::read(&path)?;
    let id = t.col(&path, "school_id")?;
    let ns = t.col(&path, "n_students")?;
    let feat = m
        .columns
        .iter()
        .map(|c| t.col(&path, &c.name))
        .collect::<Result<Vec<_>>>()?;
    let raw = m
        .columns
        .iter()
        .map(|c| t.col(&path, &format!("raw_{}", c.name)))
        .collect::<Result<Vec<_>>>()?;
    let rows = t
        .rows
        .iter()
        .map(|rec| {
            Ok(SchoolFeatureRow {
                school_id: SchoolId(field(&path, rec, id)?),
                n_students: field(&path, rec, ns)?,
                features: feat.iter().map(|&c| float(&path, rec, c)).collect::<Result<_>>()?,
                raw_means: raw.iter().map(|&c| float(&path, rec, c)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() != m.n_rows || rows.windows(2).any(|w| w[0].school_id >= w[1].school_id) {
        return Err(format_err(&path, "rows missing or not in school order"));
    }
    Ok(Design {
        columns: m.columns,
        rows,
        warnings: m.warnings,
        dropped_schools: m.dropped_schools,
    })
}

/// Everything in a matched sample except its pair and unmatched rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchHeader {
    pub intervention: String,
    pub chosen_spec: String,
    pub caliper_width: f64,
    #[serde(with = "seed_serde")]
    pub order_seed: u64,
    pub n_pairs: usize,
    pub n_unmatched: usize,
    pub n_trimmed: usize,
    pub median_candidates: f64,
    pub trimmed_pool: Vec<SchoolId>,
    pub candidates_in_caliper: Vec<(SchoolId, usize)>,
}

/// Pair rows (`status = matched`) then unmatched CT rows with empty partner fields.
pub fn write_matched(csv_path: &Path, json_path: &Path, intervention: &str, chosen_spec: &str, m: &MatchedSample) -> Result<()> {
    let mut w = csv_writer(csv_path)?;
    w.write_record(["status", "ct_id", "co_id", "distance", "logit_gap"])?;
    for p in &m.pairs {
        w.write_record([
            "matched".to_string(),
            p.ct.0.to_string(),
            p.co.0.to_string(),
            fmt_f64(p.distance),
            fmt_f64(p.logit_gap),
        ])?;
    }
    for ct in &m.unmatched_ct {
        w.write_record(["unmatched".to_string(), ct.0.to_string(), String::new(), String::new(), String::new()])?;
    }
    w.flush()?;
    write_json(
        json_path,
        &MatchHeader {
            intervention: intervention.to_string(),
            chosen_spec: chosen_spec.to_string(),
            caliper_width: m.caliper_width,
            order_seed: m.order_seed,
            n_pairs: m.pairs.len(),
            n_unmatched: m.unmatched_ct.len(),
            n_trimmed: m.n_trimmed,
            median_candidates: m.median_candidates,
            trimmed_pool: m.trimmed_pool.clone(),
            candidates_in_caliper: m.candidates_in_caliper.clone(),
        },
    )
}

pub fn read_matched(csv_path: &Path, json_path: &Path) -> Result<(MatchHeader, MatchedSample)> {
    let h: MatchHeader = read_json(json_path)?;
    let t = Table::read(csv_path)?;
    let (st, ct, co, d, g) = (
        t.col(csv_path, "status")?,
        t.col(csv_path, "ct_id")?,
        t.col(csv_path, "co_id")?,
        t.col(csv_path, "distance")?,
        t.col(csv_path, "logit_gap")?,
    );
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for rec in &t.rows {
        match rec.get(st) {
            Some("matched") => pairs.push(MatchPair {
                ct: SchoolId(field(csv_path, rec, ct)?),
                co: SchoolId(field(csv_path, rec, co)?),
                distance: float(csv_path, rec, d)?,
                logit_gap: float(csv_path, rec, g)?,
            }),
            Some("unmatched") => unmatched.push(SchoolId(field(csv_path, rec, ct)?)),
            other => return Err(format_err(csv_path, format!("unknown status {other:?}"))),
        }
    }
    if pairs.len() != h.n_pairs || unmatched.len() != h.n_unmatched {
        return Err(format_err(csv_path, "row counts disagree with the JSON header"));
    }
    let m = MatchedSample {
        pairs,
        unmatched_ct: unmatched,
        caliper_width: h.caliper_width,
        order_seed: h.order_seed,
        trimmed_pool: h.trimmed_pool.clone(),
        n_trimmed: h.n_trimmed,
        candidates_in_caliper: h.candidates_in_caliper.clone(),
        median_candidates: h.median_candidates,
    };
    Ok((h, m))
}

/// One row per covariate: name, SMD, violation flag, degenerate flag.
pub fn write_balance(path: &Path, b: &BalanceReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["covariate", "smd", "violation", "degenerate"])?;
    for ((name, &smd), (&viol, &deg)) in b.covariates.iter().zip(&b.smd).zip(b.violations().iter().zip(&b.degenerate)) {
        w.write_record([name.clone(), fmt_f64(smd), bool01(viol).into(), bool01(deg).into()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bias(path: &Path, estimates: &[BiasEstimate]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["intervention", "outcome", "kind", "value", "se", "n_schools", "n_students"])?;
    for e in estimates {
        w.write_record([
            e.intervention.clone(),
            e.outcome.name().into(),
            e.kind.name().into(),
            fmt_f64(e.value),
            fmt_opt(e.se),
            e.n_schools.to_string(),
            e.n_students.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bias(path: &Path) -> Result<Vec<BiasEstimate>> {
    let t = Table::read(path)?;
    let cols = ["intervention", "outcome", "kind", "value", "se", "n_schools", "n_students"]
        .iter()
        .map(|c| t.col(path, c))
        .collect::<Result<Vec<_>>>()?;
    t.rows
        .iter()
        .map(|rec| {
            let kind = match rec.get(cols[2]) {
                Some("naive") => EstimateKind::Naive,
                Some("match") => EstimateKind::Match,
                other => return Err(format_err(path, format!("unknown kind {other:?}"))),
            };
            Ok(BiasEstimate {
                intervention: rec.get(cols[0]).unwrap_or("").to_string(),
                outcome: parse_outcome(path, rec.get(cols[1]).unwrap_or(""))?,
                kind,
                value: float(path, rec, cols[3])?,
                se: opt_float(path, rec, cols[4])?,
                n_schools: field(path, rec, cols[5])?,
                n_students: field(path, rec, cols[6])?,
            })
        })
        .collect()
}

/// Column name of a cell in wide tables.
pub fn cell_key(intervention: &str, outcome: Outcome) -> String {
    format!("{intervention}.{}", outcome.name())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Spread {
        let xs: Vec<f64> = xs.iter().copied().filter(|v| v.is_finite()).collect();
        if xs.is_empty() {
            return Spread {
                mean: f64::NAN,
                sd: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        Spread {
            mean: mean(&xs),
            sd: if xs.len() > 1 { sample_sd(&xs) } else { 0.0 },
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullSummaryFile {
    pub mode: NullMode,
    pub replicates: usize,
    #[serde(with = "seed_serde")]
    pub master_seed: u64,
    pub n_successful: usize,
    pub cells: Vec<Cell>,
    pub per_cell_variance: Vec<f64>,
    pub mu_null: Spread,
    pub sigma_null: Spread,
    pub failed: Vec<FailedReplicate>,
}

/// Draws CSV (one row per successful replicate, one column per cell, then the
/// row summaries `mu` and `sigma`) plus a JSON summary.
pub fn write_null(csv_path: &Path, json_path: &Path, r: &NullReference) -> Result<()> {
    let mut w = csv_writer(csv_path)?;
    let mut header = vec!["replicate".to_string()];
    header.extend(r.cells.iter().map(|c| cell_key(&c.intervention, c.outcome)));
    header.extend(["mu".to_string(), "sigma".to_string()]);
    w.write_record(&header)?;
    for (i, row) in r.draws.iter().enumerate() {
        let mut rec = vec![r.replicate_ids[i].to_string()];
        rec.extend(row.iter().map(|&v| fmt_f64(v)));
        rec.push(fmt_f64(r.mu_null[i]));
        rec.push(fmt_f64(r.sigma_null[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(
        json_path,
        &NullSummaryFile {
            mode: r.mode,
            replicates: r.replicates,
            master_seed: r.master_seed,
            n_successful: r.draws.len(),
            cells: r.cells.clone(),
            per_cell_variance: r.per_cell_variance.clone(),
            mu_null: Spread::of(&r.mu_null),
            sigma_null: Spread::of(&r.sigma_null),
            failed: r.failed.clone(),
        },
    )
}

pub fn read_null(csv_path: &Path, json_path: &Path) -> Result<NullReference> {
    // Only the fields that cannot be recomputed from the draws.
    #[derive(Deserialize)]
    struct Header {
        mode: NullMode,
        replicates: usize,
        #[serde(with = "seed_serde")]
        master_seed: u64,
        n_successful: usize,
        cells: Vec<Cell>,
        failed: Vec<FailedReplicate>,
    }
    let s: Header = read_json(json_path)?;
    let t = Table::read(csv_path)?;
    let rep = t.col(csv_path, "replicate")?;
    let cols = s
        .cells
        .iter()
        .map(|c| t.col(csv_path, &cell_key(&c.intervention, c.outcome)))
        .collect::<Result<Vec<_>>>()?;
    let (mu, sigma) = (t.col(csv_path, "mu")?, t.col(csv_path, "sigma")?);
    let mut r = NullReference {
        mode: s.mode,
        replicates: s.replicates,
        cells: s.cells.clone(),
        replicate_ids: Vec::new(),
        draws: Vec::new(),
        failed: s.failed,
        mu_null: Vec::new(),
        sigma_null: Vec::new(),
        per_cell_variance: Vec::new(),
        master_seed: s.master_seed,
    };
    for rec in &t.rows {
        r.replicate_ids.push(field(csv_path, rec, rep)?);
        r.draws.push(cols.iter().map(|&c| float(csv_path, rec, c)).collect::<Result<_>>()?);
        r.mu_null.push(float(csv_path, rec, mu)?);
        r.sigma_null.push(float(csv_path, rec, sigma)?);
    }
    r.per_cell_variance = (0..r.cells.len())
        .map(|c| sample_variance(&r.draws.iter().map(|row| row[c]).collect::<Vec<_>>()))
        .collect();
    if r.draws.len() != s.n_successful {
        return Err(format_err(csv_path, "row count disagrees with the JSON summary"));
    }
    Ok(r)
}

/// Per-cell meta-analysis table.
pub fn write_meta_cells(path: &Path, cells: &[MetaCellResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "intervention",
        "outcome",
        "beta_hat",
        "sigma2_hat",
        "lambda",
        "omega",
        "shrunken",
        "constrained",
    ])?;
    for c in cells {
        w.write_record([
            c.intervention.clone(),
            c.outcome.name().into(),
            fmt_f64(c.beta_hat),
            fmt_f64(c.sigma2_hat),
            fmt_f64(c.lambda),
            fmt_f64(c.omega),
            fmt_f64(c.shrunken),
            fmt_f64(c.constrained),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::prepare_design;
    use crate::synthpop::generate_population;

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.1, -1.0 / 3.0, 1e-300, f64::MAX, f64::MIN_POSITIVE, 5e-324, 0.0, -0.0, 123456.789] {
            let y = parse_f64(&fmt_f64(x)).unwrap();
            assert_eq!(x.to_bits(), y.to_bits(), "{x}");
        }
        assert!(parse_f64(&fmt_f64(f64::NAN)).unwrap().is_nan());
    }

    #[test]
    fn population_and_design_round_trip() {
        let pop = generate_population(&ScenarioConfig {
            n_schools: 120,
            n_trial_controls: 5,
            missingness_rate: 0.05,
            rng_seed: 3,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_population(dir.path(), &pop).unwrap();
        let back = read_population(dir.path()).unwrap();
        // NaN != NaN, so compare serialised forms.
        assert_eq!(format!("{pop:?}"), format!("{back:?}"));
        let design = prepare_design(&pop, pop.config.t_star).unwrap();
        write_design(dir.path(), &design).unwrap();
        assert_eq!(read_design(dir.path()).unwrap(), design);
    }

    #[test]
    fn bias_round_trip() {
        let e = vec![
            BiasEstimate {
                intervention: "a".into(),
                outcome: Outcome::Reading,
                kind: EstimateKind::Naive,
                value: -0.123,
                se: None,
                n_schools: 10,
                n_students: 300,
            },
            BiasEstimate {
                intervention: "a".into(),
                outcome: Outcome::Reading,
                kind: EstimateKind::Match,
                value: 0.01,
                se: Some(0.02),
                n_schools: 20,
                n_students: 600,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bias.csv");
        write_bias(&p, &e).unwrap();
        assert_eq!(read_bias(&p).unwrap(), e);
    }
}
