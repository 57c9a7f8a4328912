//! Stage orchestration. Every stage reads the previous stages' files from the
//! output directory and writes its own, so any stage can be rerun alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{analyze_intervention, fit_outcome_models, AnalysisContext, AnalysisOptions, CandidateSummary};
use crate::biasest::{decompose_bias, naive_bias, BiasEstimate, EstimateKind, OutcomeTable};
use crate::config::{load_config, PipelineConfig};
use crate::covariates::{prepare_design, Design};
use crate::io::{self, fmt_f64, read_json, write_json, Spread};
use crate::meta::{predict_bias_magnitude, run_meta, MagnitudeCell, MetaCell, Predictor};
use crate::nullsim::{placebo_test, run_null_reference, NullMode, PlaceboTest};
use crate::rng::{derive_seed, tag};
use crate::synthpop::{draw_disjoint_trials, draw_set, generate_population, seed_serde, DrawMode, PopulationSnapshot};
use crate::{Error, Outcome, Result, SchoolId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Prepare,
    Match,
    Estimate,
    Nullsim,
    Meta,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Prepare,
        Stage::Match,
        Stage::Estimate,
        Stage::Nullsim,
        Stage::Meta,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Prepare => "prepare",
            Stage::Match => "match",
            Stage::Estimate => "estimate",
            Stage::Nullsim => "nullsim",
            Stage::Meta => "meta",
            Stage::Report => "report",
        }
    }
}

/// A failure that did not stop the pipeline, or the one that did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervention: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicate: Option<usize>,
    pub kind: String,
    pub message: String,
}

impl FailureRecord {
    fn new(stage: Stage, e: &Error) -> Self {
        FailureRecord {
            stage,
            intervention: None,
            outcome: None,
            replicate: None,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }

    fn for_intervention(stage: Stage, w: &str, e: &Error) -> Self {
        FailureRecord {
            intervention: Some(w.to_string()),
            ..FailureRecord::new(stage, e)
        }
    }
}

/// Relative paths of every file the pipeline writes.
pub mod paths {
    pub const CONFIG: &str = "config.toml";
    pub const REPORT: &str = "report.json";
    pub const TIMINGS: &str = "timings.json";
    pub const POPULATION_DIR: &str = "population";
    pub const DESIGN_DIR: &str = "design";
    pub const TRIALS: &str = "match/trials.json";
    pub const MATCH_SUMMARY: &str = "match/summary.json";
    pub const BIAS: &str = "estimates/bias.csv";
    pub const RECOVERY: &str = "estimates/recovery.csv";
    pub const ESTIMATE_SUMMARY: &str = "estimates/summary.json";

    pub fn pairs_csv(w: &str) -> String {
        format!("match/{w}/pairs.csv")
    }
    pub fn pairs_json(w: &str) -> String {
        format!("match/{w}/pairs.json")
    }
    pub fn balance_csv(w: &str) -> String {
        format!("match/{w}/balance.csv")
    }
    pub fn propensity_json(w: &str) -> String {
        format!("match/{w}/propensity.json")
    }
    pub fn null_draws(mode: &str) -> String {
        format!("null/{mode}_draws.csv")
    }
    pub fn null_summary(mode: &str) -> String {
        format!("null/{mode}_summary.json")
    }
    pub fn placebo(mode: &str) -> String {
        format!("null/{mode}_placebo.json")
    }
    pub fn meta_json(kind: &str) -> String {
        format!("meta/{kind}_meta.json")
    }
    pub fn meta_cells(kind: &str) -> String {
        format!("meta/{kind}_cells.csv")
    }
}

const POPULATION_FILES: [&str; 3] = [io::SCHOOLS_CSV, io::STUDENTS_CSV, io::POPULATION_JSON];
const DESIGN_FILES: [&str; 2] = [io::DESIGN_CSV, io::MANIFEST_JSON];

/// Output directory plus the resolved configuration.
pub struct Run<'a> {
    pub cfg: &'a PipelineConfig,
    pub out: PathBuf,
}

/// Per-intervention trial membership, fixed by the match stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialDraw {
    pub intervention: String,
    pub n_w: usize,
    pub ct: Vec<SchoolId>,
    pub treated: Vec<SchoolId>,
    #[serde(with = "seed_serde")]
    pub order_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchEntry {
    pub intervention: String,
    pub n_w: usize,
    pub status: String,
    pub chosen_spec: Option<String>,
    pub candidates: Vec<CandidateSummary>,
    pub violation_count: Option<usize>,
    pub n_covariates: Option<usize>,
    pub n_pairs: usize,
    pub caliper_width: Option<f64>,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct RecoveryRow {
    intervention: String,
    outcome: Outcome,
    true_bias: f64,
    naive: f64,
    #[serde(rename = "match")]
    matched: Option<f64>,
    delta_x_hat: Option<f64>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a PipelineConfig, out: &Path) -> Self {
        Run {
            cfg,
            out: out.to_path_buf(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn population(&self) -> Result<PopulationSnapshot> {
        io::read_population(&self.path(paths::POPULATION_DIR))
    }

    fn design(&self) -> Result<Design> {
        io::read_design(&self.path(paths::DESIGN_DIR))
    }

    pub fn write_config(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.path(paths::CONFIG), self.cfg.to_toml()?)?;
        Ok(())
    }

    /// Run one stage, recording its wall-clock time in `timings.json`.
    pub fn stage(&self, stage: Stage) -> Result<()> {
        info!("stage {}", stage.name());
        let t0 = Instant::now();
        match stage {
            Stage::Generate => self.generate(),
            Stage::Prepare => self.prepare(),
            Stage::Match => self.match_stage(),
            Stage::Estimate => self.estimate(),
            Stage::Nullsim => self.nullsim(),
            Stage::Meta => self.meta(),
            Stage::Report => self.report(None).map(|_| ()),
        }?;
        let secs = t0.elapsed().as_secs_f64();
        let tp = self.path(paths::TIMINGS);
        let mut timings: BTreeMap<String, f64> = read_json(&tp).unwrap_or_default();
        timings.insert(stage.name().to_string(), secs);
        write_json(&tp, &timings)
    }

    fn generate(&self) -> Result<()> {
        self.write_config()?;
        let pop = generate_population(&self.cfg.scenario)?;
        io::write_population(&self.path(paths::POPULATION_DIR), &pop)
    }

    fn prepare(&self) -> Result<()> {
        let pop = self.population()?;
        let design = prepare_design(&pop, pop.config.t_star)?;
        io::write_design(&self.path(paths::DESIGN_DIR), &design)
    }

    /// Each intervention gets its own control schools and its own share of
    /// the treated arm; no school belongs to two trials.
    fn trial_draws(&self, pop: &PopulationSnapshot) -> Result<Vec<TrialDraw>> {
        let master = self.cfg.master_seed();
        let sizes = self.cfg.trial_sizes();
        let n_w: Vec<usize> = sizes.iter().map(|s| s.1).collect();
        let total: usize = n_w.iter().sum();
        let n_treated_arm = draw_set(pop, DrawMode::TreatedArm).len();
        let treated_sizes: Vec<usize> = n_w.iter().map(|&n| n.min(n_treated_arm * n / total)).collect();
        let ct = draw_disjoint_trials(pop, &n_w, derive_seed(master, &[0]), DrawMode::ControlArm)?;
        let treated = draw_disjoint_trials(pop, &treated_sizes, derive_seed(master, &[1]), DrawMode::TreatedArm)?;
        Ok(sizes
            .into_iter()
            .zip(ct.into_iter().zip(treated))
            .enumerate()
            .map(|(w, ((name, n_w), (ct, treated)))| TrialDraw {
                intervention: name,
                n_w,
                ct,
                treated,
                order_seed: derive_seed(master, &[tag::MATCH_ORDER, w as u64]),
            })
            .collect())
    }

    fn match_stage(&self) -> Result<()> {
        let pop = self.population()?;
        let design = self.design()?;
        let table = OutcomeTable::new(&pop);
        let ctx = AnalysisContext {
            pop: &pop,
            design: &design,
            table: &table,
        };
        let trials = self.trial_draws(&pop)?;
        write_json(&self.path(paths::TRIALS), &json!({ "interventions": trials }))?;
        let pool = pop.comparison_pool_ids();
        let opts = AnalysisOptions {
            fit_mlm: false,
            ..self.cfg.analysis.options()
        };
        let results: Vec<_> = trials
            .par_iter()
            .map(|t| analyze_intervention(&ctx, &t.intervention, &t.ct, &t.treated, &pool, &opts, t.order_seed))
            .collect();
        let mut entries = Vec::new();
        let mut failures = Vec::new();
        for (t, res) in trials.iter().zip(results) {
            let w = t.intervention.as_str();
            let mut entry = MatchEntry {
                intervention: w.to_string(),
                n_w: t.n_w,
                status: "ok".into(),
                chosen_spec: None,
                candidates: Vec::new(),
                violation_count: None,
                n_covariates: None,
                n_pairs: 0,
                caliper_width: None,
                files: Vec::new(),
            };
            let m = match res.map(|a| a.matched) {
                Ok(Some(m)) => m,
                Ok(None) => unreachable!("matching requested"),
                Err(e) => {
                    warn!("intervention {w}: {e}");
                    entry.status = "failed".into();
                    failures.push(FailureRecord::for_intervention(Stage::Match, w, &e));
                    entries.push(entry);
                    continue;
                }
            };
            let spec = m.chosen.name();
            io::write_matched(
                &self.path(&paths::pairs_csv(w)),
                &self.path(&paths::pairs_json(w)),
                w,
                spec,
                &m.matched,
            )?;
            io::write_balance(&self.path(&paths::balance_csv(w)), &m.balance)?;
            let p = &m.propensity;
            write_json(
                &self.path(&paths::propensity_json(w)),
                &json!({
                    "intervention": w,
                    "spec": spec,
                    "terms": p.spec.term_names(),
                    "coefficients": p.coefficients.iter()
                        .map(|(n, b, se)| json!({ "term": n, "estimate": b, "se": se }))
                        .collect::<Vec<_>>(),
                    "dropped_terms": p.dropped_terms,
                    "converged": p.converged,
                    "iterations": p.iterations,
                    "max_gradient": p.max_gradient,
                    "log_likelihood": p.log_likelihood,
                    "candidates": m.candidates,
                }),
            )?;
            entry.chosen_spec = Some(spec.to_string());
            entry.candidates = m.candidates.clone();
            entry.violation_count = Some(m.balance.violation_count);
            entry.n_covariates = Some(m.balance.n_covariates);
            entry.n_pairs = m.matched.pairs.len();
            entry.caliper_width = Some(m.matched.caliper_width);
            entry.files = vec![
                paths::pairs_csv(w),
                paths::pairs_json(w),
                paths::balance_csv(w),
                paths::propensity_json(w),
            ];
            entries.push(entry);
        }
        write_json(
            &self.path(paths::MATCH_SUMMARY),
            &json!({ "interventions": entries, "failures": failures }),
        )
    }

    fn read_trials(&self) -> Result<Vec<TrialDraw>> {
        #[derive(Deserialize)]
        struct Trials {
            interventions: Vec<TrialDraw>,
        }
        Ok(read_json::<Trials>(&self.path(paths::TRIALS))?.interventions)
    }

    fn estimate(&self) -> Result<()> {
        let pop = self.population()?;
        let design = self.design()?;
        let table = OutcomeTable::new(&pop);
        let ctx = AnalysisContext {
            pop: &pop,
            design: &design,
            table: &table,
        };
        let trials = self.read_trials()?;
        let pool = pop.comparison_pool_ids();
        let mut naive = Vec::new();
        let mut matched = Vec::new();
        let mut fits = Vec::new();
        let mut failures = Vec::new();
        for t in &trials {
            let w = t.intervention.as_str();
            for &o in &Outcome::ALL {
                naive.push(naive_bias(&table, w, &t.ct, &pool, o)?);
            }
            let pj = self.path(&paths::pairs_json(w));
            if !pj.exists() {
                for &o in &Outcome::ALL {
                    failures.push(FailureRecord {
                        outcome: Some(o),
                        ..FailureRecord::for_intervention(
                            Stage::Estimate,
                            w,
                            &Error::argument("no matched sample for this intervention"),
                        )
                    });
                }
                continue;
            }
            let (_, m) = io::read_matched(&self.path(&paths::pairs_csv(w)), &pj)?;
            match fit_outcome_models(&ctx, &m) {
                Ok(f) => {
                    for (&o, fit) in Outcome::ALL.iter().zip(&f) {
                        matched.push(fit.estimate(w, o));
                        fits.push(json!({
                            "intervention": w,
                            "outcome": o,
                            "beta_match": fit.beta_match,
                            "se": fit.se_beta,
                            "sigma_alpha2": fit.sigma_alpha2,
                            "sigma2": fit.sigma2,
                            "converged": fit.converged,
                            "evaluations": fit.evaluations,
                            "dropped_columns": fit.dropped_columns,
                            "n_schools": fit.n_schools,
                            "n_students": fit.n_students,
                        }));
                    }
                }
                Err(e) => {
                    warn!("intervention {w}: {e}");
                    failures.push(FailureRecord::for_intervention(Stage::Estimate, w, &e));
                }
            }
        }
        let all: Vec<BiasEstimate> = naive.iter().chain(&matched).cloned().collect();
        io::write_bias(&self.path(paths::BIAS), &all)?;

        let mut rows = Vec::new();
        for n in &naive {
            let m = matched
                .iter()
                .find(|m| m.intervention == n.intervention && m.outcome == n.outcome);
            let d = m.map(|m| decompose_bias(n, m)).transpose()?;
            rows.push(RecoveryRow {
                intervention: n.intervention.clone(),
                outcome: n.outcome,
                true_bias: pop.true_bias[n.outcome.index()],
                naive: n.value,
                matched: m.map(|m| m.value),
                delta_x_hat: d.map(|d| d.delta_x_hat),
            });
        }
        let mut w = csv::Writer::from_path(self.path(paths::RECOVERY))?;
        w.write_record(["intervention", "outcome", "true_bias", "naive", "match", "delta_x_hat", "delta_u_hat"])?;
        for r in &rows {
            let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
            w.write_record([
                r.intervention.clone(),
                r.outcome.name().into(),
                fmt_f64(r.true_bias),
                fmt_f64(r.naive),
                opt(r.matched),
                opt(r.delta_x_hat),
                opt(r.matched),
            ])?;
        }
        w.flush()?;

        let mean_of = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
        let paired: Vec<&RecoveryRow> = rows.iter().filter(|r| r.matched.is_some()).collect();
        let summary = json!({
            "true_bias": outcome_map(pop.true_bias),
            "n_cells": rows.len(),
            "n_matched_cells": paired.len(),
            "mean_true_bias": mean_of(rows.iter().map(|r| r.true_bias).collect()),
            "mean_naive": mean_of(rows.iter().map(|r| r.naive).collect()),
            "mean_match": mean_of(paired.iter().filter_map(|r| r.matched).collect()),
            "mean_delta_x_hat": mean_of(paired.iter().filter_map(|r| r.delta_x_hat).collect()),
            "mean_match_error": mean_of(paired.iter().map(|r| r.matched.unwrap() - r.true_bias).collect()),
            "cells": rows,
            "mlm_fits": fits,
            "failures": failures,
            "files": [paths::BIAS, paths::RECOVERY],
        });
        write_json(&self.path(paths::ESTIMATE_SUMMARY), &summary)
    }

    fn observed(&self, kind: EstimateKind) -> Result<Vec<BiasEstimate>> {
        Ok(io::read_bias(&self.path(paths::BIAS))?
            .into_iter()
            .filter(|e| e.kind == kind)
            .collect())
    }

    fn nullsim(&self) -> Result<()> {
        let pop = self.population()?;
        let design = self.design()?;
        let table = OutcomeTable::new(&pop);
        let ctx = AnalysisContext {
            pop: &pop,
            design: &design,
            table: &table,
        };
        let sizes = self.cfg.trial_sizes();
        for &mode in &self.cfg.nullsim.modes {
            let opts = AnalysisOptions {
                naive_only: mode == NullMode::Naive,
                ..self.cfg.analysis.options()
            };
            let t0 = Instant::now();
            let r = run_null_reference(&ctx, &sizes, mode, self.cfg.nullsim.replicates, self.cfg.master_seed(), &opts)?;
            info!(
                "{} null reference: {} replicates in {:.1}s, {} failed",
                mode.name(),
                r.replicates,
                t0.elapsed().as_secs_f64(),
                r.failed.len()
            );
            io::write_null(
                &self.path(&paths::null_draws(mode.name())),
                &self.path(&paths::null_summary(mode.name())),
                &r,
            )?;
            let kind = kind_of(mode);
            let obs = self.observed(kind)?;
            let test: std::result::Result<PlaceboTest, Error> = if r.draws.is_empty() {
                Err(Error::argument("every placebo replicate failed"))
            } else {
                placebo_test(&obs.iter().map(|e| e.value).collect::<Vec<_>>(), &r)
            };
            let (test, failure) = match test {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(FailureRecord::new(Stage::Nullsim, &e))),
            };
            let failures: Vec<FailureRecord> = r
                .failed
                .iter()
                .map(|f| FailureRecord {
                    stage: Stage::Nullsim,
                    intervention: Some(f.intervention.clone()),
                    outcome: None,
                    replicate: Some(f.replicate),
                    kind: "replicate_failed".into(),
                    message: f.error.clone(),
                })
                .chain(failure)
                .collect();
            write_json(
                &self.path(&paths::placebo(mode.name())),
                &json!({
                    "mode": mode,
                    "n_observed_cells": obs.len(),
                    "n_cells": r.cells.len(),
                    "replicates": r.replicates,
                    "n_successful": r.draws.len(),
                    "n_failed": r.failed.len(),
                    "mu_null": Spread::of(&r.mu_null),
                    "sigma_null": Spread::of(&r.sigma_null),
                    "test": test,
                    "failures": failures,
                    "files": [paths::null_draws(mode.name()), paths::null_summary(mode.name())],
                }),
            )?;
        }
        Ok(())
    }

    fn meta(&self) -> Result<()> {
        for &mode in &self.cfg.meta.kinds {
            let kind = kind_of(mode);
            let name = kind.name();
            let reference = io::read_null(
                &self.path(&paths::null_draws(mode.name())),
                &self.path(&paths::null_summary(mode.name())),
            )?;
            let var: BTreeMap<(String, Outcome), f64> = reference
                .cells
                .iter()
                .zip(&reference.per_cell_variance)
                .map(|(c, &v)| ((c.intervention.clone(), c.outcome), v))
                .collect();
            let obs = self.observed(kind)?;
            let mut cells = Vec::new();
            let mut failures = Vec::new();
            for e in &obs {
                match var.get(&(e.intervention.clone(), e.outcome)) {
                    Some(&v) if v > 0.0 => cells.push(MetaCell {
                        intervention: e.intervention.clone(),
                        outcome: e.outcome,
                        beta_hat: e.value,
                        sigma2_hat: v,
                    }),
                    _ => failures.push(FailureRecord {
                        outcome: Some(e.outcome),
                        ..FailureRecord::for_intervention(
                            Stage::Meta,
                            &e.intervention,
                            &Error::argument("no positive null variance for this cell"),
                        )
                    }),
                }
            }
            let result = run_meta(&cells, self.cfg.master_seed())?;
            io::write_meta_cells(&self.path(&paths::meta_cells(name)), &result.cells)?;

            let mut regressions = Vec::new();
            if kind == EstimateKind::Match {
                let violations = self.violation_counts()?;
                let mcells: Vec<MagnitudeCell> = obs
                    .iter()
                    .filter_map(|e| {
                        violations.get(&e.intervention).map(|&v| MagnitudeCell {
                            intervention: e.intervention.clone(),
                            outcome: e.outcome,
                            beta_hat: e.value,
                            n_students: e.n_students,
                            violations: v,
                        })
                    })
                    .collect();
                for p in Predictor::ALL {
                    match predict_bias_magnitude(&mcells, p) {
                        Ok(f) => regressions.push(json!({ "predictor": p, "fit": f })),
                        Err(e) => {
                            regressions.push(json!({ "predictor": p, "error": e.to_string() }));
                            failures.push(FailureRecord::new(Stage::Meta, &e));
                        }
                    }
                }
            }
            let il = &result.intervention_level;
            write_json(
                &self.path(&paths::meta_json(name)),
                &json!({
                    "kind": kind,
                    "n_cells": cells.len(),
                    "nu_hat": result.nu_hat,
                    "tau2_hat": result.tau2_hat,
                    "q": result.q,
                    "beta_bar": result.beta_bar,
                    "k_effective": result.k_effective,
                    "rho_hat": result.rho_hat,
                    "mean_abs_constrained": result.mean_abs_constrained,
                    "intervention_level": {
                        "tau2_hat": il.tau2,
                        "q": il.q,
                        "k": il.interventions.len(),
                        "ci_95": il.ci_95,
                        "ci_retained_grid_points": il.ci_retained,
                        "interventions": il.interventions.iter().zip(&il.beta_w).zip(&il.sigma_w)
                            .map(|((w, b), s)| json!({ "intervention": w, "beta_w": b, "sigma_w": s }))
                            .collect::<Vec<_>>(),
                    },
                    "regressions": regressions,
                    "failures": failures,
                    "files": [paths::meta_cells(name)],
                }),
            )?;
        }
        Ok(())
    }

    /// Balance violations per intervention, counted from the balance CSVs.
    fn violation_counts(&self) -> Result<BTreeMap<String, usize>> {
        let mut out = BTreeMap::new();
        for (w, _) in self.cfg.trial_sizes() {
            let p = self.path(&paths::balance_csv(&w));
            if !p.exists() {
                continue;
            }
            let mut r = csv::Reader::from_path(&p)?;
            let col = r
                .headers()?
                .iter()
                .position(|h| h == "violation")
                .ok_or_else(|| Error::Format {
                    path: p.clone(),
                    reason: "missing `violation` column".into(),
                })?;
            let mut n = 0;
            for rec in r.records() {
                n += (rec?.get(col) == Some("1")) as usize;
            }
            out.insert(w, n);
        }
        Ok(out)
    }

    /// Assemble `report.json` from whatever stage outputs exist. A fatal
    /// failure, if any, is recorded and the status set to `failed`.
    pub fn report(&self, fatal: Option<FailureRecord>) -> Result<Value> {
        let read = |rel: &str| -> Option<Value> { read_json::<Value>(&self.path(rel)).ok() };
        let mut files: Vec<String> = Vec::new();
        let mut failures: Vec<Value> = Vec::new();
        let mut take = |v: &Value, files: &mut Vec<String>| {
            if let Some(f) = v.get("failures").and_then(Value::as_array) {
                failures.extend(f.iter().cloned());
            }
            if let Some(f) = v.get("files").and_then(Value::as_array) {
                files.extend(f.iter().filter_map(|s| s.as_str().map(String::from)));
            }
        };
        let push_if = |rel: String, files: &mut Vec<String>| {
            if self.path(&rel).exists() {
                files.push(rel);
            }
        };
        push_if(paths::CONFIG.into(), &mut files);
        for f in POPULATION_FILES {
            push_if(format!("{}/{f}", paths::POPULATION_DIR), &mut files);
        }
        for f in DESIGN_FILES {
            push_if(format!("{}/{f}", paths::DESIGN_DIR), &mut files);
        }
        let population = read(&format!("{}/{}", paths::POPULATION_DIR, io::POPULATION_JSON)).map(|p| {
            json!({
                "n_schools": p["n_schools"],
                "n_students": p["n_students"],
                "n_selected": p["diagnostics"]["n_selected"],
                "n_control_arm": p["diagnostics"]["n_control_arm"],
                "true_bias": p["true_bias"],
            })
        });
        let design = read(&format!("{}/{}", paths::DESIGN_DIR, io::MANIFEST_JSON)).map(|m| {
            json!({
                "columns": m["columns"].as_array().map(|c| c.iter().map(|c| c["name"].clone()).collect::<Vec<_>>()),
                "n_rows": m["n_rows"],
                "n_dropped_schools": m["dropped_schools"].as_array().map(Vec::len),
                "warnings": m["warnings"],
            })
        });
        push_if(paths::TRIALS.into(), &mut files);
        let matching = read(paths::MATCH_SUMMARY);
        if let Some(m) = &matching {
            push_if(paths::MATCH_SUMMARY.into(), &mut files);
            take(m, &mut files);
            for e in m["interventions"].as_array().into_iter().flatten() {
                take(e, &mut files);
            }
        }
        let estimates = read(paths::ESTIMATE_SUMMARY);
        let mut bias = Value::Null;
        if let Some(e) = &estimates {
            push_if(paths::ESTIMATE_SUMMARY.into(), &mut files);
            take(e, &mut files);
            if let Ok(b) = io::read_bias(&self.path(paths::BIAS)) {
                bias = serde_json::to_value(b)?;
            }
        }
        let mut null_sections = Vec::new();
        for &mode in &self.cfg.nullsim.modes {
            if let Some(p) = read(&paths::placebo(mode.name())) {
                push_if(paths::placebo(mode.name()), &mut files);
                take(&p, &mut files);
                null_sections.push(p);
            }
        }
        let mut meta = Vec::new();
        for &mode in &self.cfg.meta.kinds {
            let rel = paths::meta_json(kind_of(mode).name());
            if let Some(m) = read(&rel) {
                push_if(rel, &mut files);
                take(&m, &mut files);
                meta.push(m);
            }
        }
        let status = if fatal.is_some() { "failed" } else { "ok" };
        if let Some(f) = &fatal {
            failures.push(serde_json::to_value(f)?);
        }
        files.push(paths::REPORT.into());
        files.sort();
        files.dedup();
        let report = json!({
            "schema_version": crate::config::SCHEMA_VERSION,
            "status": status,
            "fatal": fatal,
            "config_file": paths::CONFIG,
            "master_seed": self.cfg.master_seed().to_string(),
            "scenario": self.cfg.scenario,
            "interventions": self.cfg.interventions,
            "population": population,
            "design": design,
            "matching": matching.as_ref().map(|m| m["interventions"].clone()),
            "estimates": bias,
            "recovery": estimates.as_ref().map(|e| json!({
                "true_bias": e["true_bias"],
                "mean_true_bias": e["mean_true_bias"],
                "mean_naive": e["mean_naive"],
                "mean_match": e["mean_match"],
                "mean_delta_x_hat": e["mean_delta_x_hat"],
                "mean_match_error": e["mean_match_error"],
                "n_cells": e["n_cells"],
                "n_matched_cells": e["n_matched_cells"],
                "cells": e["cells"],
            })),
            "mlm_fits": estimates.as_ref().map(|e| e["mlm_fits"].clone()),
            "null": null_sections,
            "meta": meta,
            "failures": failures,
            "files": files,
        });
        write_json(&self.path(paths::REPORT), &report)?;
        Ok(report)
    }
}

fn kind_of(mode: NullMode) -> EstimateKind {
    match mode {
        NullMode::Naive => EstimateKind::Naive,
        NullMode::Match => EstimateKind::Match,
    }
}

fn outcome_map(v: [f64; 3]) -> Value {
    json!({ "math": v[0], "reading": v[1], "writing": v[2] })
}

/// Run `stages` in order. On a stage error the report records it and the
/// error is returned; outputs already written stay in place.
pub fn run_stages(cfg: &PipelineConfig, out: &Path, stages: &[Stage]) -> Result<()> {
    let run = Run::new(cfg, out);
    std::fs::create_dir_all(out)?;
    for &s in stages {
        if let Err(e) = run.stage(s) {
            let rec = FailureRecord::new(s, &e);
            if let Err(re) = run.report(Some(rec)) {
                warn!("could not write failure report: {re}");
            }
            return Err(e);
        }
    }
    Ok(())
}

/// Load the config, apply overrides, and run every stage into `out`.
pub fn run_pipeline(config_path: &Path, out: &Path, overrides: &[String]) -> Result<Value> {
    let cfg = load_config(config_path, overrides)?;
    run_stages(&cfg, out, &Stage::ALL)?;
    read_json(&out.join(paths::REPORT))
}
