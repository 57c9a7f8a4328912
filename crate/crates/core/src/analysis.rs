//! One intervention end to end: propensity candidates, matching, balance
//! and bias estimates. Shared by the observed pipeline and placebo replicates.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biasest::{matched_bias_mlm, naive_bias, BiasEstimate, MlmFit, OutcomeTable};
use crate::covariates::Design;
use crate::matching::{match_schools, MatchOptions, MatchedSample, Unit};
use crate::propensity::{
    balance_report, continuous_columns, enumerate_candidate_specs, fit_logistic, select_spec, BalanceReport,
    FittedPropensity, PropensitySpec, SpecKind,
};
use crate::synthpop::PopulationSnapshot;
use crate::{Error, Outcome, Result, SchoolId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub matching: MatchOptions,
    /// Fit scores with the treated arm as positives, then drop it before matching.
    pub include_treated_in_fit: bool,
    pub alpha: f64,
    /// Skip propensity/matching/MLM and report naive estimates only.
    pub naive_only: bool,
    /// Fit the outcome models after matching; off leaves `mlm` empty.
    pub fit_mlm: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            matching: MatchOptions::default(),
            include_treated_in_fit: true,
            alpha: 0.05,
            naive_only: false,
            fit_mlm: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub kind: SpecKind,
    pub n_terms: usize,
    pub converged: bool,
    pub violations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchedAnalysis {
    pub chosen: SpecKind,
    pub candidates: Vec<CandidateSummary>,
    pub propensity: FittedPropensity,
    pub matched: MatchedSample,
    pub balance: BalanceReport,
    pub mlm: Vec<MlmFit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionAnalysis {
    pub intervention: String,
    pub ct: Vec<SchoolId>,
    pub naive: Vec<BiasEstimate>,
    pub matched: Option<MatchedAnalysis>,
}

impl InterventionAnalysis {
    pub fn match_estimates(&self) -> Vec<BiasEstimate> {
        self.matched
            .as_ref()
            .map(|m| {
                Outcome::ALL
                    .iter()
                    .zip(&m.mlm)
                    .map(|(&o, f)| f.estimate(&self.intervention, o))
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Shared per-snapshot inputs.
pub struct AnalysisContext<'a> {
    pub pop: &'a PopulationSnapshot,
    pub design: &'a Design,
    pub table: &'a OutcomeTable,
}

fn rows_of(design: &Design, ids: &[SchoolId]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| {
            design
                .row_index(id)
                .ok_or_else(|| Error::argument(format!("school {id} has no design row")))
        })
        .collect()
}

struct Candidate {
    fit: FittedPropensity,
    outcome: Result<(MatchedSample, BalanceReport)>,
}

/// Analyse one intervention. `pool` must exclude `ct` and `treated`.
pub fn analyze_intervention(
    ctx: &AnalysisContext,
    intervention: &str,
    ct: &[SchoolId],
    treated: &[SchoolId],
    pool: &[SchoolId],
    opts: &AnalysisOptions,
    order_seed: u64,
) -> Result<InterventionAnalysis> {
    let naive = Outcome::ALL
        .iter()
        .map(|&o| naive_bias(ctx.table, intervention, ct, pool, o))
        .collect::<Result<Vec<_>>>()?;
    if opts.naive_only {
        return Ok(InterventionAnalysis {
            intervention: intervention.to_string(),
            ct: ct.to_vec(),
            naive,
            matched: None,
        });
    }
    let design = ctx.design;
    // Pool and CT schools dropped from the design (no history) cannot be matched.
    let pool: Vec<SchoolId> = pool.iter().copied().filter(|&id| design.row_index(id).is_some()).collect();
    let ct_rows = rows_of(design, ct)?;
    let pool_rows = rows_of(design, &pool)?;
    let treated_rows = if opts.include_treated_in_fit {
        treated.iter().filter_map(|&id| design.row_index(id)).collect()
    } else {
        Vec::new()
    };
    let fit_rows: Vec<usize> = ct_rows.iter().chain(&treated_rows).chain(&pool_rows).copied().collect();
    let n_pos = ct_rows.len() + treated_rows.len();
    let p = design.n_features();
    let x = DMatrix::from_fn(fit_rows.len(), p, |i, j| design.rows[fit_rows[i]].features[j]);
    let labels: Vec<bool> = (0..fit_rows.len()).map(|i| i < n_pos).collect();

    let baseline = PropensitySpec::baseline(&design.names());
    let base_fit = fit_logistic(&x, &labels, &baseline)?;
    let specs = if base_fit.converged {
        enumerate_candidate_specs(&base_fit, &x, &continuous_columns(design), opts.alpha)?
    } else {
        vec![baseline]
    };
    let units = |fit: &FittedPropensity, range: std::ops::Range<usize>, rows: &[usize]| -> Vec<Unit> {
        range
            .zip(rows)
            .map(|(i, &r)| Unit {
                id: design.rows[r].school_id,
                logit: fit.logit_scores[i],
                features: design.rows[r].features.clone(),
            })
            .collect()
    };
    let run = |spec: &PropensitySpec| -> Result<Candidate> {
        let fit = if spec.kind == SpecKind::Baseline {
            base_fit.clone()
        } else {
            fit_logistic(&x, &labels, spec)?
        };
        let ct_units = units(&fit, 0..ct_rows.len(), &ct_rows);
        let off = n_pos;
        let pool_units = units(&fit, off..off + pool_rows.len(), &pool_rows);
        let outcome = match_schools(&ct_units, &pool_units, &opts.matching, order_seed)
            .and_then(|m| balance_report(&m, design).map(|b| (m, b)));
        Ok(Candidate { fit, outcome })
    };
    let candidates: Vec<Candidate> = specs.par_iter().map(run).collect::<Result<_>>()?;
    let keys: Vec<(SpecKind, Option<usize>)> = candidates
        .iter()
        .map(|c| (c.fit.spec.kind, c.outcome.as_ref().ok().map(|o| o.1.violation_count)))
        .collect();
    let summaries: Vec<CandidateSummary> = candidates
        .iter()
        .map(|c| CandidateSummary {
            kind: c.fit.spec.kind,
            n_terms: c.fit.spec.terms.len(),
            converged: c.fit.converged,
            violations: c.outcome.as_ref().ok().map(|o| o.1.violation_count),
            error: c.outcome.as_ref().err().map(|e| e.to_string()),
        })
        .collect();
    let best = match select_spec(&keys) {
        Ok(i) => i,
        Err(e) => {
            // Surface the simplest candidate's own failure when all failed.
            return Err(candidates
                .into_iter()
                .find_map(|c| c.outcome.err())
                .unwrap_or(e));
        }
    };
    let chosen = candidates.into_iter().nth(best).expect("selected index in range");
    let (matched, balance) = chosen.outcome?;
    let mlm = if opts.fit_mlm { fit_outcome_models(ctx, &matched)? } else { Vec::new() };
    Ok(InterventionAnalysis {
        intervention: intervention.to_string(),
        ct: ct.to_vec(),
        naive,
        matched: Some(MatchedAnalysis {
            chosen: chosen.fit.spec.kind,
            candidates: summaries,
            propensity: chosen.fit,
            matched,
            balance,
            mlm,
        }),
    })
}

/// Random-intercept bias models for the three outcomes of one matched sample.
pub fn fit_outcome_models(ctx: &AnalysisContext, matched: &MatchedSample) -> Result<Vec<MlmFit>> {
    Outcome::ALL
        .par_iter()
        .map(|&o| matched_bias_mlm(matched, ctx.pop, ctx.table, ctx.design, o))
        .collect()
}
