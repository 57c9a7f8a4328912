//! Placebo reference distributions: random pool draws stand in for the
//! experimental control group, giving the no-bias behaviour of each estimator.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_intervention, AnalysisContext, AnalysisOptions};
use crate::biasest::naive_bias;
use crate::rng::{derive_seed, substream, tag};
use crate::stats::{mean, sample_variance};
use crate::synthpop::{sample_ids, seed_serde};
use crate::{Error, Outcome, Result, SchoolId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullMode {
    Naive,
    Match,
}

impl NullMode {
    pub fn name(self) -> &'static str {
        match self {
            NullMode::Naive => "naive",
            NullMode::Match => "match",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub intervention: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplicate {
    pub replicate: usize,
    pub intervention: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullReference {
    pub mode: NullMode,
    pub replicates: usize,
    pub cells: Vec<Cell>,
    /// Successful replicate indices, one per row of `draws`.
    pub replicate_ids: Vec<usize>,
    /// Row-major: `draws[r][c]` for replicate row `r` and cell `c`.
    pub draws: Vec<Vec<f64>>,
    pub failed: Vec<FailedReplicate>,
    pub mu_null: Vec<f64>,
    pub sigma_null: Vec<f64>,
    pub per_cell_variance: Vec<f64>,
    #[serde(with = "seed_serde")]
    pub master_seed: u64,
}

/// Signed mean and sample SD of a set of cell estimates.
pub fn summarize_reference(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::SpreadUndefined(values.len()));
    }
    Ok((mean(values), sample_variance(values).sqrt()))
}

/// Two-sided add-one p-value of `observed` against draws centred at their mean.
pub fn p_value(observed: f64, reference: &[f64]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::argument("reference distribution is empty"));
    }
    let center = mean(reference);
    let obs = (observed - center).abs();
    let extreme = reference.iter().filter(|&&r| (r - center).abs() >= obs).count();
    Ok((1 + extreme) as f64 / (reference.len() + 1) as f64)
}

/// Placebo draw for replicate `r` and intervention index `w`.
pub fn placebo_draw(pool: &[SchoolId], n_w: usize, master_seed: u64, r: usize, w: usize) -> Result<Vec<SchoolId>> {
    let mut rng = substream(master_seed, &[tag::NULL_REPLICATE, r as u64, w as u64]);
    sample_ids(pool, n_w, &mut rng)
}

/// Replicate-level analysis of every intervention; 3 cells each.
fn run_replicate(
    ctx: &AnalysisContext,
    pool: &[SchoolId],
    trial_sizes: &[(String, usize)],
    mode: NullMode,
    master_seed: u64,
    r: usize,
    opts: &AnalysisOptions,
) -> std::result::Result<Vec<f64>, FailedReplicate> {
    let mut row = Vec::with_capacity(trial_sizes.len() * 3);
    for (w, (name, n_w)) in trial_sizes.iter().enumerate() {
        let fail = |e: Error| FailedReplicate {
            replicate: r,
            intervention: name.clone(),
            error: e.to_string(),
        };
        let ct = placebo_draw(pool, *n_w, master_seed, r, w).map_err(fail)?;
        match mode {
            NullMode::Naive => {
                for &o in &Outcome::ALL {
                    row.push(naive_bias(ctx.table, name, &ct, pool, o).map_err(fail)?.value);
                }
            }
            NullMode::Match => {
                let rest: Vec<SchoolId> = pool.iter().copied().filter(|id| ct.binary_search(id).is_err()).collect();
                let order_seed = derive_seed(master_seed, &[tag::MATCH_ORDER, r as u64, w as u64]);
                let a = analyze_intervention(ctx, name, &ct, &[], &rest, opts, order_seed).map_err(fail)?;
                row.extend(a.match_estimates().iter().map(|e| e.value));
            }
        }
    }
    Ok(row)
}

/// Build a placebo reference of `replicates` rows over the comparison pool.
pub fn run_null_reference(
    ctx: &AnalysisContext,
    trial_sizes: &[(String, usize)],
    mode: NullMode,
    replicates: usize,
    master_seed: u64,
    opts: &AnalysisOptions,
) -> Result<NullReference> {
    if replicates == 0 {
        return Err(Error::argument("need at least one replicate"));
    }
    if trial_sizes.is_empty() {
        return Err(Error::argument("need at least one intervention"));
    }
    let pool = ctx.pop.comparison_pool_ids();
    if let Some((name, n)) = trial_sizes.iter().find(|(_, n)| *n > pool.len() || *n == 0) {
        return Err(Error::argument(format!(
            "intervention {name}: n_w = {n} outside [1, pool size {}]",
            pool.len()
        )));
    }
    run_null_reference_on(ctx, &pool, trial_sizes, mode, replicates, master_seed, opts)
}

/// As [`run_null_reference`] with an explicit pool.
pub fn run_null_reference_on(
    ctx: &AnalysisContext,
    pool: &[SchoolId],
    trial_sizes: &[(String, usize)],
    mode: NullMode,
    replicates: usize,
    master_seed: u64,
    opts: &AnalysisOptions,
) -> Result<NullReference> {
    let mut sorted = pool.to_vec();
    sorted.sort();
    let results: Vec<std::result::Result<Vec<f64>, FailedReplicate>> = (0..replicates)
        .into_par_iter()
        .map(|r| run_replicate(ctx, &sorted, trial_sizes, mode, master_seed, r, opts))
        .collect();
    let cells: Vec<Cell> = trial_sizes
        .iter()
        .flat_map(|(name, _)| {
            Outcome::ALL.iter().map(move |&o| Cell {
                intervention: name.clone(),
                outcome: o,
            })
        })
        .collect();
    let mut draws = Vec::new();
    let mut replicate_ids = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(row) => {
                draws.push(row);
                replicate_ids.push(r);
            }
            Err(f) => failed.push(f),
        }
    }
    if !failed.is_empty() {
        warn!("{} of {replicates} {} placebo replicates failed and are excluded", failed.len(), mode.name());
    }
    let mut mu_null = Vec::with_capacity(draws.len());
    let mut sigma_null = Vec::with_capacity(draws.len());
    for row in &draws {
        let (m, s) = summarize_reference(row).unwrap_or((mean(row), f64::NAN));
        mu_null.push(m);
        sigma_null.push(s);
    }
    let per_cell_variance = (0..cells.len())
        .map(|c| {
            let col: Vec<f64> = draws.iter().map(|r| r[c]).collect();
            sample_variance(&col)
        })
        .collect();
    Ok(NullReference {
        mode,
        replicates,
        cells,
        replicate_ids,
        draws,
        failed,
        mu_null,
        sigma_null,
        per_cell_variance,
        master_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaceboTest {
    pub mu_observed: f64,
    pub sigma_observed: f64,
    pub p_mu: f64,
    pub p_sigma: f64,
}

/// Compare an observed cell set with a reference through both summaries.
pub fn placebo_test(observed: &[f64], reference: &NullReference) -> Result<PlaceboTest> {
    let (mu, sigma) = summarize_reference(observed)?;
    let sig: Vec<f64> = reference.sigma_null.iter().copied().filter(|s| s.is_finite()).collect();
    Ok(PlaceboTest {
        mu_observed: mu,
        sigma_observed: sigma,
        p_mu: p_value(mu, &reference.mu_null)?,
        p_sigma: p_value(sigma, &sig)?,
    })
}
