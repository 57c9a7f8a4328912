//! Random-effects meta-analysis of cell-level bias estimates and the
//! bias-magnitude regressions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::independent_columns;
use crate::mixed::{fit_random_intercept, MixedOptions};
use crate::rng::{substream, tag};
use crate::stats::{f_upper_p, mean, quantile_sorted, sample_variance, t_two_sided_p};
use crate::synthpop::seed_serde;
use crate::{Error, Outcome, Result};

pub const CI_GRID_MAX: f64 = 1.0;
pub const CI_GRID_STEP: f64 = 1e-3;
pub const CI_DRAWS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaCell {
    pub intervention: String,
    pub outcome: Outcome,
    pub beta_hat: f64,
    pub sigma2_hat: f64,
}

fn group_by_intervention(cells: &[MetaCell]) -> BTreeMap<&str, Vec<&MetaCell>> {
    let mut m: BTreeMap<&str, Vec<&MetaCell>> = BTreeMap::new();
    for c in cells {
        m.entry(c.intervention.as_str()).or_default().push(c);
    }
    m
}

/// Intra-class correlation of estimates within interventions, by REML.
pub fn estimate_icc(cells: &[MetaCell]) -> Result<f64> {
    let groups = group_by_intervention(cells);
    if groups.len() < 2 || groups.values().any(|g| g.len() < 2) {
        return Err(Error::argument("ICC needs at least two interventions with at least two outcomes each"));
    }
    let index: BTreeMap<&str, u64> = groups.keys().enumerate().map(|(i, k)| (*k, i as u64)).collect();
    let y: Vec<f64> = cells.iter().map(|c| c.beta_hat).collect();
    let g: Vec<u64> = cells.iter().map(|c| index[c.intervention.as_str()]).collect();
    let x = DMatrix::from_element(y.len(), 1, 1.0);
    let fit = fit_random_intercept(&x, &y, &g, &MixedOptions::default())?;
    let total = fit.sigma_alpha2 + fit.sigma2;
    Ok(if total > 0.0 { fit.sigma_alpha2 / total } else { 0.0 })
}

/// `n_cells / (1 + (k - 1) rho)`: the design-effect adjusted count.
pub fn effective_sample_size(n_cells: usize, k_outcomes: usize, rho: f64) -> Result<f64> {
    if k_outcomes == 0 || n_cells % k_outcomes != 0 {
        return Err(Error::argument(format!("{n_cells} cells are not a multiple of {k_outcomes} outcomes")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::argument(format!("ICC {rho} outside [0, 1)")));
    }
    Ok(n_cells as f64 / (1.0 + (k_outcomes as f64 - 1.0) * rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau2Estimate {
    pub tau2: f64,
    pub q: f64,
    pub beta_bar: f64,
}

fn tau2_from(betas: &[f64], sigma2: &[f64], k: f64) -> Result<Tau2Estimate> {
    if betas.len() < 2 {
        return Err(Error::argument("tau^2 needs at least two estimates"));
    }
    if let Some(s) = sigma2.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::argument(format!("sampling variance {s} must be positive")));
    }
    let w: Vec<f64> = sigma2.iter().map(|s| 1.0 / s).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let beta_bar = betas.iter().zip(&w).map(|(b, w)| b * w).sum::<f64>() / sw;
    let q = betas.iter().zip(&w).map(|(b, w)| (b - beta_bar).powi(2) * w).sum::<f64>();
    let denom = sw - sw2 / sw;
    if !(denom > 0.0) {
        return Err(Error::argument("tau^2 denominator is zero"));
    }
    let tau2 = if q <= k - 1.0 { 0.0 } else { (q - (k - 1.0)) / denom };
    Ok(Tau2Estimate { tau2, q, beta_bar })
}

/// Method-of-moments between-cell variance with an effective count `k`.
pub fn tau2_mom(cells: &[MetaCell], k_effective: f64) -> Result<Tau2Estimate> {
    let b: Vec<f64> = cells.iter().map(|c| c.beta_hat).collect();
    let s: Vec<f64> = cells.iter().map(|c| c.sigma2_hat).collect();
    tau2_from(&b, &s, k_effective)
}

/// Random-effects weighted mean with weights `1 / (sigma2 + tau2)`.
pub fn pooled_mean_nu(cells: &[MetaCell], tau2: f64) -> Result<f64> {
    if cells.is_empty() || !(tau2 >= 0.0) {
        return Err(Error::argument("pooled mean needs cells and tau^2 >= 0"));
    }
    let w: Vec<f64> = cells.iter().map(|c| 1.0 / (c.sigma2_hat + tau2)).collect();
    if w.iter().any(|w| !w.is_finite()) {
        return Err(Error::argument("zero total variance for a cell"));
    }
    Ok(cells.iter().zip(&w).map(|(c, w)| c.beta_hat * w).sum::<f64>() / w.iter().sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbEstimates {
    pub lambda: Vec<f64>,
    pub shrunken: Vec<f64>,
    pub constrained: Vec<f64>,
}

/// Empirical-Bayes shrinkage toward `nu`, then an affine rescaling so the
/// sample variance of the constrained estimates equals `tau2`.
pub fn eb_constrained(cells: &[MetaCell], nu: f64, tau2: f64) -> Result<EbEstimates> {
    if !(tau2 >= 0.0) {
        return Err(Error::argument("tau^2 must be >= 0"));
    }
    let lambda: Vec<f64> = cells
        .iter()
        .map(|c| {
            let t = c.sigma2_hat + tau2;
            if t > 0.0 {
                c.sigma2_hat / t
            } else {
                0.0
            }
        })
        .collect();
    let shrunken: Vec<f64> = cells
        .iter()
        .zip(&lambda)
        .map(|(c, &l)| if l == 0.0 { c.beta_hat } else { l * nu + (1.0 - l) * c.beta_hat })
        .collect();
    let m = mean(&shrunken);
    let constrained = if tau2 == 0.0 {
        vec![m; shrunken.len()]
    } else {
        let v = sample_variance(&shrunken);
        if !(v > 0.0) {
            return Err(Error::DegenerateRescale { tau2 });
        }
        let c = (tau2 / v).sqrt();
        shrunken.iter().map(|b| m + c * (b - m)).collect()
    };
    Ok(EbEstimates {
        lambda,
        shrunken,
        constrained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionMeta {
    pub interventions: Vec<String>,
    pub beta_w: Vec<f64>,
    /// Mean of the per-outcome standard errors.
    pub sigma_w: Vec<f64>,
    pub tau2: f64,
    pub q: f64,
    pub ci_95: [f64; 2],
    pub ci_retained: usize,
    #[serde(with = "seed_serde")]
    pub ci_seed: u64,
}

/// Intervention-level heterogeneity with a test-inversion interval for tau^2.
pub fn intervention_level_meta(cells: &[MetaCell], seed: u64) -> Result<InterventionMeta> {
    let groups = group_by_intervention(cells);
    let mut interventions = Vec::new();
    let mut beta_w = Vec::new();
    let mut sigma_w = Vec::new();
    for (name, g) in &groups {
        for o in Outcome::ALL {
            if !g.iter().any(|c| c.outcome == o) {
                return Err(Error::argument(format!("intervention {name} lacks a {o} estimate")));
            }
        }
        interventions.push(name.to_string());
        beta_w.push(g.iter().map(|c| c.beta_hat).sum::<f64>() / g.len() as f64);
        sigma_w.push(g.iter().map(|c| c.sigma2_hat.sqrt()).sum::<f64>() / g.len() as f64);
    }
    let s2: Vec<f64> = sigma_w.iter().map(|s| s * s).collect();
    let k = beta_w.len() as f64;
    let est = tau2_from(&beta_w, &s2, k)?;
    let (ci, retained) = tau2_interval(est.q, &s2, seed);
    Ok(InterventionMeta {
        interventions,
        beta_w,
        sigma_w,
        tau2: est.tau2,
        q: est.q,
        ci_95: ci,
        ci_retained: retained,
        ci_seed: seed,
    })
}

fn q_stat(b: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let bar = b.iter().zip(w).map(|(b, w)| b * w).sum::<f64>() / sw;
    b.iter().zip(w).map(|(b, w)| (b - bar).powi(2) * w).sum()
}

/// Grid values of tau^2 whose simulated Q distribution has the observed Q in
/// its central 95%. The same normal deviates serve every grid point. An
/// empty acceptance set is reported as [0, 0].
pub fn tau2_interval(q_obs: f64, sigma2: &[f64], seed: u64) -> ([f64; 2], usize) {
    let k = sigma2.len();
    let mut rng = substream(seed, &[tag::CI_GRID]);
    let z: Vec<f64> = (0..CI_DRAWS * k).map(|_| rng.sample(StandardNormal)).collect();
    let w: Vec<f64> = sigma2.iter().map(|s| 1.0 / s).collect();
    let n_grid = (CI_GRID_MAX / CI_GRID_STEP).round() as usize;
    let keep: Vec<f64> = (0..=n_grid)
        .into_par_iter()
        .filter_map(|g| {
            let tau2 = g as f64 * CI_GRID_STEP;
            let sd: Vec<f64> = sigma2.iter().map(|s| (s + tau2).sqrt()).collect();
            let mut qs: Vec<f64> = (0..CI_DRAWS)
                .map(|d| {
                    let b: Vec<f64> = (0..k).map(|i| sd[i] * z[d * k + i]).collect();
                    q_stat(&b, &w)
                })
                .collect();
            qs.sort_by(f64::total_cmp);
            let lo = quantile_sorted(&qs, 0.025);
            let hi = quantile_sorted(&qs, 0.975);
            (q_obs >= lo && q_obs <= hi).then_some(tau2)
        })
        .collect();
    match (keep.first(), keep.last()) {
        (Some(&a), Some(&b)) => ([a, b], keep.len()),
        _ => ([0.0, 0.0], 0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaCellResult {
    pub intervention: String,
    pub outcome: Outcome,
    pub beta_hat: f64,
    pub sigma2_hat: f64,
    pub lambda: f64,
    pub omega: f64,
    pub shrunken: f64,
    pub constrained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    pub nu_hat: f64,
    pub tau2_hat: f64,
    pub q: f64,
    pub beta_bar: f64,
    pub k_effective: f64,
    pub rho_hat: f64,
    pub mean_abs_constrained: f64,
    pub cells: Vec<MetaCellResult>,
    pub intervention_level: InterventionMeta,
}

/// Full cell-level meta-analysis plus the intervention-level interval.
pub fn run_meta(cells: &[MetaCell], seed: u64) -> Result<MetaResult> {
    if let Some(c) = cells.iter().find(|c| !(c.sigma2_hat > 0.0) || !c.beta_hat.is_finite()) {
        return Err(Error::argument(format!(
            "cell {}/{} has sampling variance {} and estimate {}",
            c.intervention, c.outcome, c.sigma2_hat, c.beta_hat
        )));
    }
    let rho = estimate_icc(cells)?;
    let k = effective_sample_size(cells.len(), Outcome::ALL.len(), rho)?;
    let t = tau2_mom(cells, k)?;
    let nu = pooled_mean_nu(cells, t.tau2)?;
    let eb = eb_constrained(cells, nu, t.tau2)?;
    let il = intervention_level_meta(cells, seed)?;
    let out_cells = cells
        .iter()
        .enumerate()
        .map(|(i, c)| MetaCellResult {
            intervention: c.intervention.clone(),
            outcome: c.outcome,
            beta_hat: c.beta_hat,
            sigma2_hat: c.sigma2_hat,
            lambda: eb.lambda[i],
            omega: 1.0 / (c.sigma2_hat + t.tau2),
            shrunken: eb.shrunken[i],
            constrained: eb.constrained[i],
        })
        .collect();
    Ok(MetaResult {
        nu_hat: nu,
        tau2_hat: t.tau2,
        q: t.q,
        beta_bar: t.beta_bar,
        k_effective: k,
        rho_hat: rho,
        mean_abs_constrained: eb.constrained.iter().map(|b| b.abs()).sum::<f64>() / cells.len() as f64,
        cells: out_cells,
        intervention_level: il,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub f_statistic: f64,
    pub f_p_value: f64,
    pub residual_se: f64,
    pub n: usize,
    pub df_residual: usize,
}

/// Ordinary least squares with an intercept in column 0 of `x`.
pub fn ols(y: &[f64], x: &DMatrix<f64>, names: &[String]) -> Result<OlsFit> {
    let n = y.len();
    let p = x.ncols();
    if x.nrows() != n || names.len() != p {
        return Err(Error::argument("OLS dimensions disagree"));
    }
    if n < p + 1 {
        return Err(Error::argument(format!("OLS needs at least {} observations, got {n}", p + 1)));
    }
    let xtx = x.transpose() * x;
    let (_, dropped) = independent_columns(&xtx, 1e-10);
    if !dropped.is_empty() {
        return Err(Error::RankDeficient {
            columns: dropped.iter().map(|&d| names[d].clone()).collect(),
        });
    }
    let yv = DVector::from_row_slice(y);
    let ch = xtx.cholesky().ok_or_else(|| Error::RankDeficient { columns: names.to_vec() })?;
    let beta = ch.solve(&(x.transpose() * &yv));
    let resid = &yv - x * &beta;
    let rss = resid.norm_squared();
    let ybar = mean(y);
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let df = n - p;
    let s2 = rss / df as f64;
    let inv = ch.inverse();
    let se: Vec<f64> = (0..p).map(|j| (inv[(j, j)] * s2).max(0.0).sqrt()).collect();
    let t: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let pv: Vec<f64> = t.iter().map(|&t| if t.is_finite() { t_two_sided_p(t, df as f64) } else { f64::NAN }).collect();
    let (r2, f) = if tss > 0.0 {
        let r2 = 1.0 - rss / tss;
        let f = if p > 1 { ((tss - rss) / (p - 1) as f64) / s2 } else { f64::NAN };
        (r2, f)
    } else {
        (0.0, f64::NAN)
    };
    let adj = 1.0 - (1.0 - r2) * (n - 1) as f64 / df as f64;
    let f_p = if f.is_finite() && p > 1 { f_upper_p(f, (p - 1) as f64, df as f64) } else { f64::NAN };
    Ok(OlsFit {
        names: names.to_vec(),
        coefficients: beta.iter().copied().collect(),
        std_errors: se,
        t_values: t,
        p_values: pv,
        r_squared: r2,
        adj_r_squared: adj,
        f_statistic: f,
        f_p_value: f_p,
        residual_se: s2.sqrt(),
        n,
        df_residual: df,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    OutcomeDummies,
    SampleSize,
    ViolationCount,
}

impl Predictor {
    pub const ALL: [Predictor; 3] = [Predictor::OutcomeDummies, Predictor::SampleSize, Predictor::ViolationCount];

    pub fn name(self) -> &'static str {
        match self {
            Predictor::OutcomeDummies => "outcome_dummies",
            Predictor::SampleSize => "sample_size",
            Predictor::ViolationCount => "violation_count",
        }
    }
}

/// One estimate with the attributes used as magnitude predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeCell {
    pub intervention: String,
    pub outcome: Outcome,
    pub beta_hat: f64,
    pub n_students: usize,
    pub violations: usize,
}

/// Regress `|beta_hat|` on one predictor set.
pub fn predict_bias_magnitude(cells: &[MagnitudeCell], predictor: Predictor) -> Result<OlsFit> {
    let y: Vec<f64> = cells.iter().map(|c| c.beta_hat.abs()).collect();
    let (names, cols): (Vec<&str>, Vec<Box<dyn Fn(&MagnitudeCell) -> f64>>) = match predictor {
        Predictor::OutcomeDummies => (
            vec!["(intercept)", "read", "write"],
            vec![
                Box::new(|_| 1.0),
                Box::new(|c| (c.outcome == Outcome::Reading) as u8 as f64),
                Box::new(|c| (c.outcome == Outcome::Writing) as u8 as f64),
            ],
        ),
        Predictor::SampleSize => (
            vec!["(intercept)", "pupils_thousands"],
            vec![Box::new(|_| 1.0), Box::new(|c| c.n_students as f64 / 1000.0)],
        ),
        Predictor::ViolationCount => (
            vec!["(intercept)", "violations"],
            vec![Box::new(|_| 1.0), Box::new(|c| c.violations as f64)],
        ),
    };
    if cells.len() < names.len() + 1 {
        return Err(Error::argument(format!(
            "{} regression needs at least {} cells",
            predictor.name(),
            names.len() + 1
        )));
    }
    let x = DMatrix::from_fn(cells.len(), cols.len(), |i, j| cols[j](&cells[i]));
    let names: Vec<String> = names.into_iter().map(String::from).collect();
    ols(&y, &x, &names)
}
