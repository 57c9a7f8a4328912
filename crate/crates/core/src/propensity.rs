//! Logistic propensity models, candidate specifications and balance checks.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariates::{ColumnKind, Design};
use crate::linalg::independent_columns;
use crate::matching::MatchedSample;
use crate::stats::{inv_logit, normal_quantile, quantile_sorted};
use crate::{Error, Result, SchoolId};

pub const GRADIENT_TOL: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 50;
pub const LOGIT_CLIP: f64 = 15.0;
const SEPARATION_LOGIT: f64 = 40.0;
pub const VIOLATION_THRESHOLD: f64 = 0.25;
pub const SPLINE_KNOT_QUANTILES: [f64; 5] = [0.05, 0.275, 0.5, 0.725, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    Baseline,
    Interacted,
    Flexible,
}

impl SpecKind {
    pub fn name(self) -> &'static str {
        match self {
            SpecKind::Baseline => "baseline",
            SpecKind::Interacted => "interacted",
            SpecKind::Flexible => "flexible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Main { col: usize },
    Interaction { a: usize, b: usize },
    /// Nonlinear column `basis` of a restricted cubic spline in `col`.
    Spline { col: usize, knots: Vec<f64>, basis: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySpec {
    pub kind: SpecKind,
    pub terms: Vec<Term>,
    pub covariates: Vec<String>,
}

/// Restricted cubic spline basis column `j` (0-based, `j < knots.len() - 2`).
pub fn rcs_basis(x: f64, knots: &[f64], j: usize) -> f64 {
    let k = knots.len();
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let (tj, tk1, tk) = (knots[j], knots[k - 2], knots[k - 1]);
    let scale = (tk - knots[0]).powi(2);
    (cube(x - tj) - cube(x - tk1) * (tk - tj) / (tk - tk1) + cube(x - tk) * (tk1 - tj) / (tk - tk1)) / scale
}

impl PropensitySpec {
    pub fn baseline(covariates: &[String]) -> Self {
        let mut terms = vec![Term::Intercept];
        terms.extend((0..covariates.len()).map(|col| Term::Main { col }));
        PropensitySpec {
            kind: SpecKind::Baseline,
            terms,
            covariates: covariates.to_vec(),
        }
    }

    pub fn term_name(&self, t: &Term) -> String {
        match t {
            Term::Intercept => "(intercept)".into(),
            Term::Main { col } => self.covariates[*col].clone(),
            Term::Interaction { a, b } => format!("{}:{}", self.covariates[*a], self.covariates[*b]),
            Term::Spline { col, basis, .. } => format!("rcs({})[{}]", self.covariates[*col], basis + 1),
        }
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| self.term_name(t)).collect()
    }

    pub fn evaluate(t: &Term, row: &[f64]) -> f64 {
        match t {
            Term::Intercept => 1.0,
            Term::Main { col } => row[*col],
            Term::Interaction { a, b } => row[*a] * row[*b],
            Term::Spline { col, knots, basis } => rcs_basis(row[*col], knots, *basis),
        }
    }

    /// Model matrix for the rows of `x`.
    pub fn model_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect();
        DMatrix::from_fn(x.nrows(), self.terms.len(), |i, j| Self::evaluate(&self.terms[j], &rows[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPropensity {
    pub spec: PropensitySpec,
    /// (term name, coefficient, standard error) for estimable terms.
    pub coefficients: Vec<(String, f64, f64)>,
    /// Terms dropped as collinear with earlier ones.
    pub dropped_terms: Vec<String>,
    /// Index into `spec.terms` of each estimated coefficient.
    pub kept_terms: Vec<usize>,
    pub scores: Vec<f64>,
    pub logit_scores: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_gradient: f64,
    pub log_likelihood: f64,
}

impl FittedPropensity {
    pub fn z_values(&self) -> Vec<f64> {
        self.coefficients.iter().map(|(_, b, se)| b / se).collect()
    }

    /// Linear predictor for new covariate rows, clipped like the fit.
    pub fn predict_logit(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect();
        rows.iter()
            .map(|r| {
                let eta: f64 = self
                    .kept_terms
                    .iter()
                    .zip(&self.coefficients)
                    .map(|(&t, c)| PropensitySpec::evaluate(&self.spec.terms[t], r) * c.1)
                    .sum();
                if self.converged {
                    eta
                } else {
                    eta.clamp(-LOGIT_CLIP, LOGIT_CLIP)
                }
            })
            .collect()
    }
}

fn log_likelihood(eta: &DVector<f64>, y: &DVector<f64>) -> f64 {
    eta.iter()
        .zip(y.iter())
        .map(|(&e, &yi)| {
            // log(1 + exp(e)) computed stably.
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            yi * e - softplus
        })
        .sum()
}

/// Maximum-likelihood logistic regression by Newton-Raphson (IRLS).
pub fn fit_logistic(design: &DMatrix<f64>, labels: &[bool], spec: &PropensitySpec) -> Result<FittedPropensity> {
    let n = design.nrows();
    if labels.len() != n {
        return Err(Error::argument(format!("{} labels for {n} design rows", labels.len())));
    }
    if design.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("design matrix contains non-finite values"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return Err(Error::DegenerateLabels { positives, n });
    }
    let full = spec.model_matrix(design);
    let (kept, dropped) = independent_columns(&(full.transpose() * &full), 1e-10);
    let names = spec.term_names();
    if !dropped.is_empty() {
        debug!("{} spec: dropping collinear terms {:?}", spec.kind.name(), dropped.iter().map(|&d| &names[d]).collect::<Vec<_>>());
    }
    let x = DMatrix::from_fn(n, kept.len(), |i, j| full[(i, kept[j])]);
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let p = x.ncols();

    let mut beta = DVector::zeros(p);
    if let Some(ic) = kept.iter().position(|&k| spec.terms[k] == Term::Intercept) {
        beta[ic] = (positives as f64 / (n - positives) as f64).ln();
    }
    let mut eta = &x * &beta;
    let mut ll = log_likelihood(&eta, &y);
    let mut iterations = 0;
    let mut converged = false;
    let mut max_grad;
    let mut info_matrix;
    let mut polished = false;
    loop {
        let mu = eta.map(inv_logit);
        let grad = x.transpose() * (&y - &mu);
        max_grad = grad.amax();
        let w = mu.map(|m| m * (1.0 - m));
        let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * w[i].sqrt());
        info_matrix = xw.tr_mul(&xw);
        if max_grad < GRADIENT_TOL {
            converged = true;
            // One more Newton step lands on the fixed point to rounding error.
            if polished {
                break;
            }
            polished = true;
            if let Some(step) = info_matrix.clone().cholesky().map(|c| c.solve(&grad)) {
                let cand = &beta + step;
                let cand_eta = &x * &cand;
                let cand_grad = (x.transpose() * (&y - cand_eta.map(inv_logit))).amax();
                if cand_grad <= max_grad {
                    beta = cand;
                    eta = cand_eta;
                    ll = log_likelihood(&eta, &y);
                    continue;
                }
            }
            break;
        }
        if iterations >= MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        let ridge = 1e-12 * (0..p).map(|i| info_matrix[(i, i)]).fold(0.0, f64::max);
        let mut h = info_matrix.clone();
        for i in 0..p {
            h[(i, i)] += ridge;
        }
        let Some(step) = h.cholesky().map(|c| c.solve(&grad)) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let cand_eta = &x * &cand;
            let cand_ll = log_likelihood(&cand_eta, &y);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        // Diverging linear predictor: separated data, no finite MLE.
        if eta.amax() > SEPARATION_LOGIT {
            break;
        }
    }
    let separated = eta.iter().any(|e| e.abs() > LOGIT_CLIP);
    if separated {
        converged = false;
    }
    let logit_scores: Vec<f64> = if converged {
        eta.iter().copied().collect()
    } else {
        eta.iter().map(|e| e.clamp(-LOGIT_CLIP, LOGIT_CLIP)).collect()
    };
    let scores = logit_scores.iter().map(|&e| inv_logit(e)).collect();
    let cov = info_matrix.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let coefficients = kept
        .iter()
        .enumerate()
        .map(|(j, &k)| (names[k].clone(), beta[j], cov[(j, j)].max(0.0).sqrt()))
        .collect();
    Ok(FittedPropensity {
        spec: spec.clone(),
        coefficients,
        dropped_terms: dropped.iter().map(|&d| names[d].clone()).collect(),
        kept_terms: kept,
        scores,
        logit_scores,
        converged,
        iterations,
        max_gradient: max_grad,
        log_likelihood: ll,
    })
}

/// Main-effect covariates whose Wald test rejects at `alpha`.
pub fn significant_covariates(fit: &FittedPropensity, alpha: f64) -> Vec<usize> {
    let crit = normal_quantile(1.0 - alpha / 2.0);
    fit.kept_terms
        .iter()
        .zip(&fit.coefficients)
        .filter_map(|(&t, (_, b, se))| match fit.spec.terms[t] {
            Term::Main { col } if (b / se).abs() > crit => Some(col),
            _ => None,
        })
        .collect()
}

/// Baseline, interacted and flexible specifications.
///
/// `x` holds the rows used to place spline knots and `continuous` flags the
/// covariates eligible for spline terms.
pub fn enumerate_candidate_specs(
    baseline_fit: &FittedPropensity,
    x: &DMatrix<f64>,
    continuous: &[bool],
    alpha: f64,
) -> Result<Vec<PropensitySpec>> {
    if !baseline_fit.converged {
        return Err(Error::argument("candidate specifications need a converged baseline fit"));
    }
    let base = PropensitySpec {
        kind: SpecKind::Baseline,
        ..baseline_fit.spec.clone()
    };
    let p = base.covariates.len();
    let sig = significant_covariates(baseline_fit, alpha);
    if sig.is_empty() {
        debug!("no significant baseline covariates; interacted spec equals baseline");
    }
    let mut interacted = PropensitySpec {
        kind: SpecKind::Interacted,
        ..base.clone()
    };
    let mut seen = std::collections::BTreeSet::new();
    for &a in &sig {
        for b in (0..p).filter(|&b| b != a) {
            let pair = (a.min(b), a.max(b));
            if seen.insert(pair) {
                interacted.terms.push(Term::Interaction { a: pair.0, b: pair.1 });
            }
        }
    }
    let mut flexible = PropensitySpec {
        kind: SpecKind::Flexible,
        ..interacted.clone()
    };
    for col in (0..p).filter(|&c| continuous.get(c).copied().unwrap_or(false)) {
        let mut v: Vec<f64> = x.column(col).iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let knots: Vec<f64> = SPLINE_KNOT_QUANTILES.iter().map(|&q| quantile_sorted(&v, q)).collect();
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            debug!("skipping spline for `{}`: knots not distinct", base.covariates[col]);
            continue;
        }
        for basis in 0..knots.len() - 2 {
            flexible.terms.push(Term::Spline {
                col,
                knots: knots.clone(),
                basis,
            });
        }
    }
    Ok(vec![base, interacted, flexible])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub covariates: Vec<String>,
    pub smd: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub violation_count: usize,
    pub n_covariates: usize,
}

impl BalanceReport {
    pub fn violations(&self) -> Vec<bool> {
        self.smd.iter().map(|s| s.abs() > VIOLATION_THRESHOLD).collect()
    }
}

/// Standardised mean differences, CT minus matched comparison, over the
/// population SD of the trimmed pool.
pub fn balance_report(matched: &MatchedSample, design: &Design) -> Result<BalanceReport> {
    if matched.pairs.is_empty() {
        return Err(Error::argument("balance report needs at least one matched pair"));
    }
    let rows = |ids: &[SchoolId]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| design.row_index(id).ok_or_else(|| Error::argument(format!("school {id} is not in the design"))))
            .collect()
    };
    let ct = rows(&matched.ct_ids())?;
    let co = rows(&matched.co_ids())?;
    let pool = rows(&matched.trimmed_pool)?;
    let p = design.n_features();
    let col_mean = |idx: &[usize], c: usize| idx.iter().map(|&i| design.rows[i].features[c]).sum::<f64>() / idx.len() as f64;
    let mut smd = Vec::with_capacity(p);
    let mut degenerate = Vec::with_capacity(p);
    for c in 0..p {
        let m = col_mean(&pool, c);
        let var = pool.iter().map(|&i| (design.rows[i].features[c] - m).powi(2)).sum::<f64>() / pool.len() as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            smd.push((col_mean(&ct, c) - col_mean(&co, c)) / sd);
            degenerate.push(false);
        } else {
            smd.push(0.0);
            degenerate.push(true);
        }
    }
    let violation_count = smd.iter().filter(|s| s.abs() > VIOLATION_THRESHOLD).count();
    Ok(BalanceReport {
        covariates: design.names(),
        smd,
        degenerate,
        violation_count,
        n_covariates: p,
    })
}

/// Index of the candidate with the fewest violations, ties to the simpler
/// spec. `None` marks a candidate that failed to match.
pub fn select_spec(candidates: &[(SpecKind, Option<usize>)]) -> Result<usize> {
    candidates
        .iter()
        .enumerate()
        .filter_map(|(i, (k, v))| v.map(|v| (v, *k, i)))
        .min()
        .map(|(_, _, i)| i)
        .ok_or_else(|| Error::NoOverlap("no candidate propensity specification produced a matched sample".into()))
}

/// Continuous-column flags for a design.
pub fn continuous_columns(design: &Design) -> Vec<bool> {
    design.columns.iter().map(|c| c.kind == ColumnKind::Continuous).collect()
}
