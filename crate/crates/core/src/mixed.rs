//! Random-intercept linear mixed model fitted by REML.
//!
//! `y = X b + a_g + e` with `a_g ~ N(0, s2a)` and `e ~ N(0, s2)`. The
//! likelihood is profiled over `lambda = s2a / s2`; for each candidate ratio
//! the fixed effects and `s2` come from closed-form GLS on per-group
//! sufficient statistics, so a fit costs O(groups * p^2) per evaluation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky, log_det_from_cholesky};
use crate::{Error, Result};

const LOG_RATIO_MIN: f64 = -15.0;
const LOG_RATIO_MAX: f64 = 8.0;
const GRID_STEP: f64 = 0.5;
const GOLDEN_TOL: f64 = 1e-8;
const MAX_EVALUATIONS: usize = 200;
const SIGMA2_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Default)]
pub struct MixedOptions {
    /// Skip the search and evaluate at this variance ratio.
    pub fixed_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedFit {
    pub beta: Vec<f64>,
    /// Row-major covariance of `beta`.
    pub cov_beta: Vec<f64>,
    pub sigma2: f64,
    pub sigma_alpha2: f64,
    pub ratio: f64,
    pub reml_loglik: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl MixedFit {
    pub fn se(&self, k: usize) -> f64 {
        let p = self.beta.len();
        self.cov_beta[k * p + k].max(0.0).sqrt()
    }
}

struct GroupStats {
    n: f64,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    xsum: DVector<f64>,
    ysum: f64,
    yty: f64,
}

/// Sufficient statistics of a grouped regression problem.
pub struct MixedProblem {
    groups: Vec<GroupStats>,
    n: usize,
    p: usize,
}

struct Profile {
    loglik: f64,
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    sigma2: f64,
}

impl MixedProblem {
    /// `groups[i]` labels row `i`; labels need not be contiguous.
    pub fn new(x: &DMatrix<f64>, y: &[f64], groups: &[u64]) -> Result<Self> {
        let n = x.nrows();
        let p = x.ncols();
        if y.len() != n || groups.len() != n {
            return Err(Error::argument(format!(
                "mixed model: {n} design rows, {} responses, {} group labels",
                y.len(),
                groups.len()
            )));
        }
        if n <= p {
            return Err(Error::argument(format!("mixed model: {n} rows for {p} fixed effects")));
        }
        let mut index: BTreeMap<u64, usize> = BTreeMap::new();
        for &g in groups {
            let k = index.len();
            index.entry(g).or_insert(k);
        }
        let mut stats: Vec<GroupStats> = (0..index.len())
            .map(|_| GroupStats {
                n: 0.0,
                xtx: DMatrix::zeros(p, p),
                xty: DVector::zeros(p),
                xsum: DVector::zeros(p),
                ysum: 0.0,
                yty: 0.0,
            })
            .collect();
        for i in 0..n {
            let g = &mut stats[index[&groups[i]]];
            let row = x.row(i);
            let yi = y[i];
            g.n += 1.0;
            g.ysum += yi;
            g.yty += yi * yi;
            for a in 0..p {
                let xa = row[a];
                g.xsum[a] += xa;
                g.xty[a] += xa * yi;
                for b in a..p {
                    g.xtx[(a, b)] += xa * row[b];
                }
            }
        }
        for g in &mut stats {
            for a in 0..p {
                for b in 0..a {
                    g.xtx[(a, b)] = g.xtx[(b, a)];
                }
            }
        }
        Ok(MixedProblem { groups: stats, n, p })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    fn profile(&self, ratio: f64) -> Result<Profile> {
        let p = self.p;
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        let mut yvy = 0.0;
        let mut logdet_v = 0.0;
        for g in &self.groups {
            let c = ratio / (1.0 + g.n * ratio);
            a += &g.xtx - &g.xsum * g.xsum.transpose() * c;
            b += &g.xty - &g.xsum * (c * g.ysum);
            yvy += g.yty - c * g.ysum * g.ysum;
            logdet_v += (g.n * ratio).ln_1p();
        }
        let ch = cholesky(&a, "mixed-model fixed-effect information")?;
        let beta = ch.solve(&b);
        let rss = (yvy - b.dot(&beta)).max(0.0);
        let dof = (self.n - p) as f64;
        let sigma2 = (rss / dof).max(SIGMA2_FLOOR);
        let loglik = -0.5 * (dof * sigma2.ln() + logdet_v + log_det_from_cholesky(&ch));
        Ok(Profile {
            loglik,
            beta,
            a_inv: ch.inverse(),
            sigma2,
        })
    }

    /// Profiled REML log-likelihood (up to a constant) at a variance ratio.
    pub fn reml_loglik(&self, ratio: f64) -> Result<f64> {
        Ok(self.profile(ratio)?.loglik)
    }

    pub fn fit(&self, opts: &MixedOptions) -> Result<MixedFit> {
        let (ratio, evaluations) = match opts.fixed_ratio {
            Some(r) if r >= 0.0 && r.is_finite() => (r, 0),
            Some(r) => return Err(Error::argument(format!("variance ratio {r} must be finite and >= 0"))),
            None => self.search()?,
        };
        let pr = self.profile(ratio)?;
        let p = self.p;
        let cov = &pr.a_inv * pr.sigma2;
        Ok(MixedFit {
            beta: pr.beta.iter().copied().collect(),
            cov_beta: (0..p * p).map(|k| cov[(k / p, k % p)]).collect(),
            sigma2: pr.sigma2,
            sigma_alpha2: ratio * pr.sigma2,
            ratio,
            reml_loglik: pr.loglik,
            evaluations,
            converged: true,
        })
    }

    fn search(&self) -> Result<(f64, usize)> {
        let mut trace: Vec<f64> = Vec::new();
        let mut eval = |theta: Option<f64>| -> Result<f64> {
            let ratio = theta.map_or(0.0, f64::exp);
            let l = self.profile(ratio)?.loglik;
            trace.push(l);
            if trace.len() > MAX_EVALUATIONS || !l.is_finite() {
                return Err(Error::NonConvergence {
                    what: "REML variance-ratio search".into(),
                    evaluations: trace.len(),
                    trace: trace.clone(),
                });
            }
            Ok(l)
        };
        let at_zero = eval(None)?;
        let n_grid = ((LOG_RATIO_MAX - LOG_RATIO_MIN) / GRID_STEP).round() as usize;
        let mut best = (LOG_RATIO_MIN, f64::NEG_INFINITY);
        for k in 0..=n_grid {
            let theta = LOG_RATIO_MIN + k as f64 * GRID_STEP;
            let l = eval(Some(theta))?;
            if l > best.1 {
                best = (theta, l);
            }
        }
        let mut lo = (best.0 - GRID_STEP).max(LOG_RATIO_MIN);
        let mut hi = (best.0 + GRID_STEP).min(LOG_RATIO_MAX);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - phi * (hi - lo);
        let mut d = lo + phi * (hi - lo);
        let mut fc = eval(Some(c))?;
        let mut fd = eval(Some(d))?;
        while hi - lo > GOLDEN_TOL {
            if fc >= fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - phi * (hi - lo);
                fc = eval(Some(c))?;
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + phi * (hi - lo);
                fd = eval(Some(d))?;
            }
        }
        let (theta, l) = if fc >= fd { (c, fc) } else { (d, fd) };
        let (theta, l) = if best.1 > l { best } else { (theta, l) };
        let n_evals = trace.len();
        if at_zero >= l {
            Ok((0.0, n_evals))
        } else {
            Ok((theta.exp(), n_evals))
        }
    }
}

/// Convenience wrapper: build the problem and fit it.
pub fn fit_random_intercept(
    x: &DMatrix<f64>,
    y: &[f64],
    groups: &[u64],
    opts: &MixedOptions,
) -> Result<MixedFit> {
    MixedProblem::new(x, y, groups)?.fit(opts)
}
