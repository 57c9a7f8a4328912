//! Common-support trimming and greedy 1:1 Mahalanobis matching inside a
//! logit-score caliper, without replacement.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::linalg::cholesky;
use crate::rng::{substream, tag};
use crate::stats::{median, sample_sd};
use crate::synthpop::seed_serde;
use crate::{Error, Result, SchoolId};

pub const DEFAULT_CALIPER_SD: f64 = 0.2;
pub const COVARIANCE_RIDGE: f64 = 1e-8;
/// Smallest Cholesky pivot of the feature correlation matrix below which the
/// full covariance is treated as singular and the metric falls back to its diagonal.
pub const SINGULAR_PIVOT: f64 = 1e-6;

/// A school as seen by the matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub id: SchoolId,
    pub logit: f64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub ct: SchoolId,
    pub co: SchoolId,
    pub distance: f64,
    pub logit_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSample {
    pub pairs: Vec<MatchPair>,
    pub unmatched_ct: Vec<SchoolId>,
    pub caliper_width: f64,
    #[serde(with = "seed_serde")]
    pub order_seed: u64,
    /// Pool after common-support trimming, in id order.
    pub trimmed_pool: Vec<SchoolId>,
    pub n_trimmed: usize,
    /// Pool schools within the caliper of each CT school, before any are taken.
    pub candidates_in_caliper: Vec<(SchoolId, usize)>,
    pub median_candidates: f64,
}

impl MatchedSample {
    pub fn ct_ids(&self) -> Vec<SchoolId> {
        self.pairs.iter().map(|p| p.ct).collect()
    }

    pub fn co_ids(&self) -> Vec<SchoolId> {
        self.pairs.iter().map(|p| p.co).collect()
    }

    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.distance).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Absolute caliper in logit units; defaults to 0.2 SD of pool logits.
    pub caliper: Option<f64>,
    pub strict: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            caliper: None,
            strict: true,
        }
    }
}

/// `sqrt((x1 - x2)' S^-1 (x1 - x2))`.
pub fn mahalanobis_distance(x1: &[f64], x2: &[f64], cov_inverse: &DMatrix<f64>) -> Result<f64> {
    let p = x1.len();
    if x2.len() != p || cov_inverse.nrows() != p || cov_inverse.ncols() != p {
        return Err(Error::argument(format!(
            "dimension mismatch: {} vs {} vs {}x{}",
            p,
            x2.len(),
            cov_inverse.nrows(),
            cov_inverse.ncols()
        )));
    }
    let d = DVector::from_iterator(p, x1.iter().zip(x2).map(|(a, b)| a - b));
    Ok((d.transpose() * cov_inverse * &d)[(0, 0)].max(0.0).sqrt())
}

/// Whitening transform for the Mahalanobis metric estimated on a pool.
#[derive(Debug, Clone)]
pub struct Metric {
    /// Feature columns with positive variance.
    pub columns: Vec<usize>,
    /// Set when the pool cannot support a full covariance: no more schools
    /// than columns, or a correlation pivot below [`SINGULAR_PIVOT`].
    pub diagonal: bool,
    chol_l: DMatrix<f64>,
}

impl Metric {
    pub fn estimate(pool: &[Unit]) -> Result<Metric> {
        let Some(first) = pool.first() else {
            return Err(Error::argument("cannot estimate a covariance on an empty pool"));
        };
        let p = first.features.len();
        let n = pool.len() as f64;
        let mean: Vec<f64> = (0..p)
            .map(|c| pool.iter().map(|u| u.features[c]).sum::<f64>() / n)
            .collect();
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for u in pool {
            for a in 0..p {
                let da = u.features[a] - mean[a];
                for b in a..p {
                    cov[(a, b)] += da * (u.features[b] - mean[b]);
                }
            }
        }
        let denom = (n - 1.0).max(1.0);
        for a in 0..p {
            for b in a..p {
                cov[(a, b)] /= denom;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        let columns: Vec<usize> = (0..p).filter(|&c| cov[(c, c)] > 1e-12).collect();
        let k = columns.len();
        let mut sub = DMatrix::from_fn(k, k, |i, j| cov[(columns[i], columns[j])]);
        for i in 0..k {
            sub[(i, i)] += COVARIANCE_RIDGE;
        }
        if k == 0 {
            return Ok(Metric {
                columns,
                diagonal: false,
                chol_l: DMatrix::zeros(0, 0),
            });
        }
        let sd: Vec<f64> = (0..k).map(|i| sub[(i, i)].sqrt()).collect();
        let corr = DMatrix::from_fn(k, k, |i, j| sub[(i, j)] / (sd[i] * sd[j]));
        let singular = pool.len() <= k
            || match corr.cholesky() {
                Some(c) => (0..k).any(|i| c.l()[(i, i)].powi(2) < SINGULAR_PIVOT),
                None => true,
            };
        if singular {
            return Ok(Metric {
                columns,
                diagonal: true,
                chol_l: DMatrix::from_diagonal(&DVector::from_vec(sd)),
            });
        }
        let ch = cholesky(&sub, "matching covariance on the trimmed pool")?;
        Ok(Metric {
            columns,
            diagonal: false,
            chol_l: ch.l(),
        })
    }

    pub fn covariance_inverse(&self) -> DMatrix<f64> {
        let l_inv = self.chol_l.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(0, 0));
        l_inv.transpose() * l_inv
    }

    pub fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let v = DVector::from_iterator(self.columns.len(), self.columns.iter().map(|&c| x[c]));
        self.chol_l
            .solve_lower_triangular(&v)
            .map(|z| z.iter().copied().collect())
            .unwrap_or_else(|| vec![f64::NAN; self.columns.len()])
    }
}

/// Keep pool schools whose logit lies within the CT logit range.
pub fn trim_common_support(pool: &[Unit], ct_logits: &[f64]) -> Result<(Vec<Unit>, usize)> {
    if pool.is_empty() || ct_logits.is_empty() {
        return Err(Error::argument("common-support trimming needs non-empty pool and CT sets"));
    }
    let lo = ct_logits.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ct_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<Unit> = pool
        .iter()
        .filter(|u| u.logit >= lo && u.logit <= hi)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::NoOverlap(format!(
            "no pool school has a logit score in the CT range [{lo:.4}, {hi:.4}]"
        )));
    }
    let dropped = pool.len() - kept.len();
    Ok((kept, dropped))
}

pub fn default_caliper(pool_logits: &[f64]) -> f64 {
    DEFAULT_CALIPER_SD * sample_sd(pool_logits)
}

/// Seeded processing order of the CT schools.
pub fn processing_order(n: usize, order_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(order_seed, &[tag::MATCH_ORDER]));
    order
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy nearest-neighbour matching of `ct` into an already-trimmed `pool`.
pub fn match_one_to_one(
    ct: &[Unit],
    pool: &[Unit],
    metric: &Metric,
    caliper_width: f64,
    order_seed: u64,
    strict: bool,
) -> Result<MatchedSample> {
    if !(caliper_width > 0.0) {
        return Err(Error::argument(format!("caliper width {caliper_width} must be positive")));
    }
    let wpool: Vec<Vec<f64>> = pool.iter().map(|u| metric.whiten(&u.features)).collect();
    let mut available = vec![true; pool.len()];
    let mut pairs = Vec::with_capacity(ct.len());
    let mut unmatched: Vec<(SchoolId, usize)> = Vec::new();
    let mut candidates = Vec::with_capacity(ct.len());
    for &i in &processing_order(ct.len(), order_seed) {
        let c = &ct[i];
        let wc = metric.whiten(&c.features);
        let mut n_within = 0;
        let mut best: Option<(f64, SchoolId, usize)> = None;
        for (k, u) in pool.iter().enumerate() {
            if (u.logit - c.logit).abs() > caliper_width {
                continue;
            }
            n_within += 1;
            if !available[k] {
                continue;
            }
            let d = sq_dist(&wc, &wpool[k]);
            let better = match best {
                None => true,
                Some((bd, bid, _)) => d < bd || (d == bd && u.id < bid),
            };
            if better {
                best = Some((d, u.id, k));
            }
        }
        candidates.push((c.id, n_within));
        match best {
            Some((d, id, k)) => {
                available[k] = false;
                pairs.push(MatchPair {
                    ct: c.id,
                    co: id,
                    distance: d.sqrt(),
                    logit_gap: (pool[k].logit - c.logit).abs(),
                });
            }
            None => unmatched.push((c.id, n_within)),
        }
    }
    if strict {
        if let Some(&(school, n)) = unmatched.first() {
            return Err(Error::MatchingFailure {
                school,
                candidates: n,
                unmatched: unmatched.len(),
            });
        }
    }
    let counts: Vec<f64> = candidates.iter().map(|c| c.1 as f64).collect();
    let mut trimmed_pool: Vec<SchoolId> = pool.iter().map(|u| u.id).collect();
    trimmed_pool.sort();
    candidates.sort();
    let mut unmatched_ct: Vec<SchoolId> = unmatched.into_iter().map(|u| u.0).collect();
    unmatched_ct.sort();
    Ok(MatchedSample {
        pairs,
        unmatched_ct,
        caliper_width,
        order_seed,
        trimmed_pool,
        n_trimmed: 0,
        candidates_in_caliper: candidates,
        median_candidates: if counts.is_empty() { 0.0 } else { median(&counts) },
    })
}

/// Trim, estimate the metric on the trimmed pool, choose the caliper and match.
pub fn match_schools(ct: &[Unit], pool: &[Unit], opts: &MatchOptions, order_seed: u64) -> Result<MatchedSample> {
    if ct.is_empty() {
        return Err(Error::argument("no CT schools to match"));
    }
    if let Some(u) = ct.iter().find(|u| pool.iter().any(|p| p.id == u.id)) {
        return Err(Error::argument(format!("school {} is in both the CT set and the pool", u.id)));
    }
    let ct_logits: Vec<f64> = ct.iter().map(|u| u.logit).collect();
    let (trimmed, n_trimmed) = trim_common_support(pool, &ct_logits)?;
    let metric = Metric::estimate(&trimmed)?;
    let caliper = match opts.caliper {
        Some(c) => c,
        None => {
            let logits: Vec<f64> = trimmed.iter().map(|u| u.logit).collect();
            let c = default_caliper(&logits);
            if c > 0.0 {
                c
            } else {
                f64::MIN_POSITIVE
            }
        }
    };
    let mut m = match_one_to_one(ct, &trimmed, &metric, caliper, order_seed, opts.strict)?;
    m.n_trimmed = n_trimmed;
    Ok(m)
}
