//! Naive and matched (multilevel) selection-bias estimates in effect-size units.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariates::{ColumnSource, Design};
use crate::linalg::independent_columns;
use crate::matching::MatchedSample;
use crate::mixed::{MixedOptions, MixedProblem};
use crate::synthpop::PopulationSnapshot;
use crate::{Error, Outcome, Result, SchoolId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    Naive,
    Match,
}

impl EstimateKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimateKind::Naive => "naive",
            EstimateKind::Match => "match",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEstimate {
    pub intervention: String,
    pub outcome: Outcome,
    pub kind: EstimateKind,
    pub value: f64,
    pub se: Option<f64>,
    pub n_schools: usize,
    pub n_students: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmFit {
    pub beta_match: f64,
    pub se_beta: f64,
    pub sigma_alpha2: f64,
    pub sigma2: f64,
    /// Covariate coefficients, raw outcome units per standardised covariate.
    pub gamma: Vec<(String, f64)>,
    pub dropped_columns: Vec<String>,
    pub converged: bool,
    pub evaluations: usize,
    pub n_schools: usize,
    pub n_students: usize,
}

/// Per-school outcome totals and pooled population SDs, computed once per
/// snapshot so naive contrasts cost O(schools).
#[derive(Debug, Clone)]
pub struct OutcomeTable {
    ranges: Vec<std::ops::Range<usize>>,
    sums: Vec<[f64; 3]>,
    pub pooled_sd: [f64; 3],
    ids: Vec<SchoolId>,
}

impl OutcomeTable {
    pub fn new(pop: &PopulationSnapshot) -> Self {
        let ranges = pop.student_ranges();
        let sums = ranges
            .iter()
            .map(|r| {
                let mut s = [0.0; 3];
                for st in &pop.students[r.clone()] {
                    for (k, v) in st.outcomes.iter().enumerate() {
                        s[k] += v;
                    }
                }
                s
            })
            .collect();
        let n = pop.students.len() as f64;
        let mut pooled_sd = [0.0; 3];
        for (k, sd) in pooled_sd.iter_mut().enumerate() {
            let m = pop.students.iter().map(|s| s.outcomes[k]).sum::<f64>() / n;
            let v = pop.students.iter().map(|s| (s.outcomes[k] - m).powi(2)).sum::<f64>() / n;
            *sd = v.sqrt();
        }
        OutcomeTable {
            ranges,
            sums,
            pooled_sd,
            ids: pop.schools.iter().map(|s| s.school_id).collect(),
        }
    }

    fn index(&self, id: SchoolId) -> Result<usize> {
        let i = id.0 as usize;
        if self.ids.get(i) == Some(&id) {
            return Ok(i);
        }
        self.ids
            .iter()
            .position(|&s| s == id)
            .ok_or_else(|| Error::argument(format!("school {id} is not in the snapshot")))
    }

    /// Student-level mean outcome and student count over a set of schools.
    pub fn group_mean(&self, ids: &[SchoolId], outcome: Outcome) -> Result<(f64, usize, usize)> {
        let mut total = 0.0;
        let mut n = 0;
        let mut n_schools = 0;
        for &id in ids {
            let i = self.index(id)?;
            total += self.sums[i][outcome.index()];
            n += self.ranges[i].len();
            n_schools += 1;
        }
        if n == 0 {
            return Err(Error::argument("group has no students"));
        }
        Ok((total / n as f64, n, n_schools))
    }
}

/// Difference in student-level mean outcome, CT minus pool, in pooled SDs.
pub fn naive_bias(
    table: &OutcomeTable,
    intervention: &str,
    ct: &[SchoolId],
    pool: &[SchoolId],
    outcome: Outcome,
) -> Result<BiasEstimate> {
    if ct.is_empty() || pool.is_empty() {
        return Err(Error::argument("naive bias needs non-empty CT and pool groups"));
    }
    let (mc, nc, sc) = table.group_mean(ct, outcome)?;
    let (mp, np, sp) = table.group_mean(pool, outcome)?;
    let sd = table.pooled_sd[outcome.index()];
    if !(sd > 0.0) {
        return Err(Error::argument(format!("{outcome} has zero population SD")));
    }
    Ok(BiasEstimate {
        intervention: intervention.to_string(),
        outcome,
        kind: EstimateKind::Naive,
        value: (mc - mp) / sd,
        se: None,
        n_schools: sc + sp,
        n_students: nc + np,
    })
}

/// Random-intercept model `Y = a_j + g X + b S_j + e` on the matched schools,
/// with student covariates and the school-level design covariates.
pub fn matched_bias_mlm(
    matched: &MatchedSample,
    pop: &PopulationSnapshot,
    table: &OutcomeTable,
    design: &Design,
    outcome: Outcome,
) -> Result<MlmFit> {
    if matched.pairs.is_empty() {
        return Err(Error::argument("matched sample is empty"));
    }
    let mut schools: Vec<(SchoolId, f64)> = matched
        .pairs
        .iter()
        .flat_map(|p| [(p.ct, 1.0), (p.co, 0.0)])
        .collect();
    schools.sort_by_key(|s| s.0);
    let school_cols: Vec<usize> = design
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.source != ColumnSource::StudentMean)
        .map(|(i, _)| i)
        .collect();
    let n_student_cov = pop.student_covariate_names.len();

    // Gather rows.
    let mut rows: Vec<(usize, f64, usize)> = Vec::new();
    for (g, &(id, s)) in schools.iter().enumerate() {
        let i = table.index(id)?;
        for st in table.ranges[i].clone() {
            rows.push((g, s, st));
        }
    }
    let n = rows.len();
    // Student covariates standardised over the analysis sample, NaN -> mean.
    let mut stu_mean = vec![0.0; n_student_cov];
    let mut stu_sd = vec![0.0; n_student_cov];
    for c in 0..n_student_cov {
        let vals: Vec<f64> = rows
            .iter()
            .map(|r| pop.students[r.2].covariates[c])
            .filter(|v| !v.is_nan())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        stu_mean[c] = m;
        stu_sd[c] = v.sqrt();
    }
    let mut names = vec!["(intercept)".to_string(), "S".to_string()];
    names.extend(pop.student_covariate_names.iter().cloned());
    names.extend(school_cols.iter().map(|&c| design.columns[c].name.clone()));
    let p = names.len();
    let school_rows: Vec<usize> = schools
        .iter()
        .map(|(id, _)| design.row_index(*id).ok_or_else(|| Error::argument(format!("school {id} is not in the design"))))
        .collect::<Result<_>>()?;
    let x = DMatrix::from_fn(n, p, |i, j| {
        let (g, s, st) = rows[i];
        match j {
            0 => 1.0,
            1 => s,
            j if j < 2 + n_student_cov => {
                let c = j - 2;
                let v = pop.students[st].covariates[c];
                if v.is_nan() || stu_sd[c] == 0.0 {
                    0.0
                } else {
                    (v - stu_mean[c]) / stu_sd[c]
                }
            }
            j => design.rows[school_rows[g]].features[school_cols[j - 2 - n_student_cov]],
        }
    });
    let (kept, dropped) = independent_columns(&(x.transpose() * &x), 1e-10);
    if kept.get(1) != Some(&1) {
        return Err(Error::RankDeficient {
            columns: vec!["(intercept)".into(), "S".into()],
        });
    }
    let xk = DMatrix::from_fn(n, kept.len(), |i, j| x[(i, kept[j])]);
    let y: Vec<f64> = rows.iter().map(|r| pop.students[r.2].outcomes[outcome.index()]).collect();
    let groups: Vec<u64> = rows.iter().map(|r| r.0 as u64).collect();
    let fit = MixedProblem::new(&xk, &y, &groups)?.fit(&MixedOptions::default())?;
    let sd = table.pooled_sd[outcome.index()];
    if !(sd > 0.0) {
        return Err(Error::argument(format!("{outcome} has zero population SD")));
    }
    Ok(MlmFit {
        beta_match: fit.beta[1] / sd,
        se_beta: fit.se(1) / sd,
        sigma_alpha2: fit.sigma_alpha2,
        sigma2: fit.sigma2,
        gamma: kept
            .iter()
            .enumerate()
            .skip(2)
            .map(|(j, &k)| (names[k].clone(), fit.beta[j]))
            .collect(),
        dropped_columns: dropped.iter().map(|&d| names[d].clone()).collect(),
        converged: fit.converged,
        evaluations: fit.evaluations,
        n_schools: schools.len(),
        n_students: n,
    })
}

impl MlmFit {
    pub fn estimate(&self, intervention: &str, outcome: Outcome) -> BiasEstimate {
        BiasEstimate {
            intervention: intervention.to_string(),
            outcome,
            kind: EstimateKind::Match,
            value: self.beta_match,
            se: Some(self.se_beta),
            n_schools: self.n_schools,
            n_students: self.n_students,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Bias explained by observed covariates: naive minus match.
    pub delta_x_hat: f64,
    /// Bias left after matching: the match estimate.
    pub delta_u_hat: f64,
}

pub fn decompose_bias(naive: &BiasEstimate, matched: &BiasEstimate) -> Result<Decomposition> {
    if naive.intervention != matched.intervention || naive.outcome != matched.outcome {
        return Err(Error::argument(format!(
            "cannot decompose {}/{} against {}/{}",
            naive.intervention, naive.outcome, matched.intervention, matched.outcome
        )));
    }
    if naive.kind != EstimateKind::Naive || matched.kind != EstimateKind::Match {
        return Err(Error::argument("decomposition needs a naive and a match estimate"));
    }
    Ok(Decomposition {
        delta_x_hat: naive.value - matched.value,
        delta_u_hat: matched.value,
    })
}
