//! School-level matching design: student aggregates, growth-curve covariates,
//! budget transforms, imputation and standardisation.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::synthpop::{PopulationSnapshot, StudentUnit, BUDGET_COVARIATES, SCHOOL_BINARY};
use crate::{Error, Result, SchoolId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    None,
    Log1p,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnSource {
    School,
    StudentMean,
    Growth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub transform: Transform,
    pub source: ColumnSource,
    /// Population mean and SD used for standardisation (0 and 1 for binaries).
    pub center: f64,
    pub scale: f64,
    pub imputed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchoolFeatureRow {
    pub school_id: SchoolId,
    pub features: Vec<f64>,
    pub n_students: usize,
    /// Pre-standardisation values (after transform and imputation).
    pub raw_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub columns: Vec<ColumnSpec>,
    pub rows: Vec<SchoolFeatureRow>,
    pub warnings: Vec<String>,
    pub dropped_schools: Vec<(SchoolId, String)>,
}

impl Design {
    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Row-major feature matrix in row order.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.columns.len(), |i, j| self.rows[i].features[j])
    }

    pub fn row_index(&self, id: SchoolId) -> Option<usize> {
        self.rows.binary_search_by_key(&id, |r| r.school_id).ok()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// Per-school arithmetic means of student covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SchoolAggregate {
    pub means: Vec<f64>,
    pub n_students: usize,
}

/// Mean of every student covariate within each listed school. Missing (NaN)
/// student values are skipped; a covariate with no observed value in a school
/// yields NaN for that school. Schools with no students are left out and
/// reported in the returned warnings.
pub fn aggregate_to_school(
    students: &[StudentUnit],
    schools: &[SchoolId],
) -> Result<(BTreeMap<SchoolId, SchoolAggregate>, Vec<String>)> {
    let Some(first) = students.first() else {
        return Err(Error::argument("student list is empty"));
    };
    let p = first.covariates.len();
    if let Some(bad) = students.iter().find(|s| s.covariates.len() != p) {
        return Err(Error::argument(format!(
            "student {} has {} covariates, expected {p}",
            bad.student_id.0,
            bad.covariates.len()
        )));
    }
    let mut acc: BTreeMap<SchoolId, (Vec<f64>, Vec<usize>, usize)> = BTreeMap::new();
    for s in students {
        let e = acc.entry(s.school_id).or_insert_with(|| (vec![0.0; p], vec![0; p], 0));
        for (k, &v) in s.covariates.iter().enumerate() {
            if !v.is_nan() {
                e.0[k] += v;
                e.1[k] += 1;
            }
        }
        e.2 += 1;
    }
    let mut out = BTreeMap::new();
    let mut warnings = Vec::new();
    for &id in schools {
        match acc.get(&id) {
            Some((sum, cnt, n)) => {
                let means = sum
                    .iter()
                    .zip(cnt)
                    .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
                    .collect();
                out.insert(id, SchoolAggregate { means, n_students: *n });
            }
            None => warnings.push(format!("school {id} has no students in the cohort; excluded")),
        }
    }
    Ok((out, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthMethod {
    /// Random-coefficient quadratic (three or more years).
    Quadratic,
    /// Two years: constant change, latest raw mean.
    TwoPoint,
    /// One year: raw mean, pooled growth.
    SingleYear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesGrowth {
    /// Predicted mean at t* - 1.
    pub level: f64,
    /// Average annual change from t* - 4 to t* - 1.
    pub growth: f64,
    pub method: GrowthMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthCovariates {
    pub academic_level: f64,
    pub academic_growth: f64,
    pub grade_level_growth: f64,
}

/// Population parameters of the quadratic growth model in time
/// `tau = year - (t* - 1)`: mean coefficients, their between-school
/// covariance and the within-school residual variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthComponents {
    pub gamma: DVector<f64>,
    pub between: DMatrix<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone)]
pub struct GrowthFit {
    pub schools: BTreeMap<SchoolId, SeriesGrowth>,
    pub dropped: Vec<(SchoolId, String)>,
    pub components: Option<GrowthComponents>,
}

pub type History = BTreeMap<SchoolId, Vec<(i32, f64)>>;

const GROWTH_WINDOW: f64 = 3.0;

fn basis(tau: f64) -> [f64; 3] {
    [1.0, tau, tau * tau]
}

struct Stage1 {
    id: SchoolId,
    coef: DVector<f64>,
    xtx: DMatrix<f64>,
    rss: f64,
    df: usize,
}

fn validate_history(history: &History, t_star: i32) -> Result<()> {
    for (id, series) in history {
        if let Some((y, _)) = series.iter().find(|(y, _)| *y >= t_star) {
            return Err(Error::argument(format!(
                "school {id}: history year {y} is not before t* = {t_star}"
            )));
        }
    }
    Ok(())
}

fn stage1(history: &History, t_star: i32) -> Vec<Stage1> {
    history
        .iter()
        .filter(|(_, s)| s.len() >= 3)
        .filter_map(|(&id, series)| {
            let n = series.len();
            let x = DMatrix::from_fn(n, 3, |i, c| basis((series[i].0 - (t_star - 1)) as f64)[c]);
            let y = DVector::from_iterator(n, series.iter().map(|p| p.1));
            let xtx = x.transpose() * &x;
            let coef = xtx.clone().cholesky()?.solve(&(x.transpose() * &y));
            let rss = (&y - &x * &coef).norm_squared();
            Some(Stage1 {
                id,
                coef,
                xtx,
                rss,
                df: n - 3,
            })
        })
        .collect()
}

fn psd_projection(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Method-of-moments population components from per-school fits.
fn estimate_components(fits: &[Stage1]) -> Option<GrowthComponents> {
    if fits.is_empty() {
        return None;
    }
    let df: usize = fits.iter().map(|f| f.df).sum();
    let sigma2 = if df > 0 {
        fits.iter().map(|f| f.rss).sum::<f64>() / df as f64
    } else {
        0.0
    };
    let m = fits.len() as f64;
    let mean = fits.iter().fold(DVector::zeros(3), |a, f| a + &f.coef) / m;
    let between = if fits.len() >= 2 {
        let scatter = fits.iter().fold(DMatrix::zeros(3, 3), |a, f| {
            let d = &f.coef - &mean;
            a + &d * d.transpose()
        }) / (m - 1.0);
        let noise = fits.iter().fold(DMatrix::zeros(3, 3), |a, f| {
            a + f.xtx.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(3, 3)) * sigma2
        }) / m;
        psd_projection(&(scatter - noise))
    } else {
        DMatrix::zeros(3, 3)
    };
    let gamma = gls_mean(fits, &between, sigma2).unwrap_or(mean);
    Some(GrowthComponents { gamma, between, sigma2 })
}

fn sampling_cov(f: &Stage1, sigma2: f64) -> DMatrix<f64> {
    f.xtx.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(3, 3)) * sigma2
}

/// GLS estimate of the population mean coefficients with weights (G + V_j)^-1.
fn gls_mean(fits: &[Stage1], between: &DMatrix<f64>, sigma2: f64) -> Option<DVector<f64>> {
    if sigma2 <= 0.0 {
        let m = fits.len() as f64;
        return Some(fits.iter().fold(DVector::zeros(3), |a, f| a + &f.coef) / m);
    }
    let mut wsum = DMatrix::zeros(3, 3);
    let mut wb = DVector::zeros(3);
    for f in fits {
        let w = (between + sampling_cov(f, sigma2)).try_inverse()?;
        wb += &w * &f.coef;
        wsum += w;
    }
    wsum.cholesky().map(|c| c.solve(&wb))
}

fn shrink(f: &Stage1, comp: &GrowthComponents) -> DVector<f64> {
    if comp.sigma2 <= 0.0 {
        return f.coef.clone();
    }
    let v = sampling_cov(f, comp.sigma2);
    match (&comp.between + v).try_inverse() {
        Some(inv) => &comp.gamma + &comp.between * inv * (&f.coef - &comp.gamma),
        None => f.coef.clone(),
    }
}

fn level_and_growth(b: &DVector<f64>) -> (f64, f64) {
    let pred = |tau: f64| b[0] + b[1] * tau + b[2] * tau * tau;
    (pred(0.0), (pred(0.0) - pred(-GROWTH_WINDOW)) / GROWTH_WINDOW)
}

/// Growth covariates for every school in `history`, with population
/// components estimated from the data.
pub fn fit_growth_covariates(history: &History, t_star: i32) -> Result<GrowthFit> {
    validate_history(history, t_star)?;
    let fits = stage1(history, t_star);
    let comp = estimate_components(&fits);
    Ok(finish_growth(history, t_star, &fits, comp))
}

/// As [`fit_growth_covariates`] but with fixed population components.
pub fn fit_growth_with_components(
    history: &History,
    t_star: i32,
    components: GrowthComponents,
) -> Result<GrowthFit> {
    validate_history(history, t_star)?;
    let fits = stage1(history, t_star);
    Ok(finish_growth(history, t_star, &fits, Some(components)))
}

fn finish_growth(
    history: &History,
    t_star: i32,
    fits: &[Stage1],
    comp: Option<GrowthComponents>,
) -> GrowthFit {
    let mut schools = BTreeMap::new();
    for f in fits {
        let b = match &comp {
            Some(c) => shrink(f, c),
            None => f.coef.clone(),
        };
        let (level, growth) = level_and_growth(&b);
        schools.insert(
            f.id,
            SeriesGrowth {
                level,
                growth,
                method: GrowthMethod::Quadratic,
            },
        );
    }
    let mut two_point = Vec::new();
    for (&id, series) in history {
        if series.len() == 2 {
            let mut s = series.clone();
            s.sort_by_key(|p| p.0);
            let gap = (s[1].0 - s[0].0).max(1) as f64;
            let growth = (s[1].1 - s[0].1) / gap;
            two_point.push(growth);
            schools.insert(
                id,
                SeriesGrowth {
                    level: s[1].1,
                    growth,
                    method: GrowthMethod::TwoPoint,
                },
            );
        }
    }
    let pooled_growth = match &comp {
        Some(c) => level_and_growth(&c.gamma).1,
        None if !two_point.is_empty() => two_point.iter().sum::<f64>() / two_point.len() as f64,
        None => 0.0,
    };
    let mut dropped = Vec::new();
    for (&id, series) in history {
        match series.len() {
            0 => dropped.push((id, "empty outcome history".to_string())),
            1 => {
                schools.insert(
                    id,
                    SeriesGrowth {
                        level: series[0].1,
                        growth: pooled_growth,
                        method: GrowthMethod::SingleYear,
                    },
                );
            }
            _ => {}
        }
    }
    let _ = t_star;
    GrowthFit {
        schools,
        dropped,
        components: comp,
    }
}

fn impute_and_scale(
    name: &str,
    values: &mut [f64],
    kind: ColumnKind,
) -> Option<(f64, f64, usize)> {
    let observed: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if observed.is_empty() {
        return None;
    }
    let fill = match kind {
        ColumnKind::Continuous => observed.iter().sum::<f64>() / observed.len() as f64,
        ColumnKind::Binary => {
            let ones = observed.iter().filter(|&&v| v >= 0.5).count();
            if 2 * ones > observed.len() {
                1.0
            } else {
                0.0
            }
        }
    };
    let mut imputed = 0;
    for v in values.iter_mut() {
        if v.is_nan() {
            *v = fill;
            imputed += 1;
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-14 * (1.0 + mean * mean)) {
        warn!("column `{name}` has zero variance; excluded");
        return Some((mean, 0.0, imputed));
    }
    Some((mean, var.sqrt(), imputed))
}

/// Build the standardised school-level design for every school with a
/// non-empty outcome history, in school-id order.
pub fn prepare_design(pop: &PopulationSnapshot, t_star: i32) -> Result<Design> {
    let ids: Vec<SchoolId> = pop.schools.iter().map(|s| s.school_id).collect();
    let (aggregates, mut warnings) = aggregate_to_school(&pop.students, &ids)?;

    let mut academic: History = BTreeMap::new();
    let mut grade: History = BTreeMap::new();
    for s in &pop.schools {
        academic.insert(s.school_id, s.outcome_history.iter().map(|h| (h.year, h.academic)).collect());
        grade.insert(s.school_id, s.outcome_history.iter().map(|h| (h.year, h.grade_level)).collect());
    }
    let (ga, gg) = rayon::join(
        || fit_growth_covariates(&academic, t_star),
        || fit_growth_covariates(&grade, t_star),
    );
    let (ga, gg) = (ga?, gg?);

    let mut dropped_schools: Vec<(SchoolId, String)> = ga.dropped.clone();
    let keep: Vec<usize> = pop
        .schools
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            if !aggregates.contains_key(&s.school_id) {
                dropped_schools.push((s.school_id, "no students in cohort".into()));
                return false;
            }
            ga.schools.contains_key(&s.school_id) && gg.schools.contains_key(&s.school_id)
        })
        .map(|(i, _)| i)
        .collect();
    for (id, reason) in &dropped_schools {
        warnings.push(format!("school {id} dropped: {reason}"));
    }

    // Raw columns.
    struct Raw {
        name: String,
        kind: ColumnKind,
        transform: Transform,
        source: ColumnSource,
        values: Vec<f64>,
    }
    let mut raw: Vec<Raw> = Vec::new();
    for (c, name) in pop.school_covariate_names.iter().enumerate() {
        let budget = BUDGET_COVARIATES.contains(&name.as_str());
        let kind = if SCHOOL_BINARY.contains(&name.as_str()) {
            ColumnKind::Binary
        } else {
            ColumnKind::Continuous
        };
        let values = keep
            .iter()
            .map(|&i| {
                let v = pop.schools[i].covariates[c];
                if budget {
                    v.max(0.0).ln_1p()
                } else {
                    v
                }
            })
            .collect();
        raw.push(Raw {
            name: name.clone(),
            kind,
            transform: if budget { Transform::Log1p } else { Transform::None },
            source: ColumnSource::School,
            values,
        });
    }
    for (c, name) in pop.student_covariate_names.iter().enumerate() {
        let values = keep
            .iter()
            .map(|&i| aggregates[&pop.schools[i].school_id].means[c])
            .collect();
        raw.push(Raw {
            name: format!("mean_{name}"),
            kind: ColumnKind::Continuous,
            transform: Transform::None,
            source: ColumnSource::StudentMean,
            values,
        });
    }
    let growth_cols: [(&str, Box<dyn Fn(SchoolId) -> f64>); 3] = [
        ("academic_level", Box::new(|id| ga.schools[&id].level)),
        ("academic_growth", Box::new(|id| ga.schools[&id].growth)),
        ("grade_level_growth", Box::new(|id| gg.schools[&id].growth)),
    ];
    for (name, f) in growth_cols.iter() {
        raw.push(Raw {
            name: name.to_string(),
            kind: ColumnKind::Continuous,
            transform: Transform::None,
            source: ColumnSource::Growth,
            values: keep.iter().map(|&i| f(pop.schools[i].school_id)).collect(),
        });
    }

    let scaled: Vec<(Raw, Option<(f64, f64, usize)>)> = raw
        .into_par_iter()
        .map(|mut r| {
            let s = impute_and_scale(&r.name, &mut r.values, r.kind);
            (r, s)
        })
        .collect();

    let mut columns = Vec::new();
    let mut kept_values: Vec<Vec<f64>> = Vec::new();
    let mut kept_raw: Vec<Vec<f64>> = Vec::new();
    for (r, s) in scaled {
        match s {
            None => warnings.push(format!("column `{}` has no observed values; excluded", r.name)),
            Some((_, sd, _)) if sd == 0.0 => {
                warnings.push(format!("column `{}` has zero variance; excluded", r.name))
            }
            Some((mean, sd, imputed)) => {
                let (center, scale) = match r.kind {
                    ColumnKind::Binary => (0.0, 1.0),
                    ColumnKind::Continuous => (mean, sd),
                };
                kept_values.push(r.values.iter().map(|v| (v - center) / scale).collect());
                kept_raw.push(r.values);
                columns.push(ColumnSpec {
                    name: r.name,
                    kind: r.kind,
                    transform: r.transform,
                    source: r.source,
                    center,
                    scale,
                    imputed,
                });
            }
        }
    }

    let rows = keep
        .iter()
        .enumerate()
        .map(|(row, &i)| SchoolFeatureRow {
            school_id: pop.schools[i].school_id,
            features: kept_values.iter().map(|c| c[row]).collect(),
            n_students: aggregates[&pop.schools[i].school_id].n_students,
            raw_means: kept_raw.iter().map(|c| c[row]).collect(),
        })
        .collect();

    Ok(Design {
        columns,
        rows,
        warnings,
        dropped_schools,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthpop::{generate_population, ScenarioConfig};
    use crate::StudentId;
    use proptest::prelude::*;

    fn student(id: u32, school: u32, cov: Vec<f64>) -> StudentUnit {
        StudentUnit {
            student_id: StudentId(id),
            school_id: SchoolId(school),
            covariates: cov,
            outcomes: [0.0; 3],
        }
    }

    #[test]
    fn gender_mean_is_proportion() {
        let st: Vec<_> = [1.0, 0.0, 1.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &g)| student(i as u32, 7, vec![g]))
            .collect();
        let (agg, w) = aggregate_to_school(&st, &[SchoolId(7)]).unwrap();
        assert!(w.is_empty());
        assert_eq!(agg[&SchoolId(7)].means, vec![0.5]);
        assert_eq!(agg[&SchoolId(7)].n_students, 4);
    }

    #[test]
    fn single_student_school_copies_covariates() {
        let st = vec![student(0, 1, vec![3.5, 1.0, -2.0])];
        let (agg, _) = aggregate_to_school(&st, &[SchoolId(1)]).unwrap();
        assert_eq!(agg[&SchoolId(1)].means, vec![3.5, 1.0, -2.0]);
    }

    #[test]
    fn three_school_recomputation() {
        let rows = [
            (0, vec![1.0, 10.0]),
            (0, vec![3.0, 20.0]),
            (1, vec![5.0, 0.0]),
            (2, vec![2.0, 1.0]),
            (2, vec![4.0, 2.0]),
            (2, vec![9.0, 6.0]),
        ];
        let st: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, (s, c))| student(i as u32, *s, c.clone()))
            .collect();
        let ids = [SchoolId(0), SchoolId(1), SchoolId(2), SchoolId(3)];
        let (agg, w) = aggregate_to_school(&st, &ids).unwrap();
        // Column sums divided by counts, computed by hand.
        assert_eq!(agg[&SchoolId(0)].means, vec![2.0, 15.0]);
        assert_eq!(agg[&SchoolId(1)].means, vec![5.0, 0.0]);
        assert_eq!(agg[&SchoolId(2)].means, vec![5.0, 3.0]);
        assert!(!agg.contains_key(&SchoolId(3)));
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("S00003"));
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        assert!(aggregate_to_school(&[], &[]).is_err());
        let st = vec![student(0, 0, vec![1.0]), student(1, 0, vec![1.0, 2.0])];
        assert!(aggregate_to_school(&st, &[SchoolId(0)]).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(
            vals in proptest::collection::vec((0u32..4, -5.0f64..5.0), 1..40),
            seed in any::<u64>()
        ) {
            let st: Vec<_> = vals.iter().enumerate()
                .map(|(i, (s, v))| student(i as u32, *s, vec![*v])).collect();
            let mut shuffled = st.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut crate::rng::substream(seed, &[]));
            let ids: Vec<SchoolId> = (0..4).map(SchoolId).collect();
            let (a, _) = aggregate_to_school(&st, &ids).unwrap();
            let (b, _) = aggregate_to_school(&shuffled, &ids).unwrap();
            for id in a.keys() {
                prop_assert!((a[id].means[0] - b[id].means[0]).abs() < 1e-12);
            }
        }
    }

    fn hist(points: &[(i32, f64)]) -> Vec<(i32, f64)> {
        points.to_vec()
    }

    #[test]
    fn linear_history_gives_its_slope() {
        let mut h = History::new();
        h.insert(
            SchoolId(0),
            hist(&[(2010, 0.10), (2011, 0.12), (2012, 0.14), (2013, 0.16)]),
        );
        let fit = fit_growth_covariates(&h, 2014).unwrap();
        let g = fit.schools[&SchoolId(0)];
        assert_eq!(g.method, GrowthMethod::Quadratic);
        assert!((g.growth - 0.02).abs() < 1e-12);
        assert!((g.level - 0.16).abs() < 1e-12);
        let c = fit.components.unwrap();
        assert!(c.gamma[2].abs() < 1e-12);
    }

    #[test]
    fn two_year_history_uses_constant_change() {
        let mut h = History::new();
        h.insert(SchoolId(3), hist(&[(2012, 0.10), (2013, 0.16)]));
        let fit = fit_growth_covariates(&h, 2014).unwrap();
        let g = fit.schools[&SchoolId(3)];
        assert_eq!(g.method, GrowthMethod::TwoPoint);
        assert!((g.growth - 0.06).abs() < 1e-12);
        assert_eq!(g.level, 0.16);
    }

    #[test]
    fn single_year_and_empty_histories() {
        let mut h = History::new();
        h.insert(SchoolId(0), hist(&[(2010, 0.0), (2011, 0.1), (2012, 0.2), (2013, 0.3)]));
        h.insert(SchoolId(1), hist(&[(2013, 0.7)]));
        h.insert(SchoolId(2), vec![]);
        let fit = fit_growth_covariates(&h, 2014).unwrap();
        let g = fit.schools[&SchoolId(1)];
        assert_eq!(g.method, GrowthMethod::SingleYear);
        assert_eq!(g.level, 0.7);
        assert!((g.growth - 0.1).abs() < 1e-12);
        assert_eq!(fit.dropped.len(), 1);
        assert_eq!(fit.dropped[0].0, SchoolId(2));
        assert!(!fit.schools.contains_key(&SchoolId(2)));
    }

    #[test]
    fn history_must_precede_t_star() {
        let mut h = History::new();
        h.insert(SchoolId(0), hist(&[(2014, 0.0)]));
        assert!(matches!(fit_growth_covariates(&h, 2014), Err(Error::Argument(_))));
    }

    /// Brute-force BLUP on the stacked panel: y = X gamma + Z u + e with
    /// Var(u_j) = G, Var(e) = sigma2 I, gamma by full GLS.
    fn stacked_blup(h: &History, t_star: i32, g: &DMatrix<f64>, sigma2: f64) -> BTreeMap<SchoolId, DVector<f64>> {
        let rows: Vec<(usize, f64, f64)> = h
            .values()
            .enumerate()
            .flat_map(|(j, s)| s.iter().map(move |&(y, v)| (j, (y - (t_star - 1)) as f64, v)))
            .collect();
        let n = rows.len();
        let m = h.len();
        let x = DMatrix::from_fn(n, 3, |i, c| basis(rows[i].1)[c]);
        let y = DVector::from_iterator(n, rows.iter().map(|r| r.2));
        let mut v = DMatrix::<f64>::identity(n, n) * sigma2;
        for a in 0..n {
            for b in 0..n {
                if rows[a].0 == rows[b].0 {
                    let xa = basis(rows[a].1);
                    let xb = basis(rows[b].1);
                    let mut s = 0.0;
                    for p in 0..3 {
                        for q in 0..3 {
                            s += xa[p] * g[(p, q)] * xb[q];
                        }
                    }
                    v[(a, b)] += s;
                }
            }
        }
        let vi = v.try_inverse().unwrap();
        let gamma = (x.transpose() * &vi * &x).try_inverse().unwrap() * x.transpose() * &vi * &y;
        let resid = &y - &x * &gamma;
        let mut out = BTreeMap::new();
        for (j, id) in h.keys().enumerate() {
            let mut u = DVector::zeros(3);
            for a in 0..n {
                if rows[a].0 != j {
                    continue;
                }
                let xa = basis(rows[a].1);
                let za = DVector::from_row_slice(&xa);
                let w: f64 = (0..n).map(|b| vi[(a, b)] * resid[b]).sum();
                u += g * &za * w;
            }
            out.insert(*id, &gamma + u);
        }
        let _ = m;
        out
    }

    #[test]
    fn two_stage_matches_stacked_gls_on_toy_panel() {
        let mut h = History::new();
        h.insert(SchoolId(0), hist(&[(2008, 0.1), (2009, 0.3), (2010, 0.2), (2011, 0.5), (2012, 0.4), (2013, 0.6)]));
        h.insert(SchoolId(1), hist(&[(2009, -0.2), (2010, -0.1), (2011, -0.25), (2012, 0.0), (2013, 0.05)]));
        h.insert(SchoolId(2), hist(&[(2010, 0.9), (2011, 0.7), (2012, 0.8), (2013, 0.75)]));
        h.insert(SchoolId(3), hist(&[(2008, 0.0), (2009, 0.1), (2010, 0.05), (2011, 0.2), (2012, 0.1), (2013, 0.3)]));
        h.insert(SchoolId(4), hist(&[(2011, 0.4), (2012, 0.3), (2013, 0.35)]));
        let g = DMatrix::from_row_slice(3, 3, &[0.2, 0.01, 0.0, 0.01, 0.004, 0.0005, 0.0, 0.0005, 0.0003]);
        let sigma2 = 0.01;
        // Population mean is estimated inside both routes; seed the fixed
        // components with the GLS mean so the two-stage path is exact.
        let fits = stage1(&h, 2014);
        let gamma = gls_mean(&fits, &g, sigma2).unwrap();
        let fit = fit_growth_with_components(&h, 2014, GrowthComponents { gamma, between: g.clone(), sigma2 }).unwrap();
        let oracle = stacked_blup(&h, 2014, &g, sigma2);
        for (id, b) in &oracle {
            let (level, growth) = level_and_growth(b);
            let got = fit.schools[id];
            assert!((got.level - level).abs() < 1e-9, "{id}: {} vs {level}", got.level);
            assert!((got.growth - growth).abs() < 1e-9, "{id}: {} vs {growth}", got.growth);
        }
    }

    proptest! {
        #[test]
        fn shifting_every_history_shifts_levels(c in -2.0f64..2.0, seed in 0u64..50) {
            use rand::Rng;
            let mut r = crate::rng::substream(seed, &[]);
            let mut h = History::new();
            for j in 0..8u32 {
                let len = [1usize, 2, 3, 4, 6, 6, 5, 6][j as usize];
                let s: Vec<(i32, f64)> = (0..len)
                    .map(|k| (2013 - k as i32, r.random::<f64>() - 0.5 + 0.05 * k as f64))
                    .collect();
                h.insert(SchoolId(j), s);
            }
            let shifted: History = h.iter()
                .map(|(id, s)| (*id, s.iter().map(|&(y, v)| (y, v + c)).collect()))
                .collect();
            let a = fit_growth_covariates(&h, 2014).unwrap();
            let b = fit_growth_covariates(&shifted, 2014).unwrap();
            for id in a.schools.keys() {
                prop_assert!((b.schools[id].level - a.schools[id].level - c).abs() < 1e-8);
                prop_assert!((b.schools[id].growth - a.schools[id].growth).abs() < 1e-8);
            }
        }
    }

    fn small_pop(rate: f64) -> PopulationSnapshot {
        generate_population(&ScenarioConfig {
            n_schools: 600,
            n_trial_controls: 20,
            missingness_rate: rate,
            rng_seed: 17,
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn design_is_standardised() {
        let pop = small_pop(0.02);
        let d = prepare_design(&pop, pop.config.t_star).unwrap();
        let x = d.matrix();
        let n = x.nrows() as f64;
        for (j, c) in d.columns.iter().enumerate() {
            let col = x.column(j);
            if c.kind == ColumnKind::Continuous {
                let m = col.sum() / n;
                let v = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                assert!(m.abs() < 1e-9, "{}: mean {m}", c.name);
                assert!((v - 1.0).abs() < 1e-9, "{}: var {v}", c.name);
            } else {
                assert!(col.iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
        assert!(d.rows.windows(2).all(|w| w[0].school_id < w[1].school_id));
        assert!(d.rows.iter().all(|r| r.features.iter().all(|v| v.is_finite())));
        assert!(d.column_index("academic_level").is_some());
        assert!(d.column_index("income").is_some());
    }

    #[test]
    fn imputed_values_are_observed_column_means() {
        let pop = small_pop(0.02);
        let d = prepare_design(&pop, pop.config.t_star).unwrap();
        let j = d.column_index("teacher_pupil_ratio").unwrap();
        let c = pop.school_covariate_names.iter().position(|n| n == "teacher_pupil_ratio").unwrap();
        let observed: Vec<f64> = d
            .rows
            .iter()
            .map(|r| pop.school(r.school_id).unwrap().covariates[c])
            .filter(|v| !v.is_nan())
            .collect();
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let mut n_imputed = 0;
        for r in &d.rows {
            if pop.school(r.school_id).unwrap().covariates[c].is_nan() {
                assert!((r.raw_means[j] - mean).abs() < 1e-9);
                n_imputed += 1;
            }
        }
        assert!(n_imputed > 0);
        assert_eq!(d.columns[j].imputed, n_imputed);
    }

    #[test]
    fn budget_zero_maps_to_zero_and_constant_column_is_excluded() {
        let mut pop = small_pop(0.0);
        let ib = pop.school_covariate_names.iter().position(|n| n == "outside_budget").unwrap();
        let it = pop.school_covariate_names.iter().position(|n| n == "ta_percent").unwrap();
        pop.schools[0].covariates[ib] = 0.0;
        for s in pop.schools.iter_mut() {
            s.covariates[it] = 0.3;
        }
        let d = prepare_design(&pop, pop.config.t_star).unwrap();
        let j = d.column_index("outside_budget").unwrap();
        let row = d.row_index(pop.schools[0].school_id).unwrap();
        assert_eq!(d.rows[row].raw_means[j], 0.0);
        assert!(d.column_index("ta_percent").is_none());
        assert!(d.warnings.iter().any(|w| w.contains("ta_percent")));
    }
}
