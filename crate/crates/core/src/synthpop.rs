//! Synthetic school populations with a fully known selection mechanism.
//!
//! Each school gets a deprivation factor, Gaussian covariates loaded on it,
//! categorical indicators, a latent confounder `U`, a pre-period outcome
//! history and a cohort of students. Untreated outcomes are
//!
//! ```text
//! Y(0)_ijk = school signal(X_j) + student signal(X_ij) + alpha_jk + eps_ijk + h * S_j
//! ```
//!
//! with the random-effect and noise variances set so the school share of
//! outcome variance equals `outcome_icc`, and every outcome standardised to
//! population mean 0 and SD 1 afterwards. Selection `S_j` is Bernoulli with a
//! logistic probability in the observed drivers and `U_j`. Conditional on the
//! observed covariates the only S=1 vs S=0 difference in `Y(0)` is the shift
//! `h`, so the true bias net of X is `h / sd_k` exactly.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, tag};
use crate::stats::inv_logit;
use crate::{Error, Outcome, Result, SchoolId, StudentId};

pub const SCHOOL_COVARIATES: [&str; 13] = [
    "school_size",
    "voluntary",
    "academy_sponsor",
    "academy_converter",
    "other_type",
    "ofsted",
    "income",
    "outside_budget",
    "ta_percent",
    "teacher_pupil_ratio",
    "crime",
    "housing",
    "idaci",
];

pub const STUDENT_COVARIATES: [&str; 10] = [
    "ach_g2",
    "late",
    "early",
    "age_months",
    "fsm",
    "female",
    "metro",
    "small_metro",
    "rural",
    "very_rural",
];

/// School covariates that are 0/1 indicators.
pub const SCHOOL_BINARY: [&str; 4] = ["voluntary", "academy_sponsor", "academy_converter", "other_type"];

/// School covariates that are right-skewed budgets.
pub const BUDGET_COVARIATES: [&str; 2] = ["income", "outside_budget"];

/// Names accepted as keys of `selection_coefficients` and as school-level
/// keys of `outcome_coefficients`.
pub const SCHOOL_DRIVERS: [&str; 20] = [
    "school_size",
    "voluntary",
    "academy_sponsor",
    "academy_converter",
    "other_type",
    "ofsted",
    "income",
    "outside_budget",
    "ta_percent",
    "teacher_pupil_ratio",
    "crime",
    "housing",
    "idaci",
    "ach_g2",
    "fsm",
    "metro",
    "small_metro",
    "rural",
    "very_rural",
    "academic_trend",
];

/// Student-level keys of `outcome_coefficients`.
pub const STUDENT_DRIVERS: [&str; 6] = ["ach_g2", "fsm", "female", "age_months", "late", "early"];

// Loadings of the continuous latents on the deprivation factor. Together with
// unit idiosyncratic variance they define the covariate correlation matrix
// corr(z_a, z_b) = l_a * l_b.
const LOAD_SIZE: f64 = -0.1;
const LOAD_INCOME: f64 = 0.35;
const LOAD_OUTSIDE: f64 = 0.1;
const LOAD_TA: f64 = 0.2;
const LOAD_TPR: f64 = 0.15;
const LOAD_CRIME: f64 = 0.55;
const LOAD_HOUSING: f64 = 0.4;
const LOAD_IDACI: f64 = 0.85;
const LOAD_ACH: f64 = -0.6;
const LOAD_FSM: f64 = 0.8;
const LOAD_OFSTED: f64 = 0.35;
const LOAD_SPONSOR: f64 = 0.4;

/// School-mean share of grade-2 achievement variance.
const ACH_SCHOOL_SD: f64 = 0.55;
const AGE_MEAN: f64 = 126.0;
const AGE_SD: f64 = 3.5;
const HISTORY_YEARS: usize = 6;
const ARM_TARGET_MULTIPLIER: f64 = 2.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub mean: f64,
    /// Gamma-Poisson overdispersion; 0 gives plain Poisson counts.
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_schools: usize,
    pub students_per_school: CountDistribution,
    pub n_trial_controls: usize,
    pub outcome_icc: f64,
    #[serde(default = "default_outcome_correlation")]
    pub outcome_correlation: f64,
    #[serde(default)]
    pub selection_coefficients: BTreeMap<String, f64>,
    #[serde(default = "default_hidden_selection")]
    pub hidden_selection_coefficient: f64,
    pub hidden_confounder_strength: f64,
    #[serde(default = "default_outcome_coefficients")]
    pub outcome_coefficients: BTreeMap<String, f64>,
    #[serde(default = "default_n_outcomes")]
    pub n_outcomes: usize,
    pub missingness_rate: f64,
    #[serde(default = "default_t_star")]
    pub t_star: i32,
    #[serde(with = "seed_serde")]
    pub rng_seed: u64,
}

fn default_outcome_correlation() -> f64 {
    0.6
}
fn default_hidden_selection() -> f64 {
    1.0
}
fn default_n_outcomes() -> usize {
    3
}
fn default_t_star() -> i32 {
    2014
}

/// Default outcome model: prior attainment dominates, deprivation and
/// inspection grade carry modest school-level signal.
pub fn default_outcome_coefficients() -> BTreeMap<String, f64> {
    [
        ("student.ach_g2", 0.45),
        ("student.fsm", -0.15),
        ("student.female", 0.05),
        ("student.age_months", 0.04),
        ("student.late", -0.3),
        ("student.early", 0.2),
        ("school.idaci", -0.08),
        ("school.ofsted", -0.04),
        ("school.crime", -0.03),
        ("school.school_size", 0.02),
        ("school.academy_sponsor", -0.05),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_schools: 10_000,
            students_per_school: CountDistribution {
                mean: 30.0,
                dispersion: 0.15,
            },
            n_trial_controls: 60,
            outcome_icc: 0.2,
            outcome_correlation: default_outcome_correlation(),
            selection_coefficients: BTreeMap::new(),
            hidden_selection_coefficient: default_hidden_selection(),
            hidden_confounder_strength: 0.0,
            outcome_coefficients: default_outcome_coefficients(),
            n_outcomes: 3,
            missingness_rate: 0.01,
            t_star: default_t_star(),
            rng_seed: 20_240_611,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_schools < 2 {
            return Err(Error::config("n_schools", "need at least two schools"));
        }
        if self.n_trial_controls == 0 || self.n_trial_controls >= self.n_schools {
            return Err(Error::config(
                "n_trial_controls",
                format!("must be in [1, n_schools) = [1, {})", self.n_schools),
            ));
        }
        let spp = self.students_per_school;
        if !(spp.mean >= 1.0 && spp.mean.is_finite()) {
            return Err(Error::config("students_per_school.mean", "must be >= 1"));
        }
        if !(spp.dispersion >= 0.0 && spp.dispersion.is_finite()) {
            return Err(Error::config("students_per_school.dispersion", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.outcome_icc) {
            return Err(Error::config("outcome_icc", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.outcome_correlation) {
            return Err(Error::config("outcome_correlation", "must lie in [0, 1]"));
        }
        if !(0.0..=0.1).contains(&self.missingness_rate) {
            return Err(Error::config("missingness_rate", "must lie in [0, 0.1]"));
        }
        if self.n_outcomes != 3 {
            return Err(Error::config("n_outcomes", "fixed at 3 (math, reading, writing)"));
        }
        if !self.hidden_confounder_strength.is_finite() {
            return Err(Error::config("hidden_confounder_strength", "must be finite"));
        }
        if !self.hidden_selection_coefficient.is_finite() {
            return Err(Error::config("hidden_selection_coefficient", "must be finite"));
        }
        for (name, v) in &self.selection_coefficients {
            if !SCHOOL_DRIVERS.contains(&name.as_str()) {
                return Err(Error::config(
                    format!("selection_coefficients.{name}"),
                    format!("unknown driver; expected one of {SCHOOL_DRIVERS:?}"),
                ));
            }
            if !v.is_finite() {
                return Err(Error::config(format!("selection_coefficients.{name}"), "must be finite"));
            }
        }
        for (key, v) in &self.outcome_coefficients {
            let ok = match key.split_once('.') {
                Some(("school", n)) => SCHOOL_DRIVERS.contains(&n),
                Some(("student", n)) => STUDENT_DRIVERS.contains(&n),
                _ => false,
            };
            if !ok {
                return Err(Error::config(
                    format!("outcome_coefficients.{key}"),
                    "expected `school.<driver>` or `student.<driver>`",
                ));
            }
            if !v.is_finite() {
                return Err(Error::config(format!("outcome_coefficients.{key}"), "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub year: i32,
    /// Cohort mean attainment in outcome units.
    pub academic: f64,
    /// Share of the cohort at the expected level.
    pub grade_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchoolUnit {
    pub school_id: SchoolId,
    /// Values in `PopulationSnapshot::school_covariate_names` order; NaN = missing.
    pub covariates: Vec<f64>,
    pub hidden_u: f64,
    pub selected: bool,
    pub treated: bool,
    pub outcome_history: Vec<HistoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentUnit {
    pub student_id: StudentId,
    pub school_id: SchoolId,
    /// Values in `PopulationSnapshot::student_covariate_names` order; NaN = missing.
    pub covariates: Vec<f64>,
    /// Untreated outcomes (math, reading, writing), effect-size scale.
    pub outcomes: [f64; 3],
}

/// Quantities fixed during generation, kept for audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationDiagnostics {
    pub selection_intercept: f64,
    pub between_signal_variance: f64,
    pub within_signal_variance: f64,
    pub school_effect_variance: f64,
    pub residual_variance: f64,
    /// Per-outcome SD of the raw outcome before standardisation.
    pub raw_outcome_sd: [f64; 3],
    pub n_selected: usize,
    pub n_control_arm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSnapshot {
    pub config: ScenarioConfig,
    pub school_covariate_names: Vec<String>,
    pub student_covariate_names: Vec<String>,
    pub schools: Vec<SchoolUnit>,
    pub students: Vec<StudentUnit>,
    /// Ground-truth selection bias net of X per outcome, in outcome SD units.
    pub true_bias: [f64; 3],
    pub diagnostics: GenerationDiagnostics,
}

impl PopulationSnapshot {
    pub fn school_index(&self, id: SchoolId) -> Option<usize> {
        let i = id.0 as usize;
        if self.schools.get(i).map(|s| s.school_id) == Some(id) {
            Some(i)
        } else {
            self.schools.iter().position(|s| s.school_id == id)
        }
    }

    pub fn school(&self, id: SchoolId) -> Option<&SchoolUnit> {
        self.school_index(id).map(|i| &self.schools[i])
    }

    pub fn selected_ids(&self) -> Vec<SchoolId> {
        self.schools.iter().filter(|s| s.selected).map(|s| s.school_id).collect()
    }

    pub fn comparison_pool_ids(&self) -> Vec<SchoolId> {
        self.schools.iter().filter(|s| !s.selected).map(|s| s.school_id).collect()
    }

    /// Student index ranges per school, in school order.
    pub fn student_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = vec![0..0; self.schools.len()];
        let mut start = 0;
        while start < self.students.len() {
            let sid = self.students[start].school_id;
            let mut end = start + 1;
            while end < self.students.len() && self.students[end].school_id == sid {
                end += 1;
            }
            if let Some(i) = self.school_index(sid) {
                ranges[i] = start..end;
            }
            start = end;
        }
        ranges
    }
}

struct SchoolDraw {
    covariates: Vec<f64>,
    drivers: [f64; SCHOOL_DRIVERS.len()],
    hidden_u: f64,
    trend: f64,
    curvature: f64,
    n_history: usize,
    students: Vec<StudentDraw>,
}

struct StudentDraw {
    covariates: Vec<f64>,
    /// Student drivers and their school-conditional expectations.
    drivers: [f64; STUDENT_DRIVERS.len()],
    expected: [f64; STUDENT_DRIVERS.len()],
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn bernoulli(rng: &mut impl Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn loaded(d: f64, load: f64, rng: &mut impl Rng) -> f64 {
    load * d + (1.0 - load * load).sqrt() * normal(rng)
}

fn draw_count(rng: &mut impl Rng, spec: CountDistribution) -> usize {
    let lambda = if spec.dispersion > 0.0 {
        let shape = 1.0 / spec.dispersion;
        Gamma::new(shape, spec.mean / shape)
            .expect("valid gamma parameters")
            .sample(rng)
    } else {
        spec.mean
    };
    let n = if lambda > 0.0 {
        Poisson::new(lambda).expect("positive rate").sample(rng) as usize
    } else {
        0
    };
    n.max(1)
}

// Cumulative inspection-grade shares: outstanding, good, requires improvement.
const OFSTED_CUTS: [f64; 3] = [0.18, 0.83, 0.97];
// Location shares: urban (reference), metro, small metro, rural, very rural.
const LOCATION_SHARES: [f64; 5] = [0.5, 0.15, 0.12, 0.15, 0.08];

fn draw_location(rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, s) in LOCATION_SHARES.iter().enumerate() {
        acc += s;
        if u < acc {
            return k;
        }
    }
    LOCATION_SHARES.len() - 1
}

fn draw_school(config: &ScenarioConfig, j: usize) -> SchoolDraw {
    let mut rng = rng::substream(config.rng_seed, &[tag::SCHOOL, j as u64]);
    let d = normal(&mut rng);
    let z_size = loaded(d, LOAD_SIZE, &mut rng);
    let z_income = loaded(d, LOAD_INCOME, &mut rng);
    let z_outside = loaded(d, LOAD_OUTSIDE, &mut rng);
    let z_ta = loaded(d, LOAD_TA, &mut rng);
    let z_tpr = loaded(d, LOAD_TPR, &mut rng);
    let z_crime = loaded(d, LOAD_CRIME, &mut rng);
    let z_housing = loaded(d, LOAD_HOUSING, &mut rng);
    let z_idaci = loaded(d, LOAD_IDACI, &mut rng);
    let z_ach = loaded(d, LOAD_ACH, &mut rng);
    let z_fsm = loaded(d, LOAD_FSM, &mut rng);
    let z_ofsted = loaded(d, LOAD_OFSTED, &mut rng);
    let z_sponsor = loaded(d, LOAD_SPONSOR, &mut rng);

    let school_size = (5.4 + 0.45 * z_size).exp().round().max(10.0);
    let income = (8.45 + 0.18 * z_income).exp();
    let outside_budget = if rng.random::<f64>() < 0.03 {
        0.0
    } else {
        (5.8 + 0.7 * z_outside).exp()
    };
    let ta_percent = (0.30 + 0.07 * z_ta).clamp(0.02, 0.8);
    let teacher_pupil_ratio = (20.5 + 2.8 * z_tpr).max(8.0);
    let idaci = (0.2 + 0.11 * z_idaci).clamp(0.005, 0.95);

    let p_ofsted = statrs::function::erf::erfc(-z_ofsted / std::f64::consts::SQRT_2) / 2.0;
    let ofsted = 1.0 + OFSTED_CUTS.iter().filter(|&&c| p_ofsted > c).count() as f64;

    // Governance: sponsored academies lean towards deprived schools.
    let mut gov = [0.0f64; 4];
    if rng.random::<f64>() < inv_logit(-3.0 + 0.9 * z_sponsor) {
        gov[1] = 1.0;
    } else {
        let u: f64 = rng.random();
        if u < 0.3 {
            gov[0] = 1.0;
        } else if u < 0.43 {
            gov[2] = 1.0;
        } else if u < 0.45 {
            gov[3] = 1.0;
        }
    }
    let location = draw_location(&mut rng);
    let hidden_u = normal(&mut rng);
    let trend = 0.03 * normal(&mut rng);
    let curvature = 0.004 * normal(&mut rng);
    let n_history = {
        let u: f64 = rng.random();
        match u {
            u if u < 0.86 => HISTORY_YEARS,
            u if u < 0.89 => 5,
            u if u < 0.92 => 4,
            u if u < 0.95 => 3,
            u if u < 0.98 => 2,
            _ => 1,
        }
    };

    let covariates = vec![
        school_size,
        gov[0],
        gov[1],
        gov[2],
        gov[3],
        ofsted,
        income,
        outside_budget,
        ta_percent,
        teacher_pupil_ratio,
        z_crime,
        z_housing,
        idaci,
    ];
    let loc = |k: usize| if location == k { 1.0 } else { 0.0 };
    let drivers = [
        z_size,
        gov[0],
        gov[1],
        gov[2],
        gov[3],
        ofsted - 2.0,
        z_income,
        z_outside,
        z_ta,
        z_tpr,
        z_crime,
        z_housing,
        z_idaci,
        z_ach,
        z_fsm,
        loc(1),
        loc(2),
        loc(3),
        loc(4),
        trend / 0.03,
    ];

    let n_students = draw_count(&mut rng, config.students_per_school);
    let ach_mean = ACH_SCHOOL_SD * z_ach;
    let ach_within = (1.0 - ACH_SCHOOL_SD * ACH_SCHOOL_SD).sqrt();
    let p_fsm = inv_logit(-1.75 + 0.9 * z_fsm);
    let students = (0..n_students)
        .map(|_| {
            let ach = ach_mean + ach_within * normal(&mut rng);
            let late = bernoulli(&mut rng, 0.012);
            let early = bernoulli(&mut rng, 0.006);
            let age_std = normal(&mut rng);
            let fsm = bernoulli(&mut rng, p_fsm);
            let female = bernoulli(&mut rng, 0.49);
            let student_loc = if rng.random::<f64>() < 0.92 {
                location
            } else {
                draw_location(&mut rng)
            };
            let sl = |k: usize| if student_loc == k { 1.0 } else { 0.0 };
            StudentDraw {
                covariates: vec![
                    ach,
                    late,
                    early,
                    AGE_MEAN + AGE_SD * age_std,
                    fsm,
                    female,
                    sl(1),
                    sl(2),
                    sl(3),
                    sl(4),
                ],
                drivers: [ach, fsm, female, age_std, late, early],
                expected: [ach_mean, p_fsm, 0.49, 0.0, 0.012, 0.006],
            }
        })
        .collect();

    SchoolDraw {
        covariates,
        drivers,
        hidden_u,
        trend,
        curvature,
        n_history,
        students,
    }
}

struct Coefficients {
    school: [f64; SCHOOL_DRIVERS.len()],
    student: [f64; STUDENT_DRIVERS.len()],
}

fn outcome_coefficients(config: &ScenarioConfig) -> Coefficients {
    let mut c = Coefficients {
        school: [0.0; SCHOOL_DRIVERS.len()],
        student: [0.0; STUDENT_DRIVERS.len()],
    };
    for (key, &v) in &config.outcome_coefficients {
        match key.split_once('.') {
            Some(("school", n)) => {
                if let Some(i) = SCHOOL_DRIVERS.iter().position(|d| *d == n) {
                    c.school[i] = v;
                }
            }
            Some(("student", n)) => {
                if let Some(i) = STUDENT_DRIVERS.iter().position(|d| *d == n) {
                    c.student[i] = v;
                }
            }
            _ => {}
        }
    }
    c
}

fn dot<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intercept `a` with `sum_j inv_logit(a + lin_j) = target`, by bisection.
fn calibrate_intercept(lin: &[f64], target: f64) -> f64 {
    let total = |a: f64| lin.iter().map(|l| inv_logit(a + l)).sum::<f64>();
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draw a complete population snapshot. Deterministic in `config.rng_seed`
/// and independent of the rayon thread count.
pub fn generate_population(config: &ScenarioConfig) -> Result<PopulationSnapshot> {
    config.validate()?;
    let n = config.n_schools;
    let draws: Vec<SchoolDraw> = (0..n).into_par_iter().map(|j| draw_school(config, j)).collect();
    let coef = outcome_coefficients(config);

    // Signal components and their population variances (student weighted).
    let mut between = Vec::with_capacity(n);
    let mut n_total = 0usize;
    let mut within_ss = 0.0;
    for d in &draws {
        let expected_student = d.students.first().map(|s| dot(&coef.student, &s.expected)).unwrap_or(0.0);
        between.push(dot(&coef.school, &d.drivers) + expected_student);
        for s in &d.students {
            let w: f64 = coef
                .student
                .iter()
                .zip(s.drivers.iter().zip(&s.expected))
                .map(|(c, (x, m))| c * (x - m))
                .sum();
            within_ss += w * w;
        }
        n_total += d.students.len();
    }
    let nt = n_total as f64;
    let between_mean = draws
        .iter()
        .zip(&between)
        .map(|(d, b)| d.students.len() as f64 * b)
        .sum::<f64>()
        / nt;
    let between_var = draws
        .iter()
        .zip(&between)
        .map(|(d, b)| d.students.len() as f64 * (b - between_mean).powi(2))
        .sum::<f64>()
        / nt;
    let within_var = within_ss / nt;
    let icc = config.outcome_icc;
    let school_effect_var = icc - between_var;
    let residual_var = (1.0 - icc) - within_var;
    if school_effect_var < 0.0 {
        return Err(Error::config(
            "outcome_icc",
            format!("school-level signal variance {between_var:.4} exceeds the school share {icc}"),
        ));
    }
    if residual_var <= 0.0 {
        return Err(Error::config(
            "outcome_coefficients",
            format!("student-level signal variance {within_var:.4} exceeds the within-school share {:.4}", 1.0 - icc),
        ));
    }

    // Selection and assignment.
    let mut sel_coef = [0.0; SCHOOL_DRIVERS.len()];
    for (name, &v) in &config.selection_coefficients {
        if let Some(i) = SCHOOL_DRIVERS.iter().position(|d| d == name) {
            sel_coef[i] = v;
        }
    }
    let lin: Vec<f64> = draws
        .iter()
        .map(|d| dot(&sel_coef, &d.drivers) + config.hidden_selection_coefficient * d.hidden_u)
        .collect();
    let target = (ARM_TARGET_MULTIPLIER * config.n_trial_controls as f64).min(0.9 * n as f64);
    let intercept = calibrate_intercept(&lin, target);
    let selected: Vec<bool> = (0..n)
        .map(|j| {
            let mut r = rng::substream(config.rng_seed, &[tag::SELECTION, j as u64]);
            r.random::<f64>() < inv_logit(intercept + lin[j])
        })
        .collect();
    // Random half of the selected schools is treated, keeping at least
    // n_trial_controls in the control arm.
    let mut order: Vec<(f64, usize)> = (0..n)
        .filter(|&j| selected[j])
        .map(|j| {
            let mut r = rng::substream(config.rng_seed, &[tag::ASSIGNMENT, j as u64]);
            (r.random::<f64>(), j)
        })
        .collect();
    let n_selected = order.len();
    if n_selected < config.n_trial_controls {
        return Err(Error::config(
            "n_trial_controls",
            format!("only {n_selected} schools selected into trials, need {}", config.n_trial_controls),
        ));
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n_control_arm = n_selected.div_ceil(2).max(config.n_trial_controls);
    let mut treated = vec![false; n];
    for &(_, j) in &order[n_control_arm..] {
        treated[j] = true;
    }

    // Random effects, noise, history and raw outcomes.
    let rho = config.outcome_correlation;
    let sd_alpha = school_effect_var.sqrt();
    let sd_eps = residual_var.sqrt();
    let shift = config.hidden_confounder_strength;
    struct SchoolOutcomes {
        raw: Vec<[f64; 3]>,
        history: Vec<HistoryPoint>,
    }
    let outcomes: Vec<SchoolOutcomes> = (0..n)
        .into_par_iter()
        .map(|j| {
            let d = &draws[j];
            let mut r = rng::substream(config.rng_seed, &[tag::OUTCOME_NOISE, j as u64]);
            let correlated = |sd: f64, r: &mut rng::StreamRng| -> [f64; 3] {
                let common = normal(r);
                let mut v = [0.0; 3];
                for x in v.iter_mut() {
                    *x = sd * (rho.sqrt() * common + (1.0 - rho).sqrt() * normal(r));
                }
                v
            };
            let alpha = correlated(sd_alpha, &mut r);
            let s_shift = if selected[j] { shift } else { 0.0 };
            let raw = d
                .students
                .iter()
                .map(|s| {
                    let w = dot(&coef.student, &s.drivers) - dot(&coef.student, &s.expected);
                    let eps = correlated(sd_eps, &mut r);
                    let mut y = [0.0; 3];
                    for k in 0..3 {
                        y[k] = between[j] + alpha[k] + w + eps[k] + s_shift;
                    }
                    y
                })
                .collect();
            // Pre-period cohorts: persistent school level plus trend and cohort noise.
            let level = between[j] + alpha.iter().sum::<f64>() / 3.0;
            let cohort_sd = (1.0 - icc).sqrt() / (d.students.len() as f64).sqrt();
            let history = (0..d.n_history)
                .rev()
                .map(|h| {
                    let tau = -(h as f64);
                    let academic = level + d.trend * tau + d.curvature * tau * tau + cohort_sd * normal(&mut r);
                    let share = inv_logit(0.9 + 1.6 * academic) + 0.3 * cohort_sd * normal(&mut r);
                    HistoryPoint {
                        year: config.t_star - 1 - h as i32,
                        academic,
                        grade_level: share.clamp(0.0, 1.0),
                    }
                })
                .collect();
            SchoolOutcomes { raw, history }
        })
        .collect();

    let mut sum = [0.0; 3];
    let mut sumsq = [0.0; 3];
    for o in &outcomes {
        for y in &o.raw {
            for k in 0..3 {
                sum[k] += y[k];
            }
        }
    }
    let mean = sum.map(|s| s / nt);
    for o in &outcomes {
        for y in &o.raw {
            for k in 0..3 {
                sumsq[k] += (y[k] - mean[k]).powi(2);
            }
        }
    }
    let sd = sumsq.map(|s| (s / nt).sqrt());
    let true_bias = sd.map(|s| shift / s);

    // Assemble, applying MCAR missingness to covariates.
    let rate = config.missingness_rate;
    let mut schools = Vec::with_capacity(n);
    let mut students = Vec::with_capacity(n_total);
    for (j, (d, o)) in draws.into_iter().zip(outcomes).enumerate() {
        let mut r = rng::substream(config.rng_seed, &[tag::MISSING, j as u64]);
        let mut covariates = d.covariates;
        if rate > 0.0 {
            for v in covariates.iter_mut() {
                if r.random::<f64>() < rate {
                    *v = f64::NAN;
                }
            }
        }
        let school_id = SchoolId(j as u32);
        for (s, y) in d.students.into_iter().zip(o.raw) {
            let mut cov = s.covariates;
            if rate > 0.0 {
                for v in cov.iter_mut() {
                    if r.random::<f64>() < rate {
                        *v = f64::NAN;
                    }
                }
            }
            let mut outcomes = [0.0; 3];
            for k in 0..3 {
                outcomes[k] = (y[k] - mean[k]) / sd[k];
            }
            students.push(StudentUnit {
                student_id: StudentId(students.len() as u32),
                school_id,
                covariates: cov,
                outcomes,
            });
        }
        schools.push(SchoolUnit {
            school_id,
            covariates,
            hidden_u: d.hidden_u,
            selected: selected[j],
            treated: treated[j],
            outcome_history: o.history,
        });
    }

    Ok(PopulationSnapshot {
        config: config.clone(),
        school_covariate_names: SCHOOL_COVARIATES.iter().map(|s| s.to_string()).collect(),
        student_covariate_names: STUDENT_COVARIATES.iter().map(|s| s.to_string()).collect(),
        schools,
        students,
        true_bias,
        diagnostics: GenerationDiagnostics {
            selection_intercept: intercept,
            between_signal_variance: between_var,
            within_signal_variance: within_var,
            school_effect_variance: school_effect_var,
            residual_variance: residual_var,
            raw_outcome_sd: sd,
            n_selected,
            n_control_arm,
        },
    })
}

/// Copy of `pop` with `shift` added to the untreated outcomes of students in
/// selected schools, for the named outcomes only. `true_bias` moves by the
/// same amount.
pub fn inject_hidden_confounder(
    pop: &PopulationSnapshot,
    shift: f64,
    outcomes: &[Outcome],
) -> Result<PopulationSnapshot> {
    if outcomes.is_empty() {
        return Err(Error::argument("outcome subset must not be empty"));
    }
    if !shift.is_finite() {
        return Err(Error::argument("shift must be finite"));
    }
    let mut out = pop.clone();
    let selected: Vec<bool> = out.schools.iter().map(|s| s.selected).collect();
    let mut ks: Vec<usize> = outcomes.iter().map(|o| o.index()).collect();
    ks.sort_unstable();
    ks.dedup();
    for st in out.students.iter_mut() {
        let Some(i) = pop.school_index(st.school_id) else { continue };
        if selected[i] {
            for &k in &ks {
                st.outcomes[k] += shift;
            }
        }
    }
    for &k in &ks {
        out.true_bias[k] += shift;
    }
    Ok(out)
}

/// Which schools a trial draw samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    /// All trial-selected schools (S = 1).
    Selected,
    /// Experimental control arm (S = 1, T = 0).
    ControlArm,
    /// Experimental treatment arm (S = 1, T = 1).
    TreatedArm,
    /// Never-selected comparison pool (S = 0), for placebo draws.
    ComparisonPool,
}

pub fn draw_set(pop: &PopulationSnapshot, mode: DrawMode) -> Vec<SchoolId> {
    pop.schools
        .iter()
        .filter(|s| match mode {
            DrawMode::Selected => s.selected,
            DrawMode::ControlArm => s.selected && !s.treated,
            DrawMode::TreatedArm => s.treated,
            DrawMode::ComparisonPool => !s.selected,
        })
        .map(|s| s.school_id)
        .collect()
}

/// Simple random sample of `n_w` ids without replacement, returned in id order.
pub fn sample_ids(candidates: &[SchoolId], n_w: usize, rng: &mut impl Rng) -> Result<Vec<SchoolId>> {
    if n_w > candidates.len() {
        return Err(Error::argument(format!(
            "cannot draw {n_w} schools from a set of {}",
            candidates.len()
        )));
    }
    let mut out: Vec<SchoolId> = index::sample(rng, candidates.len(), n_w)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    out.sort_unstable();
    Ok(out)
}

pub fn draw_trial_controls(pop: &PopulationSnapshot, n_w: usize, seed: u64, mode: DrawMode) -> Result<Vec<SchoolId>> {
    let set = draw_set(pop, mode);
    let mut rng = rng::substream(seed, &[tag::TRIAL_DRAW]);
    sample_ids(&set, n_w, &mut rng)
}

/// Disjoint random samples of the given sizes from one draw set, as when
/// separate trials recruit separate schools. Each sample is in id order.
pub fn draw_disjoint_trials(
    pop: &PopulationSnapshot,
    sizes: &[usize],
    seed: u64,
    mode: DrawMode,
) -> Result<Vec<Vec<SchoolId>>> {
    let set = draw_set(pop, mode);
    let total: usize = sizes.iter().sum();
    if total > set.len() {
        return Err(Error::argument(format!(
            "cannot draw {total} disjoint schools from a set of {}",
            set.len()
        )));
    }
    let mut rng = rng::substream(seed, &[tag::TRIAL_DRAW]);
    let order = index::sample(&mut rng, set.len(), total).into_vec();
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &n in sizes {
        let mut ids: Vec<SchoolId> = order[start..start + n].iter().map(|&i| set[i]).collect();
        ids.sort_unstable();
        out.push(ids);
        start += n;
    }
    Ok(out)
}

/// One-way ANOVA estimate of the intra-class correlation of an outcome.
pub fn sample_icc(pop: &PopulationSnapshot, outcome: Outcome) -> f64 {
    let k = outcome.index();
    let ranges = pop.student_ranges();
    let groups: Vec<(f64, f64)> = ranges
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let n = r.len() as f64;
            let m = pop.students[r.clone()].iter().map(|s| s.outcomes[k]).sum::<f64>() / n;
            (n, m)
        })
        .collect();
    let big_n: f64 = groups.iter().map(|g| g.0).sum();
    let j = groups.len() as f64;
    let grand = groups.iter().map(|(n, m)| n * m).sum::<f64>() / big_n;
    let ssb: f64 = groups.iter().map(|(n, m)| n * (m - grand).powi(2)).sum();
    let mut ssw = 0.0;
    for (r, (_, m)) in ranges.iter().filter(|r| !r.is_empty()).zip(&groups) {
        ssw += pop.students[r.clone()].iter().map(|s| (s.outcomes[k] - m).powi(2)).sum::<f64>();
    }
    let msb = ssb / (j - 1.0);
    let msw = ssw / (big_n - j);
    let n0 = (big_n - groups.iter().map(|g| g.0 * g.0).sum::<f64>() / big_n) / (j - 1.0);
    (msb - msw) / (msb + (n0 - 1.0) * msw)
}

/// Serialise seeds as TOML-safe integers where possible, as strings otherwise.
pub mod seed_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        if *v <= i64::MAX as u64 {
            s.serialize_i64(*v as i64)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(v),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            n_schools: 400,
            n_trial_controls: 20,
            rng_seed: seed,
            ..ScenarioConfig::default()
        }
    }

    fn mean_diff(pop: &PopulationSnapshot, k: usize) -> f64 {
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
        for st in &pop.students {
            if pop.schools[st.school_id.0 as usize].selected {
                s1 += st.outcomes[k];
                n1 += 1.0;
            } else {
                s0 += st.outcomes[k];
                n0 += 1.0;
            }
        }
        s1 / n1 - s0 / n0
    }

    #[test]
    fn zero_effects_give_zero_true_bias() {
        let pop = generate_population(&small(1)).unwrap();
        assert_eq!(pop.true_bias, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_population(&small(5)).unwrap();
        let b = generate_population(&small(5)).unwrap();
        // NaN != NaN, so compare through the bit patterns of the JSON form.
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_population(&small(6)).unwrap();
        assert_ne!(a.students[0].outcomes, c.students[0].outcomes);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let cfg = small(11);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| generate_population(&cfg)).unwrap();
        let b = four.install(|| generate_population(&cfg)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn hidden_shift_recovered_by_brute_force_means() {
        // No X-selection: the raw S=1 vs S=0 contrast estimates the shift.
        let cfg = ScenarioConfig {
            n_schools: 3000,
            n_trial_controls: 300,
            hidden_confounder_strength: -0.2,
            missingness_rate: 0.0,
            rng_seed: 3,
            ..ScenarioConfig::default()
        };
        let pop = generate_population(&cfg).unwrap();
        for k in 0..3 {
            assert!((pop.true_bias[k] + 0.2).abs() < 0.005, "true bias {}", pop.true_bias[k]);
            // School-level noise dominates: SE of the contrast is about
            // sqrt(icc / n_selected) ~ 0.02.
            let d = mean_diff(&pop, k);
            assert!((d - pop.true_bias[k]).abs() < 0.08, "contrast {d}");
        }
    }

    #[test]
    fn ground_truth_is_exactly_the_shift_component() {
        // Removing the shift with the injector leaves the X-attributable part;
        // the difference of the two brute-force contrasts is the true bias.
        let cfg = ScenarioConfig {
            hidden_confounder_strength: -0.2,
            selection_coefficients: [("idaci".to_string(), 0.8)].into_iter().collect(),
            ..small(21)
        };
        let pop = generate_population(&cfg).unwrap();
        let stripped = inject_hidden_confounder(&pop, -pop.true_bias[0], &[Outcome::Math]).unwrap();
        let diff = mean_diff(&pop, 0) - mean_diff(&stripped, 0);
        assert!((diff - pop.true_bias[0]).abs() < 1e-12);
        assert!(stripped.true_bias[0].abs() < 1e-15);
    }

    #[test]
    fn injector_is_additive_and_leaves_input_alone() {
        let pop = generate_population(&small(2)).unwrap();
        let before = pop.true_bias;
        let same = inject_hidden_confounder(&pop, 0.0, &Outcome::ALL).unwrap();
        assert_eq!(same.true_bias, before);
        let up = inject_hidden_confounder(&pop, 0.1, &[Outcome::Math]).unwrap();
        assert_eq!(up.true_bias[0], before[0] + 0.1);
        assert_eq!(up.true_bias[1], before[1]);
        assert_eq!(up.true_bias[2], before[2]);
        assert_eq!(pop.true_bias, before);
        assert!(matches!(
            inject_hidden_confounder(&pop, 0.1, &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn realised_icc_tracks_config() {
        let cfg = ScenarioConfig {
            n_schools: 2000,
            outcome_icc: 0.25,
            rng_seed: 9,
            ..small(9)
        };
        let pop = generate_population(&cfg).unwrap();
        for o in Outcome::ALL {
            let icc = sample_icc(&pop, o);
            assert!((icc - 0.25).abs() < 0.05, "{o}: icc {icc}");
        }
    }

    #[test]
    fn invariants_hold() {
        let pop = generate_population(&small(4)).unwrap();
        assert!(pop.selected_ids().len() >= pop.config.n_trial_controls);
        for s in &pop.schools {
            assert!(!s.treated || s.selected);
        }
        for st in &pop.students {
            assert!(pop.school(st.school_id).is_some());
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let mut cfg = small(1);
        cfg.outcome_icc = 1.0;
        match generate_population(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "outcome_icc"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = small(1);
        cfg.missingness_rate = 0.2;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "missingness_rate"));
        let mut cfg = small(1);
        cfg.selection_coefficients.insert("shoe_size".into(), 1.0);
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field.contains("shoe_size")));
    }

    #[test]
    fn trial_draws() {
        let pop = generate_population(&small(8)).unwrap();
        let pool = draw_set(&pop, DrawMode::ComparisonPool);
        let all = draw_trial_controls(&pop, pool.len(), 1, DrawMode::ComparisonPool).unwrap();
        assert_eq!(all, pool);
        let fifty = draw_trial_controls(&pop, 50, 1, DrawMode::ComparisonPool).unwrap();
        let mut dedup = fifty.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 50);
        assert!(draw_trial_controls(&pop, pool.len() + 1, 1, DrawMode::ComparisonPool).is_err());
        let controls = draw_trial_controls(&pop, 10, 3, DrawMode::ControlArm).unwrap();
        for id in controls {
            let s = pop.school(id).unwrap();
            assert!(s.selected && !s.treated);
        }
    }

    #[test]
    fn draws_depend_on_seed() {
        // Two-element set: different seeds should disagree about half the time.
        let pop = generate_population(&small(8)).unwrap();
        let set = &draw_set(&pop, DrawMode::ComparisonPool)[..2];
        let differ = (0..100u64)
            .filter(|&i| {
                let a = sample_ids(set, 1, &mut rng::substream(2 * i, &[tag::TRIAL_DRAW])).unwrap();
                let b = sample_ids(set, 1, &mut rng::substream(2 * i + 1, &[tag::TRIAL_DRAW])).unwrap();
                a != b
            })
            .count();
        // Binomial(100, 0.5): 99.9% interval is roughly [34, 66].
        assert!((30..=70).contains(&differ), "{differ}");
    }

    #[test]
    fn pool_draw_at_full_scale() {
        let ids: Vec<SchoolId> = (0..13_859).map(SchoolId).collect();
        let mut r = rng::substream(1, &[tag::TRIAL_DRAW]);
        let d = sample_ids(&ids, 50, &mut r).unwrap();
        assert_eq!(d.len(), 50);
        assert!(d.windows(2).all(|w| w[0] < w[1]));
    }
}
