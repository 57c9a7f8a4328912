//! Within-study comparison toolkit.
//!
//! Builds synthetic school populations with a known selection mechanism, then
//! runs the full bias-measurement chain on them: school-level covariate
//! engineering, propensity-model selection, caliper Mahalanobis matching,
//! random-intercept bias estimation, placebo reference distributions and a
//! random-effects meta-analysis of the resulting bias estimates.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod analysis;
pub mod biasest;
pub mod config;
pub mod covariates;
pub mod error;
pub mod io;
pub mod linalg;
pub mod matching;
pub mod meta;
pub mod mixed;
pub mod nullsim;
pub mod pipeline;
pub mod propensity;
pub mod rng;
pub mod stats;
pub mod synthpop;

pub use error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SchoolId(pub u32);

impl fmt::Display for SchoolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{:05}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StudentId(pub u32);

/// Tested outcome domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Math,
    Reading,
    Writing,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Math, Outcome::Reading, Outcome::Writing];

    pub fn index(self) -> usize {
        match self {
            Outcome::Math => 0,
            Outcome::Reading => 1,
            Outcome::Writing => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Math => "math",
            Outcome::Reading => "reading",
            Outcome::Writing => "writing",
        }
    }

    pub fn parse(s: &str) -> Option<Outcome> {
        match s {
            "math" => Some(Outcome::Math),
            "reading" => Some(Outcome::Reading),
            "writing" => Some(Outcome::Writing),
            _ => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
