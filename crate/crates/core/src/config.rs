//! Versioned pipeline configuration: one TOML file with flat sections plus
//! dotted `key=value` command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisOptions;
use crate::matching::MatchOptions;
use crate::nullsim::NullMode;
use crate::synthpop::ScenarioConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Absolute logit caliper; unset means 0.2 SD of the trimmed-pool logits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caliper: Option<f64>,
    #[serde(default = "yes")]
    pub strict_matching: bool,
    #[serde(default = "yes")]
    pub include_treated_in_fit: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn yes() -> bool {
    true
}
fn default_alpha() -> f64 {
    0.05
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            caliper: None,
            strict_matching: true,
            include_treated_in_fit: true,
            alpha: default_alpha(),
        }
    }
}

impl AnalysisSection {
    pub fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            matching: MatchOptions {
                caliper: self.caliper,
                strict: self.strict_matching,
            },
            include_treated_in_fit: self.include_treated_in_fit,
            alpha: self.alpha,
            ..AnalysisOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NullsimSection {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<NullMode>,
}

fn default_replicates() -> usize {
    500
}
fn default_modes() -> Vec<NullMode> {
    vec![NullMode::Naive, NullMode::Match]
}

impl Default for NullsimSection {
    fn default() -> Self {
        NullsimSection {
            replicates: default_replicates(),
            modes: default_modes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    /// Estimate kinds to meta-analyse; each needs the matching null mode.
    #[serde(default = "default_meta_kinds")]
    pub kinds: Vec<NullMode>,
}

fn default_meta_kinds() -> Vec<NullMode> {
    vec![NullMode::Match]
}

impl Default for MetaSection {
    fn default() -> Self {
        MetaSection {
            kinds: default_meta_kinds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub nullsim: NullsimSection,
    #[serde(default)]
    pub meta: MetaSection,
    /// Intervention name to experimental control-group size n_w.
    pub interventions: BTreeMap<String, usize>,
}

impl PipelineConfig {
    pub fn master_seed(&self) -> u64 {
        self.scenario.rng_seed
    }

    /// Interventions in name order with their sizes.
    pub fn trial_sizes(&self) -> Vec<(String, usize)> {
        self.interventions.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.scenario.validate()?;
        if self.interventions.is_empty() {
            return Err(Error::config("interventions", "at least one intervention is required"));
        }
        for (name, &n) in &self.interventions {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::config(
                    format!("interventions.{name}"),
                    "names may use only ASCII letters, digits, '_' and '-'",
                ));
            }
            if n == 0 || n > self.scenario.n_trial_controls {
                return Err(Error::config(
                    format!("interventions.{name}"),
                    format!("n_w = {n} must be in [1, scenario.n_trial_controls = {}]", self.scenario.n_trial_controls),
                ));
            }
        }
        let total: usize = self.interventions.values().sum();
        if total > self.scenario.n_trial_controls {
            return Err(Error::config(
                "interventions",
                format!(
                    "trials draw disjoint control groups: sum of n_w = {total} exceeds scenario.n_trial_controls = {}",
                    self.scenario.n_trial_controls
                ),
            ));
        }
        if let Some(c) = self.analysis.caliper {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("analysis.caliper", "must be positive and finite"));
            }
        }
        if !(self.analysis.alpha > 0.0 && self.analysis.alpha < 1.0) {
            return Err(Error::config("analysis.alpha", "must lie in (0, 1)"));
        }
        if self.nullsim.replicates == 0 {
            return Err(Error::config("nullsim.replicates", "must be at least 1"));
        }
        for k in &self.meta.kinds {
            if !self.nullsim.modes.contains(k) {
                return Err(Error::config(
                    "meta.kinds",
                    format!("`{}` needs the `{}` null mode in nullsim.modes", k.name(), k.name()),
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }
}

/// Parse a config file, apply overrides in order, and validate.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<PipelineConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    let cfg: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parse an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply one `a.b.c=value` override, creating intermediate tables as needed.
pub fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(ov, "override must have the form key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
schema_version = 1

[scenario]
n_schools = 300
students_per_school = { mean = 20.0, dispersion = 0.1 }
n_trial_controls = 20
outcome_icc = 0.2
hidden_confounder_strength = 0.0
missingness_rate = 0.01
rng_seed = 7

[nullsim]
replicates = 20

[interventions]
alpha = 8
beta = 10
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = parse_config(SMALL, &[]).unwrap();
        assert_eq!(cfg.trial_sizes(), vec![("alpha".to_string(), 8), ("beta".to_string(), 10)]);
        assert_eq!(cfg.nullsim.modes, vec![NullMode::Naive, NullMode::Match]);
        let again = parse_config(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn overrides_win() {
        let cfg = parse_config(
            SMALL,
            &[
                "nullsim.replicates=3".into(),
                "scenario.selection_coefficients.idaci=0.25".into(),
                "analysis.caliper=0.1".into(),
                "nullsim.modes=[\"naive\"]".into(),
                "meta.kinds=[]".into(),
                "scenario.rng_seed=18446744073709551615".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.nullsim.replicates, 3);
        assert_eq!(cfg.scenario.selection_coefficients["idaci"], 0.25);
        assert_eq!(cfg.analysis.caliper, Some(0.1));
        assert_eq!(cfg.scenario.rng_seed, u64::MAX);
        let again = parse_config(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_config(SMALL, &["schema_version=2".into()]), Err(Error::Config { .. })));
        assert!(matches!(parse_config(SMALL, &["interventions.gamma=21".into()]), Err(Error::Config { .. })));
        assert!(matches!(parse_config(SMALL, &["interventions.gamma=3".into()]), Err(Error::Config { .. })));
        assert!(matches!(parse_config(SMALL, &["scenario.bogus=1".into()]), Err(Error::Toml(_))));
        assert!(matches!(parse_config(SMALL, &["nullsim.modes=[\"naive\"]".into()]), Err(Error::Config { .. })));
        assert!(parse_config(SMALL, &["novalue".into()]).is_err());
        match parse_config(SMALL, &["scenario.outcome_icc=1.0".into()]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "outcome_icc"),
            other => panic!("{other:?}"),
        }
    }
}
