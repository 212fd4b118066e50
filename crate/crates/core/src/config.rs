//! Engine configuration and the user-trait schema.
//!
//! [`RawConfig`] is what users write (every field optional);
//! [`validate_config`] fills defaults and checks invariants, producing a
//! [`Config`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STM_CAPACITY: usize = 7;
pub const DEFAULT_MTM_SEGMENT_CAPACITY: usize = 200;
pub const DEFAULT_KB_CAPACITY: usize = 100;
pub const DEFAULT_AGENT_TRAITS_CAPACITY: usize = 100;
pub const DEFAULT_HEAT_TAU: f64 = 5.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 1.0;
/// Recency time constant in seconds.
pub const DEFAULT_MU: f64 = 1e7;
pub const DEFAULT_THETA: f64 = 0.6;
pub const DEFAULT_TOP_M_SEGMENTS: usize = 5;
pub const DEFAULT_TOP_K_PAGES: usize = 10;
pub const DEFAULT_LPM_TOP_N: usize = 10;
pub const DEFAULT_EMBEDDING_DIM: usize = 256;

const DEFAULT_TRAIT_SCHEMA: &str = include_str!("../assets/trait_schema.toml");

/// One category of trait dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitCategory {
    pub name: String,
    pub dimensions: Vec<String>,
}

/// Named trait dimensions grouped into categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitSchema {
    #[serde(rename = "category")]
    pub categories: Vec<TraitCategory>,
}

impl TraitSchema {
    /// Parse a schema document in TOML form.
    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: TraitSchema = toml::from_str(text)
            .map_err(|e| Error::Config { field: "trait_schema", reason: e.to_string() })?;
        schema.check()?;
        Ok(schema)
    }

    pub fn dimensions(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().flat_map(|c| c.dimensions.iter().map(String::as_str))
    }

    pub fn dimension_count(&self) -> usize {
        self.categories.iter().map(|c| c.dimensions.len()).sum()
    }

    pub fn contains(&self, dimension: &str) -> bool {
        self.dimensions().any(|d| d == dimension)
    }

    fn check(&self) -> Result<()> {
        let bad = |reason: String| Error::Config { field: "trait_schema", reason };
        let mut seen = BTreeSet::new();
        for cat in &self.categories {
            if cat.name.trim().is_empty() {
                return Err(bad("category name must be non-empty".into()));
            }
            for dim in &cat.dimensions {
                if dim.trim().is_empty() {
                    return Err(bad(format!("empty dimension name in category `{}`", cat.name)));
                }
                if !seen.insert(dim.as_str()) {
                    return Err(bad(format!("duplicate dimension `{dim}`")));
                }
            }
        }
        Ok(())
    }
}

impl Default for TraitSchema {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TRAIT_SCHEMA).expect("bundled trait schema is valid")
    }
}

/// User-facing configuration; unset fields take the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawConfig {
    pub stm_capacity: Option<usize>,
    pub mtm_segment_capacity: Option<usize>,
    pub kb_capacity: Option<usize>,
    pub agent_traits_capacity: Option<usize>,
    pub heat_tau: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub mu: Option<f64>,
    pub theta: Option<f64>,
    pub top_m_segments: Option<usize>,
    pub top_k_pages: Option<usize>,
    pub lpm_top_n: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub trait_schema: Option<TraitSchema>,
}

/// Coefficients of the segment heat score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl Default for HeatParams {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA, gamma: DEFAULT_GAMMA, mu: DEFAULT_MU }
    }
}

/// Validated engine configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub stm_capacity: usize,
    pub mtm_segment_capacity: usize,
    pub kb_capacity: usize,
    pub agent_traits_capacity: usize,
    pub heat_tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub theta: f64,
    pub top_m_segments: usize,
    pub top_k_pages: usize,
    pub lpm_top_n: usize,
    pub embedding_dim: usize,
    pub trait_schema: TraitSchema,
}

impl Config {
    pub fn heat_params(&self) -> HeatParams {
        HeatParams { alpha: self.alpha, beta: self.beta, gamma: self.gamma, mu: self.mu }
    }
}

impl Default for Config {
    fn default() -> Self {
        validate_config(RawConfig::default()).expect("defaults are valid")
    }
}

impl From<Config> for RawConfig {
    fn from(c: Config) -> Self {
        RawConfig {
            stm_capacity: Some(c.stm_capacity),
            mtm_segment_capacity: Some(c.mtm_segment_capacity),
            kb_capacity: Some(c.kb_capacity),
            agent_traits_capacity: Some(c.agent_traits_capacity),
            heat_tau: Some(c.heat_tau),
            alpha: Some(c.alpha),
            beta: Some(c.beta),
            gamma: Some(c.gamma),
            mu: Some(c.mu),
            theta: Some(c.theta),
            top_m_segments: Some(c.top_m_segments),
            top_k_pages: Some(c.top_k_pages),
            lpm_top_n: Some(c.lpm_top_n),
            embedding_dim: Some(c.embedding_dim),
            trait_schema: Some(c.trait_schema),
        }
    }
}

fn positive(field: &'static str, value: usize) -> Result<usize> {
    if value == 0 {
        return Err(Error::Config { field, reason: "must be at least 1".into() });
    }
    Ok(value)
}

fn finite(field: &'static str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Config { field, reason: format!("must be finite, got {value}") });
    }
    Ok(value)
}

fn non_negative(field: &'static str, value: f64) -> Result<f64> {
    if finite(field, value)? < 0.0 {
        return Err(Error::Config { field, reason: format!("must be >= 0, got {value}") });
    }
    Ok(value)
}

/// Fill defaults and check every invariant, naming the first offending field.
pub fn validate_config(raw: RawConfig) -> Result<Config> {
    let theta = finite("theta", raw.theta.unwrap_or(DEFAULT_THETA))?;
    if !(-1.0..=2.0).contains(&theta) {
        return Err(Error::Config {
            field: "theta",
            reason: format!("must lie in [-1, 2], got {theta}"),
        });
    }
    let mu = finite("mu", raw.mu.unwrap_or(DEFAULT_MU))?;
    if mu <= 0.0 {
        return Err(Error::Config { field: "mu", reason: format!("must be > 0, got {mu}") });
    }
    let trait_schema = match raw.trait_schema {
        Some(schema) => {
            schema.check()?;
            schema
        }
        None => TraitSchema::default(),
    };

    Ok(Config {
        stm_capacity: positive("stm_capacity", raw.stm_capacity.unwrap_or(DEFAULT_STM_CAPACITY))?,
        mtm_segment_capacity: positive(
            "mtm_segment_capacity",
            raw.mtm_segment_capacity.unwrap_or(DEFAULT_MTM_SEGMENT_CAPACITY),
        )?,
        kb_capacity: positive("kb_capacity", raw.kb_capacity.unwrap_or(DEFAULT_KB_CAPACITY))?,
        agent_traits_capacity: positive(
            "agent_traits_capacity",
            raw.agent_traits_capacity.unwrap_or(DEFAULT_AGENT_TRAITS_CAPACITY),
        )?,
        heat_tau: finite("heat_tau", raw.heat_tau.unwrap_or(DEFAULT_HEAT_TAU))?,
        alpha: non_negative("alpha", raw.alpha.unwrap_or(DEFAULT_ALPHA))?,
        beta: non_negative("beta", raw.beta.unwrap_or(DEFAULT_BETA))?,
        gamma: non_negative("gamma", raw.gamma.unwrap_or(DEFAULT_GAMMA))?,
        mu,
        theta,
        top_m_segments: positive(
            "top_m_segments",
            raw.top_m_segments.unwrap_or(DEFAULT_TOP_M_SEGMENTS),
        )?,
        top_k_pages: positive("top_k_pages", raw.top_k_pages.unwrap_or(DEFAULT_TOP_K_PAGES))?,
        lpm_top_n: positive("lpm_top_n", raw.lpm_top_n.unwrap_or(DEFAULT_LPM_TOP_N))?,
        embedding_dim: positive("embedding_dim", raw.embedding_dim.unwrap_or(DEFAULT_EMBEDDING_DIM))?,
        trait_schema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = validate_config(RawConfig::default()).unwrap();
        assert_eq!(c.stm_capacity, 7);
        assert_eq!(c.mtm_segment_capacity, 200);
        assert_eq!(c.kb_capacity, 100);
        assert_eq!(c.agent_traits_capacity, 100);
        assert_eq!(c.theta, 0.6);
        assert_eq!(c.heat_tau, 5.0);
        assert_eq!(c.mu, 1e7);
        assert_eq!((c.alpha, c.beta, c.gamma), (1.0, 1.0, 1.0));
        assert_eq!(c.top_m_segments, 5);
        assert_eq!(c.top_k_pages, 10);
        assert_eq!(c.lpm_top_n, 10);
    }

    #[test]
    fn zero_stm_capacity_is_rejected() {
        let raw = RawConfig { stm_capacity: Some(0), ..Default::default() };
        match validate_config(raw) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "stm_capacity"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn theta_inside_range_is_kept() {
        let raw = RawConfig { theta: Some(0.3), ..Default::default() };
        assert_eq!(validate_config(raw).unwrap().theta, 0.3);
    }

    #[test]
    fn out_of_range_values_name_their_field() {
        let cases: Vec<(RawConfig, &str)> = vec![
            (RawConfig { theta: Some(2.5), ..Default::default() }, "theta"),
            (RawConfig { theta: Some(f64::NAN), ..Default::default() }, "theta"),
            (RawConfig { mu: Some(0.0), ..Default::default() }, "mu"),
            (RawConfig { alpha: Some(-0.1), ..Default::default() }, "alpha"),
            (RawConfig { gamma: Some(-1.0), ..Default::default() }, "gamma"),
            (RawConfig { top_k_pages: Some(0), ..Default::default() }, "top_k_pages"),
            (RawConfig { embedding_dim: Some(0), ..Default::default() }, "embedding_dim"),
            (RawConfig { kb_capacity: Some(0), ..Default::default() }, "kb_capacity"),
        ];
        for (raw, expected) in cases {
            match validate_config(raw) {
                Err(Error::Config { field, .. }) => assert_eq!(field, expected),
                other => panic!("expected error on {expected}, got {other:?}"),
            }
        }
    }

    #[test]
    fn validation_is_idempotent() {
        let raw = RawConfig { theta: Some(0.3), stm_capacity: Some(3), ..Default::default() };
        let once = validate_config(raw).unwrap();
        let twice = validate_config(once.clone().into()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn bundled_schema_has_ninety_dimensions_in_three_categories() {
        let schema = TraitSchema::default();
        assert_eq!(schema.categories.len(), 3);
        assert_eq!(schema.dimension_count(), 90);
        assert!(schema.contains("openness"));
        assert!(!schema.contains("not_a_dimension"));
    }

    #[test]
    fn duplicate_dimensions_are_rejected() {
        let text = r#"
            [[category]]
            name = "a"
            dimensions = ["x", "y"]
            [[category]]
            name = "b"
            dimensions = ["x"]
        "#;
        assert!(TraitSchema::from_toml(text).is_err());
    }

    #[test]
    fn raw_config_parses_from_toml() {
        let raw: RawConfig = toml::from_str("stm_capacity = 3\ntheta = 0.5\n").unwrap();
        let c = validate_config(raw).unwrap();
        assert_eq!(c.stm_capacity, 3);
        assert_eq!(c.theta, 0.5);
        assert!(toml::from_str::<RawConfig>("bogus = 1").is_err());
    }
}
