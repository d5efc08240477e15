//! Experiment configuration: one TOML file, optional `--set key=value`
//! overrides applied on the parsed tree before typed deserialization.

use gradgeom::geometry::InnerBudget;
use gradgeom::network::{Activation, Architecture, NetworkConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn fail<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ball: Option<BallSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<WidthSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nerc: Option<NercSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical: Option<CanonicalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemmas: Option<LemmaSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gd: Option<GdSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reuse: Option<ReuseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converge: Option<ConvergeSection>,
}

fn default_format() -> Format {
    Format::Csv
}

/// Network fields except the input dimension, which comes from `data.d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub arch: Architecture,
    pub widths: Vec<usize>,
    pub sigma1: f64,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallSection {
    pub rho: f64,
    pub rho1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub d: usize,
    pub teacher_seed: u64,
    pub noise_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSection {
    pub outer: usize,
    pub restarts: usize,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
}

impl WidthSection {
    pub fn budget(&self) -> InnerBudget {
        InnerBudget {
            restarts: self.restarts,
            steps: self.steps,
            step_size: self.step_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NercSection {
    /// Sign samples when `data.n` is too large for enumeration.
    pub outer: usize,
    pub khintchine_n: Vec<usize>,
    pub khintchine_dim: usize,
    pub khintchine_outer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalSection {
    pub samples: usize,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaSection {
    pub trials: usize,
    pub widths: Vec<usize>,
    pub depth: usize,
    pub sic_n: Vec<usize>,
    pub sic_families: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdSection {
    pub eta: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub seeds: usize,
    pub oracle_factor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub points: usize,
    pub l0_threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReuseModel {
    Linear,
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReuseSection {
    pub model: ReuseModel,
    pub eta: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub n_grid: Vec<usize>,
    pub t_grid: Vec<usize>,
    pub n_fixed: usize,
    pub trials: usize,
    pub oracle_factor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    pub t_grid: Vec<usize>,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub oracle_factor: usize,
    pub tau_probes: usize,
    pub tau_radius: f64,
}

/// Parses TOML text, applies `key=value` overrides and deserializes.
pub fn load(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut tree: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError(format!("config parse error: {e}")))?;
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(format!("config error: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let Some((key, raw)) = spec.split_once('=') else {
        return fail(format!("override `{spec}` is not of the form key=value"));
    };
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return fail(format!("override key `{key}` is malformed"));
    }
    let value = parse_literal(raw.trim());
    let (last, parents) = path.split_last().unwrap();
    let mut table = tree;
    for part in parents {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return fail(format!("override key `{key}`: `{part}` is not a section")),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn positive(v: f64, field: &str) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        fail(format!("{field} must be > 0, got {v}"))
    }
}

fn non_negative(v: f64, field: &str) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        fail(format!("{field} must be >= 0, got {v}"))
    }
}

fn at_least(v: usize, min: usize, field: &str) -> Result<(), ConfigError> {
    if v >= min {
        Ok(())
    } else {
        fail(format!("{field} must be >= {min}, got {v}"))
    }
}

fn grid(v: &[usize], field: &str) -> Result<(), ConfigError> {
    if v.is_empty() || v.contains(&0) {
        fail(format!("{field} must be a non-empty list of positive integers"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(b) = &self.ball {
            positive(b.rho, "ball.rho")?;
            non_negative(b.rho1, "ball.rho1")?;
        }
        if let Some(d) = &self.data {
            at_least(d.n, 1, "data.n")?;
            at_least(d.d, 1, "data.d")?;
            non_negative(d.noise_std, "data.noise_std")?;
        }
        if let Some(n) = &self.network {
            positive(n.sigma1, "network.sigma1")?;
            if n.widths.is_empty() || n.widths.contains(&0) {
                return fail("network.widths must be a non-empty list of positive integers");
            }
        }
        if let (Some(_), Some(_)) = (&self.network, &self.data) {
            self.network_config()?
                .validate()
                .map_err(|e| ConfigError(format!("network: {e}")))?;
        }
        if let Some(w) = &self.width {
            at_least(w.outer, 2, "width.outer")?;
            at_least(w.restarts, 1, "width.restarts")?;
            if let Some(s) = w.step_size {
                positive(s, "width.step_size")?;
            }
        }
        if let Some(n) = &self.nerc {
            at_least(n.outer, 2, "nerc.outer")?;
            grid(&n.khintchine_n, "nerc.khintchine_n")?;
            at_least(n.khintchine_dim, 1, "nerc.khintchine_dim")?;
            at_least(n.khintchine_outer, 2, "nerc.khintchine_outer")?;
        }
        if let Some(c) = &self.canonical {
            at_least(c.samples, 2, "canonical.samples")?;
            grid(&c.dims, "canonical.dims")?;
        }
        if let Some(l) = &self.lemmas {
            at_least(l.trials, 100, "lemmas.trials")?;
            grid(&l.widths, "lemmas.widths")?;
            at_least(l.depth, 1, "lemmas.depth")?;
            grid(&l.sic_n, "lemmas.sic_n")?;
            if let Some(&n) = l.sic_n.iter().find(|&&n| n > 16) {
                return fail(format!("lemmas.sic_n entries must be <= 16, got {n}"));
            }
            at_least(l.sic_families, 1, "lemmas.sic_families")?;
        }
        if let Some(g) = &self.gd {
            positive(g.eta, "gd.eta")?;
            at_least(g.steps, 1, "gd.T")?;
            at_least(g.seeds, 1, "gd.seeds")?;
            at_least(g.oracle_factor, 1, "gd.oracle_factor")?;
        }
        if let Some(p) = &self.profile {
            non_negative(p.l0_threshold, "profile.l0_threshold")?;
        }
        if let Some(r) = &self.reuse {
            positive(r.eta, "reuse.eta")?;
            at_least(r.steps, 1, "reuse.T")?;
            grid(&r.n_grid, "reuse.n_grid")?;
            grid(&r.t_grid, "reuse.t_grid")?;
            at_least(r.n_fixed, 1, "reuse.n_fixed")?;
            at_least(r.trials, 2, "reuse.trials")?;
            at_least(r.oracle_factor, 1, "reuse.oracle_factor")?;
        }
        if let Some(c) = &self.converge {
            grid(&c.t_grid, "converge.t_grid")?;
            grid(&c.n_grid, "converge.n_grid")?;
            at_least(c.trials, 1, "converge.trials")?;
            at_least(c.oracle_factor, 1, "converge.oracle_factor")?;
            at_least(c.tau_probes, 1, "converge.tau_probes")?;
            positive(c.tau_radius, "converge.tau_radius")?;
        }
        Ok(())
    }

    pub fn network_config(&self) -> Result<NetworkConfig, ConfigError> {
        let net = self.require(&self.network, "network")?;
        let data = self.require(&self.data, "data")?;
        Ok(NetworkConfig {
            arch: net.arch,
            widths: net.widths.clone(),
            input_dim: data.d,
            sigma1: net.sigma1,
            activation: net.activation,
        })
    }

    pub fn require<'a, T>(&self, section: &'a Option<T>, name: &str) -> Result<&'a T, ConfigError> {
        section
            .as_ref()
            .ok_or_else(|| ConfigError(format!("missing config section [{name}]")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT: &str = include_str!("../../../configs/default.toml");

    #[test]
    fn default_config_parses_and_round_trips() {
        let cfg = load(DEFAULT, &[]).unwrap();
        let again = load(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
        let original: toml::Table = DEFAULT.parse().unwrap();
        let echoed: toml::Table = cfg.to_toml().parse().unwrap();
        assert_eq!(original, echoed);
    }

    #[test]
    fn overrides_beat_file_values() {
        let cases: [(&str, fn(&ExperimentConfig) -> bool); 9] = [
            ("seed=99", |c: &ExperimentConfig| c.seed == 99),
            ("ball.rho=0.25", |c: &ExperimentConfig| c.ball.unwrap().rho == 0.25),
            ("ball.rho1=2", |c: &ExperimentConfig| c.ball.unwrap().rho1 == 2.0),
            ("data.n=3", |c: &ExperimentConfig| c.data.unwrap().n == 3),
            ("network.widths=[8, 8, 8]", |c: &ExperimentConfig| {
                c.network.as_ref().unwrap().widths == [8, 8, 8]
            }),
            ("network.activation=relu", |c: &ExperimentConfig| {
                c.network.as_ref().unwrap().activation == Activation::Relu
            }),
            ("width.step_size=0.05", |c: &ExperimentConfig| {
                c.width.unwrap().step_size == Some(0.05)
            }),
            ("reuse.T=64", |c: &ExperimentConfig| c.reuse.as_ref().unwrap().steps == 64),
            ("format=json", |c: &ExperimentConfig| c.format == Format::Json),
        ];
        for (o, check) in cases {
            let cfg = load(DEFAULT, &[o.to_string()]).unwrap();
            assert!(check(&cfg), "override {o} not applied");
        }
    }

    #[test]
    fn later_override_wins() {
        let cfg = load(DEFAULT, &["seed=1".into(), "seed=2".into()]).unwrap();
        assert_eq!(cfg.seed, 2);
    }

    #[test]
    fn negative_rho_names_the_field() {
        let err = load(DEFAULT, &["ball.rho=-1".into()]).unwrap_err();
        assert!(err.0.contains("ball.rho"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(DEFAULT, &["ball.radius=1".into()]).unwrap_err();
        assert!(err.0.contains("radius"), "{err}");
        let err = load(DEFAULT, &["extra=1".into()]).unwrap_err();
        assert!(err.0.contains("extra"), "{err}");
    }

    #[test]
    fn malformed_override_is_a_config_error() {
        assert!(load(DEFAULT, &["no-equals-sign".into()]).is_err());
        assert!(load(DEFAULT, &["ball..rho=1".into()]).is_err());
    }

    #[test]
    fn resnet_width_constraint_is_checked() {
        let err = load(
            DEFAULT,
            &["network.arch=resnet".into(), "network.widths=[8, 16]".into()],
        )
        .unwrap_err();
        assert!(err.0.starts_with("network"), "{err}");
    }
}
