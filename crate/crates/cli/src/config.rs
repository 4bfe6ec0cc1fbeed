//! Run configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use ganbound::bound::BoundConfig;
use ganbound::domains::DomainSpec;
use ganbound::hyperband::HyperSpace;
use ganbound::mapping::MapTrainConfig;
use ganbound::nn::{Loss, MlpSpec};
use ganbound::seed;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Stop,
    Select,
    PerSample,
    Hyperband,
    Calibrate,
    Verify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every component seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// When present, must name the subcommand being run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    pub domain: DomainSpec,
    pub map: MapTrainConfig,
    pub bound: BoundConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select: Option<SelectSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<PerSampleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperband: Option<HyperbandSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<CalibrateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySection>,
}

/// Candidates are either listed in full or given as hidden-layer counts of
/// the `map.g_spec` family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<MlpSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

fn fifty() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerSampleSection {
    /// Held-out points drawn fresh from `D_A`.
    #[serde(default = "fifty")]
    pub count: usize,
}

fn r_default() -> usize {
    27
}
fn eta_default() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperbandSection {
    pub space: HyperSpace,
    #[serde(default = "r_default")]
    pub r_max: usize,
    #[serde(default = "eta_default")]
    pub eta: f64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    pub grid: Vec<f64>,
    #[serde(default = "one")]
    pub repeats: usize,
}

fn twenty() -> usize {
    20
}
fn spread_default() -> f64 {
    1.0
}
fn loss_default() -> Loss {
    Loss::L1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "twenty")]
    pub pool_size: usize,
    /// Parameter-space radius of the farthest pool member.
    #[serde(default = "spread_default")]
    pub spread: f64,
    #[serde(default = "loss_default")]
    pub loss: Loss,
}

impl RunConfig {
    /// Copies of the component configs with seeds derived from the global
    /// one: `derive_indexed(seed, component, local_seed)`.
    pub fn seeded(&self) -> RunConfig {
        let mut c = self.clone();
        let g = self.seed;
        c.domain.seed = seed::derive_indexed(g, "domain", self.domain.seed);
        c.map.seed = seed::derive_indexed(g, "map", self.map.seed);
        c.bound.seed = seed::derive_indexed(g, "bound", self.bound.seed);
        if let Some(h) = c.hyperband.as_mut() {
            h.space.seed = seed::derive_indexed(g, "hyperband", h.space.seed);
        }
        c
    }

    pub fn check_algorithm(&self, wanted: Algorithm) -> anyhow::Result<()> {
        match self.algorithm {
            Some(a) if a != wanted => bail!(ConfigError(format!(
                ".algorithm: config is for {a:?}, but the {wanted:?} command was run"
            ))),
            _ => Ok(()),
        }
    }
}

/// An error the user can fix in the configuration (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Applies `a.b.c=value` to `doc`. The value is parsed as JSON when it can be,
/// and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {assignment:?} is not of the form key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!(ConfigError(format!("override path {path:?} has an empty segment")));
    }
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            other => {
                if other.is_null() {
                    *other = Value::Object(Default::default());
                    other.as_object_mut().expect("just set")
                } else {
                    bail!(ConfigError(format!(
                        "override {path:?}: .{} is not an object",
                        keys[..i].join(".")
                    )))
                }
            }
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

fn field_path(path: &serde_path_to_error::Path, msg: &str) -> String {
    let mut p = path.to_string();
    if p == "." {
        p.clear();
    }
    if let Some(name) = msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
        if !p.is_empty() {
            p.push('.');
        }
        p.push_str(name);
    }
    format!(".{p}")
}

/// Parses a configuration document, reporting the offending field path.
pub fn parse_config(doc: Value) -> anyhow::Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let msg = e.inner().to_string();
        let path = field_path(e.path(), &msg);
        anyhow!(ConfigError(format!("{path}: {msg}")))
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> anyhow::Result<()> {
    let wrap = |section: &str, r: ganbound::Result<()>| r.map_err(|e| anyhow!(ConfigError(format!(".{section}: {e}"))));
    wrap("map", cfg.map.validate())?;
    wrap("bound", cfg.bound.validate())?;
    if let Some(h) = &cfg.hyperband {
        wrap("hyperband.space", h.space.validate())?;
    }
    Ok(())
}

pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| anyhow!(ConfigError(format!("{}: invalid JSON: {e}", path.display()))))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    parse_config(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "domain": {"kind": "affine_target", "m": 100, "n": 100},
            "map": {"g_spec": {"layer_widths": [2, 2], "activation": "identity", "output_activation": "identity"}, "regime": "gan_only"},
            "bound": {"lambda": 0.5}
        })
    }

    #[test]
    fn missing_lambda_names_the_field() {
        let mut doc = minimal();
        doc["bound"].as_object_mut().unwrap().remove("lambda");
        let err = parse_config(doc).unwrap_err().to_string();
        assert!(err.starts_with(".bound.lambda:"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let mut doc = minimal();
        doc["map"]["learning_rat"] = json!(0.1);
        let err = parse_config(doc).unwrap_err().to_string();
        assert!(err.contains(".map") && err.contains("learning_rat"), "{err}");
        let mut doc = minimal();
        doc["extra"] = json!(1);
        assert!(parse_config(doc).is_err());
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut doc = minimal();
        apply_override(&mut doc, "bound.lambda=2.5").unwrap();
        apply_override(&mut doc, "map.epochs=7").unwrap();
        apply_override(&mut doc, "per_sample.count=3").unwrap();
        apply_override(&mut doc, "domain.base=clusters").unwrap();
        let cfg = parse_config(doc).unwrap();
        assert_eq!(cfg.bound.lambda, 2.5);
        assert_eq!(cfg.map.epochs, 7);
        assert_eq!(cfg.per_sample.unwrap().count, 3);
        let mut doc = minimal();
        assert!(apply_override(&mut doc, "bound.lambda.x=1").is_err());
        assert!(apply_override(&mut doc, "novalue").is_err());
    }

    #[test]
    fn seeds_fan_out() {
        let cfg = parse_config(minimal()).unwrap();
        let a = cfg.seeded();
        let mut other = cfg.clone();
        other.seed = 1;
        let b = other.seeded();
        assert_ne!(a.map.seed, b.map.seed);
        assert_ne!(a.map.seed, a.bound.seed);
        assert_eq!(a, cfg.seeded());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut doc = minimal();
        doc["bound"]["lambda"] = json!(-1.0);
        let err = parse_config(doc).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(err.to_string().starts_with(".bound:"));
    }
}
