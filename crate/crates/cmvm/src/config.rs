//! Experiment configuration: one JSON document, with dotted-path overrides.

use std::path::{Path, PathBuf};

use cmvm_core::ensemble::Execution;
use cmvm_core::noise::NoiseSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub h: usize,
    pub g: usize,
    pub k: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { h: 2, g: 2, k: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            horizon: 1.0,
            n_steps: 32,
        }
    }
}

/// Where the noise comes from: a preset, a JSON file, or an inline spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
    pub spec: Option<NoiseSpec>,
    pub n_cells: usize,
    pub weights: Option<Vec<f64>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            preset: Some("mixed".into()),
            file: None,
            spec: None,
            n_cells: 4,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrandConfig {
    pub name: String,
    pub scale: f64,
    /// Strength of the state or history dependence.
    pub coupling: f64,
}

impl Default for IntegrandConfig {
    fn default() -> Self {
        IntegrandConfig {
            name: "constant".into(),
            scale: 1.0,
            coupling: 0.5,
        }
    }
}

/// `X = ξ + ∫ -κ X dt + ∫∫Φ dM`, with `ξ = xi_norm · (1,…,1)/√dim` unless
/// `xi` is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessConfig {
    pub xi: Option<Vec<f64>>,
    pub xi_norm: f64,
    pub mean_reversion: f64,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        ProcessConfig {
            xi: None,
            xi_norm: 0.5,
            mean_reversion: 0.0,
        }
    }
}

/// Refinement levels for convergence studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub levels: Vec<u32>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            levels: vec![3, 4, 5, 6, 7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub z_max: f64,
    pub rel_err: f64,
    pub exact: f64,
    pub identity: f64,
    pub sigma: f64,
    pub finest_ratio: f64,
    pub finest_rel_err: f64,
    pub stability_factor: f64,
    pub quadrature: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            z_max: 4.0,
            rel_err: 0.05,
            exact: 1e-10,
            identity: 1e-12,
            sigma: 3.0,
            finest_ratio: 0.25,
            finest_rel_err: 0.10,
            stability_factor: 2.0,
            quadrature: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub dims: Dims,
    pub grid: GridConfig,
    pub noise: NoiseConfig,
    pub integrand: IntegrandConfig,
    pub process: ProcessConfig,
    pub function: String,
    pub p: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub execution: Execution,
    pub study: StudyConfig,
    pub tolerances: Tolerances,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: "verify-isometry".into(),
            dims: Dims::default(),
            grid: GridConfig::default(),
            noise: NoiseConfig::default(),
            integrand: IntegrandConfig::default(),
            process: ProcessConfig::default(),
            function: "quadratic".into(),
            p: vec![1.0, 2.0, 3.0, 4.0],
            n_paths: 20_000,
            seed: 0,
            output: PathBuf::from("out"),
            execution: Execution::Parallel,
            study: StudyConfig::default(),
            tolerances: Tolerances::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(v: Value) -> Result<Self, HarnessError> {
        Ok(serde_json::from_value(v)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key.sub=value` overrides. Values parse as JSON when they can
    /// and are taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self, HarnessError> {
        let mut v = serde_json::to_value(self)?;
        for s in sets {
            let s = s.as_ref();
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override '{s}' is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, value)?;
        }
        Self::from_value(v)
    }

    /// Canonical JSON: object keys sorted, no whitespace. `output` and
    /// `execution` are left out since they do not change any result.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
            obj.remove("execution");
        }
        canonicalize(v).to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.dims.h == 0 || self.dims.g == 0 || self.dims.k == 0 {
            return bad("all dims must be >= 1".into());
        }
        if self.grid.n_steps == 0 {
            return bad("grid.n_steps must be >= 1".into());
        }
        if !(self.grid.horizon > 0.0) {
            return bad("grid.horizon must be > 0".into());
        }
        if self.n_paths == 0 {
            return bad("n_paths must be >= 1".into());
        }
        if self.p.iter().any(|p| !(*p > 0.0)) {
            return bad("every p must be > 0".into());
        }
        if let Some(xi) = &self.process.xi {
            if xi.len() != self.dims.g {
                return bad(format!("process.xi has {} entries, dims.g = {}", xi.len(), self.dims.g));
            }
        }
        crate::scenarios::lookup(&self.scenario)?;
        crate::registry::build_noise(self)?;
        crate::registry::build_integrand(self)?;
        cmvm_core::ito::SmoothFunction::from_name(&self.function, self.dims.g)?;
        Ok(())
    }
}

fn canonicalize(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, canonicalize(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), HarnessError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("'{key}': '{part}' is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let c = ExperimentConfig::default()
            .with_overrides(&["grid.n_steps=64", "scenario=burkholder", "noise.preset=jump", "p=[3,4]"])
            .unwrap();
        assert_eq!(c.grid.n_steps, 64);
        assert_eq!(c.scenario, "burkholder");
        assert_eq!(c.noise.preset.as_deref(), Some("jump"));
        assert_eq!(c.p, vec![3.0, 4.0]);
        assert!(ExperimentConfig::default().with_overrides(&["nonsense=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["grid"]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::from_json(&a.canonical_json()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = a.with_overrides(&["seed=1"]).unwrap();
        assert_ne!(a.hash(), c.hash());
        let d = a.with_overrides(&["output=elsewhere", "execution=sequential"]).unwrap();
        assert_eq!(a.hash(), d.hash());
    }

    #[test]
    fn validation_catches_bad_values() {
        let ok = ExperimentConfig::default();
        assert!(ok.validate().is_ok());
        for set in ["n_paths=0", "grid.n_steps=0", "dims.h=0", "scenario=nope", "function=cubic"] {
            assert!(ok.with_overrides(&[set]).unwrap().validate().is_err(), "{set}");
        }
    }
}
