//! Run configuration: documented defaults, overlaid by a JSON file, then by flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use coir_core::datasets::ToyConfig;
use coir_core::explain::{DEFAULT_STRIDE, DEFAULT_WINDOW};
use coir_core::model::{ModelConfig, QueryMode};
use coir_core::redundancy::{DEFAULT_CURVE_GRID, DEFAULT_KS, DEFAULT_N_GRID};
use coir_core::roaming::RoamConfig;
use coir_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub mode: QueryMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 50],
            mode: QueryMode::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedundancyConfig {
    pub n_grid: Vec<usize>,
    pub ks: Vec<usize>,
    pub k_grid: Vec<usize>,
}

impl Default for RedundancyConfig {
    fn default() -> Self {
        Self {
            n_grid: DEFAULT_N_GRID.to_vec(),
            ks: DEFAULT_KS.to_vec(),
            k_grid: DEFAULT_CURVE_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub toy: ToyConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub roam: RoamConfig,
    pub eval: EvalConfig,
    pub redundancy: RedundancyConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Dotted paths of keys in `file` that `defaults` does not have.
fn unknown_keys(defaults: &Value, file: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(d), Value::Object(f)) = (defaults, file) {
        for (k, v) in f {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match d.get(k) {
                Some(dv) => unknown_keys(dv, v, &path, out),
                None => out.push(path),
            }
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Overlays the JSON text `file` on `defaults`; an empty file keeps them.
pub fn resolve(defaults: RunConfig, file: &str, origin: &str) -> Result<RunConfig> {
    if file.trim().is_empty() {
        return Ok(defaults);
    }
    let over: Value = serde_json::from_str(file).with_context(|| format!("{origin}: not valid JSON"))?;
    if !over.is_object() {
        bail!("{origin}: top level must be a JSON object");
    }
    let mut base = serde_json::to_value(&defaults)?;
    let mut unknown = Vec::new();
    unknown_keys(&base, &over, "", &mut unknown);
    if !unknown.is_empty() {
        bail!("{origin}: unknown config keys: {}", unknown.join(", "));
    }
    merge(&mut base, over);
    serde_json::from_value(base).with_context(|| format!("{origin}: invalid config value"))
}

pub fn load_config(defaults: RunConfig, path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(defaults),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            resolve(defaults, &text, &p.display().to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use coir_core::training::LossVariant;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(resolve(RunConfig::default(), "", "c").unwrap(), RunConfig::default());
        assert_eq!(resolve(RunConfig::default(), "{}", "c").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_loss_ks() {
        assert_eq!(RunConfig::default().train.loss.ks, [1, 5, 10, 50]);
    }

    #[test]
    fn file_values_override_nested_defaults() {
        let c = resolve(RunConfig::default(), r#"{"train": {"epochs": 3, "loss": {"tau2": 2.0}}}"#, "c").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.loss.tau2, 2.0);
        assert_eq!(c.train.loss.tau1, RunConfig::default().train.loss.tau1);
        let toy = RunConfig {
            train: TrainConfig::toy(),
            ..RunConfig::default()
        };
        let c = resolve(toy, r#"{"train": {"epochs": 4}}"#, "c").unwrap();
        assert_eq!(c.train.loss.variant, LossVariant::Contrastive);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = resolve(RunConfig::default(), r#"{"trian": 1, "train": {"epochz": 2, "loss": {"k": []}}}"#, "c")
            .unwrap_err()
            .to_string();
        assert!(err.contains("trian"), "{err}");
        assert!(err.contains("train.epochz"), "{err}");
        assert!(err.contains("train.loss.k"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
