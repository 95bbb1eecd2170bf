//! Experiment configuration and config hashing.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalsim::LoopConfig;
use crate::synthworld::WorldConfig;
use crate::trainer::TrainConfig;

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes to JSON");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything one experiment needs. Missing sections and keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    #[serde(rename = "loop")]
    pub sim: LoopConfig,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            sim: LoopConfig::default(),
            out_dir: "runs".into(),
        }
    }
}

fn from_value_with_path(value: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })
}

impl ExperimentConfig {
    /// Parses JSON text. Errors name the offending key path, e.g.
    /// `train.rq.k: invalid type ...`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        from_value_with_path(value)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes to JSON")
    }

    /// Applies one `section.key=value` override. The value is read as JSON
    /// when it parses, otherwise as a bare string.
    pub fn apply_set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
        let path = path.trim();
        if path.is_empty() {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got `{assignment}`")));
        }
        let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self).expect("config serializes to JSON");
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(key).ok_or_else(|| Error::Config(format!("{path}: unknown key")))?,
                _ => return Err(Error::Config(format!("{path}: unknown key"))),
            };
        }
        *slot = new;
        *self = from_value_with_path(root)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.sim.validate(&self.world)
    }

    /// Hash of everything except `out_dir`.
    pub fn hash(&self) -> String {
        config_hash(&(&self.world, &self.train, &self.sim))
    }

    /// Hash of the world section alone; runs on the same world share it.
    pub fn world_hash(&self) -> String {
        config_hash(&self.world)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(ExperimentConfig::from_json_str("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn json_round_trip() {
        let mut c = ExperimentConfig::default();
        c.train.lr = 0.0123;
        c.out_dir = "x".into();
        assert_eq!(ExperimentConfig::from_json_str(&c.to_json_pretty()).unwrap(), c);
    }

    #[test]
    fn unknown_key_reports_path() {
        let e = ExperimentConfig::from_json_str(r#"{"train": {"rq": {"kk": 3}}}"#).unwrap_err();
        assert!(e.to_string().contains("train.rq"), "{e}");
        let e = ExperimentConfig::from_json_str(r#"{"world": {"n_users": "many"}}"#).unwrap_err();
        assert!(e.to_string().contains("world.n_users"), "{e}");
    }

    #[test]
    fn set_overrides_nested_keys() {
        let mut c = ExperimentConfig::default();
        c.apply_set("train.rq.k=8").unwrap();
        c.apply_set("loop.policy=pa_bridge").unwrap();
        c.apply_set("out_dir=elsewhere").unwrap();
        assert_eq!(c.train.rq.k, 8);
        assert_eq!(c.sim.policy, crate::evalsim::Policy::PaBridge);
        assert_eq!(c.out_dir, "elsewhere");
    }

    #[test]
    fn set_rejects_unknown_or_mistyped() {
        let mut c = ExperimentConfig::default();
        let e = c.apply_set("train.nope=1").unwrap_err();
        assert!(e.to_string().contains("train.nope"), "{e}");
        let e = c.apply_set("world.n_users=-3").unwrap_err();
        assert!(e.to_string().contains("world.n_users"), "{e}");
        assert!(c.apply_set("no_equals_sign").is_err());
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn world_hash_ignores_other_sections() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.seed = 99;
        assert_eq!(a.world_hash(), b.world_hash());
        assert_ne!(a.hash(), b.hash());
        let c = ExperimentConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), c.hash());
    }
}
