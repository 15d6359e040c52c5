//! Run configuration: a flat key-value file (TOML syntax), overridden by
//! command-line flags, then by the `IDSIS_SEED` environment variable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::data::{toy_class_names, DataConfig};
use crate::error::{Error, Result};
use crate::identity::{FREmbedderConfig, FrRole};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "IDSIS_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Path,
}

/// One documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($name:literal $kind:ident $default:literal $help:literal;)*) => {
        pub const KEYS: &[KeySpec] = &[$(KeySpec { name: $name, kind: Kind::$kind, default: $default, help: $help }),*];
    };
}

keys! {
    "resolution" Int "64" "image side in pixels (power of two, ≥ 32)";
    "identities" Int "150" "toy dataset identity count";
    "variations" Int "10" "renders per identity";
    "data_seed" Int "0" "toy dataset seed";
    "classes" Int "6" "semantic class count C";
    "d_s" Int "64" "style code / token width";
    "d_id" Int "128" "identity embedding width";
    "head_count" Int "1" "cross-attention heads";
    "self_attention" Bool "false" "add a self-attention block at the lowest resolution";
    "lambda_fm" Float "10" "feature-matching weight";
    "lambda_prc" Float "10" "perceptual weight";
    "lambda_id" Float "10" "identity weight";
    "lr_g" Float "0.0001" "generator learning rate";
    "lr_d" Float "0.0004" "discriminator learning rate";
    "beta1" Float "0" "Adam beta1";
    "beta2" Float "0.999" "Adam beta2";
    "batch" Int "16" "batch size";
    "iterations" Int "20000" "training iterations";
    "checkpoint_every" Int "1000" "checkpoint interval";
    "log_every" Int "100" "metrics interval";
    "seed" Int "0" "model initialisation and batch-order seed";
    "fr_epochs" Int "24" "face-recognizer training epochs";
    "train_fr_seed" Int "101" "train-FR seed";
    "eval_fr_seed" Int "202" "eval-FR seed";
    "far_target" Float "0.01" "false acceptance rate used to set the threshold";
    "attack_pairs" Int "500" "attacker/target pairs";
    "impostor_pairs" Int "2000" "impostor pairs for threshold calibration";
    "eval_seed" Int "0" "seed for pair sampling";
    "dataset_dir" Path "data" "dataset root";
    "checkpoint_dir" Path "checkpoints" "face-recognizer and synthesizer checkpoints";
    "output_dir" Path "out" "evaluation, inference and plot outputs";
}

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

fn unknown_key(name: &str) -> Error {
    let best = KEYS
        .iter()
        .map(|k| (strsim::damerau_levenshtein(name, k.name), k.name))
        .min()
        .filter(|(d, _)| *d <= 3)
        .map(|(_, k)| format!(" (did you mean \"{k}\"?)"))
        .unwrap_or_default();
    let valid: Vec<&str> = KEYS.iter().map(|k| k.name).collect();
    Error::Config(format!("unknown key \"{name}\"{best}; valid keys: {}", valid.join(", ")))
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub resolution: usize,
    pub identities: usize,
    pub variations: usize,
    pub data_seed: u64,
    pub classes: usize,
    pub d_s: usize,
    pub d_id: usize,
    pub head_count: usize,
    pub self_attention: bool,
    pub lambda_fm: f64,
    pub lambda_prc: f64,
    pub lambda_id: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
    pub fr_epochs: usize,
    pub train_fr_seed: u64,
    pub eval_fr_seed: u64,
    pub far_target: f64,
    pub attack_pairs: usize,
    pub impostor_pairs: usize,
    pub eval_seed: u64,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let raw: BTreeMap<String, toml::Value> =
            KEYS.iter().map(|k| (k.name.to_string(), parse_typed(k, k.default).expect("valid default"))).collect();
        from_table(raw).expect("defaults resolve")
    }
}

fn parse_typed(spec: &KeySpec, text: &str) -> Result<toml::Value> {
    let bad = |what: &str| Error::Config(format!("key \"{}\" expects {what}, got \"{text}\"", spec.name));
    Ok(match spec.kind {
        Kind::Int => toml::Value::Integer(text.trim().parse::<i64>().map_err(|_| bad("an integer"))?),
        Kind::Float => toml::Value::Float(text.trim().parse::<f64>().map_err(|_| bad("a number"))?),
        Kind::Bool => toml::Value::Boolean(text.trim().parse::<bool>().map_err(|_| bad("true or false"))?),
        Kind::Path => toml::Value::String(text.to_string()),
    })
}

fn check_type(spec: &KeySpec, v: toml::Value) -> Result<toml::Value> {
    let mismatch = |want: &str| Error::Config(format!("key \"{}\" expects {want}, got {v}", spec.name));
    match (spec.kind, &v) {
        (Kind::Int, toml::Value::Integer(i)) if *i >= 0 => Ok(v),
        (Kind::Int, _) => Err(mismatch("a non-negative integer")),
        (Kind::Float, toml::Value::Float(_)) => Ok(v),
        (Kind::Float, toml::Value::Integer(i)) => Ok(toml::Value::Float(*i as f64)),
        (Kind::Float, _) => Err(mismatch("a number")),
        (Kind::Bool, toml::Value::Boolean(_)) => Ok(v),
        (Kind::Bool, _) => Err(mismatch("true or false")),
        (Kind::Path, toml::Value::String(_)) => Ok(v),
        (Kind::Path, _) => Err(mismatch("a path string")),
    }
}

fn from_table(raw: BTreeMap<String, toml::Value>) -> Result<RunConfig> {
    let table: toml::Table = raw.into_iter().collect();
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config does not resolve: {e}")))
}

/// Layered config builder.
#[derive(Clone, Debug, Default)]
pub struct ConfigLayers {
    values: BTreeMap<String, toml::Value>,
}

impl ConfigLayers {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply a key-value file. An empty file changes nothing.
    pub fn file_text(&mut self, text: &str, origin: &str) -> Result<&mut Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        for (k, v) in table {
            let spec = key_spec(&k).ok_or_else(|| unknown_key(&k))?;
            if matches!(v, toml::Value::Table(_) | toml::Value::Array(_)) {
                return Err(Error::Config(format!("{origin}: key \"{k}\" must be a plain value")));
            }
            self.values.insert(k, check_type(spec, v)?);
        }
        Ok(self)
    }

    pub fn file(&mut self, path: &Path) -> Result<&mut Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        self.file_text(&text, &path.display().to_string())
    }

    /// Apply one override given as text (from a flag).
    pub fn set(&mut self, key: &str, text: &str) -> Result<&mut Self> {
        let spec = key_spec(key).ok_or_else(|| unknown_key(key))?;
        self.values.insert(key.to_string(), parse_typed(spec, text)?);
        Ok(self)
    }

    /// Resolve with defaults, then apply `IDSIS_SEED` if `env_seed` is set.
    pub fn resolve(&self, env_seed: Option<&str>) -> Result<RunConfig> {
        let mut all: BTreeMap<String, toml::Value> =
            KEYS.iter().map(|k| (k.name.to_string(), parse_typed(k, k.default).expect("valid default"))).collect();
        all.extend(self.values.clone());
        if let Some(s) = env_seed {
            let v = s
                .trim()
                .parse::<i64>()
                .ok()
                .filter(|v| *v >= 0)
                .ok_or_else(|| Error::Config(format!("{SEED_ENV} must be a non-negative integer, got \"{s}\"")))?;
            all.insert("seed".into(), toml::Value::Integer(v));
        }
        let cfg = from_table(all)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data().validate_toy_or_external()?;
        self.model().validate()?;
        self.train().validate()?;
        if !(self.far_target > 0.0 && self.far_target < 1.0) {
            return Err(Error::Config(format!("far_target must lie in (0, 1), got {}", self.far_target)));
        }
        if self.attack_pairs == 0 || self.fr_epochs == 0 || self.identities < 2 || self.variations == 0 {
            return Err(Error::Config("attack_pairs, fr_epochs and variations must be positive, identities ≥ 2".into()));
        }
        Ok(())
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            resolution: self.resolution,
            seed: self.data_seed,
            identity_count: self.identities,
            variations: self.variations,
            disjoint_identities: true,
            class_names: if self.classes == toy_class_names().len() {
                toy_class_names()
            } else {
                (0..self.classes).map(|c| format!("class{c}")).collect()
            },
        }
    }

    pub fn model(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.resolution, self.classes, self.seed);
        m.d_s = self.d_s;
        m.d_id = self.d_id;
        m.head_count = self.head_count;
        m.self_attention = self.self_attention;
        m
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { fm: self.lambda_fm, prc: self.lambda_prc, id: self.lambda_id }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch,
            lr_g: self.lr_g,
            lr_d: self.lr_d,
            beta1: self.beta1,
            beta2: self.beta2,
            weights: self.weights(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            ..TrainConfig::default()
        }
    }

    pub fn fr(&self, role: FrRole, identity_count: usize) -> FREmbedderConfig {
        let mut c = FREmbedderConfig::for_role(role, self.resolution, identity_count);
        c.epochs = self.fr_epochs;
        c.d_id = self.d_id;
        c.seed = match role {
            FrRole::Train => self.train_fr_seed,
            FrRole::Eval => self.eval_fr_seed,
        };
        c
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Canonical key-value text, loadable with [`ConfigLayers::file_text`].
    pub fn to_text(&self) -> String {
        let v = toml::Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        if let toml::Value::Table(t) = v {
            for k in KEYS {
                if let Some(val) = t.get(k.name) {
                    out.push_str(&format!("{} = {}\n", k.name, val));
                }
            }
        }
        out
    }
}

impl DataConfig {
    fn validate_toy_or_external(&self) -> Result<()> {
        if self.resolution < 32 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!("resolution must be a power of two ≥ 32, got {}", self.resolution)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut l = ConfigLayers::new();
        l.file_text("", "empty").unwrap();
        let c = l.resolve(None).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.lambda_id, 10.0);
        assert_eq!(c.batch, 16);
        assert_eq!(c.iterations, 20_000);
    }

    #[test]
    fn flags_override_file_and_env_overrides_seed() {
        let mut l = ConfigLayers::new();
        l.file_text("lambda_id = 10\nseed = 3\n", "f").unwrap();
        l.set("lambda_id", "0").unwrap();
        let c = l.resolve(None).unwrap();
        assert_eq!(c.lambda_id, 0.0);
        assert_eq!(c.seed, 3);
        assert_eq!(l.resolve(Some("77")).unwrap().seed, 77);
        assert!(l.resolve(Some("x")).is_err());
    }

    #[test]
    fn unknown_key_suggests_closest() {
        let err = ConfigLayers::new().file_text("lamda_id = 1", "f").unwrap_err().to_string();
        assert!(err.contains("\"lambda_id\""), "{err}");
        assert!(err.contains("valid keys"), "{err}");
        assert!(ConfigLayers::new().set("lamda_id", "1").is_err());
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = ConfigLayers::new().file_text("batch = \"big\"", "f").unwrap_err().to_string();
        assert!(err.contains("batch"), "{err}");
        let err = ConfigLayers::new().set("lr_g", "fast").unwrap_err().to_string();
        assert!(err.contains("lr_g"), "{err}");
        // integers are accepted for float keys
        let mut l = ConfigLayers::new();
        l.file_text("lambda_prc = 5", "f").unwrap();
        assert_eq!(l.resolve(None).unwrap().lambda_prc, 5.0);
    }

    #[test]
    fn canonical_text_round_trips_and_hash_is_stable() {
        let mut l = ConfigLayers::new();
        l.set("resolution", "32").unwrap().set("identities", "20").unwrap();
        let c = l.resolve(None).unwrap();
        let mut back = ConfigLayers::new();
        back.file_text(&c.to_text(), "canonical").unwrap();
        let c2 = back.resolve(None).unwrap();
        assert_eq!(c, c2);
        assert_eq!(c.hash(), c2.hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut l = ConfigLayers::new();
        l.set("resolution", "48").unwrap();
        assert!(l.resolve(None).is_err());
        let mut l = ConfigLayers::new();
        l.set("far_target", "1.5").unwrap();
        assert!(l.resolve(None).is_err());
    }
}
