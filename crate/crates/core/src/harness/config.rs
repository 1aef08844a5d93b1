use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::PathBuf;

use crate::error::{Result, ShedError};
use crate::homogenize::TextCentering;
use crate::inference::InferenceConfig;
use crate::synthgen::GenConfig;
use crate::trainer::{Alignment, CentroidUpdate, TrainConfig};

/// Where the embeddings come from. Without file paths a synthetic benchmark is
/// generated, reseeded per experiment seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub text: Option<PathBuf>,
    pub synthetic: GenConfig,
}

impl DataConfig {
    pub fn uses_files(&self) -> bool {
        self.train.is_some() || self.test.is_some() || self.text.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_files() && (self.train.is_none() || self.test.is_none() || self.text.is_none()) {
            return Err(ShedError::InvalidConfig(
                "data.train, data.test and data.text must be given together".into(),
            ));
        }
        if !self.uses_files() {
            self.synthetic.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_sh_alignment: bool,
    pub no_reg: bool,
    pub no_fusion: bool,
    pub no_additional_centroids: bool,
    pub no_cpm: bool,
    pub no_swm: bool,
    pub ema_centroids: bool,
    pub single_template_centering: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 8] = [
        "no_sh_alignment",
        "no_reg",
        "no_fusion",
        "no_additional_centroids",
        "no_cpm",
        "no_swm",
        "ema_centroids",
        "single_template_centering",
    ];

    fn slots(&mut self) -> [&mut bool; 8] {
        [
            &mut self.no_sh_alignment,
            &mut self.no_reg,
            &mut self.no_fusion,
            &mut self.no_additional_centroids,
            &mut self.no_cpm,
            &mut self.no_swm,
            &mut self.ema_centroids,
            &mut self.single_template_centering,
        ]
    }

    pub fn only(name: &str) -> Result<Self> {
        let mut flags = AblationFlags::default();
        let i = Self::NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| ShedError::InvalidConfig(format!("unknown ablation {name:?}")))?;
        *flags.slots()[i] = true;
        Ok(flags)
    }

    /// Names of the set flags, in canonical order.
    pub fn enabled(&self) -> Vec<&'static str> {
        let mut copy = *self;
        Self::NAMES
            .iter()
            .zip(copy.slots())
            .filter(|(_, on)| **on)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn label(&self) -> String {
        let on = self.enabled();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    /// Whether these flags change the trained adapter.
    pub fn affects_training(&self) -> bool {
        self.no_sh_alignment || self.no_reg || self.ema_centroids || self.single_template_centering
    }

    pub fn apply_train(&self, base: &TrainConfig, ema_momentum: f64) -> TrainConfig {
        let mut cfg = base.clone();
        if self.no_sh_alignment {
            cfg.alignment = Alignment::Direct;
        }
        if self.no_reg {
            cfg.reg_weight = 0.0;
        }
        if self.ema_centroids {
            cfg.centroid_update = CentroidUpdate::Ema { momentum: ema_momentum };
        }
        cfg
    }

    pub fn apply_inference(&self, base: &InferenceConfig) -> InferenceConfig {
        let mut cfg = base.clone();
        if self.no_fusion {
            cfg.fusion = false;
        }
        if self.no_additional_centroids {
            cfg.additional_centroids = false;
        }
        if self.no_cpm {
            cfg.cpm = false;
        }
        if self.no_swm {
            cfg.swm = false;
        }
        cfg
    }

    pub fn text_centering(&self) -> TextCentering {
        if self.single_template_centering {
            TextCentering::GenericTemplate
        } else {
            TextCentering::SourceTemplates
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    /// Flags applied jointly to single runs (`train`, `eval`); the ablation
    /// suite instead runs each set flag as its own variant.
    pub ablations: AblationFlags,
    pub ema_momentum: f64,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            ablations: AblationFlags::default(),
            ema_momentum: 0.99,
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ShedError::InvalidConfig("at least one seed is required".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(ShedError::InvalidConfig("ema_momentum must lie in [0, 1]".into()));
        }
        self.data.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.ablations.apply_train(&self.train, self.ema_momentum).validate()
    }

    /// Train and inference configs for one seed with `flags` applied.
    pub fn resolved(&self, flags: &AblationFlags, seed: u64) -> (TrainConfig, InferenceConfig) {
        let mut train = flags.apply_train(&self.train, self.ema_momentum);
        train.seed = seed;
        let mut inference = flags.apply_inference(&self.inference);
        inference.seed = seed;
        (train, inference)
    }
}

/// Parses `--a.b value` / `--a.b=value` pairs. Values that parse as JSON are
/// used as such, anything else as a string.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| ShedError::InvalidConfig(format!("expected --dotted.name, got {arg:?}")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| ShedError::InvalidConfig(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.push((key, value));
    }
    Ok(out)
}

/// Sets `value` at the dotted `path` of a serialized config. The path must
/// already exist, so typos are rejected rather than silently ignored.
pub fn apply_override(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| ShedError::InvalidConfig(format!("{path}: {} is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| ShedError::InvalidConfig(format!("unknown config field {path:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cursor = slot;
    }
    Err(ShedError::InvalidConfig("empty override path".into()))
}

/// Loads a config document (or the defaults), applies overrides, and
/// deserializes into `T`.
pub fn resolve_config<T>(base: Option<Value>, overrides: &[(String, Value)]) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de> + Default,
{
    // round trip through the defaults so every field has a slot
    let mut doc = serde_json::to_value(T::default())?;
    if let Some(base) = base {
        let parsed: T = serde_json::from_value(base).map_err(|e| ShedError::InvalidConfig(e.to_string()))?;
        doc = serde_json::to_value(parsed)?;
    }
    for (k, v) in overrides {
        apply_override(&mut doc, k, v.clone())?;
    }
    serde_json::from_value(doc).map_err(|e| ShedError::InvalidConfig(e.to_string()))
}

/// SHA-256 of the canonical JSON form (object keys sorted).
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&value)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_both_forms() {
        let args: Vec<String> = ["--train.tau", "0.2", "--inference.fusion=false", "--output_dir", "out"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let parsed = parse_overrides(&args).unwrap();
        assert_eq!(parsed[0], ("train.tau".into(), serde_json::json!(0.2)));
        assert_eq!(parsed[1], ("inference.fusion".into(), Value::Bool(false)));
        assert_eq!(parsed[2], ("output_dir".into(), Value::String("out".into())));
    }

    #[test]
    fn overrides_apply_and_reject_unknown() {
        let ov = parse_overrides(&["--train.tau".into(), "0.2".into(), "--seeds".into(), "[1,2]".into()]).unwrap();
        let cfg: ExperimentConfig = resolve_config(None, &ov).unwrap();
        assert_eq!(cfg.train.tau, 0.2);
        assert_eq!(cfg.seeds, vec![1, 2]);

        let bad = parse_overrides(&["--train.taux".into(), "0.2".into()]).unwrap();
        assert!(resolve_config::<ExperimentConfig>(None, &bad).is_err());
        let bad = parse_overrides(&["--train.tau".into(), "\"x\"".into()]).unwrap();
        assert!(resolve_config::<ExperimentConfig>(None, &bad).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.train.tau = 0.2;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn flags_round_trip_by_name() {
        for name in AblationFlags::NAMES {
            let f = AblationFlags::only(name).unwrap();
            assert_eq!(f.enabled(), vec![name]);
            assert_eq!(f.label(), name);
        }
        assert_eq!(AblationFlags::default().label(), "full");
        assert!(AblationFlags::only("nope").is_err());
    }

    #[test]
    fn flags_compose() {
        let flags = AblationFlags {
            no_fusion: true,
            no_cpm: true,
            no_reg: true,
            ..Default::default()
        };
        let base = ExperimentConfig::default();
        let (t, i) = base.resolved(&flags, 7);
        assert_eq!(t.reg_weight, 0.0);
        assert_eq!(t.seed, 7);
        assert!(!i.fusion && !i.cpm && i.swm);
        assert_eq!(flags.label(), "no_reg+no_fusion+no_cpm");
    }
}
