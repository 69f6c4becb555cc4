//! Experiment configuration: a flat `key = value` text format with `#`
//! comments, defaults for every field, and strict rejection of unknown keys.
//! CLI flags override file values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{DcmError, Result};
use crate::heads::HeadKind;
use crate::masking::{MaskInterval, MaskStage, MaskStrategy, MaskingPolicy};
use crate::noise::{cifar10_pair_map, consecutive_groups, NoiseKind, NoiseSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Mae,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Mae => "mae",
        }
    }
}

impl FromStr for LossKind {
    type Err = DcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "mae" => Ok(LossKind::Mae),
            other => Err(DcmError::InvalidParameter(format!(
                "unknown loss `{other}` (expected ce or mae)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }
}

impl FromStr for Schedule {
    type Err = DcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(DcmError::InvalidParameter(format!(
                "unknown schedule `{other}` (expected constant or cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // dataset
    pub classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub spread: f64,
    pub test_fraction: f64,
    // backbone
    pub hidden_dim: usize,
    pub feature_dim: usize,
    // noise ("none" disables corruption)
    pub noise_kind: Option<NoiseKind>,
    pub noise_rate: f64,
    pub noise_pairs: BTreeMap<usize, usize>,
    pub noise_group_size: usize,
    // head and loss
    pub head: HeadKind,
    pub loss: LossKind,
    // masking
    pub mask_enabled: bool,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub mask_interval: MaskInterval,
    pub mask_stage: MaskStage,
    // optimizer
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    // run
    pub seed: u64,
    pub data_seed: u64,
    pub out_dir: String,
    pub instrument: bool,
    pub dump_dataset: bool,
}

impl Default for ExperimentConfig {
    /// The standard noisy-blobs experiment: a minutes-scale run that shows
    /// clear memorization of 60% symmetric noise when masking is off.
    fn default() -> Self {
        ExperimentConfig {
            classes: 10,
            samples_per_class: 200,
            input_dim: 8,
            separation: 4.0,
            spread: 1.0,
            test_fraction: 0.2,
            hidden_dim: 32,
            feature_dim: 16,
            noise_kind: Some(NoiseKind::Symmetric),
            noise_rate: 0.6,
            noise_pairs: BTreeMap::new(),
            noise_group_size: 5,
            head: HeadKind::Mlp,
            loss: LossKind::Ce,
            mask_enabled: true,
            mask_strategy: MaskStrategy::NodeWise,
            mask_ratio: 0.6,
            mask_interval: MaskInterval::PerIteration,
            mask_stage: MaskStage::TrainOnly,
            learning_rate: 0.05,
            schedule: Schedule::Cosine,
            epochs: 60,
            batch_size: 64,
            seed: 1,
            data_seed: 7,
            out_dir: String::new(),
            instrument: true,
            dump_dataset: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DcmError::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(DcmError::Config(format!(
            "cannot parse `{other}` as a boolean for key `{key}`"
        ))),
    }
}

fn parse_pairs(value: &str) -> Result<BTreeMap<usize, usize>> {
    let mut map = BTreeMap::new();
    if value.trim().is_empty() {
        return Ok(map);
    }
    for entry in value.split(',') {
        let (src, dst) = entry.trim().split_once(':').ok_or_else(|| {
            DcmError::Config(format!("pair entry `{entry}` must look like `src:dst`"))
        })?;
        let src: usize = parse("noise_pairs", src.trim())?;
        let dst: usize = parse("noise_pairs", dst.trim())?;
        map.insert(src, dst);
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DcmError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Set a field by its config key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "classes" => self.classes = parse(key, value)?,
            "samples_per_class" => self.samples_per_class = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "separation" => self.separation = parse(key, value)?,
            "spread" => self.spread = parse(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "noise_kind" => {
                self.noise_kind = match value {
                    "none" => None,
                    other => Some(other.parse()?),
                }
            }
            "noise_rate" => self.noise_rate = parse(key, value)?,
            "noise_pairs" => self.noise_pairs = parse_pairs(value)?,
            "noise_group_size" => self.noise_group_size = parse(key, value)?,
            "head" => {
                self.head = match value {
                    "mlp" => HeadKind::Mlp,
                    "kan" => HeadKind::Kan,
                    other => {
                        return Err(DcmError::Config(format!(
                            "unknown head `{other}` (expected mlp or kan)"
                        )))
                    }
                }
            }
            "loss" => self.loss = value.parse()?,
            "mask_enabled" => self.mask_enabled = parse_bool(key, value)?,
            "mask_strategy" => self.mask_strategy = value.parse()?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "mask_interval" => self.mask_interval = value.parse()?,
            "mask_stage" => self.mask_stage = value.parse()?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "instrument" => self.instrument = parse_bool(key, value)?,
            "dump_dataset" => self.dump_dataset = parse_bool(key, value)?,
            other => {
                return Err(DcmError::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DcmError::Config(msg));
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.samples_per_class < 2 {
            return fail(format!(
                "samples_per_class must be >= 2, got {}",
                self.samples_per_class
            ));
        }
        if self.input_dim < 1 || self.hidden_dim < 1 || self.feature_dim < 1 {
            return fail("network dimensions must be >= 1".into());
        }
        if !(self.separation > 0.0) || !(self.spread > 0.0) {
            return fail("separation and spread must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            ));
        }
        if self.noise_kind.is_some() && !(self.noise_rate > 0.0 && self.noise_rate < 1.0) {
            return fail(format!(
                "noise_rate must lie in (0, 1), got {}",
                self.noise_rate
            ));
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.mask_enabled {
            if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
                return fail(format!(
                    "mask_ratio must lie strictly inside (0, 1), got {}",
                    self.mask_ratio
                ));
            }
            // Importance scores from a single sample are degenerate (all
            // zero), so masking needs at least two samples per batch.
            if self.batch_size < 2 {
                return fail("batch_size must be >= 2 when masking is enabled".into());
            }
            if self.mask_strategy == MaskStrategy::ByWeight && self.head == HeadKind::Kan {
                return fail(
                    "by_weight masking ranks scalar edge weights and is only defined for the mlp head"
                        .into(),
                );
            }
        }
        Ok(())
    }

    pub fn masking_policy(&self) -> MaskingPolicy {
        MaskingPolicy {
            enabled: self.mask_enabled,
            strategy: self.mask_strategy,
            ratio: self.mask_ratio,
            interval: self.mask_interval,
            stage: self.mask_stage,
        }
    }

    /// Build the noise spec, or `None` for clean training. The default pair
    /// map is the CIFAR-10 table when the class count matches; otherwise
    /// pairs must be given explicitly.
    pub fn noise_spec(&self, seed: u64) -> Result<Option<NoiseSpec>> {
        let kind = match self.noise_kind {
            Some(k) => k,
            None => return Ok(None),
        };
        let mut spec = NoiseSpec {
            kind,
            rate: self.noise_rate,
            pair_map: BTreeMap::new(),
            groups: Vec::new(),
            seed,
        };
        match kind {
            NoiseKind::Symmetric => {}
            NoiseKind::AsymmetricPairs => {
                spec.pair_map = if self.noise_pairs.is_empty() {
                    if self.classes == 10 {
                        cifar10_pair_map()
                    } else {
                        return Err(DcmError::Config(format!(
                            "asymmetric_pairs with {} classes needs an explicit noise_pairs map",
                            self.classes
                        )));
                    }
                } else {
                    self.noise_pairs.clone()
                };
            }
            NoiseKind::AsymmetricCircular => {
                spec.groups = consecutive_groups(self.classes, self.noise_group_size)?;
            }
        }
        Ok(Some(spec))
    }

    /// Serialize the effective configuration back to the text format.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("classes", self.classes.to_string());
        kv("samples_per_class", self.samples_per_class.to_string());
        kv("input_dim", self.input_dim.to_string());
        kv("separation", self.separation.to_string());
        kv("spread", self.spread.to_string());
        kv("test_fraction", self.test_fraction.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv(
            "noise_kind",
            self.noise_kind.map_or("none", |k| k.as_str()).to_string(),
        );
        kv("noise_rate", self.noise_rate.to_string());
        kv(
            "noise_pairs",
            self.noise_pairs
                .iter()
                .map(|(a, b)| format!("{a}:{b}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("noise_group_size", self.noise_group_size.to_string());
        kv("head", self.head.as_str().to_string());
        kv("loss", self.loss.as_str().to_string());
        kv("mask_enabled", self.mask_enabled.to_string());
        kv("mask_strategy", self.mask_strategy.as_str().to_string());
        kv("mask_ratio", self.mask_ratio.to_string());
        kv("mask_interval", self.mask_interval.as_str().to_string());
        kv("mask_stage", self.mask_stage.as_str().to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("schedule", self.schedule.as_str().to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("out_dir", self.out_dir.clone());
        kv("instrument", self.instrument.to_string());
        kv("dump_dataset", self.dump_dataset.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_config_string();
        let parsed = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = ExperimentConfig::parse_str(
            "# a comment\n\nepochs = 5  # trailing comment\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::parse_str("no_such_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn bad_value_rejected() {
        assert!(ExperimentConfig::parse_str("epochs = soon\n").is_err());
        assert!(ExperimentConfig::parse_str("mask_strategy = psychic\n").is_err());
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut cfg = ExperimentConfig::default();
        cfg.mask_ratio = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err()); // masking enabled needs B >= 2
        cfg.mask_enabled = false;
        cfg.validate().unwrap();

        let mut cfg = ExperimentConfig::default();
        cfg.noise_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg.noise_kind = None;
        cfg.validate().unwrap();
    }

    #[test]
    fn pair_map_parsing() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("noise_pairs", "3:5, 9:1").unwrap();
        assert_eq!(cfg.noise_pairs, BTreeMap::from([(3, 5), (9, 1)]));
        assert!(cfg.set("noise_pairs", "3-5").is_err());
    }

    #[test]
    fn default_pair_map_only_for_ten_classes() {
        let mut cfg = ExperimentConfig::default();
        cfg.noise_kind = Some(NoiseKind::AsymmetricPairs);
        assert!(cfg.noise_spec(0).unwrap().is_some());
        cfg.classes = 7;
        assert!(cfg.noise_spec(0).is_err());
    }

    #[test]
    fn by_weight_with_kan_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.head = HeadKind::Kan;
        cfg.mask_strategy = MaskStrategy::ByWeight;
        assert!(cfg.validate().is_err());
    }
}
