//! Run configuration: one TOML file holding every tunable, plus flag overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use cat_core::bench::{DEFAULT_ITERS, DEFAULT_WARMUP};
use cat_core::cat::StreamMode;
use cat_core::data::protocol::DEFAULT_QUERIES_PER_TARGET;
use cat_core::data::{DatasetConfig, SampleSplit};
use cat_core::detector::DetectorConfig;
use cat_core::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub queries_per_target: usize,
    /// Also evaluate the unseen split after every training epoch.
    pub log_epoch_ap: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            queries_per_target: DEFAULT_QUERIES_PER_TARGET,
            log_epoch_ap: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub warmup: usize,
    pub iters: usize,
    pub seeds: Vec<u64>,
    pub splits: Vec<SampleSplit>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            warmup: DEFAULT_WARMUP,
            iters: DEFAULT_ITERS,
            seeds: vec![0, 1, 2],
            splits: vec![SampleSplit::Unseen],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for weight initialization and epoch shuffling.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// The desk configuration shipped with the binary.
pub const DESK_TOML: &str = include_str!("../configs/desk.toml");

impl RunConfig {
    pub fn desk() -> Self {
        Self::from_toml(DESK_TOML).expect("bundled desk config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        if self.dataset.image_size != self.detector.image_size {
            return Err(CliError::Usage(format!(
                "dataset image_size {} differs from detector image_size {}",
                self.dataset.image_size, self.detector.image_size
            )));
        }
        if self.eval.queries_per_target == 0 {
            return Err(CliError::Usage("eval.queries_per_target must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the resolved configuration, embedded in every output.
    pub fn hash(&self) -> String {
        cat_core::bench::config_hash(self).expect("run config serializes")
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<StreamMode>,
    pub layers: Option<usize>,
    pub d_model: Option<usize>,
}

/// What `--seed` controls for a given command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedTarget {
    Dataset,
    Model,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig, seed_target: SeedTarget) -> Result<(), CliError> {
        if let Some(s) = self.seed {
            match seed_target {
                SeedTarget::Dataset => cfg.dataset.seed = s,
                SeedTarget::Model => cfg.seed = s,
            }
        }
        if let Some(m) = self.mode {
            cfg.detector.cat.mode = m;
        }
        if let Some(n) = self.layers {
            cfg.detector.cat.layers = n;
        }
        if let Some(d) = self.d_model {
            cfg.detector.cat.d_model = d;
            cfg.detector.cat.d_ff = 4 * d;
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trips_through_toml() {
        let cfg = RunConfig::desk();
        assert_eq!(cfg.detector.cat.d_model, 64);
        assert_eq!(cfg.detector.cat.heads, 4);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = RunConfig::from_toml("seed = 1\nlearning_rate = 3\n").unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        let err = RunConfig::from_toml("[train]\nepochs = 2\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::desk();
        let o = Overrides {
            seed: Some(9),
            mode: Some(StreamMode::OneStream),
            layers: Some(6),
            d_model: Some(128),
        };
        o.apply(&mut cfg, SeedTarget::Model).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.detector.cat.layers, 6);
        assert_eq!((cfg.detector.cat.d_model, cfg.detector.cat.d_ff), (128, 512));
        assert_eq!(cfg.detector.cat.mode, StreamMode::OneStream);
        assert_ne!(cfg.hash(), RunConfig::desk().hash());
    }

    #[test]
    fn bad_width_is_rejected() {
        let mut cfg = RunConfig::desk();
        let o = Overrides {
            d_model: Some(30),
            ..Overrides::default()
        };
        assert!(o.apply(&mut cfg, SeedTarget::Model).is_err());
    }
}
