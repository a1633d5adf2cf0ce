//! Run configuration: a TOML file with command-line overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vnnet_core::data::SplitConfig;
use vnnet_core::interpretation::{AttributionNorm, DEFAULT_M_STEPS};
use vnnet_core::training::TrainConfig;
use vnnet_ingest::{Region, SplitName, SynthConfig, TargetFactor};

use crate::CliError;

/// Dataset name that synthesizes the micro fixture into the run directory.
pub const SYNTHETIC_MICRO: &str = "synthetic-micro";
pub const DATA_ROOT_ENV: &str = "VNNET_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeConfig {
    pub m_steps: usize,
    /// Windows averaged into the report, spread evenly over the split.
    pub windows: usize,
    pub norm: AttributionNorm,
    /// Vision-free checkpoint compared against for the modal deltas.
    pub uni_checkpoint: Option<PathBuf>,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            m_steps: DEFAULT_M_STEPS,
            windows: 16,
            norm: AttributionNorm::Nodes,
            uni_checkpoint: None,
        }
    }
}

/// Everything a subcommand reads. The top-level `seed` is copied into the
/// training and synthesis sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub region: Option<Region>,
    /// Dataset directory, or `synthetic-micro`.
    pub dataset: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Split scored by `eval` and attributed by `attribute`.
    pub split: SplitName,
    pub synth: Option<SynthConfig>,
    pub train: TrainConfig,
    pub attribute: AttributeConfig,
    /// Set when the file or flags chose a split, so the dataset's region
    /// does not pick one.
    #[serde(skip)]
    pub split_given: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            region: None,
            dataset: None,
            checkpoint: None,
            out: None,
            split: SplitName::Test,
            synth: None,
            train: TrainConfig::default(),
            attribute: AttributeConfig::default(),
            split_given: false,
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub region: Option<Region>,
    pub factor: Option<TargetFactor>,
    pub dataset: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: Option<SplitName>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?;
                let split_given = table
                    .get("train")
                    .and_then(|t| t.as_table())
                    .is_some_and(|t| t.contains_key("split"));
                let mut cfg: RunConfig = table
                    .try_into()
                    .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?;
                cfg.split_given = split_given;
                cfg
            }
        };
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if flags.region.is_some() {
            cfg.region = flags.region;
        }
        if let Some(f) = flags.factor {
            cfg.train.factor = f;
        }
        if flags.dataset.is_some() {
            cfg.dataset.clone_from(&flags.dataset);
        }
        if flags.checkpoint.is_some() {
            cfg.checkpoint.clone_from(&flags.checkpoint);
        }
        if flags.out.is_some() {
            cfg.out.clone_from(&flags.out);
        }
        if let Some(s) = flags.split {
            cfg.split = s;
        }
        cfg.train.seed = cfg.seed;
        if let Some(s) = cfg.synth.as_mut() {
            s.seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn synth_config(&self) -> SynthConfig {
        self.synth.unwrap_or_else(|| SynthConfig::micro(self.seed))
    }

    /// Picks the split from the dataset's region unless one was configured.
    pub fn settle_split(&mut self, region: Region) {
        if !self.split_given {
            self.train.split = match region {
                Region::Synthetic => SplitConfig::Fractions {
                    train: 0.7,
                    validation: 0.15,
                },
                _ => SplitConfig::observational(),
            };
            self.split_given = true;
        }
    }

    /// Dataset location: the configured value, else `$VNNET_DATA_ROOT/<region>`.
    pub fn dataset_source(&self) -> Result<DatasetSource, CliError> {
        if let Some(d) = &self.dataset {
            return Ok(if d == SYNTHETIC_MICRO {
                DatasetSource::SyntheticMicro
            } else {
                DatasetSource::Dir(PathBuf::from(d))
            });
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => {
                let region = self.region.unwrap_or(Region::Synthetic);
                Ok(DatasetSource::Dir(PathBuf::from(root).join(region.to_string())))
            }
            None => Err(CliError::Input(format!("missing --dataset and {DATA_ROOT_ENV} is not set"))),
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Input(format!("cannot serialize config: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    SyntheticMicro,
    Dir(PathBuf),
}
