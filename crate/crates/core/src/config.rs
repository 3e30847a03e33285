//! TOML run configuration shared by every command. The resolved config is
//! serialized back verbatim into each run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, generate_synthetic, Dataset, LabeledSet, SyntheticParams};
use crate::error::{Error, Result};
use crate::evolution::EvolutionConfig;
use crate::model_io;
use crate::network::{ArchSpec, Network};
use crate::objectives::EvalPath;
use crate::pipeline::{GroupPlan, PruneConfig};
use crate::train::FineTuneConfig;

pub const TOY_FEATURES: &str = "8,16,M,16,16,M";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSource {
    Vgg14 {
        #[serde(default)]
        seed: u64,
    },
    ToyCnn {
        #[serde(default)]
        seed: u64,
        #[serde(default = "toy_features")]
        features: String,
    },
    /// A model directory written by `save_model`.
    Path { path: PathBuf },
}

fn toy_features() -> String {
    TOY_FEATURES.to_string()
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::ToyCnn {
            seed: 0,
            features: toy_features(),
        }
    }
}

impl ModelSource {
    /// Builds or loads the network; built-in architectures take their input
    /// geometry and class count from `data`.
    pub fn load(&self, data: &Dataset) -> Result<Network> {
        let s = data.train.images.shape();
        self.load_for(([s[1], s[2], s[3]], data.classes))
    }

    /// Same as [`ModelSource::load`] given `(input shape, classes)` directly.
    pub fn load_for(&self, (input, classes): ([usize; 3], usize)) -> Result<Network> {
        match self {
            ModelSource::Vgg14 { seed } => ArchSpec {
                input,
                classes,
                ..ArchSpec::vgg14()
            }
            .build(*seed),
            ModelSource::ToyCnn { seed, features } => ArchSpec {
                input,
                features: features.clone(),
                classes,
            }
            .build(*seed),
            ModelSource::Path { path } => model_io::load_model(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Cifar10Binary {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        /// Keep only the first `limit` records of each split.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
    Synthetic(SyntheticParams),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticParams::default())
    }
}

fn truncate(set: LabeledSet, limit: Option<usize>) -> Result<LabeledSet> {
    match limit {
        Some(n) if n < set.len() => set.subset(&(0..n).collect::<Vec<_>>()),
        _ => Ok(set),
    }
}

impl DatasetSource {
    /// Per-sample image shape and class count, without loading anything.
    pub fn geometry(&self) -> ([usize; 3], usize) {
        match self {
            DatasetSource::Cifar10Binary { .. } => ([3, 32, 32], 10),
            DatasetSource::Synthetic(p) => ([p.channels, p.height, p.width], p.classes),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Cifar10Binary { train, test, limit } => Ok(Dataset {
                train: truncate(data::load_cifar10_files(train)?, *limit)?,
                test: truncate(data::load_cifar10_files(test)?, *limit)?,
                classes: 10,
            }),
            DatasetSource::Synthetic(p) => generate_synthetic(p),
        }
    }
}

fn default_train() -> FineTuneConfig {
    FineTuneConfig {
        epochs: 16,
        milestones: vec![10],
        ..FineTuneConfig::desk()
    }
}

fn yes() -> bool {
    true
}

fn default_calibration() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Per-channel normalization from training-split statistics.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "default_calibration")]
    pub calibration_size: usize,
    #[serde(default)]
    pub eval_path: EvalPath,
    /// Root under which run directories are created.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<GroupPlan>,
    #[serde(default)]
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub finetune: FineTuneConfig,
    /// Schedule used by the `train` command.
    #[serde(default = "default_train")]
    pub train: FineTuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            calibration_size: default_calibration(),
            eval_path: EvalPath::Gram,
            output_dir: None,
            model: ModelSource::default(),
            dataset: DatasetSource::default(),
            plan: None,
            evolution: EvolutionConfig::default(),
            finetune: FineTuneConfig::desk(),
            train: default_train(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.prune_config().validate()?;
        self.train.validate()
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            evolution: self.evolution.clone(),
            finetune: self.finetune.clone(),
            calibration_size: self.calibration_size,
            eval_path: self.eval_path,
        }
    }

    pub fn plan(&self) -> Result<&GroupPlan> {
        self.plan
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [plan] section".into()))
    }

    /// Loads the dataset and applies normalization if enabled.
    pub fn dataset(&self) -> Result<Dataset> {
        let mut d = self.dataset.load()?;
        if self.normalize {
            data::normalize_dataset(&mut d)?;
        }
        Ok(d)
    }

    /// Sets every seed in the config to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.evolution.seed = seed;
        self.finetune.seed = seed;
        self.train.seed = seed;
        match &mut self.model {
            ModelSource::Vgg14 { seed: s } | ModelSource::ToyCnn { seed: s, .. } => *s = seed,
            ModelSource::Path { .. } => {}
        }
        if let DatasetSource::Synthetic(p) = &mut self.dataset {
            p.seed = seed;
        }
    }
}
