use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kmts::data::SplitSpec;
use kmts::encoder::EncoderConfig;
use kmts::forecaster::ForecastConfig;
use kmts::trainer::TrainConfig;
use kmts::{Error, Result};

/// Name of the resolved-config echo inside a run directory.
pub const RESOLVED: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `.csv` or `.kmtsbin` panel.
    pub path: PathBuf,
    /// Optional adjacency (dense CSV or edge list).
    pub graph: Option<PathBuf>,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("data.kmtsbin"),
            graph: None,
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    /// Fraction of training windows kept.
    pub fraction: f64,
    /// Seed of the subsample.
    pub seed: u64,
    /// Time slices encoded per forward pass.
    pub batch_slices: usize,
    /// Lists of the inverted-file sidecar; none is written when zero.
    pub ivf_lists: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            fraction: 1.0,
            seed: 0,
            batch_slices: 16,
            ivf_lists: 0,
        }
    }
}

/// Everything a run reads; every value has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run directory name under `runs/`.
    pub name: String,
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub store: StoreConfig,
    pub forecast: ForecastConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.forecast.validate()?;
        let s = &self.store;
        if !(s.fraction > 0.0 && s.fraction <= 1.0) {
            return Err(Error::Config(format!("store fraction {} outside (0, 1]", s.fraction)));
        }
        if s.batch_slices == 0 {
            return Err(Error::Config("store batch_slices must be positive".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        let name = if self.name.is_empty() { "default" } else { &self.name };
        Path::new("runs").join(name)
    }
}
