//! Dataset ingestion, normalization, chronological splits and sliding windows.

mod io;
mod synth;
mod window;

pub use io::{load_dataset, save_csv, save_kmtsbin, DatasetFormat};
pub use synth::{synth_generate, MotifInstance, SynthConfig, SynthDataset};
pub use window::{make_windows, Sample, SliceBatch, WindowSpec, Windows};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether an array holds raw measurements or z-scored values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    Raw,
    Normalized,
}

/// A `T × N × C` panel of co-evolving series.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsDataset {
    pub name: String,
    pub node_ids: Vec<String>,
    pub sample_rate_minutes: u32,
    t_steps: usize,
    channels: usize,
    values: Vec<f64>,
    space: Space,
}

impl MtsDataset {
    /// Builds a raw-space dataset from `(t, n, c)`-ordered values.
    pub fn new(
        name: impl Into<String>,
        node_ids: Vec<String>,
        channels: usize,
        sample_rate_minutes: u32,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "dataset needs N >= 1 and C >= 1, got N={} C={}",
                n, channels
            )));
        }
        if sample_rate_minutes == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if values.is_empty() || values.len() % (n * channels) != 0 {
            return Err(Error::Dimension(format!(
                "{} values do not tile T x {} x {}",
                values.len(),
                n,
                channels
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let row = pos / (n * channels);
            return Err(Error::Degenerate(format!(
                "non-finite value at timestep {} column {}",
                row,
                pos % (n * channels)
            )));
        }
        Ok(MtsDataset {
            name: name.into(),
            t_steps: values.len() / (n * channels),
            node_ids,
            channels,
            sample_rate_minutes,
            values,
            space: Space::Raw,
        })
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn space(&self) -> Space {
        self.space
    }

    /// All values in `(t, n, c)` order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, node: usize, channel: usize) -> f64 {
        self.values[(t * self.n_nodes() + node) * self.channels + channel]
    }
}

/// Ratios of the chronological train/validation/test split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        SplitSpec { train, val, test }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r > 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be positive and sum to 1, got {:?}",
                parts
            )));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::new(0.6, 0.2, 0.2)
    }
}

/// A contiguous half-open range of timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRange {
    pub start: usize,
    pub len: usize,
}

impl SplitRange {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Train/validation/test ranges: validation and test lengths are floored,
/// training keeps the remainder.
pub fn chronological_split(t_steps: usize, spec: &SplitSpec) -> Result<[SplitRange; 3]> {
    spec.validate()?;
    let val = (t_steps as f64 * spec.val).floor() as usize;
    let test = (t_steps as f64 * spec.test).floor() as usize;
    let train = t_steps - val - test;
    Ok([
        SplitRange { start: 0, len: train },
        SplitRange { start: train, len: val },
        SplitRange {
            start: train + val,
            len: test,
        },
    ])
}

/// Per-channel z-score fit on a training range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(dataset: &MtsDataset, train: SplitRange) -> Result<Self> {
        if dataset.space != Space::Raw {
            return Err(Error::Contract("normalizer must be fit on raw data".into()));
        }
        let c = dataset.channels;
        let n = dataset.n_nodes();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let count = (train.len * n) as f64;
        if count == 0.0 {
            return Err(Error::Degenerate("empty training split".into()));
        }
        for t in train.start..train.end() {
            for node in 0..n {
                for ch in 0..c {
                    mean[ch] += dataset.get(t, node, ch);
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for t in train.start..train.end() {
            for node in 0..n {
                for ch in 0..c {
                    let d = dataset.get(t, node, ch) - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count).sqrt()).collect();
        if let Some(ch) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::Degenerate(format!(
                "channel {} has zero standard deviation on the training split",
                ch
            )));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn apply_value(&self, v: f64, channel: usize) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    #[inline]
    pub fn inverse_value(&self, v: f64, channel: usize) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }

    /// Z-scores a raw dataset.
    pub fn apply(&self, dataset: &MtsDataset) -> Result<MtsDataset> {
        self.transform(dataset, Space::Raw, Space::Normalized, |v, c| self.apply_value(v, c))
    }

    pub fn inverse(&self, dataset: &MtsDataset) -> Result<MtsDataset> {
        self.transform(dataset, Space::Normalized, Space::Raw, |v, c| self.inverse_value(v, c))
    }

    fn transform(
        &self,
        dataset: &MtsDataset,
        from: Space,
        to: Space,
        f: impl Fn(f64, usize) -> f64,
    ) -> Result<MtsDataset> {
        if dataset.space != from {
            return Err(Error::Contract(format!(
                "expected {:?} data, got {:?}",
                from, dataset.space
            )));
        }
        if dataset.channels != self.channels() {
            return Err(Error::Dimension(format!(
                "normalizer has {} channels, dataset {}",
                self.channels(),
                dataset.channels
            )));
        }
        let c = dataset.channels;
        let values = dataset
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, i % c))
            .collect();
        Ok(MtsDataset {
            values,
            space: to,
            ..dataset.clone()
        })
    }
}
