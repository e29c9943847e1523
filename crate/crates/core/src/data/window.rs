use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{MtsDataset, Normalizer, Space, SplitRange};
use crate::tensor::Tensor;
use crate::error::{Error, Result};

/// Window geometry: long history `L`, short segment `L_s`, forecast horizon `T_f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history: usize,
    pub segment: usize,
    pub horizon: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segment == 0 || self.history < self.segment || self.horizon == 0 {
            return Err(Error::Config(format!(
                "window needs L >= L_s >= 1 and T_f >= 1, got L={} L_s={} T_f={}",
                self.history, self.segment, self.horizon
            )));
        }
        Ok(())
    }

    /// Absolute end steps (last history index) of every window inside `split`.
    pub fn end_steps(&self, split: SplitRange) -> Range<usize> {
        let need = self.history + self.horizon;
        if split.len < need {
            return split.start..split.start;
        }
        let first = split.start + self.history - 1;
        first..split.end() - self.horizon
    }

    pub fn windows_per_node(&self, split: SplitRange) -> usize {
        self.end_steps(split).len()
    }
}

/// One training or inference unit for a single node.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `L × C`
    pub long_input: Vec<f64>,
    /// `L_s × C`, the tail of `long_input`.
    pub short_input: Vec<f64>,
    /// `T_f × C`
    pub target: Vec<f64>,
    pub node: usize,
    pub end_step: usize,
}

impl Sample {
    pub fn extract(dataset: &MtsDataset, spec: &WindowSpec, node: usize, end_step: usize) -> Sample {
        let c = dataset.channels();
        let series = |from: usize, len: usize| {
            let mut out = Vec::with_capacity(len * c);
            for t in from..from + len {
                for ch in 0..c {
                    out.push(dataset.get(t, node, ch));
                }
            }
            out
        };
        let start = end_step + 1 - spec.history;
        let long_input = series(start, spec.history);
        let short_input = long_input[(spec.history - spec.segment) * c..].to_vec();
        Sample {
            long_input,
            short_input,
            target: series(end_step + 1, spec.horizon),
            node,
            end_step,
        }
    }
}

/// Lazily materialized windows in `(node, end_step)` order.
pub struct Windows<'a> {
    dataset: &'a MtsDataset,
    spec: WindowSpec,
    steps: Range<usize>,
    node: usize,
    next_step: usize,
    /// Set when the split is too short to hold a single window.
    pub warning: Option<String>,
}

impl Windows<'_> {
    pub fn per_node(&self) -> usize {
        self.steps.len()
    }
}

impl Iterator for Windows<'_> {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        if self.steps.is_empty() {
            return None;
        }
        if self.next_step >= self.steps.end {
            self.node += 1;
            self.next_step = self.steps.start;
        }
        if self.node >= self.dataset.n_nodes() {
            return None;
        }
        let sample = Sample::extract(self.dataset, &self.spec, self.node, self.next_step);
        self.next_step += 1;
        Some(sample)
    }
}

pub fn make_windows(dataset: &MtsDataset, split: SplitRange, spec: WindowSpec) -> Result<Windows<'_>> {
    spec.validate()?;
    if split.end() > dataset.t_steps() {
        return Err(Error::Dimension(format!(
            "split [{}, {}) exceeds {} timesteps",
            split.start,
            split.end(),
            dataset.t_steps()
        )));
    }
    let steps = spec.end_steps(split);
    let warning = steps.is_empty().then(|| {
        let msg = format!(
            "split of {} steps is shorter than L + T_f = {}; no windows",
            split.len,
            spec.history + spec.horizon
        );
        log::warn!("{}", msg);
        msg
    });
    Ok(Windows {
        dataset,
        spec,
        next_step: steps.start,
        steps,
        node: 0,
        warning,
    })
}

/// Every node's window at each of a list of end steps, normalized for the encoder.
///
/// Rows are slice-major, node-minor: row `s·N + n` is node `n` at `end_steps[s]`.
#[derive(Clone, Debug)]
pub struct SliceBatch {
    /// `[rows, L, C]`, normalized.
    pub inputs: Tensor,
    /// `rows × T_f·C`, normalized.
    pub targets: Vec<f64>,
    /// Same layout as `targets`, raw units.
    pub raw_targets: Vec<f64>,
    /// `(node, end_step)` per row.
    pub meta: Vec<(usize, usize)>,
}

impl SliceBatch {
    pub fn gather(
        raw: &MtsDataset,
        normalizer: &Normalizer,
        spec: &WindowSpec,
        end_steps: &[usize],
    ) -> Result<SliceBatch> {
        if raw.space() != Space::Raw {
            return Err(Error::Contract("batches are gathered from raw data".into()));
        }
        let (n, c) = (raw.n_nodes(), raw.channels());
        if normalizer.channels() != c {
            return Err(Error::Dimension(format!(
                "normalizer has {} channels, dataset {}",
                normalizer.channels(),
                c
            )));
        }
        let rows = end_steps.len() * n;
        let mut inputs = Vec::with_capacity(rows * spec.history * c);
        let mut targets = Vec::with_capacity(rows * spec.horizon * c);
        let mut raw_targets = Vec::with_capacity(rows * spec.horizon * c);
        let mut meta = Vec::with_capacity(rows);
        for &end in end_steps {
            if end + 1 < spec.history || end + spec.horizon >= raw.t_steps() {
                return Err(Error::Dimension(format!(
                    "window ending at {} does not fit in {} steps",
                    end,
                    raw.t_steps()
                )));
            }
            for node in 0..n {
                for t in end + 1 - spec.history..=end {
                    for ch in 0..c {
                        inputs.push(normalizer.apply_value(raw.get(t, node, ch), ch));
                    }
                }
                for t in end + 1..=end + spec.horizon {
                    for ch in 0..c {
                        let v = raw.get(t, node, ch);
                        raw_targets.push(v);
                        targets.push(normalizer.apply_value(v, ch));
                    }
                }
                meta.push((node, end));
            }
        }
        Ok(SliceBatch {
            inputs: Tensor::from_parts(vec![rows, spec.history, c], inputs),
            targets,
            raw_targets,
            meta,
        })
    }

    pub fn rows(&self) -> usize {
        self.meta.len()
    }
}
