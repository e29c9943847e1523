//! Retrieval-augmented forecasting: query encoding, neighbor weighting,
//! distance-adaptive interpolation, and neighbor dumps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MtsDataset, Normalizer};
use crate::datastore::{build_ivf, knn_exact, knn_exact_batch, knn_exact_filtered, Datastore, EntryMeta, IvfIndex, Neighbors};
use crate::encoder::{Checkpoint, Encoded, KeyTap};
use crate::error::{Error, Result};
use crate::graph::DependencyGraph;
pub use crate::metrics::{evaluate, EvalReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Exact,
    Ivf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Softmax temperature over negative distances.
    pub temperature: f64,
    /// Scale of the interpolation coefficient.
    pub alpha: f64,
    pub index: IndexKind,
    /// Lists of an index built on the fly.
    pub ivf_lists: usize,
    /// Lists probed; the index default when absent.
    pub n_probe: Option<usize>,
    pub key_tap: KeyTap,
    /// Skip the store entry cut from the query's own window.
    pub exclude_self: bool,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            k: 50,
            temperature: 1.0,
            alpha: 0.2,
            index: IndexKind::Exact,
            ivf_lists: 256,
            n_probe: None,
            key_tap: KeyTap::FusionOutput,
            exclude_self: false,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if self.ivf_lists == 0 || self.n_probe == Some(0) {
            return Err(Error::Config("ivf lists and probes must be positive".into()));
        }
        Ok(())
    }
}

/// Softmax of `-d / τ`, shifted by the maximum for stability.
pub fn neighbor_weights(distances: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = distances.iter().map(|&d| -d / temperature).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|v| v / sum).collect()
}

/// `α / (d̄ + α)`: one for exact matches, tending to zero as neighbors drift away.
pub fn lambda_coef(mean_distance: f64, alpha: f64) -> f64 {
    alpha / (mean_distance + alpha)
}

/// `(1 - λ)·model + λ·Σ w_j·values_j`, elementwise.
pub fn interpolate(model: &[f64], values: &[&[f32]], weights: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if values.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} retrieved values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| v.len() != model.len()) {
        return Err(Error::Dimension(format!(
            "retrieved value of length {} against a forecast of length {}",
            v.len(),
            model.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("weights sum to {}, not 1", total)));
    }
    Ok((0..model.len())
        .map(|i| {
            let retrieved: f64 = values.iter().zip(weights).map(|(v, w)| w * v[i] as f64).sum();
            (1.0 - lambda) * model[i] + lambda * retrieved
        })
        .collect())
}

/// The K neighbors behind one forecast and how they were weighted.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub ids: Vec<usize>,
    /// Squared L2, ascending.
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
    pub mean_distance: f64,
    pub lambda: f64,
    /// The approximate index probed past its configured lists.
    pub widened: bool,
}

impl RetrievalResult {
    /// Weights the first `k` of `neighbors`.
    pub fn from_neighbors(neighbors: &Neighbors, k: usize, temperature: f64, alpha: f64) -> Result<Self> {
        if k == 0 || k > neighbors.ids.len() {
            return Err(Error::Request(format!(
                "K={} but only {} neighbors were retrieved",
                k,
                neighbors.ids.len()
            )));
        }
        let distances = neighbors.distances[..k].to_vec();
        let mean_distance = distances.iter().sum::<f64>() / k as f64;
        Ok(RetrievalResult {
            ids: neighbors.ids[..k].to_vec(),
            weights: neighbor_weights(&distances, temperature),
            distances,
            mean_distance,
            lambda: lambda_coef(mean_distance, alpha),
            widened: neighbors.widened,
        })
    }
}

/// One forecast in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub node: usize,
    pub end_step: usize,
    /// The encoder's own forecast.
    pub model: Vec<f64>,
    /// The interpolated forecast.
    pub prediction: Vec<f64>,
    pub label: Vec<f64>,
    pub retrieval: RetrievalResult,
}

/// Encoded windows together with their retrieved neighbors, ready to be
/// blended under any `K` up to the one retrieved.
#[derive(Clone, Debug)]
pub struct Retrieved {
    pub encoded: Encoded,
    pub neighbors: Vec<Neighbors>,
}

/// Row-aligned forecasts and labels for many windows, raw units.
#[derive(Clone, Debug, Default)]
pub struct SplitForecast {
    pub horizon: usize,
    pub channels: usize,
    /// `(node, end_step)` per row.
    pub meta: Vec<(usize, usize)>,
    pub model: Vec<f64>,
    pub prediction: Vec<f64>,
    pub labels: Vec<f64>,
    /// Interpolation coefficient per row; empty without retrieval.
    pub lambdas: Vec<f64>,
    /// Rows whose approximate search had to widen.
    pub widened: usize,
}

impl SplitForecast {
    /// The bare encoder's forecasts, no retrieval.
    pub fn model_only(encoded: &Encoded, normalizer: &Normalizer, horizon: usize) -> Self {
        let channels = normalizer.channels();
        let model = denormalize(&encoded.predictions, normalizer);
        SplitForecast {
            horizon,
            channels,
            meta: encoded.meta.clone(),
            prediction: model.clone(),
            model,
            labels: encoded.raw_targets.clone(),
            lambdas: Vec::new(),
            widened: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.meta.len()
    }

    pub fn report(&self, null_value: f64) -> Result<EvalReport> {
        evaluate(&self.prediction, &self.labels, self.horizon, self.channels, null_value)
    }

    pub fn model_report(&self, null_value: f64) -> Result<EvalReport> {
        evaluate(&self.model, &self.labels, self.horizon, self.channels, null_value)
    }

    /// CSV `node,end_step,horizon,prediction,label`, horizon 1-based; a
    /// `channel` column is appended for multi-channel data.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let multi = self.channels > 1;
        let mut header = vec!["node", "end_step", "horizon", "prediction", "label"];
        if multi {
            header.push("channel");
        }
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        let width = self.horizon * self.channels;
        for (r, &(node, end)) in self.meta.iter().enumerate() {
            for i in 0..width {
                let mut rec = vec![
                    node.to_string(),
                    end.to_string(),
                    (i / self.channels + 1).to_string(),
                    self.prediction[r * width + i].to_string(),
                    self.labels[r * width + i].to_string(),
                ];
                if multi {
                    rec.push((i % self.channels).to_string());
                }
                w.write_record(&rec).map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            offset: 0,
            msg: format!("{}: {:?}", path.display(), other),
        },
    }
}

fn denormalize(values: &[f64], normalizer: &Normalizer) -> Vec<f64> {
    let c = normalizer.channels();
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| normalizer.inverse_value(v, i % c))
        .collect()
}

/// An encoder checkpoint paired with a datastore built from it.
#[derive(Debug)]
pub struct Forecaster<'a> {
    ckpt: &'a Checkpoint,
    store: &'a Datastore,
    graph: Option<&'a DependencyGraph>,
    index: Option<IvfIndex>,
    self_ids: HashMap<EntryMeta, usize>,
    config: ForecastConfig,
}

impl<'a> Forecaster<'a> {
    /// Fails with a stale-datastore error unless `store` was built from `ckpt`.
    /// An inverted-file index is built here when the config asks for one.
    pub fn new(
        ckpt: &'a Checkpoint,
        store: &'a Datastore,
        graph: Option<&'a DependencyGraph>,
        config: ForecastConfig,
    ) -> Result<Self> {
        config.validate()?;
        if store.fingerprint != ckpt.fingerprint() {
            return Err(Error::Stale(
                "the datastore was built from a different checkpoint; rebuild it".into(),
            ));
        }
        if store.horizon() != ckpt.encoder.config.output_width() {
            return Err(Error::Dimension(format!(
                "store values hold {} steps, the encoder forecasts {}",
                store.horizon(),
                ckpt.encoder.config.output_width()
            )));
        }
        if store.is_empty() {
            return Err(Error::Request("the datastore is empty".into()));
        }
        let index = match config.index {
            IndexKind::Exact => None,
            IndexKind::Ivf => Some(build_ivf(store, config.ivf_lists.min(store.len()), 0)?),
        };
        let self_ids = if config.exclude_self {
            (0..store.len()).map(|i| (store.meta(i), i)).collect()
        } else {
            HashMap::new()
        };
        Ok(Forecaster {
            ckpt,
            store,
            graph,
            index,
            self_ids,
            config,
        })
    }

    /// Replaces the on-the-fly index with a prebuilt one.
    pub fn with_index(mut self, index: IvfIndex) -> Self {
        self.index = Some(index);
        self
    }

    pub fn config(&self) -> &ForecastConfig {
        &self.config
    }

    pub fn store(&self) -> &Datastore {
        self.store
    }

    fn own_entry(&self, node: usize, end_step: usize) -> Option<usize> {
        if !self.config.exclude_self {
            return None;
        }
        self.self_ids
            .get(&EntryMeta {
                node: node as u32,
                end_step: end_step as u32,
            })
            .copied()
    }

    /// Top-`k` neighbors of one query, skipping entry `exclude`.
    pub fn search(&self, q: &[f32], k: usize, exclude: Option<usize>) -> Result<Neighbors> {
        match &self.index {
            None => match exclude {
                None => knn_exact(self.store, q, k),
                Some(x) => knn_exact_filtered(self.store, q, k, |i| i != x),
            },
            Some(idx) => {
                let probe = self.config.n_probe.unwrap_or(idx.n_probe);
                let extra = usize::from(exclude.is_some());
                if k + extra > self.store.len() {
                    return Err(Error::Request(format!(
                        "K={} exceeds the {} entries available",
                        k,
                        self.store.len() - extra
                    )));
                }
                let mut n = idx.search(self.store, q, k + extra, probe)?;
                if let Some(at) = exclude.and_then(|x| n.ids.iter().position(|&i| i == x)) {
                    n.ids.remove(at);
                    n.distances.remove(at);
                }
                n.ids.truncate(k);
                n.distances.truncate(k);
                Ok(n)
            }
        }
    }

    /// Neighbors for every row of `encoded`, `k` each.
    pub fn retrieve_rows(&self, encoded: &Encoded, k: usize) -> Result<Vec<Neighbors>> {
        if encoded.key_dim != self.store.dim() {
            return Err(Error::Dimension(format!(
                "queries have {} dims, store keys have {}",
                encoded.key_dim,
                self.store.dim()
            )));
        }
        let queries: Vec<f32> = encoded.keys.iter().map(|&v| v as f32).collect();
        let exclude = |r: usize| {
            let (node, end) = encoded.meta[r];
            self.own_entry(node, end)
        };
        match self.index {
            None if self.config.exclude_self => knn_exact_batch(self.store, &queries, k, Some(&exclude)),
            None => knn_exact_batch(self.store, &queries, k, None),
            Some(_) => queries
                .par_chunks(self.store.dim())
                .enumerate()
                .map(|(r, q)| self.search(q, k, exclude(r)))
                .collect(),
        }
    }

    /// Encodes every node at each of `end_steps` and retrieves `k` neighbors per row.
    pub fn retrieve_steps(
        &self,
        raw: &MtsDataset,
        end_steps: &[usize],
        k: usize,
        batch_slices: usize,
    ) -> Result<Retrieved> {
        let encoded = self.ckpt.encoder.encode_slices(
            raw,
            &self.ckpt.normalizer,
            end_steps,
            self.graph,
            self.config.key_tap,
            batch_slices,
        )?;
        let neighbors = self.retrieve_rows(&encoded, k)?;
        Ok(Retrieved { encoded, neighbors })
    }

    fn blend_row(&self, encoded: &Encoded, neighbors: &Neighbors, row: usize, k: usize, temperature: f64, alpha: f64) -> Result<(Vec<f64>, RetrievalResult)> {
        let width = self.store.horizon();
        let r = RetrievalResult::from_neighbors(neighbors, k, temperature, alpha)?;
        let values: Vec<&[f32]> = r.ids.iter().map(|&i| self.store.value(i)).collect();
        let model = &encoded.predictions[row * width..(row + 1) * width];
        let blended = interpolate(model, &values, &r.weights, r.lambda)?;
        Ok((blended, r))
    }

    /// Interpolated forecasts using the first `k` retrieved neighbors per row.
    pub fn blend(&self, retrieved: &Retrieved, k: usize, temperature: f64, alpha: f64) -> Result<SplitForecast> {
        let enc = &retrieved.encoded;
        let mut out = SplitForecast::model_only(enc, &self.ckpt.normalizer, self.ckpt.encoder.config.horizon);
        let mut blended = Vec::with_capacity(enc.predictions.len());
        for (row, n) in retrieved.neighbors.iter().enumerate() {
            let (b, r) = self.blend_row(enc, n, row, k, temperature, alpha)?;
            blended.extend(b);
            out.lambdas.push(r.lambda);
            out.widened += usize::from(r.widened);
        }
        out.prediction = denormalize(&blended, &self.ckpt.normalizer);
        Ok(out)
    }

    /// Forecasts every node at each of `end_steps` with the configured K, τ and α.
    pub fn forecast_steps(&self, raw: &MtsDataset, end_steps: &[usize], batch_slices: usize) -> Result<SplitForecast> {
        let retrieved = self.retrieve_steps(raw, end_steps, self.config.k, batch_slices)?;
        self.blend(&retrieved, self.config.k, self.config.temperature, self.config.alpha)
    }

    /// Forecast for one node's window ending at `end_step`.
    pub fn forecast(&self, raw: &MtsDataset, node: usize, end_step: usize) -> Result<Forecast> {
        Ok(self.forecast_with_keys(raw, node, end_step)?.0)
    }

    fn forecast_with_keys(&self, raw: &MtsDataset, node: usize, end_step: usize) -> Result<(Forecast, Vec<f32>)> {
        if node >= raw.n_nodes() {
            return Err(Error::Request(format!("node {} out of range ({} nodes)", node, raw.n_nodes())));
        }
        let enc = self.ckpt.encoder.encode_slices(
            raw,
            &self.ckpt.normalizer,
            &[end_step],
            self.graph,
            self.config.key_tap,
            1,
        )?;
        let d = enc.key_dim;
        if d != self.store.dim() {
            return Err(Error::Dimension(format!("queries have {} dims, store keys have {}", d, self.store.dim())));
        }
        let q: Vec<f32> = enc.keys[node * d..(node + 1) * d].iter().map(|&v| v as f32).collect();
        let n = self.search(&q, self.config.k, self.own_entry(node, end_step))?;
        let (blended, retrieval) = self.blend_row(&enc, &n, node, self.config.k, self.config.temperature, self.config.alpha)?;
        let width = self.store.horizon();
        let norm = &self.ckpt.normalizer;
        Ok((
            Forecast {
                node,
                end_step,
                model: denormalize(&enc.predictions[node * width..(node + 1) * width], norm),
                prediction: denormalize(&blended, norm),
                label: enc.raw_targets[node * width..(node + 1) * width].to_vec(),
                retrieval,
            },
            q,
        ))
    }
}

/// Paths written by [`inspect_neighbors`].
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborDump {
    /// One row per neighbor: rank, entry, node, end_step, distance, weight, then its raw future.
    pub neighbors: PathBuf,
    /// The query's raw history, its label, and both forecasts, one value per row.
    pub query: PathBuf,
    /// Query and neighbor key vectors.
    pub keys: PathBuf,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{}.{}.csv", stem, suffix))
}

/// Forecasts one window and dumps what the forecast was built from.
/// `out` receives the neighbor table; the query series and key vectors go
/// next to it as `<stem>.query.csv` and `<stem>.keys.csv`.
pub fn inspect_neighbors(
    forecaster: &Forecaster<'_>,
    raw: &MtsDataset,
    node: usize,
    end_step: usize,
    out: &Path,
) -> Result<(Forecast, NeighborDump)> {
    let (fc, q) = forecaster.forecast_with_keys(raw, node, end_step)?;
    let store = forecaster.store;
    let norm = &forecaster.ckpt.normalizer;
    let width = store.horizon();
    let dump = NeighborDump {
        neighbors: out.to_path_buf(),
        query: sibling(out, "query"),
        keys: sibling(out, "keys"),
    };

    let mut w = csv::Writer::from_path(&dump.neighbors).map_err(|e| csv_error(&dump.neighbors, e))?;
    let mut header: Vec<String> = ["rank", "entry", "node", "end_step", "distance", "weight"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=width).map(|i| format!("v{}", i)));
    w.write_record(&header).map_err(|e| csv_error(&dump.neighbors, e))?;
    let r = &fc.retrieval;
    for (rank, &id) in r.ids.iter().enumerate() {
        let m = store.meta(id);
        let mut rec = vec![
            (rank + 1).to_string(),
            id.to_string(),
            m.node.to_string(),
            m.end_step.to_string(),
            r.distances[rank].to_string(),
            r.weights[rank].to_string(),
        ];
        let values: Vec<f64> = store.value(id).iter().map(|&v| v as f64).collect();
        rec.extend(denormalize(&values, norm).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(&dump.neighbors, e))?;
    }
    w.flush().map_err(|e| Error::io(&dump.neighbors, e))?;

    let mut w = csv::Writer::from_path(&dump.query).map_err(|e| csv_error(&dump.query, e))?;
    w.write_record(["series", "step", "channel", "value"]).map_err(|e| csv_error(&dump.query, e))?;
    let cfg = &forecaster.ckpt.encoder.config;
    let c = raw.channels();
    let start = end_step + 1 - cfg.history;
    let mut rows: Vec<(&str, usize, usize, f64)> = Vec::new();
    for t in start..=end_step {
        for ch in 0..c {
            rows.push(("history", t, ch, raw.get(t, node, ch)));
        }
    }
    for (name, series) in [("label", &fc.label), ("model", &fc.model), ("prediction", &fc.prediction)] {
        for (i, &v) in series.iter().enumerate() {
            rows.push((name, end_step + 1 + i / c, i % c, v));
        }
    }
    for (name, t, ch, v) in rows {
        w.write_record([name.to_string(), t.to_string(), ch.to_string(), v.to_string()])
            .map_err(|e| csv_error(&dump.query, e))?;
    }
    w.flush().map_err(|e| Error::io(&dump.query, e))?;

    let mut w = csv::Writer::from_path(&dump.keys).map_err(|e| csv_error(&dump.keys, e))?;
    let mut header = vec!["role".to_string(), "rank".to_string()];
    header.extend((0..store.dim()).map(|j| format!("k{}", j)));
    w.write_record(&header).map_err(|e| csv_error(&dump.keys, e))?;
    let mut write_key = |role: &str, rank: usize, key: &[f32]| {
        let mut rec = vec![role.to_string(), rank.to_string()];
        rec.extend(key.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(&dump.keys, e))
    };
    write_key("query", 0, &q)?;
    for (rank, &id) in r.ids.iter().enumerate() {
        write_key("neighbor", rank + 1, store.key(id))?;
    }
    w.flush().map_err(|e| Error::io(&dump.keys, e))?;
    Ok((fc, dump))
}
