//! The hybrid spatial-temporal encoder.
//!
//! A long branch embeds the full history as non-overlapping segments and runs
//! them through post-norm transformer layers; a short branch runs gated dilated
//! causal convolutions and diffusion graph convolutions over the last segment
//! of every node jointly. The two are fused by per-branch MLPs into the hybrid
//! representation that serves as both datastore key and query, and a head MLP
//! maps it to the forecast.

mod checkpoint;
pub mod layers;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub(crate) use checkpoint::write_atomic;
pub use params::{BoundParams, ParamStore};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MtsDataset, Normalizer, SliceBatch, WindowSpec};
use crate::error::{Error, Result};
use crate::graph::{adaptive_adjacency, matrix_power_series, DependencyGraph};
use crate::tensor::{Graph, Tensor, Var};
use layers::{GraphConvWeights, GraphSupports, TransformerWeights};

/// Which branches feed the hybrid representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Hybrid,
    LongOnly,
    ShortOnly,
}

impl EncoderMode {
    pub fn uses_long(self) -> bool {
        matches!(self, EncoderMode::Hybrid | EncoderMode::LongOnly)
    }

    pub fn uses_short(self) -> bool {
        matches!(self, EncoderMode::Hybrid | EncoderMode::ShortOnly)
    }
}

/// Which intermediate vector is written to the datastore as the key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyTap {
    /// The fused hybrid representation.
    FusionOutput,
    /// The head's hidden layer before its relu.
    HeadHiddenLinear,
    /// The head's hidden layer after its relu.
    HeadHiddenRelu,
    /// Only the long branch's fusion MLP output.
    LongFusion,
    /// Only the short branch's fusion MLP output.
    ShortFusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// History length `L`.
    pub history: usize,
    /// Segment length `L_s`.
    pub segment: usize,
    /// Forecast horizon `T_f`.
    pub horizon: usize,
    pub channels: usize,
    pub nodes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub transformer_layers: usize,
    pub ffn_mult: usize,
    /// Filter length of each dilated causal convolution.
    pub conv_taps: usize,
    pub dilations: Vec<usize>,
    /// Highest adjacency power in the diffusion convolution.
    pub diffusion_order: usize,
    pub adaptive_dim: usize,
    /// Whether forward/backward transition terms exist.
    pub predefined_graph: bool,
    pub mode: EncoderMode,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            history: 2016,
            segment: 12,
            horizon: 12,
            channels: 1,
            nodes: 307,
            d_model: 96,
            heads: 4,
            transformer_layers: 4,
            ffn_mult: 4,
            conv_taps: 2,
            dilations: vec![1, 2, 1, 2],
            diffusion_order: 2,
            adaptive_dim: 10,
            predefined_graph: false,
            mode: EncoderMode::Hybrid,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            history: self.history,
            segment: self.segment,
            horizon: self.horizon,
        }
    }

    /// Length of one prediction row, `T_f·C`.
    pub fn output_width(&self) -> usize {
        self.horizon * self.channels
    }

    pub fn segments(&self) -> usize {
        self.history / self.segment.max(1)
    }

    /// `1 + Σ dilation·(taps − 1)`
    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations
            .iter()
            .map(|a| a * self.conv_taps.saturating_sub(1))
            .sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.segment == 0 || self.history % self.segment != 0 {
            return bad(format!(
                "history {} is not a multiple of segment length {}",
                self.history, self.segment
            ));
        }
        if self.horizon == 0 || self.channels == 0 || self.nodes == 0 {
            return bad("horizon, channels and nodes must be positive".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.conv_taps == 0 || self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("short branch needs at least one layer, positive taps and dilations".into());
        }
        if self.receptive_field() > self.segment {
            return bad(format!(
                "short-branch receptive field {} exceeds segment length {}",
                self.receptive_field(),
                self.segment
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ffn_mult == 0 || self.adaptive_dim == 0 {
            return bad("ffn_mult and adaptive_dim must be positive".into());
        }
        Ok(())
    }
}

/// Graph handles for every representation produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[batch, d]`
    pub hybrid: Var,
    pub long_fused: Option<Var>,
    pub short_fused: Option<Var>,
    pub head_hidden_linear: Var,
    pub head_hidden_relu: Var,
    /// `[batch, T_f·C]`, normalized space.
    pub prediction: Var,
}

impl EncoderOutput {
    pub fn key(&self, tap: KeyTap) -> Result<Var> {
        match tap {
            KeyTap::FusionOutput => Ok(self.hybrid),
            KeyTap::HeadHiddenLinear => Ok(self.head_hidden_linear),
            KeyTap::HeadHiddenRelu => Ok(self.head_hidden_relu),
            KeyTap::LongFusion => self
                .long_fused
                .ok_or_else(|| Error::Config("long-branch key requested from an encoder without it".into())),
            KeyTap::ShortFusion => self
                .short_fused
                .ok_or_else(|| Error::Config("short-branch key requested from an encoder without it".into())),
        }
    }
}

/// Plain-tensor result of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[batch, key_dim]`
    pub keys: Tensor,
    /// `[batch, T_f·C]`, normalized space.
    pub predictions: Tensor,
}

/// Keys and forecasts for a run of time slices, with their windows' targets.
#[derive(Clone, Debug, Default)]
pub struct Encoded {
    pub key_dim: usize,
    /// `rows × key_dim`
    pub keys: Vec<f64>,
    /// `rows × T_f·C`, normalized.
    pub predictions: Vec<f64>,
    /// `rows × T_f·C`, normalized.
    pub targets: Vec<f64>,
    /// `rows × T_f·C`, raw units.
    pub raw_targets: Vec<f64>,
    /// `(node, end_step)` per row, slice-major.
    pub meta: Vec<(usize, usize)>,
}

impl Encoded {
    pub fn rows(&self) -> usize {
        self.meta.len()
    }

    fn append(&mut self, mut other: Encoded) {
        self.key_dim = other.key_dim;
        self.keys.append(&mut other.keys);
        self.predictions.append(&mut other.predictions);
        self.targets.append(&mut other.targets);
        self.raw_targets.append(&mut other.raw_targets);
        self.meta.append(&mut other.meta);
    }
}

/// A configured encoder and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

fn transformer_names(layer: usize) -> Vec<String> {
    [
        "wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1.gain", "ln1.bias", "ffn.w1", "ffn.b1",
        "ffn.w2", "ffn.b2", "ln2.gain", "ln2.bias",
    ]
    .iter()
    .map(|s| format!("long.layer{}.{}", layer, s))
    .collect()
}

impl Encoder {
    /// Initializes every parameter from `seed`.
    ///
    /// Weight matrices are Xavier-uniform, positional embeddings uniform in
    /// ±0.02, biases truncated normal with σ = 0.02, layer-norm gains one.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::init_params(&config, &mut rng);
        Ok(Encoder { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        params.check_layout(&Self::init_params(&config, &mut rng))?;
        Ok(Encoder { config, params })
    }

    fn init_params(c: &EncoderConfig, rng: &mut ChaCha8Rng) -> ParamStore {
        let d = c.d_model;
        let mut p = ParamStore::new();
        let weight = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            p.insert(name, Tensor::xavier_uniform(fan_in, fan_out, rng));
        };
        // [d, d] blocks of a wider concatenated projection share its Xavier bound
        let wide = |p: &mut ParamStore, name: &str, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (fan_in + d) as f64).sqrt();
            p.insert(name, Tensor::uniform(&[d, d], -bound, bound, rng));
        };
        let bias = |p: &mut ParamStore, name: &str, n: usize, rng: &mut ChaCha8Rng| {
            p.insert(name, Tensor::truncated_normal(&[n], 0.0, 0.02, rng));
        };
        if c.mode.uses_long() {
            weight(&mut p, "long.embed.weight", c.segment * c.channels, d, rng);
            bias(&mut p, "long.embed.bias", d, rng);
            p.insert("long.embed.pos", Tensor::uniform(&[c.segments(), d], -0.02, 0.02, rng));
            for layer in 0..c.transformer_layers {
                let n = transformer_names(layer);
                for (i, name) in n.iter().enumerate() {
                    match i {
                        0 | 2 | 3 | 5 => weight(&mut p, name, d, d, rng),
                        9 => weight(&mut p, name, d, d * c.ffn_mult, rng),
                        10 => bias(&mut p, name, d * c.ffn_mult, rng),
                        11 => weight(&mut p, name, d * c.ffn_mult, d, rng),
                        7 | 13 => p.insert(name.clone(), Tensor::full(&[d], 1.0)),
                        8 | 14 => p.insert(name.clone(), Tensor::zeros(&[d])),
                        _ => bias(&mut p, name, d, rng),
                    }
                }
            }
        }
        if c.mode.uses_short() {
            weight(&mut p, "short.input.weight", c.channels, d, rng);
            bias(&mut p, "short.input.bias", d, rng);
            p.insert("short.adaptive.source", Tensor::uniform(&[c.nodes, c.adaptive_dim], -1.0, 1.0, rng));
            p.insert("short.adaptive.target", Tensor::uniform(&[c.nodes, c.adaptive_dim], -1.0, 1.0, rng));
            for (layer, _) in c.dilations.iter().enumerate() {
                let pre = format!("short.layer{}", layer);
                for m in 0..c.conv_taps {
                    wide(&mut p, &format!("{}.conv.tap{}", pre, m), d * c.conv_taps, rng);
                }
                weight(&mut p, &format!("{}.gate.filter.weight", pre), d, d, rng);
                bias(&mut p, &format!("{}.gate.filter.bias", pre), d, rng);
                weight(&mut p, &format!("{}.gate.gate.weight", pre), d, d, rng);
                bias(&mut p, &format!("{}.gate.gate.bias", pre), d, rng);
                let supports = if c.predefined_graph { 3 } else { 1 };
                let fan = d * (c.diffusion_order + 1) * supports;
                for k in 0..=c.diffusion_order {
                    if c.predefined_graph {
                        wide(&mut p, &format!("{}.gconv.forward{}", pre, k), fan, rng);
                        wide(&mut p, &format!("{}.gconv.backward{}", pre, k), fan, rng);
                    }
                    wide(&mut p, &format!("{}.gconv.adaptive{}", pre, k), fan, rng);
                }
                weight(&mut p, &format!("{}.skip.weight", pre), d, d, rng);
                bias(&mut p, &format!("{}.skip.bias", pre), d, rng);
            }
        }
        for branch in ["long", "short"] {
            let used = if branch == "long" { c.mode.uses_long() } else { c.mode.uses_short() };
            if used {
                weight(&mut p, &format!("fusion.{}.w1", branch), d, d, rng);
                bias(&mut p, &format!("fusion.{}.b1", branch), d, rng);
                weight(&mut p, &format!("fusion.{}.w2", branch), d, d, rng);
                bias(&mut p, &format!("fusion.{}.b2", branch), d, rng);
            }
        }
        weight(&mut p, "head.w1", d, d, rng);
        bias(&mut p, "head.b1", d, rng);
        weight(&mut p, "head.w2", d, c.horizon * c.channels, rng);
        bias(&mut p, "head.b2", c.horizon * c.channels, rng);
        p
    }

    fn check_graph(&self, graph: Option<&DependencyGraph>) -> Result<()> {
        match (self.config.predefined_graph, graph) {
            (true, None) => Err(Error::Contract(
                "encoder was configured with a predefined graph but none was supplied".into(),
            )),
            (false, Some(_)) => Err(Error::Contract(
                "a predefined graph was supplied to an encoder configured without one".into(),
            )),
            (true, Some(gr)) if gr.n_nodes() != self.config.nodes => Err(Error::Dimension(format!(
                "graph has {} nodes, encoder expects {}",
                gr.n_nodes(),
                self.config.nodes
            ))),
            _ => Ok(()),
        }
    }

    /// Records the forward pass for `input`, `[batch, L, C]` in normalized space.
    ///
    /// When the short branch is active, `batch` must be a multiple of `N` with
    /// rows ordered node-major inside every block of `N` (one block per time slice).
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams<'_>,
        input: Var,
        graph: Option<&DependencyGraph>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<EncoderOutput> {
        let c = &self.config;
        self.check_graph(graph)?;
        let s = g.shape(input).to_vec();
        if s.len() != 3 || s[1] != c.history || s[2] != c.channels {
            return Err(Error::Dimension(format!(
                "encoder input {:?} does not match [batch, {}, {}]",
                s, c.history, c.channels
            )));
        }
        let batch = s[0];
        let p = |name: &str| bound.var(name);

        let long_fused = if c.mode.uses_long() {
            let h_long = self.long_branch(g, bound, input, layers::reborrow(&mut rng))?;
            Some(layers::mlp(
                g,
                h_long,
                p("fusion.long.w1"),
                p("fusion.long.b1"),
                p("fusion.long.w2"),
                p("fusion.long.b2"),
            )?)
        } else {
            None
        };
        let short_fused = if c.mode.uses_short() {
            if batch % c.nodes != 0 {
                return Err(Error::Contract(format!(
                    "short branch needs every node of each time slice: batch {} is not a multiple of {} nodes",
                    batch, c.nodes
                )));
            }
            let tail = g.slice(input, 1, c.history - c.segment, c.segment)?;
            let h_short = self.short_branch(g, bound, tail, graph)?;
            Some(layers::mlp(
                g,
                h_short,
                p("fusion.short.w1"),
                p("fusion.short.b1"),
                p("fusion.short.w2"),
                p("fusion.short.b2"),
            )?)
        } else {
            None
        };
        let hybrid = match (long_fused, short_fused) {
            (Some(l), Some(s)) => g.add(l, s)?,
            (Some(l), None) => l,
            (None, Some(s)) => s,
            (None, None) => unreachable!("every mode uses a branch"),
        };
        let head_hidden_linear = layers::linear(g, hybrid, p("head.w1"), p("head.b1"))?;
        let head_hidden_relu = g.relu(head_hidden_linear);
        let prediction = layers::linear(g, head_hidden_relu, p("head.w2"), p("head.b2"))?;
        Ok(EncoderOutput {
            hybrid,
            long_fused,
            short_fused,
            head_hidden_linear,
            head_hidden_relu,
            prediction,
        })
    }

    fn transformer_weights(bound: &BoundParams<'_>, layer: usize) -> TransformerWeights {
        let n = transformer_names(layer);
        let v = |i: usize| bound.var(&n[i]);
        TransformerWeights {
            wq: v(0),
            bq: v(1),
            wk: v(2),
            wv: v(3),
            bv: v(4),
            wo: v(5),
            bo: v(6),
            ln1_gain: v(7),
            ln1_bias: v(8),
            ffn_w1: v(9),
            ffn_b1: v(10),
            ffn_w2: v(11),
            ffn_b2: v(12),
            ln2_gain: v(13),
            ln2_bias: v(14),
        }
    }

    /// Segment embedding and transformer stack; the final segment's
    /// contextual vector becomes `H_long`, `[batch, d]`.
    fn long_branch(
        &self,
        g: &mut Graph,
        bound: &BoundParams<'_>,
        input: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let c = &self.config;
        let batch = g.shape(input)[0];
        let mut h = layers::segment_embed(
            g,
            input,
            c.segment,
            bound.var("long.embed.weight"),
            bound.var("long.embed.bias"),
            bound.var("long.embed.pos"),
        )?;
        for layer in 0..c.transformer_layers {
            let w = Self::transformer_weights(bound, layer);
            let last = layer + 1 == c.transformer_layers;
            h = layers::transformer_layer(g, h, &w, c.heads, last, c.dropout, layers::reborrow(&mut rng))?.hidden;
        }
        let rows = g.shape(h)[1];
        let last = g.slice(h, 1, rows - 1, 1)?;
        g.reshape(last, &[batch, c.d_model])
    }

    /// Gated dilated convolutions interleaved with graph convolutions over
    /// `tail`, `[batch, L_s, C]`; returns the skip sum at the last step, `[batch, d]`.
    fn short_branch(
        &self,
        g: &mut Graph,
        bound: &BoundParams<'_>,
        tail: Var,
        graph: Option<&DependencyGraph>,
    ) -> Result<Var> {
        let c = &self.config;
        let batch = g.shape(tail)[0];
        let slices = batch / c.nodes;
        let d = c.d_model;
        let x = g.reshape(tail, &[slices, c.nodes, c.segment, c.channels])?;
        let mut x = layers::linear(g, x, bound.var("short.input.weight"), bound.var("short.input.bias"))?;

        let adaptive = adaptive_adjacency(
            g,
            bound.var("short.adaptive.source"),
            bound.var("short.adaptive.target"),
        )?;
        let predefined = match graph {
            Some(gr) => Some((
                matrix_power_series(&gr.forward, c.diffusion_order)?,
                matrix_power_series(&gr.backward, c.diffusion_order)?,
            )),
            None => None,
        };
        let supports = GraphSupports {
            predefined,
            adaptive,
            order: c.diffusion_order,
        };

        let mut skip: Option<Var> = None;
        for (layer, &dilation) in c.dilations.iter().enumerate() {
            let pre = format!("short.layer{}", layer);
            let taps: Vec<Var> = (0..c.conv_taps)
                .map(|m| bound.var(&format!("{}.conv.tap{}", pre, m)))
                .collect();
            let len = g.shape(x)[2];
            let conv = layers::dilated_causal_conv(g, x, 2, &taps, dilation)?;
            let z = layers::gated_tcn(
                g,
                conv,
                bound.var(&format!("{}.gate.filter.weight", pre)),
                bound.var(&format!("{}.gate.filter.bias", pre)),
                bound.var(&format!("{}.gate.gate.weight", pre)),
                bound.var(&format!("{}.gate.gate.bias", pre)),
            )?;
            let weights = GraphConvWeights {
                forward: (0..=c.diffusion_order)
                    .filter(|_| c.predefined_graph)
                    .map(|k| bound.var(&format!("{}.gconv.forward{}", pre, k)))
                    .collect(),
                backward: (0..=c.diffusion_order)
                    .filter(|_| c.predefined_graph)
                    .map(|k| bound.var(&format!("{}.gconv.backward{}", pre, k)))
                    .collect(),
                adaptive: (0..=c.diffusion_order)
                    .map(|k| bound.var(&format!("{}.gconv.adaptive{}", pre, k)))
                    .collect(),
            };
            let mixed = layers::graph_conv(g, z, &supports, &weights)?;
            let out_len = g.shape(mixed)[2];
            let last = g.slice(mixed, 2, out_len - 1, 1)?;
            let last = g.reshape(last, &[batch, d])?;
            let s = layers::linear(
                g,
                last,
                bound.var(&format!("{}.skip.weight", pre)),
                bound.var(&format!("{}.skip.bias", pre)),
            )?;
            skip = Some(match skip {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
            let residual = g.slice(x, 2, len - out_len, out_len)?;
            x = g.add(mixed, residual)?;
        }
        Ok(skip.expect("at least one short layer"))
    }

    /// Forward pass without gradient tracking; returns the chosen key and the forecast.
    pub fn infer(&self, input: &Tensor, graph: Option<&DependencyGraph>, tap: KeyTap) -> Result<Inference> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &bound, x, graph, None)?;
        let key = out.key(tap)?;
        Ok(Inference {
            keys: g.value(key).clone(),
            predictions: g.value(out.prediction).clone(),
        })
    }
}

impl Encoder {
    /// Runs inference over every node at each of `end_steps`, `batch_slices`
    /// time slices per forward pass. Output rows follow `end_steps` order.
    pub fn encode_slices(
        &self,
        raw: &MtsDataset,
        normalizer: &Normalizer,
        end_steps: &[usize],
        graph: Option<&DependencyGraph>,
        tap: KeyTap,
        batch_slices: usize,
    ) -> Result<Encoded> {
        use rayon::prelude::*;
        if raw.n_nodes() != self.config.nodes || raw.channels() != self.config.channels {
            return Err(Error::Dimension(format!(
                "dataset has {} nodes x {} channels, encoder expects {} x {}",
                raw.n_nodes(),
                raw.channels(),
                self.config.nodes,
                self.config.channels
            )));
        }
        let spec = self.config.window();
        let parts: Vec<Result<Encoded>> = end_steps
            .par_chunks(batch_slices.max(1))
            .map(|chunk| {
                let batch = SliceBatch::gather(raw, normalizer, &spec, chunk)?;
                let inf = self.infer(&batch.inputs, graph, tap)?;
                Ok(Encoded {
                    key_dim: inf.keys.shape()[1],
                    keys: inf.keys.into_data(),
                    predictions: inf.predictions.into_data(),
                    targets: batch.targets,
                    raw_targets: batch.raw_targets,
                    meta: batch.meta,
                })
            })
            .collect();
        let mut out = Encoded::default();
        for part in parts {
            out.append(part?);
        }
        Ok(out)
    }
}
