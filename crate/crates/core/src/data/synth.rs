use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MtsDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Level every pasted motif is centered on.
const MOTIF_LEVEL: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub nodes: usize,
    pub steps: usize,
    /// Steps per simulated day.
    pub period: usize,
    pub motif_len: usize,
    /// Distinct motif shapes.
    pub motifs: usize,
    /// Pasted instances per motif.
    pub motif_count: usize,
    pub noise_std: f64,
    pub ring_graph: bool,
    pub sample_rate_minutes: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 16,
            steps: 8064,
            period: 288,
            motif_len: 36,
            motifs: 6,
            motif_count: 24,
            noise_std: 0.1,
            ring_graph: false,
            sample_rate_minutes: 5,
        }
    }
}

/// Where one copy of a motif was pasted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifInstance {
    pub motif: usize,
    pub node: usize,
    pub start: usize,
    pub len: usize,
}

impl MotifInstance {
    /// Whether `[from, to)` on `node` intersects this instance.
    pub fn overlaps(&self, node: usize, from: usize, to: usize) -> bool {
        node == self.node && from < self.start + self.len && self.start < to
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: MtsDataset,
    pub instances: Vec<MotifInstance>,
    /// Ring adjacency when requested.
    pub adjacency: Option<Tensor>,
}

/// Sinusoidal panel with planted motifs; a pure function of `(cfg, seed)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    if cfg.nodes == 0 || cfg.steps == 0 || cfg.period == 0 {
        return Err(Error::Config("synthetic nodes, steps and period must be positive".into()));
    }
    if cfg.motif_count > 0 && cfg.motifs > 0 && (cfg.motif_len == 0 || cfg.motif_len > cfg.steps) {
        return Err(Error::Config(format!(
            "motif length {} does not fit in {} steps",
            cfg.motif_len, cfg.steps
        )));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::Config("noise std must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, steps) = (cfg.nodes, cfg.steps);
    let mut values = vec![0.0; steps * n];
    let day = cfg.period as f64;
    for node in 0..n {
        let level = rng.random_range(8.0..12.0);
        let daily = rng.random_range(1.0..2.0);
        let daily_phase = rng.random_range(0.0..2.0 * PI);
        let weekly = daily * rng.random_range(0.05..0.1);
        let weekly_phase = rng.random_range(0.0..2.0 * PI);
        for t in 0..steps {
            let x = t as f64;
            values[t * n + node] = level
                + daily * (2.0 * PI * x / day + daily_phase).sin()
                + weekly * (2.0 * PI * x / (7.0 * day) + weekly_phase).sin();
        }
    }
    for v in values.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += cfg.noise_std * z;
    }

    let mut instances: Vec<MotifInstance> = Vec::new();
    let len = cfg.motif_len;
    if cfg.motif_count > 0 {
        for motif in 0..cfg.motifs {
            let shape = motif_shape(len, &mut rng);
            let width = if n >= 3 { rng.random_range(2..=3) } else { n };
            let carriers = sample(&mut rng, n, width).into_vec();
            let mut placed = 0;
            let mut attempts = 0;
            while placed < cfg.motif_count {
                if attempts >= 10 * cfg.motif_count {
                    return Err(Error::Config(format!(
                        "placed only {} of {} instances of motif {} without overlap",
                        placed, cfg.motif_count, motif
                    )));
                }
                attempts += 1;
                let node = carriers[rng.random_range(0..carriers.len())];
                let start = rng.random_range(0..=steps - len);
                // Keep a one-motif gap between instances on a node.
                let clash = instances.iter().any(|inst| {
                    inst.node == node && start < inst.start + 2 * len && inst.start < start + 2 * len
                });
                if clash {
                    continue;
                }
                for (k, s) in shape.iter().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    values[(start + k) * n + node] = MOTIF_LEVEL + s + cfg.noise_std * z;
                }
                instances.push(MotifInstance { motif, node, start, len });
                placed += 1;
            }
        }
    }

    let node_ids = (0..n).map(|i| format!("node{}", i)).collect();
    let mut dataset = MtsDataset::new("synthetic", node_ids, 1, cfg.sample_rate_minutes, values)?;
    dataset.name = format!("synthetic-{}", seed);
    check_motif_separation(&dataset, &instances, seed)?;
    let adjacency = cfg.ring_graph.then(|| ring_adjacency(n));
    Ok(SynthDataset {
        dataset,
        instances,
        adjacency,
    })
}

/// A smooth random excursion built from three Gaussian bumps.
fn motif_shape(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (
                sign * rng.random_range(1.5..3.5),
                rng.random_range(0.0..len as f64),
                rng.random_range(len as f64 / 10.0..len as f64 / 3.0),
            )
        })
        .collect();
    (0..len)
        .map(|k| {
            bumps
                .iter()
                .map(|(amp, center, width)| {
                    let z = (k as f64 - center) / width;
                    amp * (-0.5 * z * z).exp()
                })
                .sum()
        })
        .collect()
}

fn ring_adjacency(n: usize) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    if n > 1 {
        for i in 0..n {
            a.data_mut()[i * n + (i + 1) % n] = 1.0;
            a.data_mut()[i * n + (i + n - 1) % n] = 1.0;
        }
    }
    a
}

fn segment(dataset: &MtsDataset, node: usize, start: usize, len: usize) -> Vec<f64> {
    (start..start + len).map(|t| dataset.get(t, node, 0)).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Two instances of one motif must sit closer together than the median
/// distance between random segments of the same length.
fn check_motif_separation(dataset: &MtsDataset, instances: &[MotifInstance], seed: u64) -> Result<()> {
    let Some(first) = instances.first() else {
        return Ok(());
    };
    let len = first.len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let n = dataset.n_nodes();
    let t = dataset.t_steps();
    let mut dists: Vec<f64> = (0..201)
        .map(|_| {
            let a = segment(dataset, rng.random_range(0..n), rng.random_range(0..=t - len), len);
            let b = segment(dataset, rng.random_range(0..n), rng.random_range(0..=t - len), len);
            l2(&a, &b)
        })
        .collect();
    dists.sort_by(f64::total_cmp);
    let median = dists[dists.len() / 2];
    let motifs = instances.iter().map(|i| i.motif).max().unwrap_or(0) + 1;
    for m in 0..motifs {
        let pair: Vec<&MotifInstance> = instances.iter().filter(|i| i.motif == m).take(2).collect();
        if let [a, b] = pair[..] {
            let d = l2(
                &segment(dataset, a.node, a.start, a.len),
                &segment(dataset, b.node, b.start, b.len),
            );
            if d >= median {
                return Err(Error::Degenerate(format!(
                    "motif {} instances are {:.3} apart, median segment distance is {:.3}",
                    m, d, median
                )));
            }
        }
    }
    Ok(())
}
