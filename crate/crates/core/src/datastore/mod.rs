//! Key-value datastore of cached encoder representations.

mod ivf;
mod knn;

pub use ivf::{build_ivf, load_ivf, save_ivf, IvfIndex};
pub use knn::{knn_exact, knn_exact_batch, knn_exact_filtered, knn_naive, squared_l2, Neighbors};

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{MtsDataset, SplitRange};
use crate::encoder::{Checkpoint, KeyTap};
use crate::error::{Error, Result};
use crate::graph::DependencyGraph;

const MAGIC: &[u8; 4] = b"KMTD";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 4 + 4 + 32;

/// Where a cached window came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntryMeta {
    pub node: u32,
    pub end_step: u32,
}

/// `M` cached (key, value, meta) triples; keys and values are `f32`, values normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Datastore {
    dim: usize,
    horizon: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    meta: Vec<EntryMeta>,
    /// SHA-256 of the checkpoint whose encoder produced the keys.
    pub fingerprint: [u8; 32],
}

impl Datastore {
    pub fn new(dim: usize, horizon: usize, fingerprint: [u8; 32]) -> Self {
        Datastore {
            dim,
            horizon,
            keys: Vec::new(),
            values: Vec::new(),
            meta: Vec::new(),
            fingerprint,
        }
    }

    /// Appends one entry; the key is rounded to `f32`.
    pub fn push(&mut self, key: &[f64], value: &[f64], meta: EntryMeta) -> Result<()> {
        if key.len() != self.dim || value.len() != self.horizon {
            return Err(Error::Dimension(format!(
                "entry with key {} / value {} does not fit a store of d={} T_f={}",
                key.len(),
                value.len(),
                self.dim,
                self.horizon
            )));
        }
        self.keys.extend(key.iter().map(|&v| v as f32));
        self.values.extend(value.iter().map(|&v| v as f32));
        self.meta.push(meta);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn meta(&self, i: usize) -> EntryMeta {
        self.meta[i]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.len() * (4 * self.dim + 4 * self.horizon + 8) + 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.horizon as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        for v in self.keys.iter().chain(&self.values) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in &self.meta {
            out.extend_from_slice(&m.node.to_le_bytes());
            out.extend_from_slice(&m.end_step.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < HEADER_LEN + 4 {
            return Err(fmt(bytes.len(), "truncated store header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(0, "bad magic, expected KMTD".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fmt(4, format!("unsupported store version {}", version)));
        }
        let m = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let horizon = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;
        let fingerprint: [u8; 32] = bytes[22..54].try_into().unwrap();
        let row = 4 * dim as u64 + 4 * horizon as u64 + 8;
        let expected = m
            .checked_mul(row)
            .and_then(|v| v.checked_add((HEADER_LEN + 4) as u64))
            .ok_or_else(|| fmt(6, "entry count overflows".into()))?;
        if bytes.len() as u64 != expected {
            return Err(fmt(
                bytes.len().min(expected as usize),
                format!("file holds {} bytes, header implies {}", bytes.len(), expected),
            ));
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body]) != stored {
            return Err(fmt(body, "checksum mismatch".into()));
        }
        let m = m as usize;
        let f32s = |from: usize, n: usize| -> Vec<f32> {
            bytes[from..from + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        };
        let keys = f32s(HEADER_LEN, m * dim);
        let values = f32s(HEADER_LEN + 4 * m * dim, m * horizon);
        let meta_at = HEADER_LEN + 4 * m * (dim + horizon);
        let meta = bytes[meta_at..body]
            .chunks_exact(8)
            .map(|b| EntryMeta {
                node: u32::from_le_bytes(b[..4].try_into().unwrap()),
                end_step: u32::from_le_bytes(b[4..].try_into().unwrap()),
            })
            .collect();
        Ok(Datastore {
            dim,
            horizon,
            keys,
            values,
            meta,
            fingerprint,
        })
    }

    /// Uniform subset of `floor(fraction·M)` entries, original order kept.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Datastore> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Request(format!("fraction {} outside (0, 1]", fraction)));
        }
        let count = (fraction * self.len() as f64).floor() as usize;
        if count == 0 {
            return Err(Error::Request(format!(
                "fraction {} of {} entries keeps nothing",
                fraction,
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = rand::seq::index::sample(&mut rng, self.len(), count).into_vec();
        picks.sort_unstable();
        let mut out = Datastore::new(self.dim, self.horizon, self.fingerprint);
        for i in picks {
            out.keys.extend_from_slice(self.key(i));
            out.values.extend_from_slice(self.value(i));
            out.meta.push(self.meta[i]);
        }
        Ok(out)
    }
}

/// Writes the store; an existing file is only replaced with `force`.
pub fn save_store(store: &Datastore, path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        let note = match fs::read(path).ok().and_then(|b| Datastore::from_bytes(&b).ok()) {
            Some(old) if old.fingerprint == store.fingerprint => "built from the same checkpoint",
            Some(_) => "built from a different checkpoint",
            None => "unreadable",
        };
        return Err(Error::Request(format!(
            "{} already exists ({}); pass --force to overwrite",
            path.display(),
            note
        )));
    }
    crate::encoder::write_atomic(path, &store.to_bytes())
}

pub fn load_store(path: &Path) -> Result<Datastore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Datastore::from_bytes(&bytes)
}

/// Encodes every window of `split` and caches (key, normalized future, meta).
///
/// Entries are ordered by `(node, end_step)`.
pub fn build_datastore(
    ckpt: &Checkpoint,
    raw: &MtsDataset,
    split: SplitRange,
    graph: Option<&DependencyGraph>,
    tap: KeyTap,
    batch_slices: usize,
) -> Result<Datastore> {
    let enc = &ckpt.encoder;
    let steps: Vec<usize> = enc.config.window().end_steps(split).collect();
    if steps.is_empty() {
        return Err(Error::Config(format!(
            "split of {} steps holds no window of length {}",
            split.len,
            enc.config.history + enc.config.horizon
        )));
    }
    if split.end() > u32::MAX as usize {
        return Err(Error::Config("timesteps beyond u32 range cannot be indexed".into()));
    }
    let encoded = enc.encode_slices(raw, &ckpt.normalizer, &steps, graph, tap, batch_slices)?;
    let n = raw.n_nodes();
    let (dim, width) = (encoded.key_dim, enc.config.output_width());
    let mut store = Datastore::new(dim, width, ckpt.fingerprint());
    // encoded rows are slice-major; entries are node-major
    for node in 0..n {
        for s in 0..steps.len() {
            let r = s * n + node;
            store.push(
                &encoded.keys[r * dim..(r + 1) * dim],
                &encoded.targets[r * width..(r + 1) * width],
                EntryMeta {
                    node: node as u32,
                    end_step: steps[s] as u32,
                },
            )?;
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests;
