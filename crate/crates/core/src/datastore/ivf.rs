//! Inverted-file index: k-means coarse quantizer plus per-centroid posting lists.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::knn::{check_request, squared_l2, squared_l2_cols, squared_l2_rows, transpose, Cand, Neighbors, TopK};
use super::Datastore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KMTX";
const VERSION: u16 = 1;
const MAX_ITERS: usize = 25;
const SHIFT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    /// Entries of the store the index was built over.
    entries: usize,
    /// `n_list × d`
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
    /// Lists probed when the caller does not say.
    pub n_probe: usize,
    /// k-means iterations actually run.
    pub iterations: usize,
}

/// Index of the column (centroid) of `cols` nearest to `x`.
fn nearest<T: Copy + Into<f64>>(cols: &[T], x: &[f32], scratch: &mut (Vec<f64>, Vec<f64>)) -> usize {
    let (qd, dist) = scratch;
    qd.clear();
    qd.extend(x.iter().map(|&v| v as f64));
    squared_l2_cols(qd, cols, dist);
    let mut best = (f64::INFINITY, 0);
    for (c, &d) in dist.iter().enumerate() {
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Seeded k-means over the store's keys: initial centroids are distinct
/// random entries; stops after 25 iterations or once no centroid moves
/// more than 1e-6. An emptied cluster keeps its previous centroid.
pub fn build_ivf(store: &Datastore, n_list: usize, seed: u64) -> Result<IvfIndex> {
    let (m, dim) = (store.len(), store.dim());
    if n_list == 0 || n_list > m {
        return Err(Error::Request(format!(
            "n_list={} must lie in 1..={} (store size)",
            n_list, m
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = rand::seq::index::sample(&mut rng, m, n_list).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<f64> = init
        .iter()
        .flat_map(|&i| store.key(i).iter().map(|&v| v as f64))
        .collect();
    let mut iterations = 0;
    let mut cols = Vec::new();
    for _ in 0..MAX_ITERS {
        iterations += 1;
        transpose(&centroids, dim, &mut cols);
        let assign: Vec<usize> = store
            .keys()
            .par_chunks_exact(dim)
            .map_init(|| (Vec::new(), vec![0.0; n_list]), |buf, k| nearest(&cols, k, buf))
            .collect();
        let mut sums = vec![0.0f64; n_list * dim];
        let mut counts = vec![0usize; n_list];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(store.key(i)) {
                *s += v as f64;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..n_list {
            if counts[c] == 0 {
                continue;
            }
            let mut moved = 0.0;
            for j in 0..dim {
                let new = sums[c * dim + j] / counts[c] as f64;
                let d = new - centroids[c * dim + j];
                moved += d * d;
                centroids[c * dim + j] = new;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    let centroids: Vec<f32> = centroids.iter().map(|&v| v as f32).collect();
    // final lists follow the stored (f32) centroids so that probing and membership agree
    let mut cols32 = Vec::new();
    transpose(&centroids, dim, &mut cols32);
    let assign: Vec<usize> = store
        .keys()
        .par_chunks_exact(dim)
        .map_init(|| (Vec::new(), vec![0.0; n_list]), |buf, k| nearest(&cols32, k, buf))
        .collect();
    let mut lists = vec![Vec::new(); n_list];
    for (i, &c) in assign.iter().enumerate() {
        lists[c].push(i as u32);
    }
    Ok(IvfIndex {
        dim,
        entries: m,
        centroids,
        lists,
        n_probe: 1.max(n_list / 4),
        iterations,
    })
}

impl IvfIndex {
    pub fn n_list(&self) -> usize {
        self.lists.len()
    }

    pub fn list(&self, c: usize) -> &[u32] {
        &self.lists[c]
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Scans the `n_probe` nearest lists exactly. When they hold fewer than
    /// `k` entries further lists are probed in centroid order and the result
    /// is flagged as widened.
    pub fn search(&self, store: &Datastore, q: &[f32], k: usize, n_probe: usize) -> Result<Neighbors> {
        check_request(store, q, k)?;
        if store.len() != self.entries || store.dim() != self.dim {
            return Err(Error::Contract(format!(
                "index covers {} x {} keys, store holds {} x {}",
                self.entries,
                self.dim,
                store.len(),
                store.dim()
            )));
        }
        let mut dist = vec![0.0; self.n_list()];
        squared_l2_rows(q, &self.centroids, &mut dist);
        let mut order: Vec<Cand> = dist
            .iter()
            .enumerate()
            .map(|(id, &dist)| Cand { dist, id })
            .collect();
        order.sort_unstable();
        let want = n_probe.clamp(1, self.n_list());
        let mut top = TopK::new(k);
        let mut scanned = 0;
        let mut probed = 0;
        for cand in &order {
            if probed >= want && scanned >= k {
                break;
            }
            for &id in &self.lists[cand.id] {
                let id = id as usize;
                top.offer(Cand {
                    dist: squared_l2(store.key(id), q),
                    id,
                });
            }
            scanned += self.lists[cand.id].len();
            probed += 1;
        }
        Ok(top.finish(probed > want))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_list() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_probe as u32).to_le_bytes());
        out.extend_from_slice(&(self.iterations as u32).to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for list in &self.lists {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for id in list {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: &str| Error::Format {
            offset: offset as u64,
            msg: msg.to_string(),
        };
        const HEADER: usize = 4 + 2 + 4 + 4 + 8 + 4 + 4;
        if bytes.len() < HEADER + 4 {
            return Err(fmt(bytes.len(), "truncated index header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(0, "bad magic, expected KMTX"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
            return Err(fmt(4, "unsupported index version"));
        }
        let body = bytes.len() - 4;
        if crc32fast::hash(&bytes[..body]) != u32::from_le_bytes(bytes[body..].try_into().unwrap()) {
            return Err(fmt(body, "checksum mismatch"));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let n_list = u32_at(6);
        let dim = u32_at(10);
        let entries = u64::from_le_bytes(bytes[14..22].try_into().unwrap()) as usize;
        let n_probe = u32_at(22);
        let iterations = u32_at(26);
        let mut at = HEADER;
        let cent_bytes = n_list
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .filter(|&n| at + n <= body)
            .ok_or_else(|| fmt(at, "centroid block exceeds file"))?;
        let centroids = bytes[at..at + cent_bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        at += cent_bytes;
        let mut lists = Vec::with_capacity(n_list);
        let mut seen = vec![false; entries];
        for _ in 0..n_list {
            if at + 4 > body {
                return Err(fmt(at, "truncated posting list"));
            }
            let len = u32_at(at);
            at += 4;
            if len > (body - at) / 4 {
                return Err(fmt(at, "posting list exceeds file"));
            }
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let id = u32_at(at) as u32;
                if id as usize >= entries || std::mem::replace(&mut seen[id as usize], true) {
                    return Err(fmt(at, "posting id out of range or repeated"));
                }
                list.push(id);
                at += 4;
            }
            lists.push(list);
        }
        if at != body || seen.iter().any(|s| !s) {
            return Err(fmt(at, "posting lists do not cover every entry exactly once"));
        }
        Ok(IvfIndex {
            dim,
            entries,
            centroids,
            lists,
            n_probe,
            iterations,
        })
    }
}

pub fn save_ivf(index: &IvfIndex, path: &Path) -> Result<()> {
    crate::encoder::write_atomic(path, &index.to_bytes())
}

pub fn load_ivf(path: &Path) -> Result<IvfIndex> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    IvfIndex::from_bytes(&bytes)
}
