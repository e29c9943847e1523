use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Datastore;
use crate::error::{Error, Result};

/// Squared L2 distance accumulated in `f64`.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Squared distances from `q` to each `q.len()`-wide row of `rows`, written to `out`.
///
/// Each row is summed in the same order as [`squared_l2`], so results are
/// bit-identical to it; eight rows are accumulated side by side.
pub(crate) fn squared_l2_rows<T: Copy + Into<f64>>(q: &[f32], rows: &[T], out: &mut [f64]) {
    let dim = q.len();
    debug_assert_eq!(rows.len(), dim * out.len());
    let qd: Vec<f64> = q.iter().map(|&v| v as f64).collect();
    let mut blocks = rows.chunks_exact(LANES * dim);
    let mut outs = out.chunks_exact_mut(LANES);
    for (block, o) in blocks.by_ref().zip(outs.by_ref()) {
        let mut acc = [0.0f64; LANES];
        for (j, &x) in qd.iter().enumerate() {
            for (l, a) in acc.iter_mut().enumerate() {
                // SAFETY: l < LANES and j < dim, so the index is inside the block
                let v: f64 = unsafe { (*block.get_unchecked(l * dim + j)).into() };
                let t = v - x;
                *a += t * t;
            }
        }
        o.copy_from_slice(&acc);
    }
    for (row, o) in blocks.remainder().chunks_exact(dim).zip(outs.into_remainder()) {
        let mut acc = 0.0f64;
        for (&v, &x) in row.iter().zip(&qd) {
            let t = v.into() - x;
            acc += t * t;
        }
        *o = acc;
    }
}

const LANES: usize = 8;

/// Column-major copy of `rows` (`n × dim` row-major): `dim × n`.
pub(crate) fn transpose<T: Copy>(rows: &[T], dim: usize, out: &mut Vec<T>) {
    let n = rows.len() / dim;
    out.clear();
    out.reserve(rows.len());
    for j in 0..dim {
        out.extend(rows.chunks_exact(dim).map(|r| r[j]));
    }
    debug_assert_eq!(out.len(), n * dim);
}

/// As [`squared_l2_rows`] over a column-major block (`dim × out.len()`).
/// The inner loop runs across rows and vectorizes; each row is still
/// summed in coordinate order.
pub(crate) fn squared_l2_cols<T: Copy + Into<f64>>(q: &[f64], cols: &[T], out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled features
        return unsafe { cols_avx2(q, cols, out) };
    }
    cols_generic(q, cols, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn cols_avx2<T: Copy + Into<f64>>(q: &[f64], cols: &[T], out: &mut [f64]) {
    cols_generic(q, cols, out)
}

#[inline(always)]
fn cols_generic<T: Copy + Into<f64>>(q: &[f64], cols: &[T], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(cols.len(), q.len() * n);
    out.fill(0.0);
    let mut cols = cols.chunks_exact(n);
    let mut qs = q.chunks_exact(4);
    // four coordinates per pass keep the running sum in a register
    for x in qs.by_ref() {
        let (c0, c1, c2, c3) = (
            cols.next().unwrap(),
            cols.next().unwrap(),
            cols.next().unwrap(),
            cols.next().unwrap(),
        );
        for i in 0..n {
            let mut a = out[i];
            let t = c0[i].into() - x[0];
            a += t * t;
            let t = c1[i].into() - x[1];
            a += t * t;
            let t = c2[i].into() - x[2];
            a += t * t;
            let t = c3[i].into() - x[3];
            a += t * t;
            out[i] = a;
        }
    }
    for (&x, col) in qs.remainder().iter().zip(cols) {
        for (o, &v) in out.iter_mut().zip(col) {
            let t = v.into() - x;
            *o += t * t;
        }
    }
}

/// The K nearest entries, ascending by distance then id.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub ids: Vec<usize>,
    pub distances: Vec<f64>,
    /// Set when an approximate search had to probe more lists than asked.
    pub widened: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Cand {
    pub dist: f64,
    pub id: usize,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

/// Bounded max-heap keeping the K smallest `(distance, id)` pairs.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Cand>,
    /// Distance of the current K-th candidate once the heap is full.
    bound: f64,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
            bound: f64::INFINITY,
        }
    }

    #[inline]
    pub fn offer(&mut self, c: Cand) {
        if c.dist > self.bound {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            } else {
                return;
            }
        }
        if self.heap.len() == self.k {
            self.bound = self.heap.peek().map_or(f64::INFINITY, |t| t.dist);
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn finish(self, widened: bool) -> Neighbors {
        let sorted = self.heap.into_sorted_vec();
        Neighbors {
            ids: sorted.iter().map(|c| c.id).collect(),
            distances: sorted.iter().map(|c| c.dist).collect(),
            widened,
        }
    }
}

pub(crate) fn check_request(store: &Datastore, q: &[f32], k: usize) -> Result<()> {
    if q.len() != store.dim() {
        return Err(Error::Dimension(format!(
            "query has {} dims, store keys have {}",
            q.len(),
            store.dim()
        )));
    }
    if k == 0 || k > store.len() {
        return Err(Error::Request(format!(
            "K={} must lie in 1..={} (store size)",
            k,
            store.len()
        )));
    }
    Ok(())
}

/// Keys scanned per tile; a tile is reused across a block of queries.
const TILE: usize = 512;
const QUERY_BLOCK: usize = 64;

/// Exact K-nearest neighbors by full scan.
pub fn knn_exact(store: &Datastore, q: &[f32], k: usize) -> Result<Neighbors> {
    check_request(store, q, k)?;
    let mut top = TopK::new(k);
    let mut dist = vec![0.0; TILE];
    for (t, tile) in store.keys().chunks(TILE * store.dim()).enumerate() {
        let dist = &mut dist[..tile.len() / store.dim()];
        squared_l2_rows(q, tile, dist);
        for (i, &d) in dist.iter().enumerate() {
            top.offer(Cand { dist: d, id: t * TILE + i });
        }
    }
    Ok(top.finish(false))
}

/// [`knn_exact`] for many row-major queries at once, in parallel. The
/// optional `exclude` callback names one entry per query to skip.
pub fn knn_exact_batch(
    store: &Datastore,
    queries: &[f32],
    k: usize,
    exclude: Option<&(dyn Fn(usize) -> Option<usize> + Sync)>,
) -> Result<Vec<Neighbors>> {
    use rayon::prelude::*;
    let dim = store.dim();
    if dim == 0 || queries.len() % dim != 0 {
        return Err(Error::Dimension(format!(
            "{} query values do not split into rows of {}",
            queries.len(),
            dim
        )));
    }
    let nq = queries.len() / dim;
    if nq == 0 {
        return Ok(Vec::new());
    }
    check_request(store, &queries[..dim], k)?;
    let limit = store.len() - usize::from(exclude.is_some());
    if k > limit {
        return Err(Error::Request(format!("K={} exceeds the {} entries available", k, limit)));
    }
    let blocks: Vec<Vec<Neighbors>> = queries
        .par_chunks(QUERY_BLOCK * dim)
        .enumerate()
        .map(|(b, block)| {
            let first = b * QUERY_BLOCK;
            let mut tops: Vec<TopK> = (0..block.len() / dim).map(|_| TopK::new(k)).collect();
            let skip: Vec<Option<usize>> = (0..tops.len())
                .map(|i| exclude.and_then(|f| f(first + i)))
                .collect();
            let qd: Vec<f64> = block.iter().map(|&v| v as f64).collect();
            let mut dist = vec![0.0; TILE];
            let mut cols = Vec::new();
            for (t, tile) in store.keys().chunks(TILE * dim).enumerate() {
                let dist = &mut dist[..tile.len() / dim];
                transpose(tile, dim, &mut cols);
                for (qi, q) in qd.chunks_exact(dim).enumerate() {
                    squared_l2_cols(q, &cols, dist);
                    for (i, &d) in dist.iter().enumerate() {
                        let id = t * TILE + i;
                        if skip[qi] != Some(id) {
                            tops[qi].offer(Cand { dist: d, id });
                        }
                    }
                }
            }
            tops.into_iter().map(|t| t.finish(false)).collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

/// As [`knn_exact`], skipping entries for which `keep` is false.
pub fn knn_exact_filtered(store: &Datastore, q: &[f32], k: usize, keep: impl Fn(usize) -> bool) -> Result<Neighbors> {
    check_request(store, q, k)?;
    let mut top = TopK::new(k);
    for (id, key) in store.keys().chunks_exact(store.dim()).enumerate() {
        if keep(id) {
            top.offer(Cand {
                dist: squared_l2(key, q),
                id,
            });
        }
    }
    if top.len() < k {
        return Err(Error::Request(format!(
            "only {} entries remain after filtering, K={}",
            top.len(),
            k
        )));
    }
    Ok(top.finish(false))
}

/// Reference scan: every distance, then a full stable sort.
pub fn knn_naive(store: &Datastore, q: &[f32], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..store.len())
        .map(|i| {
            let key = store.key(i);
            let mut s = 0.0f64;
            for j in 0..q.len() {
                let d = key[j] as f64 - q[j] as f64;
                s += d * d;
            }
            (i, s)
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}
