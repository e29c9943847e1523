//! Dependency graphs: transition matrices from a predefined adjacency and the
//! learned self-adaptive adjacency.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{self, Graph, Tensor, Var};

/// Predefined adjacency with its forward and backward random-walk matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyGraph {
    pub adjacency: Tensor,
    pub forward: Tensor,
    pub backward: Tensor,
}

impl DependencyGraph {
    pub fn from_adjacency(adjacency: Tensor) -> Result<Self> {
        let (forward, backward) = transition_matrices(&adjacency)?;
        Ok(DependencyGraph {
            adjacency,
            forward,
            backward,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }

    /// Reads a dense `N×N` CSV or a `src,dst,weight` edge list.
    pub fn load(path: &Path, n_nodes: usize) -> Result<Self> {
        Self::from_adjacency(load_adjacency(path, n_nodes)?)
    }
}

fn validate_square(a: &Tensor) -> Result<usize> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Dimension(format!("adjacency must be square, got {:?}", s)));
    }
    if let Some(pos) = a.data().iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!(
            "adjacency entry ({}, {}) is negative or non-finite",
            pos / s[0],
            pos % s[0]
        )));
    }
    Ok(s[0])
}

fn row_normalize(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for j in 0..n {
                out[i * n + j] = row[j] / total;
            }
        }
    }
    out
}

/// `(P_f, P_b)`: row-normalized `A` and `Aᵀ`; rows without out-edges stay zero.
pub fn transition_matrices(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = validate_square(a)?;
    let ad = a.data();
    let transposed: Vec<f64> = (0..n * n).map(|idx| ad[(idx % n) * n + idx / n]).collect();
    Ok((
        Tensor::new(vec![n, n], row_normalize(ad, n))?,
        Tensor::new(vec![n, n], row_normalize(&transposed, n))?,
    ))
}

/// `[P⁰, P¹, …, P^order]` with `P⁰ = I`.
pub fn matrix_power_series(p: &Tensor, order: usize) -> Result<Vec<Tensor>> {
    let s = p.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Dimension(format!("power series of non-square {:?}", s)));
    }
    let mut powers = vec![Tensor::eye(s[0])];
    for k in 1..=order {
        let next = tensor::matmul(&powers[k - 1], p)?;
        powers.push(next);
    }
    Ok(powers)
}

/// Row-softmax of `relu(E1·E2ᵀ)`, recorded on `g` so gradients reach both embeddings.
pub fn adaptive_adjacency(g: &mut Graph, source: Var, target: Var) -> Result<Var> {
    let t = g.transpose(target)?;
    let scores = g.matmul(source, t)?;
    let scores = g.relu(scores);
    g.softmax(scores, 1)
}

fn load_adjacency(path: &Path, n: usize) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let load_err = |msg: String| Error::Load {
        path: path.to_path_buf(),
        msg,
    };
    let rows: Vec<Vec<&str>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::trim).collect())
        .collect();
    let parse = |s: &str, row: usize| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| load_err(format!("row {}: cannot parse {:?}", row, s)))
    };
    let mut a = vec![0.0; n * n];
    let header = rows
        .first()
        .is_some_and(|r| r.iter().any(|c| c.parse::<f64>().is_err()));
    let body = if header { &rows[1..] } else { &rows[..] };
    let named_edges = header && rows[0].first().is_some_and(|c| c.eq_ignore_ascii_case("src"));
    let dense_shape = body.len() == n && body.iter().all(|r| r.len() == n);
    let is_edge_list = named_edges || (!dense_shape && body.iter().all(|r| r.len() == 3));
    if is_edge_list {
        for (i, r) in body.iter().enumerate() {
            if r.len() != 3 {
                return Err(load_err(format!("edge row {} needs src,dst,weight", i)));
            }
            let (src, dst) = (parse(r[0], i)? as usize, parse(r[1], i)? as usize);
            if src >= n || dst >= n {
                return Err(load_err(format!("edge row {} references node outside 0..{}", i, n)));
            }
            a[src * n + dst] = parse(r[2], i)?;
        }
    } else {
        if body.len() != n {
            return Err(load_err(format!("dense adjacency has {} rows, expected {}", body.len(), n)));
        }
        for (i, r) in body.iter().enumerate() {
            if r.len() != n {
                return Err(load_err(format!("row {} has {} cells, expected {}", i, r.len(), n)));
            }
            for (j, cell) in r.iter().enumerate() {
                a[i * n + j] = parse(cell, i)?;
            }
        }
    }
    let t = Tensor::new(vec![n, n], a)?;
    validate_square(&t)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(n: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![n, n], v.to_vec()).unwrap()
    }

    #[test]
    fn transition_examples() {
        let (f, b) = transition_matrices(&m(2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(f.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(b.data(), &[0.0, 1.0, 1.0, 0.0]);
        let (f, b) = transition_matrices(&m(2, &[0.0, 2.0, 0.0, 0.0])).unwrap();
        assert_eq!(f.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.data(), &[0.0, 0.0, 1.0, 0.0]);
        let (f, b) = transition_matrices(&Tensor::zeros(&[3, 3])).unwrap();
        assert!(f.data().iter().chain(b.data()).all(|v| *v == 0.0));
        assert!(transition_matrices(&m(2, &[0.0, -1.0, 0.0, 0.0])).is_err());
        assert!(transition_matrices(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn power_series_examples() {
        let p = m(2, &[0.0, 1.0, 1.0, 0.0]);
        let s = matrix_power_series(&p, 0).unwrap();
        assert_eq!(s, vec![Tensor::eye(2)]);
        let s = matrix_power_series(&p, 2).unwrap();
        assert_eq!(s, vec![Tensor::eye(2), p, Tensor::eye(2)]);
    }

    #[test]
    fn stochastic_powers_stay_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(&[6, 6], 0.0, 1.0, &mut rng);
        let (f, _) = transition_matrices(&a).unwrap();
        for p in matrix_power_series(&f, 5).unwrap() {
            for row in p.data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adaptive_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4, 3]));
        let a = adaptive_adjacency(&mut g, z, z).unwrap();
        assert!(g.value(a).data().iter().all(|v| (*v - 0.25).abs() < 1e-15));

        // relu(E1 E2ᵀ) = [[1,0],[0,0]]
        let e1 = g.constant(m(2, &[1.0, 0.0, 0.0, 0.0]));
        let e2 = g.constant(m(2, &[1.0, 0.0, 0.0, 0.0]));
        let a = adaptive_adjacency(&mut g, e1, e2).unwrap();
        let v = g.value(a).data();
        let e = std::f64::consts::E;
        assert!((v[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((v[0] - 0.7311).abs() < 1e-4 && (v[1] - 0.2689).abs() < 1e-4);
        assert_eq!(&v[2..], &[0.5, 0.5]);
    }

    #[test]
    fn adaptive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e1 = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let e2 = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[5, 5], -1.0, 1.0, &mut rng);
        let loss = |e1: &Tensor, track: bool| {
            let mut g = Graph::new();
            let a = if track { g.param(e1.clone()) } else { g.constant(e1.clone()) };
            let b = g.constant(e2.clone());
            let adj = adaptive_adjacency(&mut g, a, b).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(adj, wv).unwrap();
            let s = g.sum(p);
            (g, a, s)
        };
        let (mut g, a, s) = loss(&e1, true);
        g.backward(s).unwrap();
        let grad = g.grad(a).unwrap();
        let h = 1e-5;
        for j in 0..e1.numel() {
            let mut plus = e1.clone();
            plus.data_mut()[j] += h;
            let mut minus = e1.clone();
            minus.data_mut()[j] -= h;
            let (gp, _, sp) = loss(&plus, false);
            let (gm, _, sm) = loss(&minus, false);
            let numeric = (gp.value(sp).item() - gm.value(sm).item()) / (2.0 * h);
            let an = grad.data()[j];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-7);
            assert!(rel < 1e-4, "coord {j}: {an} vs {numeric}");
        }
    }

    #[test]
    fn loads_dense_and_edge_list() {
        let dir = tempfile::tempdir().unwrap();
        let dense = dir.path().join("a.csv");
        std::fs::write(&dense, "0,1\n2,0\n").unwrap();
        let g = DependencyGraph::load(&dense, 2).unwrap();
        assert_eq!(g.adjacency.data(), &[0.0, 1.0, 2.0, 0.0]);
        let edges = dir.path().join("e.csv");
        std::fs::write(&edges, "src,dst,weight\n0,3,1.5\n2,1,1\n").unwrap();
        let g = DependencyGraph::load(&edges, 4).unwrap();
        assert_eq!(g.adjacency.data()[3], 1.5);
        assert_eq!(g.forward.data()[3], 1.0);
        std::fs::write(&dense, "0,-1\n2,0\n").unwrap();
        assert!(DependencyGraph::load(&dense, 2).is_err());
        std::fs::write(&dense, "0,1,1\n2,0\n").unwrap();
        assert!(DependencyGraph::load(&dense, 2).is_err());
    }

    fn permute_matrix(a: &[f64], n: usize, perm: &[usize]) -> Vec<f64> {
        // (πAπᵀ)[i][j] = A[π⁻¹(i)][π⁻¹(j)], node i of the new labeling is perm[i] of the old.
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = a[perm[i] * n + perm[j]];
            }
        }
        out
    }

    proptest! {
        #[test]
        fn transition_matrices_are_permutation_equivariant(
            seed in 0u64..1000,
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = Tensor::uniform(&[6, 6], 0.0, 1.0, &mut rng);
            // Isolate a node to exercise zero rows.
            for j in 0..6 { a.data_mut()[2 * 6 + j] = 0.0; }
            let (f, b) = transition_matrices(&a).unwrap();
            let pa = m(6, &permute_matrix(a.data(), 6, &perm));
            let (pf, pb) = transition_matrices(&pa).unwrap();
            // Row sums are accumulated in a different order after relabeling.
            let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
            prop_assert!(close(pf.data(), &permute_matrix(f.data(), 6, &perm)));
            prop_assert!(close(pb.data(), &permute_matrix(b.data(), 6, &perm)));
        }

        #[test]
        fn adaptive_rows_are_probability_vectors(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let e1 = g.constant(Tensor::uniform(&[7, 4], -scale, scale, &mut rng));
            let e2 = g.constant(Tensor::uniform(&[7, 4], -scale, scale, &mut rng));
            let a = adaptive_adjacency(&mut g, e1, e2).unwrap();
            for row in g.value(a).data().chunks(7) {
                prop_assert!(row.iter().all(|v| *v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
