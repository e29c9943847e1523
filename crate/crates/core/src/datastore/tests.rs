use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::data::{chronological_split, synth_generate, Normalizer, SplitSpec, SynthConfig};
use crate::encoder::{Encoder, EncoderConfig, EncoderMode};

fn store_from(keys: &[Vec<f32>]) -> Datastore {
    let d = keys[0].len();
    let mut s = Datastore::new(d, 2, [7; 32]);
    for (i, k) in keys.iter().enumerate() {
        let k64: Vec<f64> = k.iter().map(|&v| v as f64).collect();
        s.push(&k64, &[i as f64, -(i as f64)], EntryMeta { node: (i % 3) as u32, end_step: i as u32 })
            .unwrap();
    }
    s
}

fn gaussian_store(m: usize, d: usize, seed: u64) -> Datastore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<Vec<f32>> = (0..m)
        .map(|_| (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect();
    store_from(&keys)
}

fn query(d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

#[test]
fn hand_example() {
    let s = store_from(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]);
    let n = knn_exact(&s, &[0.0, 0.0], 2).unwrap();
    assert_eq!(n.ids, vec![0, 1]);
    assert_eq!(n.distances, vec![0.0, 1.0]);
}

#[test]
fn self_retrieval() {
    let s = gaussian_store(50, 8, 1);
    let n = knn_exact(&s, s.key(7), 1).unwrap();
    assert_eq!((n.ids[0], n.distances[0]), (7, 0.0));
}

#[test]
fn k_out_of_range() {
    let s = gaussian_store(5, 4, 1);
    assert!(matches!(knn_exact(&s, s.key(0), 6), Err(Error::Request(_))));
    assert!(matches!(knn_exact(&s, s.key(0), 0), Err(Error::Request(_))));
    assert!(matches!(knn_exact(&s, &[0.0; 3], 1), Err(Error::Dimension(_))));
}

#[test]
fn ties_break_by_id() {
    let s = store_from(&[vec![1.0], vec![-1.0], vec![1.0], vec![0.0], vec![-1.0]]);
    let n = knn_exact(&s, &[0.0], 4).unwrap();
    assert_eq!(n.ids, vec![3, 0, 1, 2]);
}

#[test]
fn matches_naive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = gaussian_store(2000, 16, 2);
    for _ in 0..100 {
        let q = query(16, &mut rng);
        let got = knn_exact(&s, &q, 10).unwrap();
        let want = knn_naive(&s, &q, 10);
        assert_eq!(got.ids, want.iter().map(|p| p.0).collect::<Vec<_>>());
        assert_eq!(got.distances, want.iter().map(|p| p.1).collect::<Vec<_>>());
    }
}

#[test]
fn filtered_search_skips_entries() {
    let s = gaussian_store(30, 4, 9);
    let n = knn_exact_filtered(&s, s.key(3), 2, |i| i != 3).unwrap();
    assert!(!n.ids.contains(&3));
    assert!(knn_exact_filtered(&s, s.key(3), 30, |i| i != 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn duplicate_heavy_stores_match_naive(
        keys in prop::collection::vec(prop::collection::vec(-2i8..=2, 3), 1..60),
        q in prop::collection::vec(-2i8..=2, 3),
        k in 1usize..20,
    ) {
        let keys: Vec<Vec<f32>> = keys.iter().map(|k| k.iter().map(|&v| v as f32).collect()).collect();
        let s = store_from(&keys);
        let q: Vec<f32> = q.iter().map(|&v| v as f32).collect();
        let k = k.min(s.len());
        let got = knn_exact(&s, &q, k).unwrap();
        let want = knn_naive(&s, &q, k);
        prop_assert_eq!(got.ids, want.iter().map(|p| p.0).collect::<Vec<_>>());
        prop_assert_eq!(got.distances, want.iter().map(|p| p.1).collect::<Vec<_>>());
    }

    #[test]
    fn distance_is_a_semimetric(
        a in prop::collection::vec(-1e3f32..1e3, 8),
        b in prop::collection::vec(-1e3f32..1e3, 8),
    ) {
        prop_assert_eq!(squared_l2(&a, &b), squared_l2(&b, &a));
        prop_assert!(squared_l2(&a, &b) >= 0.0);
        prop_assert_eq!(squared_l2(&a, &a), 0.0);
        prop_assert_eq!(squared_l2(&a, &b) == 0.0, a == b);
    }
}

#[test]
fn single_list_and_full_probe_are_exact() {
    let s = gaussian_store(3000, 8, 4);
    let one = build_ivf(&s, 1, 0).unwrap();
    let many = build_ivf(&s, 16, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let q = query(8, &mut rng);
        let exact = knn_exact(&s, &q, 10).unwrap();
        assert_eq!(one.search(&s, &q, 10, 1).unwrap(), exact);
        assert_eq!(many.search(&s, &q, 10, 16).unwrap(), exact);
    }
}

#[test]
fn ivf_partitions_every_entry_once() {
    let s = gaussian_store(1000, 4, 6);
    let idx = build_ivf(&s, 10, 1).unwrap();
    let mut seen = vec![0; s.len()];
    for c in 0..idx.n_list() {
        for &id in idx.list(c) {
            seen[id as usize] += 1;
        }
    }
    assert!(seen.iter().all(|&n| n == 1));
    assert!(idx.iterations <= 25);
    assert!(matches!(build_ivf(&s, 1001, 0), Err(Error::Request(_))));
    assert_eq!(idx, build_ivf(&s, 10, 1).unwrap());
}

#[test]
fn ivf_widens_when_lists_are_short() {
    let s = gaussian_store(200, 4, 7);
    let idx = build_ivf(&s, 50, 2).unwrap();
    let q = s.key(0).to_vec();
    let n = idx.search(&s, &q, 40, 1).unwrap();
    assert_eq!(n.ids.len(), 40);
    assert!(n.widened);
    let n = idx.search(&s, &q, 1, 50).unwrap();
    assert!(!n.widened);
}

#[test]
fn ivf_recall_small() {
    let s = gaussian_store(20_000, 16, 8);
    let idx = build_ivf(&s, 64, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut hit, mut total) = (0, 0);
    for _ in 0..50 {
        let q = query(16, &mut rng);
        let exact = knn_exact(&s, &q, 20).unwrap();
        let approx = idx.search(&s, &q, 20, 16).unwrap();
        hit += approx.ids.iter().filter(|i| exact.ids.contains(i)).count();
        total += 20;
    }
    assert!(hit as f64 / total as f64 >= 0.9, "recall {}", hit as f64 / total as f64);
}

#[test]
fn ivf_sidecar_round_trip() {
    let s = gaussian_store(500, 4, 10);
    let idx = build_ivf(&s, 8, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.kmtdx");
    save_ivf(&idx, &p).unwrap();
    let back = load_ivf(&p).unwrap();
    assert_eq!(back, idx);
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"KMTX");
    assert_eq!(back.to_bytes(), bytes);
    let mut bad = bytes;
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    assert!(IvfIndex::from_bytes(&bad).is_err());
}

#[test]
fn store_round_trip_is_byte_identical() {
    let s = gaussian_store(100, 6, 11);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.kmtds");
    save_store(&s, &p, false).unwrap();
    let back = load_store(&p).unwrap();
    assert_eq!(back, s);
    let p2 = dir.path().join("s2.kmtds");
    save_store(&back, &p2, false).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(std::fs::read(&p).unwrap().len(), s.byte_len());
}

#[test]
fn empty_store_round_trips() {
    let s = Datastore::new(4, 12, [1; 32]);
    let bytes = s.to_bytes();
    assert_eq!(bytes.len(), 54 + 4);
    assert_eq!(Datastore::from_bytes(&bytes).unwrap(), s);
}

#[test]
fn corruption_is_detected() {
    let s = gaussian_store(20, 3, 12);
    let bytes = s.to_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let mut bad = bytes.clone();
        let at = rng.random_range(0..bad.len());
        let flip = rng.random_range(1..=255u8);
        bad[at] ^= flip;
        assert!(matches!(Datastore::from_bytes(&bad), Err(Error::Format { .. })), "byte {at}");
    }
    let mut bad = bytes.clone();
    *bad.last_mut().unwrap() ^= 0x80;
    let err = Datastore::from_bytes(&bad).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert!(matches!(
        Datastore::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Format { .. })
    ));
}

#[test]
fn existing_file_needs_force() {
    let s = gaussian_store(10, 3, 14);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.kmtds");
    save_store(&s, &p, false).unwrap();
    let err = save_store(&s, &p, false).unwrap_err();
    assert!(err.to_string().contains("same checkpoint"), "{err}");
    save_store(&s, &p, true).unwrap();
}

#[test]
fn subsample_counts_and_determinism() {
    let s = gaussian_store(100, 3, 15);
    assert_eq!(s.subsample(1.0, 0).unwrap(), s);
    let half = s.subsample(0.5, 3).unwrap();
    assert_eq!(half.len(), 50);
    assert_eq!(half, s.subsample(0.5, 3).unwrap());
    assert_ne!(half, s.subsample(0.5, 4).unwrap());
    let steps: Vec<u32> = (0..half.len()).map(|i| half.meta(i).end_step).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    for i in 0..half.len() {
        let orig = half.meta(i).end_step as usize;
        assert_eq!(half.key(i), s.key(orig));
        assert_eq!(half.value(i), s.value(orig));
    }
    assert!(matches!(s.subsample(0.001, 0), Err(Error::Request(_))));
    assert!(matches!(s.subsample(0.0, 0), Err(Error::Request(_))));
}

fn small_setup(mode: EncoderMode) -> (Checkpoint, crate::data::MtsDataset, [crate::data::SplitRange; 3]) {
    let cfg = SynthConfig {
        nodes: 3,
        steps: 300,
        period: 24,
        motif_len: 6,
        motifs: 1,
        motif_count: 2,
        ..SynthConfig::default()
    };
    let raw = synth_generate(&cfg, 1).unwrap().dataset;
    let splits = chronological_split(raw.t_steps(), &SplitSpec::default()).unwrap();
    let normalizer = Normalizer::fit(&raw, splits[0]).unwrap();
    let ecfg = EncoderConfig {
        history: 24,
        segment: 8,
        horizon: 3,
        nodes: 3,
        d_model: 8,
        heads: 2,
        transformer_layers: 1,
        dilations: vec![1, 2],
        adaptive_dim: 2,
        mode,
        ..EncoderConfig::default()
    };
    let encoder = Encoder::new(ecfg, 5).unwrap();
    (Checkpoint { encoder, normalizer }, raw, splits)
}

#[test]
fn build_orders_entries_and_matches_queries() {
    let (ckpt, raw, splits) = small_setup(EncoderMode::Hybrid);
    let store = build_datastore(&ckpt, &raw, splits[0], None, KeyTap::FusionOutput, 4).unwrap();
    let per_node = 180 - 24 - 3 + 1;
    assert_eq!(store.len(), 3 * per_node);
    assert_eq!(store.dim(), 8);
    assert_eq!(store.horizon(), 3);
    assert_eq!(store.fingerprint, ckpt.fingerprint());
    let metas: Vec<EntryMeta> = (0..store.len()).map(|i| store.meta(i)).collect();
    let mut sorted = metas.clone();
    sorted.sort();
    assert_eq!(metas, sorted);
    assert_eq!(metas[0], EntryMeta { node: 0, end_step: 23 });

    // a different batch layout must reproduce the stored keys bit for bit
    let steps = [40usize, 77];
    let enc = ckpt
        .encoder
        .encode_slices(&raw, &ckpt.normalizer, &steps, None, KeyTap::FusionOutput, 1)
        .unwrap();
    for (r, &(node, end)) in enc.meta.iter().enumerate() {
        let i = node * per_node + (end - 23);
        let q: Vec<f32> = enc.keys[r * 8..(r + 1) * 8].iter().map(|&v| v as f32).collect();
        assert_eq!(q.as_slice(), store.key(i));
        let n = knn_exact(&store, &q, 1).unwrap();
        assert_eq!(n.distances[0], 0.0);
        // normalized target
        let expect = ckpt.normalizer.apply_value(raw.get(end + 1, node, 0), 0) as f32;
        assert_eq!(store.value(i)[0], expect);
    }

    let rebuilt = build_datastore(&ckpt, &raw, splits[0], None, KeyTap::FusionOutput, 7).unwrap();
    assert_eq!(rebuilt.to_bytes(), store.to_bytes());
}

#[test]
fn single_window_store() {
    let (ckpt, raw, _) = small_setup(EncoderMode::LongOnly);
    let split = crate::data::SplitRange { start: 10, len: 27 };
    let store = build_datastore(&ckpt, &raw, split, None, KeyTap::FusionOutput, 4).unwrap();
    assert_eq!(store.len(), 3);
    let short = crate::data::SplitRange { start: 10, len: 26 };
    assert!(build_datastore(&ckpt, &raw, short, None, KeyTap::FusionOutput, 4).is_err());
}

#[test]
fn batch_search_matches_single_queries() {
    let s = gaussian_store(1500, 5, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let queries: Vec<f32> = (0..130).flat_map(|_| query(5, &mut rng)).collect();
    let batch = knn_exact_batch(&s, &queries, 7, None).unwrap();
    assert_eq!(batch.len(), 130);
    for (q, got) in queries.chunks(5).zip(&batch) {
        assert_eq!(got, &knn_exact(&s, q, 7).unwrap());
    }
    let own: Vec<f32> = (0..10).flat_map(|i| s.key(i).to_vec()).collect();
    let skip = |i: usize| Some(i);
    let batch = knn_exact_batch(&s, &own, 3, Some(&skip)).unwrap();
    for (i, n) in batch.iter().enumerate() {
        assert!(!n.ids.contains(&i));
        assert_eq!(n, &knn_exact_filtered(&s, s.key(i), 3, |j| j != i).unwrap());
    }
    assert!(knn_exact_batch(&s, &queries[..4], 1, None).is_err());
    assert!(knn_exact_batch(&s, &own, 1500, Some(&skip)).is_err());
}
