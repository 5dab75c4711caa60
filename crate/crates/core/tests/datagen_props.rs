use mist_core::datagen::{
    decode_feature_set, encode_feature_set, generate, read_feature_set, sample_cyclic_imbalanced,
    sample_k_shot, sample_per_mode, write_feature_set, LabeledFeatureSet, SyntheticSpec,
};
use mist_core::rng;
use mist_core::Error;
use proptest::prelude::*;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn within_ss(points: &[&[f64]]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64)
        .collect();
    points.iter().map(|p| sq_dist(p, &mean)).sum()
}

/// Exhaustive 2-means: the bipartition with least within-cluster sum of
/// squares. Point 0 is pinned to side 0, so each split is visited once.
fn brute_two_means(points: &[&[f64]]) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut best = (vec![0; n], f64::INFINITY);
    for mask in 0u32..(1 << (n - 1)) {
        let side: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
        let a: Vec<&[f64]> = (0..n).filter(|&i| side[i] == 0).map(|i| points[i]).collect();
        let b: Vec<&[f64]> = (0..n).filter(|&i| side[i] == 1).map(|i| points[i]).collect();
        let w = within_ss(&a) + within_ss(&b);
        if w < best.1 {
            best = (side, w);
        }
    }
    best
}

/// Gap statistic for k = 1, 2 against uniform reference draws in the
/// bounding box of `points`.
fn gaps(points: &[&[f64]], refs: usize, seed: u64) -> (f64, f64) {
    let dim = points[0].len();
    let lo: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut r = rng::stream(seed);
    let (mut e1, mut e2) = (0.0, 0.0);
    for _ in 0..refs {
        let u = rng::uniform_tensor(&mut r, points.len(), dim, 1.0);
        let draws: Vec<Vec<f64>> = (0..points.len())
            .map(|i| (0..dim).map(|j| lo[j] + (u.get(i, j) + 1.0) / 2.0 * (hi[j] - lo[j])).collect())
            .collect();
        let view: Vec<&[f64]> = draws.iter().map(Vec::as_slice).collect();
        e1 += within_ss(&view).ln();
        e2 += brute_two_means(&view).1.ln();
    }
    let n = refs as f64;
    (e1 / n - within_ss(points).ln(), e2 / n - brute_two_means(points).1.ln())
}

fn class_points<'a>(set: &'a LabeledFeatureSet, modes: &[usize], c: usize) -> (Vec<&'a [f64]>, Vec<usize>) {
    (0..set.len())
        .filter(|&i| set.label(i) == c)
        .map(|i| (set.feature(i), modes[i]))
        .unzip()
}

fn bimodal(seed: u64, per_class: usize) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        samples_per_class_train: per_class,
        samples_per_class_test: 2,
        seed,
        ..SyntheticSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn two_means_recovers_generating_modes(seed in any::<u64>()) {
        let data = generate(&bimodal(seed, 14)).unwrap();
        let (mut agree, mut total) = (0usize, 0usize);
        for c in 0..4 {
            let (points, truth) = class_points(&data.train, &data.train_modes, c);
            let (split, _) = brute_two_means(&points);
            let same = split.iter().zip(&truth).filter(|(a, b)| a == b).count();
            agree += same.max(points.len() - same);
            total += points.len();
        }
        prop_assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn two_clusters_beat_one_under_the_gap_statistic(seed in any::<u64>(), ratio in 6.0f64..10.0) {
        let spec = SyntheticSpec { mode_separation: ratio, ..bimodal(seed, 12) };
        let data = generate(&spec).unwrap();
        for c in 0..4 {
            let (points, _) = class_points(&data.train, &data.train_modes, c);
            let (g1, g2) = gaps(&points, 8, seed ^ c as u64);
            prop_assert!(g2 > g1, "class {c}: gap(2) {g2} <= gap(1) {g1}");
        }
    }

    #[test]
    fn samplers_are_pure_and_unique(seed in any::<u64>(), k in 1usize..6) {
        let pool = generate(&bimodal(seed, 16)).unwrap().train;
        let before = pool.clone();
        let a = sample_k_shot(&pool, k, seed).unwrap();
        let b = sample_k_shot(&pool, k, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&pool, &before);
        prop_assert_eq!(a.set.class_counts(), vec![k; 4]);
        let mut idx = a.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), 4 * k);
        let cyc = sample_cyclic_imbalanced(&pool, &[k], seed).unwrap();
        prop_assert_eq!(cyc, a);
    }

    #[test]
    fn feature_set_roundtrip(seed in any::<u64>(), n in 0usize..40, dim in 1usize..9, classes in 1usize..6) {
        let mut r = rng::stream(seed);
        let features = rng::normal_tensor(&mut r, n, dim, 1e3).into_data();
        let labels: Vec<u32> = (0..n).map(|i| ((seed as usize + i * 7) % classes) as u32).collect();
        let tokens: Vec<Vec<u32>> = (0..classes).map(|c| (0..c as u32).collect()).collect();
        let set = LabeledFeatureSet::new(dim, features, labels, tokens).unwrap();
        let back = decode_feature_set(&encode_feature_set(&set)).unwrap();
        prop_assert_eq!(back, set);
    }
}

#[test]
fn cyclic_counts_follow_the_cycle() {
    let spec = SyntheticSpec {
        num_classes: 6,
        samples_per_class_train: 10,
        samples_per_class_test: 1,
        ..SyntheticSpec::default()
    };
    let pool = generate(&spec).unwrap().train;
    let s = sample_cyclic_imbalanced(&pool, &[1, 2, 4, 8], 5).unwrap();
    assert_eq!(s.shots_per_class, vec![1, 2, 4, 8, 1, 2]);
    assert_eq!(s.set.class_counts(), vec![1, 2, 4, 8, 1, 2]);
    assert_eq!(s.set.len(), 18);
    assert!(matches!(
        sample_cyclic_imbalanced(&pool, &[11], 5),
        Err(Error::Input(_))
    ));
}

#[test]
fn different_seeds_give_different_supports() {
    let pool = generate(&bimodal(1, 200)).unwrap().train;
    assert_ne!(
        sample_k_shot(&pool, 4, 1).unwrap().indices,
        sample_k_shot(&pool, 4, 2).unwrap().indices
    );
}

#[test]
fn per_mode_sampler_covers_every_mode() {
    let data = generate(&bimodal(9, 16)).unwrap();
    let s = sample_per_mode(&data.train, &data.train_modes, 1, 3).unwrap();
    assert_eq!(s.shots_per_class, vec![2; 4]);
    for c in 0..4 {
        let mut modes: Vec<usize> = s
            .indices
            .iter()
            .filter(|&&i| data.train.label(i) == c)
            .map(|&i| data.train_modes[i])
            .collect();
        modes.sort_unstable();
        assert_eq!(modes, vec![0, 1]);
    }
}

#[test]
fn edge_case_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = LabeledFeatureSet::new(3, vec![], vec![], vec![vec![1], vec![2]]).unwrap();
    let path = dir.path().join("empty.mfs");
    write_feature_set(&empty, &path).unwrap();
    let back = read_feature_set(&path).unwrap();
    assert!(back.is_empty());
    assert_eq!(back, empty);

    let single = LabeledFeatureSet::new(2, vec![0.5, -0.0, 1e-300, f64::MAX], vec![0, 0], vec![vec![]]).unwrap();
    let bytes = encode_feature_set(&single);
    let back = decode_feature_set(&bytes).unwrap();
    assert_eq!(encode_feature_set(&back), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_feature_set(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(
        decode_feature_set(&bytes[..bytes.len() - 1]),
        Err(Error::Format { .. })
    ));
}
