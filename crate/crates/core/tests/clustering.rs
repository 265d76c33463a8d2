mod common;

use lmar::clustering::{
    default_grid, grid_search_params, mean_intra_cluster_similarity, objective_sample, sample_knn_cluster,
    validate_partition, Cluster, ClusterParams, ObjectiveSpec,
};
use lmar::embedding::EmbeddingMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::random_unit;

/// Replays the greedy loop from an exhaustive similarity matrix over the
/// index's stored (normalized) rows.
fn oracle(index: &EmbeddingMatrix, k: usize, delta: f64, seed: u64) -> Vec<Vec<usize>> {
    let rows: Vec<&[f64]> = index.rows().collect();
    let n = rows.len();
    let sim: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| rows.iter().map(|b| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>()).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut left: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let s = left[rng.random_range(0..left.len())];
        let mut cand: Vec<usize> = left.iter().copied().filter(|&j| j != s && sim[s][j] > delta).collect();
        cand.sort_by(|&a, &b| sim[s][b].partial_cmp(&sim[s][a]).unwrap().then(a.cmp(&b)));
        cand.truncate(k - 1);
        let mut members = vec![s];
        members.extend(cand);
        left.retain(|j| !members.contains(j));
        out.push(members);
    }
    out
}

fn angles(deg: &[f64]) -> Vec<Vec<f64>> {
    deg.iter().map(|d| vec![d.to_radians().cos(), d.to_radians().sin()]).collect()
}

#[test]
fn six_points_form_two_bundles() {
    let rows = angles(&[0.0, 5.0, 10.0, 90.0, 95.0, 100.0]);
    let index = EmbeddingMatrix::from_rows_dense(rows).unwrap();
    for seed in 0..20 {
        let params = ClusterParams { k: 3, delta: 0.9, rng_seed: seed };
        let clusters = sample_knn_cluster(&index, &params).unwrap();
        let got: Vec<Vec<usize>> = clusters.iter().map(|c| c.member_ids.clone()).collect();
        assert_eq!(got, oracle(&index, 3, 0.9, seed));
        let mut sets: Vec<Vec<usize>> = got
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.sort();
                m
            })
            .collect();
        sets.sort();
        assert_eq!(sets, vec![vec![0, 1, 2], vec![3, 4, 5]]);
    }
}

#[test]
fn matches_replay_oracle_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..60);
        let d = rng.random_range(2..10);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let index = EmbeddingMatrix::from_rows_dense(rows).unwrap();
        let k = rng.random_range(1..8);
        let delta = rng.random_range(-0.5..0.9);
        let seed = rng.random();
        let got: Vec<Vec<usize>> = sample_knn_cluster(&index, &ClusterParams { k, delta, rng_seed: seed })
            .unwrap()
            .into_iter()
            .map(|c| c.member_ids)
            .collect();
        assert_eq!(got, oracle(&index, k, delta, seed));
    }
}

#[test]
fn single_point_and_high_threshold() {
    let one = EmbeddingMatrix::from_rows_dense(vec![vec![1.0, 0.0]]).unwrap();
    let c = sample_knn_cluster(&one, &ClusterParams { k: 4, delta: 0.5, rng_seed: 0 }).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].member_ids, vec![0]);
    assert_eq!(c[0].similarities, vec![1.0]);

    let rows = angles(&[0.0, 30.0, 60.0, 90.0]);
    let index = EmbeddingMatrix::from_rows_dense(rows).unwrap();
    let c = sample_knn_cluster(&index, &ClusterParams { k: 4, delta: 0.99, rng_seed: 5 }).unwrap();
    assert!(c.iter().all(|c| c.len() == 1));
    assert_eq!(c.len(), 4);
}

#[test]
fn validator_flags_duplicates_and_sub_threshold() {
    let params = ClusterParams { k: 4, delta: 0.5, rng_seed: 0 };
    let cluster = |ids: &[usize], sims: &[f64]| Cluster {
        seed_id: ids[0],
        member_ids: ids.to_vec(),
        similarities: sims.to_vec(),
        description: None,
    };
    let valid = vec![
        cluster(&[0, 1, 2], &[1.0, 0.9, 0.8]),
        cluster(&[3, 4, 5, 6], &[1.0, 0.9, 0.8, 0.7]),
        cluster(&[7, 8, 9], &[1.0, 0.6, 0.6]),
    ];
    assert!(validate_partition(&valid, 10, &params).is_valid());

    let mut dup = valid.clone();
    dup[0] = cluster(&[0, 1, 2, 7], &[1.0, 0.9, 0.8, 0.7]);
    let r = validate_partition(&dup, 10, &params);
    assert_eq!(r.duplicated, vec![7]);

    let mut low = valid.clone();
    low[2] = cluster(&[7, 8, 9], &[1.0, 0.6, 0.49]);
    let r = validate_partition(&low, 10, &params);
    assert_eq!(r.sub_threshold.len(), 1);
    assert_eq!(r.sub_threshold[0].1, 9);

    let r = validate_partition(&valid[..2], 10, &params);
    assert_eq!(r.missing, vec![7, 8, 9]);
}

#[test]
fn grid_matches_exhaustive_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let centres: Vec<Vec<f64>> = (0..6).map(|_| random_unit(&mut rng, 16)).collect();
    let rows: Vec<Vec<f64>> = (0..120)
        .map(|i| {
            let noise = random_unit(&mut rng, 16);
            centres[i % 6].iter().zip(&noise).map(|(c, e)| c + 0.5 * e).collect()
        })
        .collect();
    let index = EmbeddingMatrix::from_rows_dense(rows).unwrap();
    let objective = ObjectiveSpec::MeanIntraClusterSimilarity {
        sample_fraction: 0.5,
        sample_seed: 9,
    };
    let grid = default_grid(2);
    let outcome = grid_search_params(&index, &grid, &objective).unwrap();

    let sub = index.select(&objective_sample(index.n(), &objective));
    let mut best: Option<(f64, ClusterParams)> = None;
    for p in &grid {
        let clusters = sample_knn_cluster(&sub, p).unwrap();
        // Independent objective: mean over rows of average similarity to
        // the rest of its cluster, singletons counting as zero.
        let mut total = 0.0;
        for c in &clusters {
            for &a in &c.member_ids {
                if c.len() < 2 {
                    continue;
                }
                let va = sub.vector(a).unwrap();
                let s: f64 = c
                    .member_ids
                    .iter()
                    .filter(|&&b| b != a)
                    .map(|&b| va.iter().zip(sub.vector(b).unwrap()).map(|(x, y)| x * y).sum::<f64>())
                    .sum();
                total += s / (c.len() - 1) as f64;
            }
        }
        let v = total / sub.n() as f64;
        assert!((v - mean_intra_cluster_similarity(&sub, &clusters)).abs() < 1e-12);
        let cell = outcome.cells.iter().find(|c| c.params == *p).unwrap();
        assert!((cell.objective.unwrap() - v).abs() < 1e-12);
        let better = match best {
            None => true,
            Some((bv, bp)) => v > bv || (v == bv && (p.k < bp.k || (p.k == bp.k && p.delta > bp.delta))),
        };
        if better {
            best = Some((v, *p));
        }
    }
    assert_eq!(outcome.best, best.unwrap().1);
}

#[test]
fn grid_ties_prefer_smaller_k_then_larger_delta() {
    // Orthogonal rows: every cell yields singletons and objective 0.
    let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let index = EmbeddingMatrix::from_rows_dense(rows).unwrap();
    let grid = vec![
        ClusterParams { k: 16, delta: 0.7, rng_seed: 0 },
        ClusterParams { k: 8, delta: 0.3, rng_seed: 0 },
        ClusterParams { k: 8, delta: 0.5, rng_seed: 0 },
    ];
    let objective = ObjectiveSpec::MeanIntraClusterSimilarity {
        sample_fraction: 1.0,
        sample_seed: 0,
    };
    let outcome = grid_search_params(&index, &grid, &objective).unwrap();
    assert_eq!((outcome.best.k, outcome.best.delta), (8, 0.5));
    let single = grid_search_params(&index, &grid[..1], &objective).unwrap();
    assert_eq!(single.best, grid[0]);
}

#[test]
fn invalid_params_are_rejected() {
    let index = EmbeddingMatrix::from_rows_dense(vec![vec![1.0, 0.0]]).unwrap();
    for (k, delta) in [(0, 0.5), (3, 1.0), (3, 1.5), (3, -1.1), (3, f64::NAN)] {
        assert!(sample_knn_cluster(&index, &ClusterParams { k, delta, rng_seed: 0 }).is_err());
    }
}

fn corpus_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize, f64, u64)> {
    (1usize..80, 2usize..12, 1usize..12, -0.9f64..0.99, any::<u64>(), any::<u64>()).prop_map(
        |(n, d, k, delta, data_seed, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
            let rows = (0..n).map(|_| random_unit(&mut rng, d)).collect();
            (rows, k, delta, seed)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_threshold_size_determinism((rows, k, delta, seed) in corpus_strategy()) {
        let index = EmbeddingMatrix::from_rows_dense(rows).unwrap();
        let params = ClusterParams { k, delta, rng_seed: seed };
        let clusters = sample_knn_cluster(&index, &params).unwrap();
        prop_assert!(validate_partition(&clusters, index.n(), &params).is_valid());
        let mut ids: Vec<usize> = clusters.iter().flat_map(|c| c.member_ids.clone()).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..index.n()).collect::<Vec<_>>());
        for c in &clusters {
            prop_assert!(c.len() <= k);
            let s = index.vector(c.seed_id).unwrap();
            for &m in &c.member_ids[1..] {
                let sim: f64 = s.iter().zip(index.vector(m).unwrap()).map(|(a, b)| a * b).sum();
                prop_assert!(sim > delta);
            }
        }
        let again = sample_knn_cluster(&index, &params).unwrap();
        prop_assert_eq!(clusters, again);
    }
}
