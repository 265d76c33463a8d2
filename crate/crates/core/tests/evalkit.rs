mod common;

use std::collections::HashSet;

use lmar::embedding::{dot, stub_embed, EmbeddingMatrix};
use lmar::evalkit::{
    accuracy_at_k, evaluate_adapter, evaluate_all, load_queries, mrr, retrieve, tf_score, EvalQuery, QueryRecord,
};
use lmar::trainer::AdapterParams;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::random_unit;

const DOCS: [&str; 20] = [
    "Ultrasound imaging of the wrist after a fall.",
    "Fracture healing time in older adults.",
    "Dosage tables for pediatric antibiotics.",
    "Wind turbine blade maintenance schedule.",
    "Soil moisture sensors for vineyards.",
    "Interest rate swaps and hedging basics.",
    "Sourdough starter feeding ratios.",
    "Bird migration routes across the Sahara.",
    "Compiler register allocation by graph coloring.",
    "Tide tables for the northern coast.",
    "Knee ligament injuries in skiers.",
    "Battery chemistry for grid storage.",
    "Roman aqueduct construction methods.",
    "Coffee roasting curves and first crack.",
    "Ultrasound guided nerve blocks.",
    "Volcanic ash effects on aviation.",
    "Spreadsheet formulas for loan amortization.",
    "Seed saving for heirloom tomatoes.",
    "Glacier retreat measured by satellite.",
    "Fracture risk scores for osteoporosis.",
];

fn doc_index(dim: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows_dense(DOCS.iter().map(|t| stub_embed(t, dim)).collect()).unwrap()
}

/// Exhaustive ranking. Uses the library `dot` so summation order (and so
/// near-zero ties) agrees bit for bit.
fn brute_rank(index: &EmbeddingMatrix, q: &[f64]) -> Vec<usize> {
    let qn: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let q: Vec<f64> = q.iter().map(|x| x / qn).collect();
    let mut scored: Vec<(usize, f64)> = (0..index.n())
        .map(|i| {
            (i, dot(&q, index.vector(i).unwrap()) + 0.0)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

#[test]
fn retrieval_matches_brute_force() {
    let index = doc_index(128);
    for q in ["ultrasound wrist", "fracture in the elderly", "coffee", "satellite glacier"] {
        let qv = stub_embed(q, 128);
        let full = brute_rank(&index, &qv);
        for k in [1, 3, 5, 20, 50] {
            assert_eq!(retrieve(&qv, &index, k).unwrap(), full[..k.min(20)].to_vec(), "{q} k={k}");
        }
    }
    let excluded: HashSet<usize> = [0, 14].into();
    let hits = index.top_k(&stub_embed("ultrasound", 128), 3, &excluded).unwrap();
    assert!(hits.iter().all(|(id, _)| !excluded.contains(id)));
}

#[test]
fn evaluate_all_agrees_with_single_metrics() {
    let index = doc_index(128);
    let queries: Vec<EvalQuery> = [
        ("ultrasound of a wrist", vec![0, 14]),
        ("fracture risk", vec![1, 19]),
        ("tide tables", vec![9]),
        ("loan spreadsheet", vec![16]),
    ]
    .into_iter()
    .map(|(q, gold)| EvalQuery {
        question: q.into(),
        gold_ids: gold,
        question_embedding: stub_embed(q, 128),
    })
    .collect();
    let m = evaluate_all(&queries, &index, |i| DOCS.get(i).copied(), 3).unwrap();
    let ranks: Vec<Vec<usize>> = queries.iter().map(|q| brute_rank(&index, &q.question_embedding)).collect();
    let golds: Vec<Vec<usize>> = queries.iter().map(|q| q.gold_ids.clone()).collect();
    assert_eq!(m.accuracy, accuracy_at_k(&ranks, &golds, 3).unwrap());
    assert_eq!(m.mrr, mrr(&ranks, &golds).unwrap());
    let tf: Vec<f64> = queries
        .iter()
        .zip(&ranks)
        .map(|(q, r)| {
            let ev: Vec<&str> = q.gold_ids.iter().map(|&i| DOCS[i]).collect();
            let got: Vec<&str> = r[..3].iter().map(|&i| DOCS[i]).collect();
            tf_score(&ev.join("\n"), &got).unwrap()
        })
        .collect();
    assert!((m.tf_score - tf.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    assert_eq!((m.k, m.n_queries), (3, 4));
}

#[test]
fn perfect_retrieval_scores_one() {
    let index = doc_index(64);
    let queries: Vec<EvalQuery> = (0..20)
        .map(|i| EvalQuery {
            question: DOCS[i].into(),
            gold_ids: vec![i],
            question_embedding: index.vector(i).unwrap().to_vec(),
        })
        .collect();
    let m = evaluate_all(&queries, &index, |i| DOCS.get(i).copied(), 1).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.mrr, 1.0);
    assert!((m.avg_similarity - 1.0).abs() < 1e-12);
}

#[test]
fn identity_adapter_changes_nothing() {
    let index = doc_index(32);
    let records: Vec<QueryRecord> = (0..6)
        .map(|i| QueryRecord {
            question: format!("{} notes", DOCS[i * 3]),
            gold_ids: vec![i * 3],
        })
        .collect();
    let raw: Vec<Vec<f64>> = records.iter().map(|r| stub_embed(&r.question, 32)).collect();
    let plain: Vec<EvalQuery> = records
        .iter()
        .zip(&raw)
        .map(|(r, v)| EvalQuery {
            question: r.question.clone(),
            gold_ids: r.gold_ids.clone(),
            question_embedding: v.clone(),
        })
        .collect();
    let text = |i: usize| DOCS.get(i).copied();
    let a = evaluate_all(&plain, &index, text, 5).unwrap();
    let b = evaluate_adapter(&AdapterParams::identity(32), &index, &records, &raw, text, 5).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.mrr, b.mrr);
    assert_eq!(a.tf_score, b.tf_score);
    assert!((a.avg_similarity - b.avg_similarity).abs() < 1e-12);
}

#[test]
fn errors_on_bad_inputs() {
    let index = doc_index(16);
    assert!(accuracy_at_k(&[], &[], 5).is_err());
    assert!(mrr(&[], &[]).is_err());
    assert!(tf_score("a", &[""]).is_err());
    let q = EvalQuery {
        question: "x".into(),
        gold_ids: vec![],
        question_embedding: stub_embed("x", 16),
    };
    assert!(evaluate_all(&[q], &index, |i| DOCS.get(i).copied(), 5).is_err());
    let q = EvalQuery {
        question: "x".into(),
        gold_ids: vec![99],
        question_embedding: stub_embed("x", 16),
    };
    assert!(evaluate_all(&[q], &index, |i| DOCS.get(i).copied(), 5).is_err());
}

#[test]
fn query_file_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("q.jsonl");
    std::fs::write(&p, "{\"question\": \"a?\", \"gold_ids\": [1, 2]}\n\n{\"question\": \"b?\", \"gold_ids\": [0]}\n").unwrap();
    let q = load_queries(&p).unwrap();
    assert_eq!(q.len(), 2);
    assert_eq!(q[0].gold_ids, vec![1, 2]);
    std::fs::write(&p, "{\"question\": \"a?\", \"gold_ids\": []}\n").unwrap();
    assert!(load_queries(&p).is_err());
    std::fs::write(&p, "not json\n").unwrap();
    assert!(load_queries(&p).is_err());
}

fn rankings(seed: u64, n_docs: usize, n_queries: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut golds = Vec::new();
    for _ in 0..n_queries {
        let mut order: Vec<usize> = (0..n_docs).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        results.push(order);
        let g = rng.random_range(1..4);
        golds.push((0..g).map(|_| rng.random_range(0..n_docs)).collect());
    }
    (results, golds)
}

proptest! {
    #[test]
    fn accuracy_is_monotone_in_k(seed in any::<u64>(), n in 1usize..30, q in 1usize..10) {
        let (r, g) = rankings(seed, n, q);
        let mut prev = 0.0;
        for k in 1..=n + 2 {
            let a = accuracy_at_k(&r, &g, k).unwrap();
            prop_assert!(a >= prev);
            prop_assert!((0.0..=1.0).contains(&a));
            prev = a;
        }
        prop_assert_eq!(prev, 1.0);
        let m = mrr(&r, &g).unwrap();
        prop_assert!(m > 0.0 && m <= 1.0);
        prop_assert!(m >= accuracy_at_k(&r, &g, 1).unwrap());
    }

    #[test]
    fn tf_score_ignores_retrieval_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<&str> = (0..rng.random_range(1..6)).map(|_| DOCS[rng.random_range(0..20)]).collect();
        let ev = DOCS[rng.random_range(0..20)];
        let mut rev = picks.clone();
        rev.reverse();
        let a = tf_score(ev, &picks).unwrap();
        prop_assert!((a - tf_score(ev, &rev).unwrap()).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn cosine_ranking_is_scale_free(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..15).map(|_| random_unit(&mut rng, 6)).collect();
        let index = EmbeddingMatrix::from_rows_dense(rows).unwrap();
        let q = random_unit(&mut rng, 6);
        let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
        prop_assert_eq!(retrieve(&q, &index, 15).unwrap(), retrieve(&scaled, &index, 15).unwrap());
    }
}
