//! Retrieval metrics over top-k paragraph retrieval.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::tokenize;
use crate::embedding::{mean_normalized, EmbeddingError, EmbeddingMatrix};
use crate::trainer::{AdapterParams, TrainError};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries")]
    NoQueries,
    #[error("empty index")]
    EmptyIndex,
    #[error("retrieved text has no tokens")]
    EmptyRetrieval,
    #[error("query {0} has no gold ids")]
    EmptyGold(usize),
    #[error("unknown paragraph {0}")]
    UnknownParagraph(usize),
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One line of `eval_queries.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub question: String,
    pub gold_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub question: String,
    pub gold_ids: Vec<usize>,
    pub question_embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub mrr: f64,
    pub tf_score: f64,
    pub avg_similarity: f64,
    pub k: usize,
    pub n_queries: usize,
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryRecord = serde_json::from_str(line).map_err(|e| EvalError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if q.gold_ids.is_empty() {
            return Err(EvalError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                reason: "gold_ids is empty".into(),
            });
        }
        out.push(q);
    }
    Ok(out)
}

/// Top-`k` paragraph ids for `query`, best first.
pub fn retrieve(query: &[f64], index: &EmbeddingMatrix, k: usize) -> Result<Vec<usize>, EvalError> {
    if index.is_empty() {
        return Err(EvalError::EmptyIndex);
    }
    Ok(index
        .top_k(query, k, &HashSet::new())?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

/// 1-based rank of the best-ranked gold id.
pub fn first_gold_rank(ranked: &[usize], gold: &[usize]) -> Option<usize> {
    ranked.iter().position(|id| gold.contains(id)).map(|r| r + 1)
}

/// Share of queries with any gold id in the first `k` results.
pub fn accuracy_at_k(results: &[Vec<usize>], golds: &[Vec<usize>], k: usize) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let hits = results
        .iter()
        .zip(golds)
        .filter(|(r, g)| first_gold_rank(&r[..k.min(r.len())], g).is_some())
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean reciprocal rank of the first gold hit; misses contribute 0.
pub fn mrr(results: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let total: f64 = results
        .iter()
        .zip(golds)
        .map(|(r, g)| first_gold_rank(r, g).map_or(0.0, |rank| 1.0 / rank as f64))
        .sum();
    Ok(total / results.len() as f64)
}

fn term_frequencies(text: &str) -> HashMap<String, usize> {
    let mut tf = HashMap::new();
    for t in tokenize(text) {
        *tf.entry(t.to_lowercase()).or_insert(0) += 1;
    }
    tf
}

/// `sum_i TF_e(i) TF_r(i) / sum_i TF_r(i)` with `r` the concatenated
/// retrieved texts.
pub fn tf_score(evidence: &str, retrieved: &[&str]) -> Result<f64, EvalError> {
    let te = term_frequencies(evidence);
    let mut tr: HashMap<String, usize> = HashMap::new();
    for r in retrieved {
        for (t, c) in term_frequencies(r) {
            *tr.entry(t).or_insert(0) += c;
        }
    }
    let denom: usize = tr.values().sum();
    if denom == 0 {
        return Err(EvalError::EmptyRetrieval);
    }
    let num: usize = tr
        .iter()
        .map(|(t, c)| c * te.get(t).copied().unwrap_or(0))
        .sum();
    Ok(num as f64 / denom as f64)
}

/// Evidence-set vector of `gold` in `index`: mean of the rows, normalized.
pub fn gold_embedding(index: &EmbeddingMatrix, gold: &[usize]) -> Result<Vec<f64>, EvalError> {
    let rows: Vec<&[f64]> = gold
        .iter()
        .map(|&id| index.vector(id).ok_or(EvalError::UnknownParagraph(id)))
        .collect::<Result<_, _>>()?;
    Ok(mean_normalized(&rows)?)
}

/// Mean cosine between each question and its gold evidence set.
pub fn avg_similarity(queries: &[EvalQuery], index: &EmbeddingMatrix) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut total = 0.0;
    for q in queries {
        let e = gold_embedding(index, &q.gold_ids)?;
        total += crate::embedding::cosine_similarity(&q.question_embedding, &e)?;
    }
    Ok(total / queries.len() as f64)
}

/// All four metrics. Rankings cover the whole corpus so MRR is not cut off
/// at `k`; accuracy and the TF score look at the first `k`.
pub fn evaluate_all<'a>(
    queries: &[EvalQuery],
    index: &EmbeddingMatrix,
    text: impl Fn(usize) -> Option<&'a str> + Sync,
    k: usize,
) -> Result<MetricsReport, EvalError> {
    if index.is_empty() {
        return Err(EvalError::EmptyIndex);
    }
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    if let Some(i) = queries.iter().position(|q| q.gold_ids.is_empty()) {
        return Err(EvalError::EmptyGold(i));
    }
    let rankings: Vec<Vec<usize>> = queries
        .par_iter()
        .map(|q| retrieve(&q.question_embedding, index, index.n()))
        .collect::<Result<_, _>>()?;
    let golds: Vec<Vec<usize>> = queries.iter().map(|q| q.gold_ids.clone()).collect();
    let tf: Vec<f64> = queries
        .par_iter()
        .zip(&rankings)
        .map(|(q, r)| {
            let get = |id: usize| text(id).ok_or(EvalError::UnknownParagraph(id));
            let evidence: Vec<&str> = q.gold_ids.iter().map(|&id| get(id)).collect::<Result<_, _>>()?;
            let retrieved: Vec<&str> =
                r.iter().take(k).map(|&id| get(id)).collect::<Result<_, _>>()?;
            tf_score(&evidence.join("\n"), &retrieved)
        })
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport {
        accuracy: accuracy_at_k(&rankings, &golds, k)?,
        mrr: mrr(&rankings, &golds)?,
        tf_score: tf.iter().sum::<f64>() / tf.len() as f64,
        avg_similarity: avg_similarity(queries, index)?,
        k,
        n_queries: queries.len(),
    })
}

/// Evaluates through `adapter`: both the corpus rows and the raw question
/// vectors are adapted first.
pub fn evaluate_adapter<'a>(
    adapter: &AdapterParams,
    raw_index: &EmbeddingMatrix,
    queries: &[QueryRecord],
    raw_questions: &[Vec<f64>],
    text: impl Fn(usize) -> Option<&'a str> + Sync,
    k: usize,
) -> Result<MetricsReport, EvalError> {
    let index = adapter.apply_matrix(raw_index)?;
    let adapted: Vec<EvalQuery> = queries
        .iter()
        .zip(raw_questions)
        .map(|(q, v)| {
            Ok(EvalQuery {
                question: q.question.clone(),
                gold_ids: q.gold_ids.clone(),
                question_embedding: adapter.apply(v)?,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    evaluate_all(&adapted, &index, text, k)
}
