//! Embedding backends and the normalized in-memory index.
//!
//! Vectors are `f64` in memory; the on-disk matrix stores `f32`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{self, RetryPolicy};

pub const EMBED_API_KEY_ENV: &str = "LMAR_EMBED_API_KEY";
pub const MATRIX_MAGIC: &[u8; 4] = b"LMAR";
pub const MATRIX_VERSION: u32 = 1;
pub const DEFAULT_STUB_DIM: usize = 256;
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("invalid embedding request: {0}")]
    InvalidInput(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed embedding file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

// ---------------------------------------------------------------------------
// Vector math
// ---------------------------------------------------------------------------

/// Inner product over the common prefix of `a` and `b`. Eight independent
/// partial sums let the compiler vectorize; the summation order is fixed, so
/// results are reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().min(b.len());
    let (a, b) = (&a[..len], &b[..len]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn is_unit(v: &[f64]) -> bool {
    (l2_norm(v) - 1.0).abs() <= UNIT_TOLERANCE
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Component-wise mean of `vectors`, then normalized.
pub fn mean_normalized(vectors: &[&[f64]]) -> Result<Vec<f64>, EmbeddingError> {
    let first = vectors.first().ok_or(EmbeddingError::ZeroVector)?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != acc.len() {
            return Err(EmbeddingError::DimMismatch {
                expected: acc.len(),
                actual: v.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let k = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    normalize(&acc)
}

// ---------------------------------------------------------------------------
// Index
// ---------------------------------------------------------------------------

/// Row-major matrix of unit vectors, one row per paragraph.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    d: usize,
    data: Vec<f64>,
    row_ids: Vec<usize>,
}

impl EmbeddingMatrix {
    /// Normalizes every row. Fails on zero rows or ragged input.
    pub fn from_rows(rows: Vec<Vec<f64>>, row_ids: Vec<usize>) -> Result<Self, EmbeddingError> {
        if rows.len() != row_ids.len() {
            return Err(EmbeddingError::InvalidInput(format!(
                "{} rows but {} row ids",
                rows.len(),
                row_ids.len()
            )));
        }
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in &rows {
            if row.len() != d {
                return Err(EmbeddingError::DimMismatch {
                    expected: d,
                    actual: row.len(),
                });
            }
            data.extend(normalize(row)?);
        }
        Ok(Self { d, data, row_ids })
    }

    /// Rows get ids `0..n`.
    pub fn from_rows_dense(rows: Vec<Vec<f64>>) -> Result<Self, EmbeddingError> {
        let ids = (0..rows.len()).collect();
        Self::from_rows(rows, ids)
    }

    pub fn n(&self) -> usize {
        self.row_ids.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d.max(1)).take(self.n())
    }

    /// Row position of `para_id`. Ids are usually dense, so the identity
    /// mapping is tried first.
    pub fn position(&self, para_id: usize) -> Option<usize> {
        if self.row_ids.get(para_id) == Some(&para_id) {
            return Some(para_id);
        }
        self.row_ids.iter().position(|&id| id == para_id)
    }

    pub fn vector(&self, para_id: usize) -> Option<&[f64]> {
        self.position(para_id).map(|i| self.row(i))
    }

    /// Dot products of `query` against every row (cosine when `query` is unit).
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        if self.n() >= 4096 {
            self.data
                .par_chunks_exact(self.d)
                .map(|r| dot(query, r))
                .collect()
        } else {
            self.rows().map(|r| dot(query, r)).collect()
        }
    }

    /// Ranked `(para_id, cosine)` pairs, descending similarity, ties broken by
    /// ascending para_id. Ids in `exclude` never appear.
    pub fn top_k(
        &self,
        query: &[f64],
        k: usize,
        exclude: &HashSet<usize>,
    ) -> Result<Vec<(usize, f64)>, EmbeddingError> {
        if self.is_empty() {
            return Err(EmbeddingError::EmptyIndex);
        }
        if query.len() != self.d {
            return Err(EmbeddingError::DimMismatch {
                expected: self.d,
                actual: query.len(),
            });
        }
        let q = normalize(query)?;
        let mut scored: Vec<(usize, f64)> = self
            .scores(&q)
            .into_iter()
            .enumerate()
            .map(|(i, s)| (self.row_ids[i], s.clamp(-1.0, 1.0) + 0.0))
            .filter(|(id, _)| !exclude.contains(id))
            .collect();
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, ranking_order);
            scored.truncate(k);
        }
        scored.sort_by(ranking_order);
        Ok(scored)
    }

    /// Applies `f` to every row and re-normalizes.
    pub fn map_rows<F>(&self, f: F) -> Result<Self, EmbeddingError>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        let rows: Vec<Vec<f64>> = (0..self.n()).into_par_iter().map(|i| f(self.row(i))).collect();
        Self::from_rows(rows, self.row_ids.clone())
    }

    /// Sub-matrix of the given row positions.
    pub fn select(&self, positions: &[usize]) -> Self {
        let mut data = Vec::with_capacity(positions.len() * self.d);
        for &p in positions {
            data.extend_from_slice(self.row(p));
        }
        Self {
            d: self.d,
            data,
            row_ids: positions.iter().map(|&p| self.row_ids[p]).collect(),
        }
    }

    pub fn save(&self, bin_path: &Path, fingerprint: &str) -> Result<(), EmbeddingError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EmbeddingError::Io { path, source }
        };
        let file = fs::File::create(bin_path).map_err(io(bin_path))?;
        let mut w = BufWriter::new(file);
        let mut header = Vec::with_capacity(16);
        header.extend_from_slice(MATRIX_MAGIC);
        header.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.n() as u32).to_le_bytes());
        header.extend_from_slice(&(self.d as u32).to_le_bytes());
        w.write_all(&header).map_err(io(bin_path))?;
        for x in &self.data {
            w.write_all(&(*x as f32).to_le_bytes()).map_err(io(bin_path))?;
        }
        w.flush().map_err(io(bin_path))?;

        let sidecar = MatrixSidecar {
            row_ids: self.row_ids.clone(),
            fingerprint: fingerprint.to_string(),
        };
        let side = sidecar_path(bin_path);
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&side, text).map_err(io(&side))
    }

    /// Reads a matrix written by [`EmbeddingMatrix::save`]. Rows are taken as
    /// stored (widened to `f64`), not re-normalized.
    pub fn load(bin_path: &Path) -> Result<(Self, String), EmbeddingError> {
        let malformed = |reason: &str| EmbeddingError::Malformed {
            path: bin_path.to_path_buf(),
            reason: reason.to_string(),
        };
        let bytes = fs::read(bin_path).map_err(|source| EmbeddingError::Io {
            path: bin_path.to_path_buf(),
            source,
        })?;
        if bytes.len() < 16 || &bytes[..4] != MATRIX_MAGIC {
            return Err(malformed("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != MATRIX_VERSION {
            return Err(malformed("unsupported version"));
        }
        let (n, d) = (u32_at(8) as usize, u32_at(12) as usize);
        if bytes.len() != 16 + 4 * n * d {
            return Err(malformed("payload length does not match n*d"));
        }
        let data: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let side = sidecar_path(bin_path);
        let text = fs::read_to_string(&side).map_err(|source| EmbeddingError::Io {
            path: side.clone(),
            source,
        })?;
        let sidecar: MatrixSidecar =
            serde_json::from_str(&text).map_err(|e| malformed(&e.to_string()))?;
        if sidecar.row_ids.len() != n {
            return Err(malformed("sidecar row_ids length does not match n"));
        }
        Ok((
            Self {
                d,
                data,
                row_ids: sidecar.row_ids,
            },
            sidecar.fingerprint,
        ))
    }
}

/// Scores must not carry -0.0; top_k adds 0.0 to fold it away.
fn ranking_order(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixSidecar {
    row_ids: Vec<usize>,
    fingerprint: String,
}

/// `embeddings.bin` -> `embeddings.json`.
pub fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("json")
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Remote,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub base_url: String,
    pub model_name: String,
    pub batch_size: usize,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First backoff delay; doubles per retry.
    pub retry_base_ms: u64,
    /// Requests in flight at once (remote only).
    pub parallelism: usize,
    /// Output dimension of the stub provider.
    pub dim: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Stub,
            base_url: String::new(),
            model_name: "stub-trigram".into(),
            batch_size: 64,
            timeout_ms: 60_000,
            max_retries: 3,
            retry_base_ms: 1_000,
            parallelism: 4,
            dim: DEFAULT_STUB_DIM,
        }
    }
}

impl ProviderConfig {
    pub fn stub(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if self.parallelism == 0 {
            return Err("parallelism must be >= 1".into());
        }
        match self.kind {
            ProviderKind::Stub if self.dim == 0 => Err("stub dim must be >= 1".into()),
            ProviderKind::Remote if self.base_url.is_empty() => {
                Err("remote provider needs base_url".into())
            }
            _ => Ok(()),
        }
    }

    /// Identifies the backend that produced a set of vectors.
    pub fn fingerprint(&self) -> String {
        match self.kind {
            ProviderKind::Stub => format!("stub:trigram-fnv1a:dim={}", self.dim),
            ProviderKind::Remote => format!("remote:{}@{}", self.model_name, self.base_url),
        }
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.retry_base_ms),
            timeout: Duration::from_millis(self.timeout_ms),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic local embedding: lowercased character trigrams (text padded
/// with one space on each side) hashed into `dim` signed buckets, then
/// l2-normalized.
pub fn stub_embed(text: &str, dim: usize) -> Vec<f64> {
    let padded: Vec<char> = std::iter::once(' ')
        .chain(text.to_lowercase().chars())
        .chain(std::iter::once(' '))
        .collect();
    let mut v = vec![0.0; dim];
    let mut buf = [0u8; 12];
    for w in padded.windows(3) {
        let mut len = 0;
        for c in w {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        let h = fnv1a(&buf[..len]);
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    normalize(&v).unwrap_or_else(|_| {
        // Every trigram cancelled out; fall back to a fixed direction.
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        e
    })
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

fn remote_batch(
    config: &ProviderConfig,
    api_key: Option<&str>,
    texts: &[&str],
) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    let url = format!("{}/embeddings", config.base_url.trim_end_matches('/'));
    let body = json!({ "model": config.model_name, "input": texts });
    let value = http::post_json(&url, api_key, &body, &config.retry_policy())
        .map_err(|e| EmbeddingError::ProviderUnavailable(e.to_string()))?;
    let resp: EmbeddingResponse = serde_json::from_value(value)
        .map_err(|e| EmbeddingError::ProviderUnavailable(format!("bad response: {e}")))?;
    let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
    for d in resp.data {
        let slot = out.get_mut(d.index).ok_or_else(|| {
            EmbeddingError::ProviderUnavailable(format!("response index {} out of range", d.index))
        })?;
        *slot = Some(d.embedding);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| EmbeddingError::ProviderUnavailable(format!("missing index {i}")))
        })
        .collect()
}

/// Embeds `texts` in order. Remote requests are split into `batch_size`
/// chunks with at most `parallelism` in flight.
pub fn embed_batch(
    config: &ProviderConfig,
    texts: &[&str],
) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    if texts.is_empty() {
        return Err(EmbeddingError::InvalidInput("no texts".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(EmbeddingError::InvalidInput(format!("text {i} is empty")));
    }
    config.validate().map_err(EmbeddingError::InvalidInput)?;
    let vectors = match config.kind {
        ProviderKind::Stub => texts.par_iter().map(|t| stub_embed(t, config.dim)).collect(),
        ProviderKind::Remote => {
            let api_key = std::env::var(EMBED_API_KEY_ENV).ok();
            let chunks: Vec<&[&str]> = texts.chunks(config.batch_size).collect();
            let results: Mutex<Vec<Option<Result<Vec<Vec<f64>>, EmbeddingError>>>> =
                Mutex::new((0..chunks.len()).map(|_| None).collect());
            let next = AtomicUsize::new(0);
            thread::scope(|s| {
                for _ in 0..config.parallelism.min(chunks.len()) {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= chunks.len() {
                            break;
                        }
                        let r = remote_batch(config, api_key.as_deref(), chunks[i]);
                        results.lock().unwrap()[i] = Some(r);
                    });
                }
            });
            let mut all = Vec::with_capacity(texts.len());
            for r in results.into_inner().unwrap() {
                all.extend(r.expect("every chunk processed")?);
            }
            all
        }
    };
    let vectors: Vec<Vec<f64>> = vectors;
    let d = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
        return Err(EmbeddingError::DimMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    Ok(vectors)
}
