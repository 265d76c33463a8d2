//! C ABI over the `lmar` core.
//!
//! Every fallible function returns an [`LmarStatus`]; on failure a message
//! is available from [`lmar_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function.
//! Panics never cross the boundary; they surface as `LMAR_PANIC`.

use std::cell::RefCell;
use std::collections::HashSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lmar::clustering::{sample_knn_cluster, Cluster, ClusterError, ClusterParams};
use lmar::embedding::{stub_embed, EmbeddingError, EmbeddingMatrix};
use lmar::llm::{parse_structured, tcdt, SchemaKind};
use lmar::trainer::{AdapterParams, TrainError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimMismatch = 3,
    ZeroVector = 4,
    EmptyIndex = 5,
    Io = 6,
    ParseFailure = 7,
    InvalidParams = 8,
    ZeroDocumentTokens = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmarSchema {
    TripletLabel = 0,
    ClusterDescription = 1,
    QaGrade = 2,
    QaPairs = 3,
}

/// Brute-force cosine index over unit rows.
pub struct LmarIndex {
    inner: EmbeddingMatrix,
}

/// Result of one clustering run.
pub struct LmarClusters {
    clusters: Vec<Cluster>,
}

/// Linear adapter `normalize(W v)`.
pub struct LmarAdapter {
    inner: AdapterParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(LmarStatus, String);

impl From<EmbeddingError> for Failure {
    fn from(e: EmbeddingError) -> Self {
        let status = match e {
            EmbeddingError::ZeroVector => LmarStatus::ZeroVector,
            EmbeddingError::DimMismatch { .. } => LmarStatus::DimMismatch,
            EmbeddingError::EmptyIndex => LmarStatus::EmptyIndex,
            EmbeddingError::Io { .. } | EmbeddingError::Malformed { .. } => LmarStatus::Io,
            _ => LmarStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<ClusterError> for Failure {
    fn from(e: ClusterError) -> Self {
        let status = match e {
            ClusterError::EmptyIndex => LmarStatus::EmptyIndex,
            _ => LmarStatus::InvalidParams,
        };
        Failure(status, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let status = match e {
            TrainError::DimMismatch { .. } => LmarStatus::DimMismatch,
            TrainError::ZeroVector => LmarStatus::ZeroVector,
            TrainError::Io { .. } | TrainError::Malformed { .. } => LmarStatus::Io,
            _ => LmarStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: LmarStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, converting failures and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LmarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LmarStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LmarStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(LmarStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(LmarStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(LmarStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(LmarStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(LmarStatus::NullPointer, format!("{what} is null")))
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lmar_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Number of tokens in a NUL-terminated UTF-8 string.
///
/// # Safety
/// `text` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_count_tokens(text: *const c_char, out: *mut usize) -> LmarStatus {
    guard(|| {
        let t = cstr(text, "text")?;
        *out_ref(out, "out")? = lmar::corpus::count_tokens(t);
        Ok(())
    })
}

/// LLM tokens per document token.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_tcdt(
    input_tokens: u64,
    output_tokens: u64,
    document_tokens: u64,
    out: *mut f64,
) -> LmarStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        match tcdt(input_tokens, output_tokens, document_tokens) {
            Ok(v) => {
                *out = v;
                Ok(())
            }
            Err(e) => fail(LmarStatus::ZeroDocumentTokens, e.to_string()),
        }
    })
}

/// Evidence term-frequency score of `n_retrieved` retrieved texts.
///
/// # Safety
/// `evidence` and each of the `n_retrieved` entries of `retrieved` must be
/// valid C strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_tf_score(
    evidence: *const c_char,
    retrieved: *const *const c_char,
    n_retrieved: usize,
    out: *mut f64,
) -> LmarStatus {
    guard(|| {
        let e = cstr(evidence, "evidence")?;
        let r: Vec<&str> = slice(retrieved, n_retrieved, "retrieved")?
            .iter()
            .map(|p| cstr(*p, "retrieved text"))
            .collect::<Result<_, _>>()?;
        match lmar::evalkit::tf_score(e, &r) {
            Ok(v) => {
                *out_ref(out, "out")? = v;
                Ok(())
            }
            Err(err) => fail(LmarStatus::InvalidArgument, err.to_string()),
        }
    })
}

/// Parses an LLM reply against `schema` and writes the result as a JSON
/// string to `*json_out`, to be released with [`lmar_string_free`].
///
/// # Safety
/// `content` must be a valid C string and `json_out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_parse_structured(
    content: *const c_char,
    schema: LmarSchema,
    json_out: *mut *mut c_char,
) -> LmarStatus {
    guard(|| {
        let c = cstr(content, "content")?;
        let out = out_ref(json_out, "json_out")?;
        *out = ptr::null_mut();
        let kind = match schema {
            LmarSchema::TripletLabel => SchemaKind::TripletLabel,
            LmarSchema::ClusterDescription => SchemaKind::ClusterDescription,
            LmarSchema::QaGrade => SchemaKind::QaGrade,
            LmarSchema::QaPairs => SchemaKind::QaPairs,
        };
        let parsed = parse_structured(c, kind).or_else(|e| fail(LmarStatus::ParseFailure, e.to_string()))?;
        let json = serde_json::to_string(&parsed).expect("structured value serializes");
        *out = CString::new(json)
            .or_else(|_| fail(LmarStatus::ParseFailure, "NUL in output"))?
            .into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lmar_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Deterministic local embedding of `text` into `out[0..dim]`.
///
/// # Safety
/// `text` must be a valid C string and `out` hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn lmar_stub_embed(text: *const c_char, dim: usize, out: *mut f64) -> LmarStatus {
    guard(|| {
        let t = cstr(text, "text")?;
        if dim == 0 {
            return fail(LmarStatus::InvalidArgument, "dim must be >= 1");
        }
        if out.is_null() {
            return fail(LmarStatus::NullPointer, "out is null");
        }
        let v = stub_embed(t, dim);
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(&v);
        Ok(())
    })
}

/// Builds an index from `n` row-major rows of width `d`; rows are
/// normalized and get ids `0..n`.
///
/// # Safety
/// `rows` must hold `n * d` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_index_new(
    rows: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut LmarIndex,
) -> LmarStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if n == 0 || d == 0 {
            return fail(LmarStatus::EmptyIndex, "n and d must be >= 1");
        }
        let data = slice(rows, n * d, "rows")?;
        let rows: Vec<Vec<f64>> = data.chunks_exact(d).map(|r| r.to_vec()).collect();
        let inner = EmbeddingMatrix::from_rows_dense(rows)?;
        *out = Box::into_raw(Box::new(LmarIndex { inner }));
        Ok(())
    })
}

/// Loads an index written by the `embed` stage.
///
/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_index_load(path: *const c_char, out: *mut *mut LmarIndex) -> LmarStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let p = cstr(path, "path")?;
        let (inner, _) = EmbeddingMatrix::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(LmarIndex { inner }));
        Ok(())
    })
}

/// Row count and dimension.
///
/// # Safety
/// `index` must be a live handle; `n` and `d` writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_index_shape(index: *const LmarIndex, n: *mut usize, d: *mut usize) -> LmarStatus {
    guard(|| {
        let ix = handle(index, "index")?;
        *out_ref(n, "n")? = ix.inner.n();
        *out_ref(d, "d")? = ix.inner.d();
        Ok(())
    })
}

/// Writes the best `min(k, n)` ids and similarities, best first, and their
/// count to `*n_out`. Ties go to the smaller id.
///
/// # Safety
/// `index` must be live, `query` hold `d` doubles, `ids_out` and
/// `sims_out` hold `k` entries each (`sims_out` may be null).
#[no_mangle]
pub unsafe extern "C" fn lmar_index_top_k(
    index: *const LmarIndex,
    query: *const f64,
    d: usize,
    k: usize,
    ids_out: *mut usize,
    sims_out: *mut f64,
    n_out: *mut usize,
) -> LmarStatus {
    guard(|| {
        let ix = handle(index, "index")?;
        let q = slice(query, d, "query")?;
        let n_out = out_ref(n_out, "n_out")?;
        let hits = ix.inner.top_k(q, k, &HashSet::new())?;
        if !hits.is_empty() && ids_out.is_null() {
            return fail(LmarStatus::NullPointer, "ids_out is null");
        }
        for (i, (id, sim)) in hits.iter().enumerate() {
            *ids_out.add(i) = *id;
            if !sims_out.is_null() {
                *sims_out.add(i) = *sim;
            }
        }
        *n_out = hits.len();
        Ok(())
    })
}

/// # Safety
/// `index` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lmar_index_free(index: *mut LmarIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Partitions the index with seeded sampling-based KNN clustering.
///
/// # Safety
/// `index` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_cluster(
    index: *const LmarIndex,
    k: usize,
    delta: f64,
    rng_seed: u64,
    out: *mut *mut LmarClusters,
) -> LmarStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let ix = handle(index, "index")?;
        let clusters = sample_knn_cluster(&ix.inner, &ClusterParams { k, delta, rng_seed })?;
        *out = Box::into_raw(Box::new(LmarClusters { clusters }));
        Ok(())
    })
}

/// # Safety
/// `clusters` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_clusters_count(clusters: *const LmarClusters, out: *mut usize) -> LmarStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(clusters, "clusters")?.clusters.len();
        Ok(())
    })
}

/// Borrows the member ids of cluster `i`, seed first. The array lives as
/// long as the handle.
///
/// # Safety
/// `clusters` must be live; `ids` and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_clusters_members(
    clusters: *const LmarClusters,
    i: usize,
    ids: *mut *const usize,
    len: *mut usize,
) -> LmarStatus {
    guard(|| {
        let c = handle(clusters, "clusters")?;
        let Some(cluster) = c.clusters.get(i) else {
            return fail(LmarStatus::InvalidArgument, format!("cluster {i} out of range"));
        };
        *out_ref(ids, "ids")? = cluster.member_ids.as_ptr();
        *out_ref(len, "len")? = cluster.member_ids.len();
        Ok(())
    })
}

/// # Safety
/// `clusters` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lmar_clusters_free(clusters: *mut LmarClusters) {
    if !clusters.is_null() {
        drop(Box::from_raw(clusters));
    }
}

/// Identity adapter of width `d`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_adapter_identity(d: usize, out: *mut *mut LmarAdapter) -> LmarStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if d == 0 {
            *out = ptr::null_mut();
            return fail(LmarStatus::InvalidArgument, "d must be >= 1");
        }
        *out = Box::into_raw(Box::new(LmarAdapter {
            inner: AdapterParams::identity(d),
        }));
        Ok(())
    })
}

/// Loads an adapter checkpoint.
///
/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_adapter_load(path: *const c_char, out: *mut *mut LmarAdapter) -> LmarStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let p = cstr(path, "path")?;
        let (inner, _) = AdapterParams::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(LmarAdapter { inner }));
        Ok(())
    })
}

/// # Safety
/// `adapter` must be live; `d_in` and `d_out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmar_adapter_dims(
    adapter: *const LmarAdapter,
    d_in: *mut usize,
    d_out: *mut usize,
) -> LmarStatus {
    guard(|| {
        let a = handle(adapter, "adapter")?;
        *out_ref(d_in, "d_in")? = a.inner.d_in;
        *out_ref(d_out, "d_out")? = a.inner.d_out;
        Ok(())
    })
}

/// Writes `normalize(W v)` into `out`.
///
/// # Safety
/// `adapter` must be live, `v` hold `d_in` doubles and `out` `d_out`.
#[no_mangle]
pub unsafe extern "C" fn lmar_adapter_apply(
    adapter: *const LmarAdapter,
    v: *const f64,
    d_in: usize,
    out: *mut f64,
    d_out: usize,
) -> LmarStatus {
    guard(|| {
        let a = handle(adapter, "adapter")?;
        let v = slice(v, d_in, "v")?;
        if d_out < a.inner.d_out {
            return fail(
                LmarStatus::BufferTooSmall,
                format!("out holds {d_out}, need {}", a.inner.d_out),
            );
        }
        if out.is_null() {
            return fail(LmarStatus::NullPointer, "out is null");
        }
        let y = a.inner.apply(v)?;
        std::slice::from_raw_parts_mut(out, y.len()).copy_from_slice(&y);
        Ok(())
    })
}

/// # Safety
/// `adapter` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lmar_adapter_free(adapter: *mut LmarAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}
