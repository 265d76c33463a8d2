//! Stage orchestration: config, artifacts, manifest, resume and report.
//!
//! Every stage reads its inputs from the output directory and writes its
//! artifacts back there, so any stage can be rerun on its own. The manifest
//! records a hash of each stage's inputs and of every file it wrote.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Debug, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::{
    grid_search_params, sample_knn_cluster, validate_partition, Cluster, ClusterParams, GridCell,
    ObjectiveSpec, PartitionReport,
};
use crate::corpus::{load_corpus, CorpusStore, SegmentationRules};
use crate::embedding::{embed_batch, EmbeddingMatrix, ProviderConfig, ProviderKind};
use crate::evalkit::{evaluate_adapter, load_queries, MetricsReport, QueryRecord, DEFAULT_K};
use crate::llm::{compute_tcdt, Gateway, LlmConfig, LlmKind, StageUsage, TokenLedger};
use crate::qepair::{
    synthesize, validate_pairs, ClusterDescription, GroundingReport, Polarity, QeConfig, QePair,
    QeStats, Split, STAGE_DESCRIBE, STAGE_GENERATE, STAGE_GRADE,
};
use crate::trainer::{
    qe_dataset, train_stage, triplet_dataset, AdapterParams, Stage, TrainConfig, TrainReport,
};
use crate::triplet::{self, label_all, sample_triplet_candidates, LabeledTriplet, SkipReason, SkippedTriplet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Triplet candidates are drawn from this many neighbours when neither the
/// triplet nor the clustering section fixes it.
const FALLBACK_CANDIDATE_K: usize = 8;

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Ingest,
    Embed,
    Triplets,
    TrainTriplet,
    Cluster,
    Qepairs,
    TrainQe,
    Evaluate,
    Report,
}

pub const STAGES: [StageName; 9] = [
    StageName::Ingest,
    StageName::Embed,
    StageName::Triplets,
    StageName::TrainTriplet,
    StageName::Cluster,
    StageName::Qepairs,
    StageName::TrainQe,
    StageName::Evaluate,
    StageName::Report,
];

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Ingest => "ingest",
            StageName::Embed => "embed",
            StageName::Triplets => "triplets",
            StageName::TrainTriplet => "train_triplet",
            StageName::Cluster => "cluster",
            StageName::Qepairs => "qepairs",
            StageName::TrainQe => "train_qe",
            StageName::Evaluate => "evaluate",
            StageName::Report => "report",
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            StageName::Ingest => &[files::CORPUS],
            StageName::Embed => &[files::EMBEDDINGS, files::EMBEDDINGS_META],
            StageName::Triplets => &[files::TRIPLETS, files::TRIPLETS_META],
            StageName::TrainTriplet => &[files::ADAPTER_TRIPLET, files::TRAIN_TRIPLET],
            StageName::Cluster => &[files::CLUSTERS],
            StageName::Qepairs => &[files::QEPAIRS, files::QEPAIRS_META],
            StageName::TrainQe => &[files::ADAPTER_QE, files::TRAIN_QE],
            StageName::Evaluate => &[files::METRICS, files::REPORT],
            StageName::Report => &[files::REPORT, files::SUMMARY],
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub mod files {
    pub const CORPUS: &str = "corpus.store.jsonl";
    pub const EMBEDDINGS: &str = "embeddings.bin";
    pub const EMBEDDINGS_META: &str = "embeddings.json";
    pub const TRIPLETS: &str = "triplets.jsonl";
    pub const TRIPLETS_META: &str = "triplets.meta.json";
    pub const ADAPTER_TRIPLET: &str = "adapter_triplet.lmad";
    pub const TRAIN_TRIPLET: &str = "train_triplet.json";
    pub const CLUSTERS: &str = "clusters.json";
    pub const QEPAIRS: &str = "qepairs.jsonl";
    pub const QEPAIRS_META: &str = "qepairs.meta.json";
    pub const ADAPTER_QE: &str = "adapter_qe.lmad";
    pub const TRAIN_QE: &str = "train_qe.json";
    pub const METRICS: &str = "metrics.json";
    pub const REPORT: &str = "report.json";
    pub const SUMMARY: &str = "summary.txt";
    pub const MANIFEST: &str = "manifest.json";
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed [{code}]: {message}")]
    Stage {
        stage: StageName,
        code: String,
        message: String,
        exit_code: i32,
    },
    #[error("stage {stage}: invariant violation: {message}")]
    InvariantViolation { stage: StageName, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Stage { exit_code, .. } => *exit_code,
            PipelineError::InvariantViolation { .. } => EXIT_INVARIANT,
        }
    }

    pub fn code(&self) -> &str {
        match self {
            PipelineError::Config(_) => "CONFIG",
            PipelineError::Stage { code, .. } => code,
            PipelineError::InvariantViolation { .. } => "INVARIANT_VIOLATION",
        }
    }
}

/// Machine-readable code for a module error: the innermost variant name of
/// its `Debug` form in upper snake case, e.g. `Gateway(ScriptExhausted(..))`
/// gives `SCRIPT_EXHAUSTED`.
pub fn error_code(e: &impl Debug) -> String {
    let dbg = format!("{e:?}");
    let mut name = "";
    let mut rest = dbg.as_str();
    loop {
        let end = rest
            .find(|c: char| !c.is_ascii_alphanumeric() && c != '_')
            .unwrap_or(rest.len());
        let ident = &rest[..end];
        if ident.is_empty() || !ident.starts_with(|c: char| c.is_ascii_uppercase()) {
            break;
        }
        name = ident;
        if !rest[end..].starts_with('(') {
            break;
        }
        rest = &rest[end + 1..];
    }
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_ascii_uppercase() && i > 0 {
            out.push('_');
        }
        out.push(c.to_ascii_uppercase());
    }
    if out.is_empty() {
        out.push_str("ERROR");
    }
    out
}

fn exit_code_for(code: &str) -> i32 {
    match code {
        "PROVIDER_UNAVAILABLE" | "BUDGET_EXCEEDED" | "SCRIPT_EXHAUSTED" => EXIT_PROVIDER,
        "INVALID_PARAMS" | "INVALID_CONFIG" | "BAD_SCRIPT" => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn stage_err<E: Debug + fmt::Display>(stage: StageName) -> impl Fn(E) -> PipelineError {
    move |e| {
        let code = error_code(&e);
        PipelineError::Stage {
            stage,
            exit_code: exit_code_for(&code),
            code,
            message: e.to_string(),
        }
    }
}

fn missing(stage: StageName, what: &Path) -> PipelineError {
    PipelineError::Stage {
        stage,
        code: "MISSING_ARTIFACT".into(),
        message: format!("{} is missing; run the earlier stages first", what.display()),
        exit_code: EXIT_FAILURE,
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    /// Fixes `K`; otherwise `K` is searched over `grid_k`.
    pub k: Option<usize>,
    /// Fixes `delta`; otherwise searched over `grid_delta`.
    pub delta: Option<f64>,
    pub grid_k: Vec<usize>,
    pub grid_delta: Vec<f64>,
    /// Share of rows scoring each grid cell.
    pub sample_fraction: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: None,
            delta: None,
            grid_k: vec![4, 8, 16],
            grid_delta: vec![0.3, 0.5, 0.7],
            sample_fraction: 0.1,
        }
    }
}

impl ClusteringConfig {
    pub fn grid(&self, rng_seed: u64) -> Vec<ClusterParams> {
        let ks = self.k.map_or_else(|| self.grid_k.clone(), |k| vec![k]);
        let deltas = self.delta.map_or_else(|| self.grid_delta.clone(), |d| vec![d]);
        let mut grid = Vec::new();
        for &k in &ks {
            for &delta in &deltas {
                grid.push(ClusterParams { k, delta, rng_seed });
            }
        }
        grid
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    /// Neighbourhood size for candidates; defaults to the clustering `K`.
    pub candidate_k: Option<usize>,
    /// Candidates to sample; defaults to twice the paragraph count.
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory of `.txt`/`.jsonl` documents, or one such file.
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Held-out `{"question", "gold_ids"}` lines. Without it the validation
    /// split of the synthesized positives is evaluated.
    pub eval_queries: Option<PathBuf>,
    pub rng_seed: u64,
    pub segmentation: SegmentationRules,
    pub embedding: ProviderConfig,
    pub llm: LlmConfig,
    pub clustering: ClusteringConfig,
    pub triplet: TripletConfig,
    pub qe: QeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            out_dir: PathBuf::from("lmar-out"),
            eval_queries: None,
            rng_seed: 0,
            segmentation: SegmentationRules::default(),
            embedding: ProviderConfig::default(),
            llm: LlmConfig::default(),
            clustering: ClusteringConfig::default(),
            triplet: TripletConfig::default(),
            qe: QeConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML config; relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.corpus);
        resolve(&mut config.out_dir);
        if let Some(p) = config.eval_queries.as_mut() {
            resolve(p);
        }
        if let Some(p) = config.llm.mock_script.as_mut() {
            resolve(p);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.corpus.as_os_str().is_empty() {
            return bad("corpus path is not set".into());
        }
        if !self.corpus.exists() {
            return bad(format!("corpus {} does not exist", self.corpus.display()));
        }
        if let Some(p) = &self.eval_queries {
            if !p.is_file() {
                return bad(format!("eval_queries {} does not exist", p.display()));
            }
        }
        if self.segmentation.max_paragraph_tokens == 0 {
            return bad("segmentation.max_paragraph_tokens must be >= 1".into());
        }
        self.embedding.validate().map_err(|e| PipelineError::Config(format!("embedding: {e}")))?;
        self.llm.validate().map_err(|e| PipelineError::Config(format!("llm: {e}")))?;
        if let (LlmKind::Mock, Some(p)) = (self.llm.kind, &self.llm.mock_script) {
            if !p.is_file() {
                return bad(format!("mock script {} does not exist", p.display()));
            }
        }
        let grid = self.clustering.grid(self.rng_seed);
        if grid.is_empty() {
            return bad("clustering grid is empty".into());
        }
        for p in &grid {
            p.validate()
                .map_err(|e| PipelineError::Config(format!("clustering: {e}")))?;
        }
        if !(self.clustering.sample_fraction > 0.0 && self.clustering.sample_fraction <= 1.0) {
            return bad("clustering.sample_fraction must be in (0, 1]".into());
        }
        if self.triplet.candidate_k.is_some_and(|k| k < 2) {
            return bad("triplet.candidate_k must be >= 2".into());
        }
        if self.qe.max_question_num == 0 {
            return bad("qe.max_question_num must be >= 1".into());
        }
        if !(self.qe.val_fraction > 0.0 && self.qe.val_fraction < 1.0) {
            return bad("qe.val_fraction must be in (0, 1)".into());
        }
        self.train
            .validate()
            .map_err(|e| PipelineError::Config(format!("train: {e}")))?;
        if self.eval.k == 0 {
            return bad("eval.k must be >= 1".into());
        }
        Ok(())
    }

    /// Hash of the settings that shape results. Paths are left out, so the
    /// same inputs in another directory give the same fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.corpus = PathBuf::new();
        c.out_dir = PathBuf::new();
        c.eval_queries = c.eval_queries.map(|_| PathBuf::from("set"));
        c.llm.mock_script = c.llm.mock_script.map(|_| PathBuf::from("set"));
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn candidate_k(&self) -> usize {
        self.triplet
            .candidate_k
            .or(self.clustering.k)
            .unwrap_or(FALLBACK_CANDIDATE_K)
    }
}

// ---------------------------------------------------------------------------
// Hashing and files
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| sha256_hex(&b))
}

/// Content hash of a corpus directory or file, independent of where it lives.
fn corpus_hash(path: &Path) -> Result<String, std::io::Error> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            h.update([0]);
            h.update(fs::read(&p)?);
            h.update([0]);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Stable per-purpose seed derived from the global one.
pub fn derive_seed(global: u64, purpose: &str) -> u64 {
    let d = Sha256::new()
        .chain_update(global.to_le_bytes())
        .chain_update(purpose.as_bytes())
        .finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    fs::write(path, s)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("artifact serializes"));
        s.push('\n');
    }
    fs::write(path, s)
}

fn read_json<T: DeserializeOwned>(stage: StageName, path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|_| missing(stage, path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Stage {
        stage,
        code: "MALFORMED_ARTIFACT".into(),
        message: format!("{}: {e}", path.display()),
        exit_code: EXIT_FAILURE,
    })
}

fn read_jsonl<T: DeserializeOwned>(stage: StageName, path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|_| missing(stage, path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Stage {
                stage,
                code: "MALFORMED_ARTIFACT".into(),
                message: format!("{}:{}: {e}", path.display(), i + 1),
                exit_code: EXIT_FAILURE,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    /// File name to sha256 of its content.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(out_dir: &Path) -> Self {
        fs::read_to_string(out_dir.join(files::MANIFEST))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, out_dir: &Path) -> std::io::Result<()> {
        write_json(&out_dir.join(files::MANIFEST), self)
    }

    /// True when the stage ran with `input_hash` and its outputs are intact.
    pub fn is_current(&self, out_dir: &Path, stage: StageName, input_hash: &str) -> bool {
        let Some(rec) = self.stages.get(stage.as_str()) else {
            return false;
        };
        rec.input_hash == input_hash
            && stage.outputs().iter().all(|f| {
                rec.outputs
                    .get(*f)
                    .is_some_and(|h| file_sha256(&out_dir.join(f)).as_deref() == Some(h))
            })
    }
}

// ---------------------------------------------------------------------------
// Stage artifacts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletsMeta {
    pub sampled: usize,
    pub labeled: usize,
    pub candidate_k: usize,
    pub skipped: Vec<SkippedTriplet>,
    pub usage: BTreeMap<String, StageUsage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersArtifact {
    pub params: ClusterParams,
    pub grid: Vec<GridCell>,
    pub clusters: Vec<Cluster>,
    pub partition: PartitionReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QePairsMeta {
    pub descriptions: Vec<ClusterDescription>,
    pub stats: QeStats,
    pub usage: BTreeMap<String, StageUsage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub baseline: MetricsReport,
    pub adapted: MetricsReport,
    /// Where the evaluation questions came from.
    pub query_source: String,
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub documents: usize,
    pub paragraphs: usize,
    pub document_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub params: ClusterParams,
    pub n_clusters: usize,
    pub singletons: usize,
    pub grid: Vec<GridCell>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSummary {
    pub sampled: usize,
    pub labeled: usize,
    pub skipped_ambiguous: usize,
    pub skipped_parse: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    #[serde(flatten)]
    pub ledger: TokenLedger,
    pub tcdt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validators {
    pub partition: PartitionReport,
    pub grounding: GroundingReport,
    /// labeled + skipped = sampled for the triplet stage.
    pub triplet_accounting: bool,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub triplet: TrainReport,
    pub qe: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub config_fingerprint: String,
    pub embedding_provider: String,
    pub adapter_checkpoint_sha256: String,
    pub corpus: CorpusSummary,
    pub metrics: MetricsArtifact,
    pub train: TrainSummary,
    pub clustering: ClusteringSummary,
    pub triplets: TripletSummary,
    pub qepairs: QeStats,
    pub ledger: LedgerSummary,
    pub validators: Validators,
}

impl Report {
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let m = &self.metrics;
        let _ = writeln!(s, "corpus: {} documents, {} paragraphs, {} tokens",
            self.corpus.documents, self.corpus.paragraphs, self.corpus.document_tokens);
        let _ = writeln!(s, "queries: {} ({}), k = {}", m.adapted.n_queries, m.query_source, m.adapted.k);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16}{:>10}{:>10}", "metric", "baseline", "adapted");
        for (name, b, a) in [
            ("accuracy", m.baseline.accuracy, m.adapted.accuracy),
            ("mrr", m.baseline.mrr, m.adapted.mrr),
            ("tf_score", m.baseline.tf_score, m.adapted.tf_score),
            ("avg_similarity", m.baseline.avg_similarity, m.adapted.avg_similarity),
        ] {
            let _ = writeln!(s, "{name:<16}{b:>10.4}{a:>10.4}");
        }
        let _ = writeln!(s);
        for t in [&self.train.triplet, &self.train.qe] {
            let _ = writeln!(s, "train {:?}: stop epoch {} ({:?}), best epoch {}",
                t.stage, t.stop_epoch, t.stop_reason, t.best_epoch);
        }
        let c = &self.clustering;
        let _ = writeln!(s, "clusters: {} (K = {}, delta = {}), {} singletons",
            c.n_clusters, c.params.k, c.params.delta, c.singletons);
        let t = &self.triplets;
        let _ = writeln!(s, "triplets: {} sampled, {} labeled, {} ambiguous, {} unparsable",
            t.sampled, t.labeled, t.skipped_ambiguous, t.skipped_parse);
        let q = &self.qepairs;
        let _ = writeln!(s, "qe pairs: {} positive, {} negative, {} clusters excluded",
            q.positives, q.negatives, q.clusters_excluded);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<18}{:>12}{:>12}{:>8}", "llm stage", "input", "output", "calls");
        for (name, u) in &self.ledger.ledger.per_stage {
            let _ = writeln!(s, "{name:<18}{:>12}{:>12}{:>8}", u.input_tokens, u.output_tokens, u.calls);
        }
        let _ = writeln!(s, "TCDT: {:.4}", self.ledger.tcdt);
        let _ = writeln!(s, "validators: {}", if self.validators.valid { "ok" } else { "VIOLATIONS" });
        s
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: StageName,
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub stages: Vec<StageOutcome>,
}

impl RunSummary {
    pub fn ran(&self) -> Vec<StageName> {
        self.stages.iter().filter(|s| !s.skipped).map(|s| s.stage).collect()
    }
}

pub struct Runner {
    config: PipelineConfig,
    out: PathBuf,
    gateway: Option<Gateway>,
}

impl Runner {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let out = config.out_dir.clone();
        fs::create_dir_all(&out)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", out.display())))?;
        Ok(Self {
            config,
            out,
            gateway: None,
        })
    }

    /// Injects a gateway, e.g. one backed by an in-process provider.
    pub fn with_gateway(mut self, gateway: Gateway) -> Self {
        self.gateway = Some(gateway);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Runs `stages` in order. With `resume`, a stage whose inputs and
    /// outputs match the manifest is skipped until some stage reruns; from
    /// then on everything reruns.
    pub fn run(&mut self, stages: &[StageName], resume: bool) -> Result<RunSummary, PipelineError> {
        let mut manifest = Manifest::load(&self.out);
        let mut summary = RunSummary::default();
        let mut dirty = !resume;
        for &stage in stages {
            let input_hash = self.input_hash(stage)?;
            if !dirty && manifest.is_current(&self.out, stage, &input_hash) {
                log::info!("stage {stage}: up to date, skipped");
                summary.stages.push(StageOutcome { stage, skipped: true });
                continue;
            }
            dirty = true;
            log::info!("stage {stage}: running");
            let result = self.run_stage(stage);
            // Record what was written even when the report gate fails.
            if result.is_ok() || matches!(result, Err(PipelineError::InvariantViolation { .. })) {
                let outputs = stage
                    .outputs()
                    .iter()
                    .filter_map(|f| file_sha256(&self.path(f)).map(|h| (f.to_string(), h)))
                    .collect();
                manifest.stages.insert(
                    stage.as_str().to_string(),
                    StageRecord {
                        input_hash,
                        outputs,
                    },
                );
                manifest
                    .save(&self.out)
                    .map_err(stage_err(stage))?;
            }
            result?;
            summary.stages.push(StageOutcome { stage, skipped: false });
        }
        Ok(summary)
    }

    pub fn run_all(&mut self, resume: bool) -> Result<RunSummary, PipelineError> {
        self.run(&STAGES, resume)
    }

    fn input_hash(&self, stage: StageName) -> Result<String, PipelineError> {
        let c = &self.config;
        let art = |names: &[&str]| -> serde_json::Value {
            names
                .iter()
                .map(|n| (n.to_string(), serde_json::json!(file_sha256(&self.path(n)))))
                .collect::<serde_json::Map<_, _>>()
                .into()
        };
        let mock = || match (c.llm.kind, &c.llm.mock_script) {
            (LlmKind::Mock, Some(p)) => file_sha256(p),
            _ => None,
        };
        let report_inputs = [
            files::CORPUS,
            files::EMBEDDINGS,
            files::TRIPLETS,
            files::TRIPLETS_META,
            files::TRAIN_TRIPLET,
            files::CLUSTERS,
            files::QEPAIRS,
            files::QEPAIRS_META,
            files::ADAPTER_QE,
            files::TRAIN_QE,
        ];
        let value = match stage {
            StageName::Ingest => serde_json::json!({
                "segmentation": c.segmentation,
                "corpus": corpus_hash(&c.corpus).map_err(stage_err(stage))?,
            }),
            StageName::Embed => serde_json::json!({
                "embedding": c.embedding,
                "inputs": art(&[files::CORPUS]),
            }),
            StageName::Triplets => serde_json::json!({
                "triplet": c.triplet,
                "candidate_k": c.candidate_k(),
                "llm": c.llm.model,
                "mock": mock(),
                "seed": c.rng_seed,
                "inputs": art(&[files::CORPUS, files::EMBEDDINGS]),
            }),
            StageName::TrainTriplet => serde_json::json!({
                "train": c.train,
                "seed": c.rng_seed,
                "inputs": art(&[files::EMBEDDINGS, files::TRIPLETS]),
            }),
            StageName::Cluster => serde_json::json!({
                "clustering": c.clustering,
                "seed": c.rng_seed,
                "inputs": art(&[files::EMBEDDINGS, files::ADAPTER_TRIPLET]),
            }),
            StageName::Qepairs => serde_json::json!({
                "qe": c.qe,
                "llm": c.llm.model,
                "mock": mock(),
                "seed": c.rng_seed,
                "inputs": art(&[files::CORPUS, files::CLUSTERS]),
            }),
            StageName::TrainQe => serde_json::json!({
                "train": c.train,
                "embedding": c.embedding,
                "seed": c.rng_seed,
                "inputs": art(&[files::EMBEDDINGS, files::ADAPTER_TRIPLET, files::QEPAIRS]),
            }),
            StageName::Evaluate => serde_json::json!({
                "eval": c.eval,
                "embedding": c.embedding,
                "fingerprint": c.fingerprint(),
                "queries": c.eval_queries.as_ref().and_then(|p| file_sha256(p)),
                "inputs": art(&report_inputs),
            }),
            StageName::Report => serde_json::json!({
                "fingerprint": c.fingerprint(),
                "queries": c.eval_queries.as_ref().and_then(|p| file_sha256(p)),
                "inputs": art(&[&report_inputs[..], &[files::METRICS]].concat()),
            }),
        };
        Ok(sha256_hex(
            format!("{}\n{}", stage.as_str(), value).as_bytes(),
        ))
    }

    fn run_stage(&mut self, stage: StageName) -> Result<(), PipelineError> {
        match stage {
            StageName::Ingest => self.ingest(),
            StageName::Embed => self.embed(),
            StageName::Triplets => self.triplets(),
            StageName::TrainTriplet => self.train_triplet(),
            StageName::Cluster => self.cluster(),
            StageName::Qepairs => self.qepairs(),
            StageName::TrainQe => self.train_qe(),
            StageName::Evaluate => self.evaluate(),
            StageName::Report => self.report(),
        }
    }

    fn gateway(&mut self, stage: StageName) -> Result<&Gateway, PipelineError> {
        if self.gateway.is_none() {
            let g = Gateway::from_config(&self.config.llm, TokenLedger::default())
                .map_err(stage_err(stage))?;
            self.gateway = Some(g);
        }
        Ok(self.gateway.as_ref().unwrap())
    }

    fn load_store(&self, stage: StageName) -> Result<CorpusStore, PipelineError> {
        let p = self.path(files::CORPUS);
        if !p.is_file() {
            return Err(missing(stage, &p));
        }
        CorpusStore::open(&p).map_err(stage_err(stage))
    }

    fn load_embeddings(&self, stage: StageName) -> Result<EmbeddingMatrix, PipelineError> {
        let p = self.path(files::EMBEDDINGS);
        if !p.is_file() {
            return Err(missing(stage, &p));
        }
        Ok(EmbeddingMatrix::load(&p).map_err(stage_err(stage))?.0)
    }

    fn load_adapter(&self, stage: StageName, name: &str) -> Result<AdapterParams, PipelineError> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(missing(stage, &p));
        }
        Ok(AdapterParams::load(&p).map_err(stage_err(stage))?.0)
    }

    fn load_clusters(&self, stage: StageName) -> Result<ClustersArtifact, PipelineError> {
        read_json(stage, &self.path(files::CLUSTERS))
    }

    fn embed_texts(&self, stage: StageName, texts: &[&str]) -> Result<Vec<Vec<f64>>, PipelineError> {
        embed_batch(&self.config.embedding, texts).map_err(stage_err(stage))
    }

    fn train_config(&self, stage: Stage) -> TrainConfig {
        let mut t = self.config.train.clone();
        t.rng_seed = derive_seed(self.config.rng_seed, &format!("train/{stage:?}"));
        t
    }

    fn ingest(&mut self) -> Result<(), PipelineError> {
        let s = StageName::Ingest;
        let store = load_corpus(&self.config.corpus, &self.config.segmentation).map_err(stage_err(s))?;
        log::info!(
            "ingested {} paragraphs, {} tokens",
            store.len(),
            store.total_document_tokens()
        );
        store.save(&self.path(files::CORPUS)).map_err(stage_err(s))
    }

    fn embed(&mut self) -> Result<(), PipelineError> {
        let s = StageName::Embed;
        let store = self.load_store(s)?;
        let vectors = self.embed_texts(s, &store.texts())?;
        let ids = store.paragraphs().iter().map(|p| p.para_id).collect();
        let m = EmbeddingMatrix::from_rows(vectors, ids).map_err(stage_err(s))?;
        m.save(&self.path(files::EMBEDDINGS), &self.config.embedding.fingerprint())
            .map_err(stage_err(s))
    }

    fn triplets(&mut self) -> Result<(), PipelineError> {
        let s = StageName::Triplets;
        let store = self.load_store(s)?;
        let index = self.load_embeddings(s)?;
        let candidate_k = self.config.candidate_k();
        let count = self.config.triplet.count.unwrap_or(2 * index.n());
        let seed = derive_seed(self.config.rng_seed, "triplets");
        let cands = sample_triplet_candidates(&index, candidate_k, count, seed).map_err(stage_err(s))?;
        let gateway = self.gateway(s)?;
        let run = label_all(gateway, &cands, |id| store.text(id)).map_err(stage_err(s))?;
        let usage = stage_usage(&gateway.ledger(), &[triplet::STAGE]);
        write_jsonl(&self.path(files::TRIPLETS), &run.labeled).map_err(stage_err(s))?;
        let meta = TripletsMeta {
            sampled: cands.len(),
            labeled: run.labeled.len(),
            candidate_k,
            skipped: run.skipped,
            usage,
        };
        write_json(&self.path(files::TRIPLETS_META), &meta).map_err(stage_err(s))
    }

    fn train_triplet(&mut self) -> Result<(), PipelineError> {
        let s = StageName::TrainTriplet;
        let index = self.load_embeddings(s)?;
        let triplets: Vec<LabeledTriplet> = read_jsonl(s, &self.path(files::TRIPLETS))?;
        let config = self.train_config(Stage::Triplet);
        let dataset = triplet_dataset(&index, &triplets, config.triplet_val_fraction, config.rng_seed)
            .map_err(stage_err(s))?;
        // Zero epochs keeps the exact identity so adapted equals baseline.
        let init = if config.max_epochs == 0 {
            AdapterParams::identity(index.d())
        } else {
            AdapterParams::init(index.d(), config.init_noise_std, config.rng_seed)
        };
        let (params, report) = train_stage(Stage::Triplet, &dataset, &config, &init).map_err(stage_err(s))?;
        self.save_adapter(s, files::ADAPTER_TRIPLET, files::TRAIN_TRIPLET, &params, &report, &config)
    }

    fn save_adapter(
        &self,
        s: StageName,
        adapter_file: &str,
        report_file: &str,
        params: &AdapterParams,
        report: &TrainReport,
        config: &TrainConfig,
    ) -> Result<(), PipelineError> {
        let trailer = serde_json::json!({
            "stage": report.stage,
            "config": config,
            "best_epoch": report.best_epoch,
            "stop_epoch": report.stop_epoch,
            "provider": self.config.embedding.fingerprint(),
        });
        params
            .save(&self.path(adapter_file), &trailer)
            .map_err(stage_err(s))?;
        write_json(&self.path(report_file), report).map_err(stage_err(s))
    }

    fn cluster(&mut self) -> Result<(), PipelineError> {
        let s = StageName::Cluster;
        let raw = self.load_embeddings(s)?;
        let adapter = self.load_adapter(s, files::ADAPTER_TRIPLET)?;
        let index = adapter.apply_matrix(&raw).map_err(stage_err(s))?;
        let seed = derive_seed(self.config.rng_seed, "cluster");
        let grid = self.config.clustering.grid(seed);
        let (params, cells) = if grid.len() == 1 {
            (grid[0], Vec::new())
        } else {
            let objective = ObjectiveSpec::MeanIntraClusterSimilarity {
                sample_fraction: self.config.clustering.sample_fraction,
                sample_seed: derive_seed(self.config.rng_seed, "cluster/objective"),
            };
            let outcome = grid_search_params(&index, &grid, &objective).map_err(stage_err(s))?;
            (outcome.best, outcome.cells)
        };
        let clusters = sample_knn_cluster(&index, &params).map_err(stage_err(s))?;
        let partition = validate_partition(&clusters, index.n(), &params);
        log::info!(
            "{} clusters with K = {}, delta = {}",
            clusters.len(),
            params.k,
            params.delta
        );
        let artifact = ClustersArtifact {
            params,
            grid: cells,
            clusters,
            partition,
        };
        write_json(&self.path(files::CLUSTERS), &artifact).map_err(stage_err(s))
    }

    fn qepairs(&mut self) -> Result<(), PipelineError> {
        let s = StageName::Qepairs;
        let store = self.load_store(s)?;
        let clusters = self.load_clusters(s)?;
        let qe = self.config.qe;
        let seed = derive_seed(self.config.rng_seed, "qepairs");
        let gateway = self.gateway(s)?;
        let run = synthesize(gateway, &clusters.clusters, store.len(), |id| store.text(id), &qe, seed)
            .map_err(stage_err(s))?;
        let usage = stage_usage(&gateway.ledger(), &[STAGE_DESCRIBE, STAGE_GENERATE, STAGE_GRADE]);
        write_jsonl(&self.path(files::QEPAIRS), &run.pairs).map_err(stage_err(s))?;
        let meta = QePairsMeta {
            descriptions: run.descriptions,
            stats: run.stats,
            usage,
        };
        write_json(&self.path(files::QEPAIRS_META), &meta).map_err(stage_err(s))
    }

    fn train_qe(&mut self) -> Result<(), PipelineError> {
        let s = StageName::TrainQe;
        let index = self.load_embeddings(s)?;
        let start = self.load_adapter(s, files::ADAPTER_TRIPLET)?;
        let pairs: Vec<QePair> = read_jsonl(s, &self.path(files::QEPAIRS))?;
        let mut seen = HashSet::new();
        let questions: Vec<&str> = pairs
            .iter()
            .map(|p| p.question.as_str())
            .filter(|q| seen.insert(*q))
            .collect();
        if questions.is_empty() {
            return Err(stage_err(s)(crate::trainer::TrainError::EmptyDataset(
                "no question-evidence pairs".into(),
            )));
        }
        let vectors = self.embed_texts(s, &questions)?;
        let qmap: HashMap<String, Vec<f64>> = questions
            .iter()
            .map(|q| q.to_string())
            .zip(vectors)
            .collect();
        let dataset = qe_dataset(&index, &qmap, &pairs).map_err(stage_err(s))?;
        let config = self.train_config(Stage::Qe);
        let (params, report) = train_stage(Stage::Qe, &dataset, &config, &start).map_err(stage_err(s))?;
        self.save_adapter(s, files::ADAPTER_QE, files::TRAIN_QE, &params, &report, &config)
    }

    fn eval_queries(&self, s: StageName) -> Result<(Vec<QueryRecord>, String), PipelineError> {
        if let Some(p) = &self.config.eval_queries {
            let q = load_queries(p).map_err(stage_err(s))?;
            return Ok((q, "eval_queries".into()));
        }
        let pairs: Vec<QePair> = read_jsonl(s, &self.path(files::QEPAIRS))?;
        let mut seen = HashSet::new();
        let q: Vec<QueryRecord> = pairs
            .into_iter()
            .filter(|p| p.polarity == Polarity::Positive && p.split == Some(Split::Val))
            .filter(|p| seen.insert(p.question.clone()))
            .map(|p| QueryRecord {
                question: p.question,
                gold_ids: p.evidence_ids,
            })
            .collect();
        Ok((q, "qe_validation_split".into()))
    }

    fn evaluate(&mut self) -> Result<(), PipelineError> {
        let s = StageName::Evaluate;
        let store = self.load_store(s)?;
        let index = self.load_embeddings(s)?;
        let adapter = self.load_adapter(s, files::ADAPTER_QE)?;
        let (queries, source) = self.eval_queries(s)?;
        if queries.is_empty() {
            return Err(stage_err(s)(crate::evalkit::EvalError::NoQueries));
        }
        let texts: Vec<&str> = queries.iter().map(|q| q.question.as_str()).collect();
        let raw_q = self.embed_texts(s, &texts)?;
        let k = self.config.eval.k;
        let text = |id| store.text(id);
        let baseline = evaluate_adapter(&AdapterParams::identity(index.d()), &index, &queries, &raw_q, text, k)
            .map_err(stage_err(s))?;
        let adapted = evaluate_adapter(&adapter, &index, &queries, &raw_q, text, k).map_err(stage_err(s))?;
        log::info!(
            "accuracy@{k}: baseline {:.4}, adapted {:.4}",
            baseline.accuracy,
            adapted.accuracy
        );
        let metrics = MetricsArtifact {
            baseline,
            adapted,
            query_source: source,
        };
        write_json(&self.path(files::METRICS), &metrics).map_err(stage_err(s))?;
        let report = self.build_report(s)?;
        write_json(&self.path(files::REPORT), &report).map_err(stage_err(s))
    }

    fn report(&mut self) -> Result<(), PipelineError> {
        let s = StageName::Report;
        let report = self.build_report(s)?;
        write_json(&self.path(files::REPORT), &report).map_err(stage_err(s))?;
        fs::write(self.path(files::SUMMARY), report.summary_text()).map_err(stage_err(s))?;
        if !report.validators.valid {
            let v = &report.validators;
            return Err(PipelineError::InvariantViolation {
                stage: s,
                message: format!(
                    "partition violations: {}, grounding violations: {}, triplet accounting ok: {}",
                    v.partition.violation_count(),
                    v.grounding.violation_count(),
                    v.triplet_accounting
                ),
            });
        }
        Ok(())
    }

    /// Assembles the report from the artifacts on disk, re-running the
    /// partition and grounding validators.
    pub fn build_report(&self, s: StageName) -> Result<Report, PipelineError> {
        let store = self.load_store(s)?;
        let clusters = self.load_clusters(s)?;
        let pairs: Vec<QePair> = read_jsonl(s, &self.path(files::QEPAIRS))?;
        let tmeta: TripletsMeta = read_json(s, &self.path(files::TRIPLETS_META))?;
        let qmeta: QePairsMeta = read_json(s, &self.path(files::QEPAIRS_META))?;
        let metrics: MetricsArtifact = read_json(s, &self.path(files::METRICS))?;
        let triplet_report: TrainReport = read_json(s, &self.path(files::TRAIN_TRIPLET))?;
        let qe_report: TrainReport = read_json(s, &self.path(files::TRAIN_QE))?;
        let labeled: Vec<LabeledTriplet> = read_jsonl(s, &self.path(files::TRIPLETS))?;
        let adapter_path = self.path(files::ADAPTER_QE);
        let adapter_hash = file_sha256(&adapter_path).ok_or_else(|| missing(s, &adapter_path))?;
        let emb_path = self.path(files::EMBEDDINGS);
        let (_, provider) = EmbeddingMatrix::load(&emb_path).map_err(stage_err(s))?;

        let mut ledger = TokenLedger::with_document_tokens(store.total_document_tokens() as u64);
        for (name, u) in tmeta.usage.iter().chain(&qmeta.usage) {
            ledger.input_tokens += u.input_tokens;
            ledger.output_tokens += u.output_tokens;
            ledger.per_stage.insert(name.clone(), *u);
        }
        let tcdt = compute_tcdt(&ledger).map_err(stage_err(s))?;

        let partition = validate_partition(&clusters.clusters, store.len(), &clusters.params);
        let grounding = validate_pairs(&pairs, &clusters.clusters, self.config.qe.negative_ratio);
        let triplet_accounting =
            tmeta.labeled == labeled.len() && tmeta.labeled + tmeta.skipped.len() == tmeta.sampled;
        let valid = partition.is_valid() && grounding.is_valid() && triplet_accounting;

        let count_skips = |why| tmeta.skipped.iter().filter(|t| t.why == why).count();
        Ok(Report {
            format_version: REPORT_FORMAT_VERSION,
            config_fingerprint: self.config.fingerprint(),
            embedding_provider: provider,
            adapter_checkpoint_sha256: adapter_hash,
            corpus: CorpusSummary {
                documents: store.doc_ids().count(),
                paragraphs: store.len(),
                document_tokens: store.total_document_tokens(),
            },
            metrics,
            train: TrainSummary {
                triplet: triplet_report,
                qe: qe_report,
            },
            clustering: ClusteringSummary {
                params: clusters.params,
                n_clusters: clusters.clusters.len(),
                singletons: clusters.clusters.iter().filter(|c| c.len() == 1).count(),
                grid: clusters.grid,
            },
            triplets: TripletSummary {
                sampled: tmeta.sampled,
                labeled: tmeta.labeled,
                skipped_ambiguous: count_skips(SkipReason::Ambiguous),
                skipped_parse: count_skips(SkipReason::Parse),
            },
            qepairs: qmeta.stats,
            ledger: LedgerSummary { ledger, tcdt },
            validators: Validators {
                partition,
                grounding,
                triplet_accounting,
                valid,
            },
        })
    }
}

fn stage_usage(ledger: &TokenLedger, names: &[&str]) -> BTreeMap<String, StageUsage> {
    names
        .iter()
        .map(|n| (n.to_string(), ledger.per_stage.get(*n).cloned().unwrap_or_default()))
        .collect()
}

/// Applies command-line overrides on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mock_llm: Option<PathBuf>,
    pub stub_embeddings: bool,
}

impl Overrides {
    pub fn apply(&self, config: &mut PipelineConfig) {
        if let Some(p) = &self.corpus {
            config.corpus = p.clone();
        }
        if let Some(p) = &self.out_dir {
            config.out_dir = p.clone();
        }
        if let Some(s) = self.seed {
            config.rng_seed = s;
        }
        if let Some(p) = &self.mock_llm {
            config.llm.kind = LlmKind::Mock;
            config.llm.mock_script = Some(p.clone());
        }
        if self.stub_embeddings {
            config.embedding.kind = ProviderKind::Stub;
        }
    }
}
