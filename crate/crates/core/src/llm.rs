//! LLM gateway: every chat completion in the pipeline goes through
//! [`Gateway`], which forwards to a [`ChatProvider`] and books the usage on a
//! [`TokenLedger`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{self, RetryPolicy};

pub const LLM_API_KEY_ENV: &str = "LMAR_LLM_API_KEY";
pub const LLM_BASE_URL_ENV: &str = "LMAR_LLM_BASE_URL";

/// Temperature for labeling, description and grading calls.
pub const LABELING_TEMPERATURE: f64 = 0.0;
/// Temperature for question generation.
pub const GENERATION_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("LLM provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("token budget exceeded: {used} used, cap {cap}")]
    BudgetExceeded { used: u64, cap: u64 },
    #[error("mock script exhausted (no entry left for request starting {0:?})")]
    ScriptExhausted(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("mock script {path}:{line}: {reason}")]
    BadScript {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system_prompt: String,
    pub user_content: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    fn validate(&self) -> Result<(), GatewayError> {
        if self.system_prompt.trim().is_empty() || self.user_content.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompts must be non-empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// Text a mock entry's `match` substring is tested against.
    pub fn match_text(&self) -> String {
        format!("{}\n{}", self.system_prompt, self.user_content)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    /// Upper bound on concurrent calls this provider tolerates.
    fn max_parallelism(&self) -> usize {
        usize::MAX
    }

    fn describe(&self) -> String;
}

// ---------------------------------------------------------------------------
// HTTP provider
// ---------------------------------------------------------------------------

/// Chat-completions style endpoint: `POST {base_url}/chat/completions`.
pub struct HttpChatProvider {
    base_url: String,
    api_key: Option<String>,
    policy: RetryPolicy,
}

impl HttpChatProvider {
    pub fn new(base_url: &str, api_key: Option<String>, policy: RetryPolicy) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            policy,
        }
    }
}

pub(crate) fn chat_body(request: &ChatRequest) -> Value {
    json!({
        "model": request.model,
        "messages": [
            {"role": "system", "content": request.system_prompt},
            {"role": "user", "content": request.user_content},
        ],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    })
}

pub(crate) fn parse_chat_response(v: &Value) -> Result<ChatResponse, GatewayError> {
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::ProviderUnavailable("response has no message content".into()))?;
    let usage = |key: &str| v.pointer(&format!("/usage/{key}")).and_then(Value::as_u64).unwrap_or(0);
    Ok(ChatResponse {
        content: content.to_string(),
        input_tokens: usage("prompt_tokens"),
        output_tokens: usage("completion_tokens"),
    })
}

impl ChatProvider for HttpChatProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let url = format!("{}/chat/completions", self.base_url);
        let v = http::post_json(&url, self.api_key.as_deref(), &chat_body(request), &self.policy)
            .map_err(|e| GatewayError::ProviderUnavailable(e.to_string()))?;
        parse_chat_response(&v)
    }

    fn describe(&self) -> String {
        format!("http:{}", self.base_url)
    }
}

// ---------------------------------------------------------------------------
// Mock provider
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub match_substring: Option<String>,
    pub content: String,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
}

/// Replays scripted responses. Each call consumes the first unused entry
/// whose `match` (if any) occurs in the request's system prompt or user
/// content. Calls are served one at a time.
pub struct MockChatProvider {
    entries: Mutex<Vec<(MockEntry, bool)>>,
}

impl MockChatProvider {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        Self {
            entries: Mutex::new(entries.into_iter().map(|e| (e, false)).collect()),
        }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, GatewayError> {
        let bad = |line: usize, reason: String| GatewayError::BadScript {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let file = fs::File::open(path).map_err(|e| bad(0, e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| bad(i + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?);
        }
        Ok(Self::new(entries))
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().unwrap().iter().filter(|(_, used)| !used).count()
    }
}

impl ChatProvider for MockChatProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let text = request.match_text();
        let mut entries = self.entries.lock().unwrap();
        let slot = entries.iter_mut().find(|(e, used)| {
            !*used && e.match_substring.as_ref().is_none_or(|m| text.contains(m.as_str()))
        });
        match slot {
            Some((entry, used)) => {
                *used = true;
                Ok(ChatResponse {
                    content: entry.content.clone(),
                    input_tokens: entry.input_tokens,
                    output_tokens: entry.output_tokens,
                })
            }
            None => Err(GatewayError::ScriptExhausted(
                request.user_content.chars().take(60).collect(),
            )),
        }
    }

    fn max_parallelism(&self) -> usize {
        1
    }

    fn describe(&self) -> String {
        "mock".into()
    }
}

/// Provider backed by a closure; handy for oracle-style test doubles.
pub struct FnChatProvider<F> {
    f: F,
}

impl<F> FnChatProvider<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> ChatProvider for FnChatProvider<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (self.f)(request)
    }

    fn max_parallelism(&self) -> usize {
        1
    }

    fn describe(&self) -> String {
        "fn".into()
    }
}

// ---------------------------------------------------------------------------
// Ledger
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub calls: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub document_tokens: u64,
    pub per_stage: BTreeMap<String, StageUsage>,
}

impl TokenLedger {
    pub fn with_document_tokens(document_tokens: u64) -> Self {
        Self {
            document_tokens,
            ..Self::default()
        }
    }

    pub fn record(&mut self, stage: &str, input_tokens: u64, output_tokens: u64) {
        self.input_tokens += input_tokens;
        self.output_tokens += output_tokens;
        let s = self.per_stage.entry(stage.to_string()).or_default();
        s.input_tokens += input_tokens;
        s.output_tokens += output_tokens;
        s.calls += 1;
    }

    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }

    /// True when the totals equal the per-stage sums.
    pub fn is_consistent(&self) -> bool {
        let (i, o) = self
            .per_stage
            .values()
            .fold((0, 0), |(i, o), s| (i + s.input_tokens, o + s.output_tokens));
        i == self.input_tokens && o == self.output_tokens
    }

    /// Drops the usage booked under `stage` (used when a stage is rerun).
    pub fn clear_stage(&mut self, stage: &str) {
        if let Some(s) = self.per_stage.remove(stage) {
            self.input_tokens -= s.input_tokens;
            self.output_tokens -= s.output_tokens;
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("TCDT undefined: document token count is zero")]
pub struct ZeroDocumentTokens;

/// Tokens consumed per document token: `(input + output) / document`.
pub fn compute_tcdt(ledger: &TokenLedger) -> Result<f64, ZeroDocumentTokens> {
    tcdt(ledger.input_tokens, ledger.output_tokens, ledger.document_tokens)
}

pub fn tcdt(input_tokens: u64, output_tokens: u64, document_tokens: u64) -> Result<f64, ZeroDocumentTokens> {
    if document_tokens == 0 {
        return Err(ZeroDocumentTokens);
    }
    Ok((input_tokens + output_tokens) as f64 / document_tokens as f64)
}

// ---------------------------------------------------------------------------
// Structured output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemaKind {
    TripletLabel,
    ClusterDescription,
    QaGrade,
    QaPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripletVerdict {
    /// `|<1>|`: the first candidate is the positive.
    First,
    /// `|<2>|`: the second candidate is the positive.
    Second,
    /// `"Error"`: both candidates are equally close.
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQaPair {
    pub question: String,
    pub evidence_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Structured {
    TripletLabel { verdict: TripletVerdict, reason: String },
    ClusterDescription(String),
    QaGrade(f64),
    QaPairs(Vec<RawQaPair>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse failure: {0}")]
pub struct ParseFailure(pub String);

fn fail<T>(msg: impl Into<String>) -> Result<T, ParseFailure> {
    Err(ParseFailure(msg.into()))
}

/// Maximum number of `{` positions tried when looking for a JSON object.
const MAX_OBJECT_STARTS: usize = 64;

/// End (exclusive) of the balanced `{...}` starting at `start`, honouring
/// JSON string quoting.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced `{...}` in `content` that parses as a JSON object.
pub fn extract_json_object(content: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = content.as_bytes();
    bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'{')
        .take(MAX_OBJECT_STARTS)
        .find_map(|(start, _)| {
            let end = balanced_end(bytes, start)?;
            match serde_json::from_str::<Value>(&content[start..end]) {
                Ok(Value::Object(map)) => Some(map),
                _ => None,
            }
        })
}

fn is_error_token(s: &str) -> bool {
    s.trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '`')
        .trim()
        == "Error"
}

fn parse_triplet(content: &str) -> Result<Structured, ParseFailure> {
    let Some(obj) = extract_json_object(content) else {
        if is_error_token(content) {
            return Ok(Structured::TripletLabel {
                verdict: TripletVerdict::Ambiguous,
                reason: String::new(),
            });
        }
        return fail("no JSON object");
    };
    let reason = match obj.get("Reason") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return fail("\"Reason\" is not a string"),
    };
    let token = match obj.get("Token") {
        Some(Value::String(s)) => s.trim(),
        Some(_) => return fail("\"Token\" is not a string"),
        None => return fail("missing \"Token\""),
    };
    let verdict = match token {
        "|<1>|" => TripletVerdict::First,
        "|<2>|" => TripletVerdict::Second,
        t if is_error_token(t) => TripletVerdict::Ambiguous,
        other => return fail(format!("unknown token {other:?}")),
    };
    Ok(Structured::TripletLabel { verdict, reason })
}

fn parse_description(content: &str) -> Result<Structured, ParseFailure> {
    let obj = extract_json_object(content).ok_or_else(|| ParseFailure("no JSON object".into()))?;
    match obj.get("description") {
        Some(Value::String(s)) if !s.trim().is_empty() => {
            Ok(Structured::ClusterDescription(s.clone()))
        }
        Some(Value::String(_)) => fail("empty description"),
        _ => fail("missing \"description\""),
    }
}

fn parse_grade(content: &str) -> Result<Structured, ParseFailure> {
    let obj = extract_json_object(content).ok_or_else(|| ParseFailure("no JSON object".into()))?;
    let grade = obj
        .get("grade")
        .and_then(Value::as_f64)
        .ok_or_else(|| ParseFailure("missing numeric \"grade\"".into()))?;
    if !(0.0..=1.0).contains(&grade) {
        return fail(format!("grade {grade} outside [0, 1]"));
    }
    Ok(Structured::QaGrade(grade))
}

fn parse_qa_pairs(content: &str) -> Result<Structured, ParseFailure> {
    let obj = extract_json_object(content).ok_or_else(|| ParseFailure("no JSON object".into()))?;
    let Some(Value::Array(items)) = obj.get("qa_pairs") else {
        return fail("missing \"qa_pairs\" array");
    };
    let mut pairs = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let question = match item.get("question") {
            Some(Value::String(q)) if !q.trim().is_empty() => q.trim().to_string(),
            _ => return fail(format!("qa_pairs[{i}] has no question")),
        };
        let Some(Value::Array(ids)) = item.get("evidence_ids") else {
            return fail(format!("qa_pairs[{i}] has no evidence_ids array"));
        };
        let evidence_ids = ids
            .iter()
            .map(|v| v.as_u64().and_then(|x| usize::try_from(x).ok()))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| ParseFailure(format!("qa_pairs[{i}] has a non-integer evidence id")))?;
        pairs.push(RawQaPair {
            question,
            evidence_ids,
        });
    }
    Ok(Structured::QaPairs(pairs))
}

/// Pulls the first JSON object out of `content` (surrounding prose is
/// ignored) and validates it against `schema`.
pub fn parse_structured(content: &str, schema: SchemaKind) -> Result<Structured, ParseFailure> {
    match schema {
        SchemaKind::TripletLabel => parse_triplet(content),
        SchemaKind::ClusterDescription => parse_description(content),
        SchemaKind::QaGrade => parse_grade(content),
        SchemaKind::QaPairs => parse_qa_pairs(content),
    }
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub kind: LlmKind,
    /// Falls back to `LMAR_LLM_BASE_URL` when empty.
    pub base_url: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub retry_base_ms: u64,
    pub parallelism: usize,
    pub max_output_tokens: u32,
    pub mock_script: Option<PathBuf>,
    /// Hard cap on input + output tokens for a run.
    pub token_budget: Option<u64>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            kind: LlmKind::Mock,
            base_url: String::new(),
            model: "deepseek-chat".into(),
            timeout_ms: 120_000,
            max_retries: 3,
            retry_base_ms: 1_000,
            parallelism: 4,
            max_output_tokens: 1024,
            mock_script: None,
            token_budget: None,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.parallelism == 0 {
            return Err("llm parallelism must be >= 1".into());
        }
        if self.kind == LlmKind::Mock && self.mock_script.is_none() {
            return Err("mock llm needs a mock_script".into());
        }
        Ok(())
    }

    pub fn build_provider(&self) -> Result<Box<dyn ChatProvider>, GatewayError> {
        match self.kind {
            LlmKind::Mock => {
                let path = self
                    .mock_script
                    .as_ref()
                    .ok_or_else(|| GatewayError::InvalidRequest("no mock script".into()))?;
                Ok(Box::new(MockChatProvider::from_jsonl(path)?))
            }
            LlmKind::Remote => {
                let base = if self.base_url.is_empty() {
                    std::env::var(LLM_BASE_URL_ENV).map_err(|_| {
                        GatewayError::ProviderUnavailable(format!("{LLM_BASE_URL_ENV} not set"))
                    })?
                } else {
                    self.base_url.clone()
                };
                let policy = RetryPolicy {
                    max_retries: self.max_retries,
                    base_delay: Duration::from_millis(self.retry_base_ms),
                    timeout: Duration::from_millis(self.timeout_ms),
                };
                Ok(Box::new(HttpChatProvider::new(
                    &base,
                    std::env::var(LLM_API_KEY_ENV).ok(),
                    policy,
                )))
            }
        }
    }
}

/// Result of a call whose output must parse: either the parsed value or the
/// failure that caused the item to be skipped after one re-prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum Parsed<T> {
    Value(T),
    Skipped(ParseFailure),
}

pub struct Gateway {
    provider: Box<dyn ChatProvider>,
    model: String,
    max_output_tokens: u32,
    parallelism: usize,
    budget: Option<u64>,
    ledger: Mutex<TokenLedger>,
}

impl Gateway {
    pub fn new(provider: Box<dyn ChatProvider>, model: &str, ledger: TokenLedger) -> Self {
        Self {
            provider,
            model: model.to_string(),
            max_output_tokens: 1024,
            parallelism: 4,
            budget: None,
            ledger: Mutex::new(ledger),
        }
    }

    pub fn from_config(config: &LlmConfig, ledger: TokenLedger) -> Result<Self, GatewayError> {
        let mut g = Self::new(config.build_provider()?, &config.model, ledger);
        g.max_output_tokens = config.max_output_tokens;
        g.parallelism = config.parallelism;
        g.budget = config.token_budget;
        Ok(g)
    }

    pub fn with_budget(mut self, cap: Option<u64>) -> Self {
        self.budget = cap;
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn request(&self, system_prompt: &str, user_content: String, temperature: f64) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            system_prompt: system_prompt.to_string(),
            user_content,
            temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }

    /// Sends one request and books its usage under `stage`.
    pub fn complete(&self, stage: &str, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        if let Some(cap) = self.budget {
            let used = self.ledger.lock().unwrap().total_tokens();
            if used >= cap {
                return Err(GatewayError::BudgetExceeded { used, cap });
            }
        }
        let response = self.provider.chat(request)?;
        self.ledger
            .lock()
            .unwrap()
            .record(stage, response.input_tokens, response.output_tokens);
        Ok(response)
    }

    /// Sends `request`; if `parse` rejects the reply, re-sends once, then
    /// gives up on the item.
    pub fn complete_parsed<T>(
        &self,
        stage: &str,
        request: &ChatRequest,
        parse: impl Fn(&str) -> Result<T, ParseFailure>,
    ) -> Result<Parsed<T>, GatewayError> {
        let first = self.complete(stage, request)?;
        match parse(&first.content) {
            Ok(v) => Ok(Parsed::Value(v)),
            Err(e) => {
                log::debug!("{stage}: re-prompting after {e}");
                let second = self.complete(stage, request)?;
                Ok(match parse(&second.content) {
                    Ok(v) => Parsed::Value(v),
                    Err(e) => Parsed::Skipped(e),
                })
            }
        }
    }

    pub fn ledger(&self) -> TokenLedger {
        self.ledger.lock().unwrap().clone()
    }

    pub fn effective_parallelism(&self) -> usize {
        self.parallelism.min(self.provider.max_parallelism()).max(1)
    }

    /// Runs `f` over `items` with bounded parallelism. Output order follows
    /// `items`; the first error (by item order) is returned.
    pub fn map_items<I, R, F>(&self, items: &[I], f: F) -> Result<Vec<R>, GatewayError>
    where
        I: Sync,
        R: Send,
        F: Fn(usize, &I) -> Result<R, GatewayError> + Sync,
    {
        let workers = self.effective_parallelism().min(items.len());
        if workers <= 1 {
            return items.iter().enumerate().map(|(i, it)| f(i, it)).collect();
        }
        let slots: Mutex<Vec<Option<Result<R, GatewayError>>>> =
            Mutex::new((0..items.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let r = f(i, &items[i]);
                    if r.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        let mut out = Vec::with_capacity(items.len());
        for slot in slots.into_inner().unwrap() {
            match slot {
                Some(r) => out.push(r?),
                None => {
                    return Err(GatewayError::ProviderUnavailable(
                        "aborted after an earlier failure".into(),
                    ))
                }
            }
        }
        Ok(out)
    }
}
