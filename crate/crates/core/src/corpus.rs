//! Corpus ingestion: documents are segmented into paragraphs, the unit that
//! every later stage embeds, labels, clusters and retrieves.
//!
//! Paragraph ids are dense (`0..n`) and assigned after sorting documents by
//! `doc_id`, so repeated loads of the same input yield the same ids.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STORE_FORMAT_VERSION: u32 = 1;

/// Default cap on a single paragraph, in tokens.
pub const DEFAULT_MAX_PARAGRAPH_TOKENS: usize = 2048;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("document {0:?} is empty after trimming whitespace")]
    EmptyDocument(String),
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("malformed record at {path}:{line}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("corpus contains no documents")]
    EmptyCorpus,
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub para_id: usize,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationRules {
    /// Blocks longer than this many tokens are hard-wrapped.
    pub max_paragraph_tokens: usize,
}

impl Default for SegmentationRules {
    fn default() -> Self {
        Self {
            max_paragraph_tokens: DEFAULT_MAX_PARAGRAPH_TOKENS,
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Byte spans of the tokens in `text`.
///
/// Rules: whitespace separates tokens; maximal runs of alphanumeric characters
/// are tokens; an apostrophe that sits between two alphanumeric characters
/// starts a clitic token that absorbs the following alphanumeric run
/// (`don't` -> `don`, `'t`); any other character is a token on its own.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut spans = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_alphanumeric() {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_alphanumeric() {
                j += 1;
            }
            spans.push(start..end_of(j));
            i = j;
            continue;
        }
        let clitic = is_apostrophe(c)
            && i > 0
            && chars[i - 1].1.is_alphanumeric()
            && chars.get(i + 1).is_some_and(|&(_, n)| n.is_alphanumeric());
        if clitic {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_alphanumeric() {
                j += 1;
            }
            spans.push(start..end_of(j));
            i = j;
        } else {
            spans.push(start..end_of(i + 1));
            i += 1;
        }
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<&str> {
    token_spans(text).into_iter().map(|r| &text[r]).collect()
}

pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Byte ranges of the non-blank blocks of `text`, where blocks are separated
/// by one or more lines containing only whitespace.
fn blank_line_blocks(text: &str) -> Vec<Range<usize>> {
    let mut blocks = Vec::new();
    let mut current: Option<Range<usize>> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            if let Some(block) = current.take() {
                blocks.push(block);
            }
        } else {
            match current.as_mut() {
                Some(block) => block.end = offset,
                None => current = Some(line_start..offset),
            }
        }
    }
    if let Some(block) = current {
        blocks.push(block);
    }
    blocks
}

fn trim_range(text: &str, range: Range<usize>) -> Range<usize> {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    (range.start + lead)..(range.end - trail)
}

/// Splits a document into paragraphs with ordinals `0..m`. `para_id` is left
/// at the ordinal; [`CorpusStore::from_documents`] assigns global ids.
pub fn segment_document(
    doc: &Document,
    rules: &SegmentationRules,
) -> Result<Vec<Paragraph>, CorpusError> {
    if doc.text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }
    let cap = rules.max_paragraph_tokens.max(1);
    let text = doc.text.as_str();
    let mut pieces: Vec<(Range<usize>, usize)> = Vec::new();
    for block in blank_line_blocks(text) {
        let block = trim_range(text, block);
        let spans = token_spans(&text[block.clone()]);
        if spans.len() <= cap {
            pieces.push((block, spans.len()));
            continue;
        }
        // Hard-wrap: each chunk starts at a token boundary, never between a
        // word and its clitic (the clitic would re-tokenize as two tokens).
        let local = &text[block.clone()];
        let glued = |t: usize| {
            spans[t - 1].end == spans[t].start && local[spans[t].clone()].starts_with(is_apostrophe)
        };
        let mut starts = vec![block.start];
        let mut t = 0;
        while spans.len() - t > cap {
            let mut next = t + cap;
            while next > t + 1 && glued(next) {
                next -= 1;
            }
            if glued(next) {
                // One glued run longer than the cap: keep it whole.
                next = t + cap;
                while next < spans.len() && glued(next) {
                    next += 1;
                }
                if next == spans.len() {
                    break;
                }
            }
            starts.push(block.start + spans[next].start);
            t = next;
        }
        for (i, &s) in starts.iter().enumerate() {
            let e = starts.get(i + 1).copied().unwrap_or(block.end);
            let chunk = trim_range(text, s..e);
            let tokens = count_tokens(&text[chunk.clone()]);
            pieces.push((chunk, tokens));
        }
    }
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(ordinal, (range, token_count))| Paragraph {
            para_id: ordinal,
            doc_id: doc.doc_id.clone(),
            ordinal,
            text: text[range].to_string(),
            token_count,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StoreHeader {
    n: usize,
    total_document_tokens: usize,
    format_version: u32,
}

/// Immutable, ordered collection of paragraphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStore {
    paragraphs: Vec<Paragraph>,
    doc_index: BTreeMap<String, Range<usize>>,
    total_document_tokens: usize,
}

impl CorpusStore {
    /// Segments and indexes `docs`. Documents are ordered by `doc_id`.
    pub fn from_documents(
        mut docs: Vec<Document>,
        rules: &SegmentationRules,
    ) -> Result<Self, CorpusError> {
        if docs.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        if let Some(w) = docs.windows(2).find(|w| w[0].doc_id == w[1].doc_id) {
            return Err(CorpusError::DuplicateDocId(w[0].doc_id.clone()));
        }
        let segmented: Vec<Vec<Paragraph>> = docs
            .par_iter()
            .map(|d| segment_document(d, rules))
            .collect::<Result<_, _>>()?;
        let paragraphs: Vec<Paragraph> = segmented
            .into_iter()
            .flatten()
            .enumerate()
            .map(|(id, mut p)| {
                p.para_id = id;
                p
            })
            .collect();
        Self::from_paragraphs(paragraphs)
    }

    fn from_paragraphs(paragraphs: Vec<Paragraph>) -> Result<Self, CorpusError> {
        if paragraphs.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut doc_index: BTreeMap<String, Range<usize>> = BTreeMap::new();
        for p in &paragraphs {
            doc_index
                .entry(p.doc_id.clone())
                .and_modify(|r| r.end = p.para_id + 1)
                .or_insert(p.para_id..p.para_id + 1);
        }
        let total_document_tokens = paragraphs.iter().map(|p| p.token_count).sum();
        Ok(Self {
            paragraphs,
            doc_index,
            total_document_tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn get(&self, para_id: usize) -> Option<&Paragraph> {
        self.paragraphs.get(para_id)
    }

    pub fn text(&self, para_id: usize) -> Option<&str> {
        self.get(para_id).map(|p| p.text.as_str())
    }

    pub fn texts(&self) -> Vec<&str> {
        self.paragraphs.iter().map(|p| p.text.as_str()).collect()
    }

    pub fn doc_range(&self, doc_id: &str) -> Option<Range<usize>> {
        self.doc_index.get(doc_id).cloned()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.doc_index.keys().map(String::as_str)
    }

    pub fn total_document_tokens(&self) -> usize {
        self.total_document_tokens
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = StoreHeader {
            n: self.len(),
            total_document_tokens: self.total_document_tokens,
            format_version: STORE_FORMAT_VERSION,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for p in &self.paragraphs {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
        self.write_jsonl(BufWriter::new(file))
            .map_err(|e| CorpusError::io(path, e))
    }

    /// Reads a store written by [`CorpusStore::save`], re-checking the id and
    /// token-count invariants.
    pub fn open(path: &Path) -> Result<Self, CorpusError> {
        let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
        let malformed = |line: usize, reason: String| CorpusError::MalformedRecord {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or(CorpusError::EmptyCorpus)?
            .map_err(|e| CorpusError::io(path, e))?;
        let header: StoreHeader =
            serde_json::from_str(&header_line).map_err(|e| malformed(1, e.to_string()))?;
        if header.format_version != STORE_FORMAT_VERSION {
            return Err(malformed(
                1,
                format!("unsupported format_version {}", header.format_version),
            ));
        }
        let mut paragraphs = Vec::with_capacity(header.n);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| CorpusError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Paragraph =
                serde_json::from_str(&line).map_err(|e| malformed(i + 2, e.to_string()))?;
            if p.para_id != paragraphs.len() {
                return Err(malformed(i + 2, format!("non-dense para_id {}", p.para_id)));
            }
            paragraphs.push(p);
        }
        if paragraphs.len() != header.n {
            return Err(malformed(
                1,
                format!("header n={} but {} paragraphs", header.n, paragraphs.len()),
            ));
        }
        let store = Self::from_paragraphs(paragraphs)?;
        if store.total_document_tokens != header.total_document_tokens {
            return Err(malformed(1, "total_document_tokens mismatch".into()));
        }
        Ok(store)
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct JsonlDoc {
    doc_id: String,
    text: String,
}

fn read_jsonl_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlDoc =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        docs.push(Document {
            doc_id: rec.doc_id,
            source: format!("{}:{}", path.display(), i + 1),
            text: rec.text,
        });
    }
    Ok(docs)
}

fn read_text_document(path: &Path) -> Result<Document, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let doc_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Document {
        doc_id,
        source: path.display().to_string(),
        text,
    })
}

/// Loads `.txt` files and `.jsonl` files from a directory (non-recursive), or
/// a single `.txt`/`.jsonl` file.
pub fn load_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let meta = fs::metadata(path).map_err(|e| CorpusError::io(path, e))?;
    let files: Vec<PathBuf> = if meta.is_dir() {
        let mut files = Vec::new();
        for entry in fs::read_dir(path).map_err(|e| CorpusError::io(path, e))? {
            let p = entry.map_err(|e| CorpusError::io(path, e))?.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };

    let loaded: Vec<Vec<Document>> = files
        .par_iter()
        .filter_map(|p| match p.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Some(read_jsonl_documents(p)),
            Some("txt") => Some(read_text_document(p).map(|d| vec![d])),
            _ => None,
        })
        .collect::<Result<_, _>>()?;
    let docs: Vec<Document> = loaded.into_iter().flatten().collect();

    let mut seen = HashSet::new();
    for d in &docs {
        if !seen.insert(d.doc_id.as_str()) {
            return Err(CorpusError::DuplicateDocId(d.doc_id.clone()));
        }
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path, rules: &SegmentationRules) -> Result<CorpusStore, CorpusError> {
    CorpusStore::from_documents(load_documents(path)?, rules)
}
