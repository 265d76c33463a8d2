//! Triplet sampling and LLM labeling.
//!
//! An anchor is drawn uniformly, two candidates are drawn without
//! replacement from its top-`candidate_k` neighbours, and the LLM decides
//! which candidate is the positive. Ambiguous triplets are dropped.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingMatrix};
use crate::llm::{
    parse_structured, Gateway, GatewayError, Parsed, SchemaKind, Structured, TripletVerdict,
    LABELING_TEMPERATURE,
};
use crate::prompts;

pub const STAGE: &str = "triplet_label";

#[derive(Debug, Error)]
pub enum TripletError {
    #[error("corpus too small for triplets: {0}")]
    CorpusTooSmall(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no text for paragraph {0}")]
    MissingText(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletCandidate {
    pub anchor_id: usize,
    pub cand1_id: usize,
    pub cand2_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTriplet {
    pub anchor_id: usize,
    pub positive_id: usize,
    pub negative_id: usize,
    pub reason: String,
    pub llm_model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Ambiguous,
    Parse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTriplet {
    pub anchor_id: usize,
    pub cand1_id: usize,
    pub cand2_id: usize,
    pub why: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelOutcome {
    Labeled(LabeledTriplet),
    Skipped(SkippedTriplet),
}

/// Draws up to `count` candidate triplets; exact repeats of the same anchor
/// with the same candidate pair are dropped, so fewer may come back.
pub fn sample_triplet_candidates(
    index: &EmbeddingMatrix,
    candidate_k: usize,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<TripletCandidate>, TripletError> {
    let n = index.n();
    if n < 3 {
        return Err(TripletError::CorpusTooSmall(format!("n = {n} < 3")));
    }
    if candidate_k < 2 {
        return Err(TripletError::CorpusTooSmall(format!(
            "candidate_k = {candidate_k} < 2"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut neighbours: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pos = rng.random_range(0..n);
        let anchor = index.row_ids()[pos];
        let pool = match neighbours.get(&anchor) {
            Some(p) => p,
            None => {
                let exclude: HashSet<usize> = [anchor].into_iter().collect();
                let ranked = index.top_k(index.row(pos), candidate_k, &exclude)?;
                neighbours
                    .entry(anchor)
                    .or_insert(ranked.into_iter().map(|(id, _)| id).collect())
            }
        };
        let picks = index::sample(&mut rng, pool.len(), 2);
        let (c1, c2) = (pool[picks.index(0)], pool[picks.index(1)]);
        if seen.insert((anchor, c1.min(c2), c1.max(c2))) {
            out.push(TripletCandidate {
                anchor_id: anchor,
                cand1_id: c1,
                cand2_id: c2,
            });
        }
    }
    Ok(out)
}

/// Asks the LLM which candidate is closer to the anchor.
pub fn label_triplet<'a>(
    gateway: &Gateway,
    candidate: &TripletCandidate,
    text: impl Fn(usize) -> Option<&'a str>,
) -> Result<LabelOutcome, TripletError> {
    let get = |id| text(id).ok_or(TripletError::MissingText(id));
    let user = prompts::triplet_user(
        get(candidate.anchor_id)?,
        get(candidate.cand1_id)?,
        get(candidate.cand2_id)?,
    );
    let request = gateway.request(prompts::TRIPLET_LABELING, user, LABELING_TEMPERATURE);
    let parsed = gateway.complete_parsed(STAGE, &request, |c| {
        match parse_structured(c, SchemaKind::TripletLabel)? {
            Structured::TripletLabel { verdict, reason } => Ok((verdict, reason)),
            _ => unreachable!("schema-specific parser"),
        }
    })?;
    let skip = |why| {
        LabelOutcome::Skipped(SkippedTriplet {
            anchor_id: candidate.anchor_id,
            cand1_id: candidate.cand1_id,
            cand2_id: candidate.cand2_id,
            why,
        })
    };
    let (positive_id, negative_id, reason) = match parsed {
        Parsed::Skipped(_) => return Ok(skip(SkipReason::Parse)),
        Parsed::Value((TripletVerdict::Ambiguous, _)) => return Ok(skip(SkipReason::Ambiguous)),
        Parsed::Value((TripletVerdict::First, r)) => (candidate.cand1_id, candidate.cand2_id, r),
        Parsed::Value((TripletVerdict::Second, r)) => (candidate.cand2_id, candidate.cand1_id, r),
    };
    Ok(LabelOutcome::Labeled(LabeledTriplet {
        anchor_id: candidate.anchor_id,
        positive_id,
        negative_id,
        reason,
        llm_model: gateway.model().to_string(),
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRun {
    pub labeled: Vec<LabeledTriplet>,
    pub skipped: Vec<SkippedTriplet>,
}

impl LabelRun {
    pub fn skip_rate(&self) -> f64 {
        let total = self.labeled.len() + self.skipped.len();
        if total == 0 {
            0.0
        } else {
            self.skipped.len() as f64 / total as f64
        }
    }
}

/// Labels every candidate; results keep candidate order.
pub fn label_all<'a>(
    gateway: &Gateway,
    candidates: &[TripletCandidate],
    text: impl Fn(usize) -> Option<&'a str> + Sync,
) -> Result<LabelRun, TripletError> {
    let missing = candidates
        .iter()
        .flat_map(|c| [c.anchor_id, c.cand1_id, c.cand2_id])
        .find(|&id| text(id).is_none());
    if let Some(id) = missing {
        return Err(TripletError::MissingText(id));
    }
    let outcomes = gateway.map_items(candidates, |_, c| match label_triplet(gateway, c, &text) {
        Ok(o) => Ok(o),
        Err(TripletError::Gateway(e)) => Err(e),
        Err(other) => Err(GatewayError::InvalidRequest(other.to_string())),
    })?;
    let mut run = LabelRun::default();
    for o in outcomes {
        match o {
            LabelOutcome::Labeled(t) => run.labeled.push(t),
            LabelOutcome::Skipped(s) => run.skipped.push(s),
        }
    }
    log::info!(
        "labeled {} triplets, skipped {} ({:.1}%)",
        run.labeled.len(),
        run.skipped.len(),
        100.0 * run.skip_rate()
    );
    Ok(run)
}
