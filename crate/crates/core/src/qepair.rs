//! Cluster-level question-evidence synthesis.
//!
//! Each cluster is summarized, the summary and the member paragraphs (with
//! their corpus ids) are turned into grounded questions, every question is
//! graded for answerability, and random out-of-cluster paragraphs supply the
//! negatives.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::Cluster;
use crate::llm::{
    parse_structured, Gateway, GatewayError, Parsed, RawQaPair, SchemaKind, Structured,
    GENERATION_TEMPERATURE, LABELING_TEMPERATURE,
};
use crate::prompts;

pub const STAGE_DESCRIBE: &str = "cluster_describe";
pub const STAGE_GENERATE: &str = "qa_generate";
pub const STAGE_GRADE: &str = "qa_grade";

#[derive(Debug, Error)]
pub enum QePairError {
    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),
    #[error("need at least 2 distinct questions to split, got {0}")]
    TooFewQuestions(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no text for paragraph {0}")]
    MissingText(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl From<QePairError> for GatewayError {
    fn from(e: QePairError) -> Self {
        match e {
            QePairError::Gateway(g) => g,
            other => GatewayError::InvalidRequest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterDescription {
    pub cluster_index: usize,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QePair {
    pub question: String,
    pub evidence_ids: Vec<usize>,
    /// Validator confidence; weights the loss of positive pairs only.
    pub grade: f64,
    pub polarity: Polarity,
    pub cluster_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl QePair {
    pub fn label(&self) -> f64 {
        match self.polarity {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }
}

fn texts_of<'a>(
    ids: &[usize],
    text: &impl Fn(usize) -> Option<&'a str>,
) -> Result<Vec<&'a str>, QePairError> {
    ids.iter()
        .map(|&id| text(id).ok_or(QePairError::MissingText(id)))
        .collect()
}

/// Summarizes a cluster. `None` means the reply failed to parse twice and the
/// cluster should be excluded from question generation.
pub fn describe_cluster<'a>(
    gateway: &Gateway,
    cluster_index: usize,
    cluster: &Cluster,
    text: impl Fn(usize) -> Option<&'a str>,
) -> Result<Option<ClusterDescription>, QePairError> {
    if cluster.is_empty() {
        return Err(QePairError::InvalidArgument("empty cluster".into()));
    }
    let paragraphs = texts_of(&cluster.member_ids, &text)?;
    let request = gateway.request(
        prompts::CLUSTER_DESCRIPTION,
        prompts::description_user(&paragraphs),
        LABELING_TEMPERATURE,
    );
    let parsed = gateway.complete_parsed(STAGE_DESCRIBE, &request, |c| {
        match parse_structured(c, SchemaKind::ClusterDescription)? {
            Structured::ClusterDescription(d) => Ok(d),
            _ => unreachable!("schema-specific parser"),
        }
    })?;
    Ok(match parsed {
        Parsed::Value(description) => Some(ClusterDescription {
            cluster_index,
            description,
        }),
        Parsed::Skipped(_) => None,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QaGeneration {
    pub pairs: Vec<QePair>,
    /// Pairs citing ids outside the cluster.
    pub dropped_foreign: usize,
    /// Pairs with no evidence ids.
    pub dropped_empty: usize,
    /// Valid pairs beyond `max_question_num`.
    pub truncated: usize,
    /// The reply never parsed.
    pub skipped: bool,
}

/// Keeps pairs whose evidence is non-empty and inside the cluster, up to
/// `max_question_num` of them. Evidence ids are de-duplicated in order.
pub fn ground_pairs(
    raw: Vec<RawQaPair>,
    cluster_index: usize,
    cluster: &Cluster,
    max_question_num: usize,
) -> QaGeneration {
    let members: HashSet<usize> = cluster.member_ids.iter().copied().collect();
    let mut out = QaGeneration::default();
    for p in raw {
        let mut seen = HashSet::new();
        let ids: Vec<usize> = p.evidence_ids.into_iter().filter(|id| seen.insert(*id)).collect();
        if ids.is_empty() {
            out.dropped_empty += 1;
        } else if !ids.iter().all(|id| members.contains(id)) {
            out.dropped_foreign += 1;
        } else if out.pairs.len() >= max_question_num {
            out.truncated += 1;
        } else {
            out.pairs.push(QePair {
                question: p.question,
                evidence_ids: ids,
                grade: 0.0,
                polarity: Polarity::Positive,
                cluster_index,
                split: None,
            });
        }
    }
    out
}

pub fn generate_qa<'a>(
    gateway: &Gateway,
    cluster_index: usize,
    cluster: &Cluster,
    description: &str,
    max_question_num: usize,
    text: impl Fn(usize) -> Option<&'a str>,
) -> Result<QaGeneration, QePairError> {
    let paragraphs: Vec<(usize, &str)> = cluster
        .member_ids
        .iter()
        .map(|&id| text(id).map(|t| (id, t)).ok_or(QePairError::MissingText(id)))
        .collect::<Result<_, _>>()?;
    let request = gateway.request(
        &prompts::qa_generation(max_question_num),
        prompts::qa_generation_user(description, &paragraphs),
        GENERATION_TEMPERATURE,
    );
    let parsed = gateway.complete_parsed(STAGE_GENERATE, &request, |c| {
        match parse_structured(c, SchemaKind::QaPairs)? {
            Structured::QaPairs(p) => Ok(p),
            _ => unreachable!("schema-specific parser"),
        }
    })?;
    Ok(match parsed {
        Parsed::Value(raw) => ground_pairs(raw, cluster_index, cluster, max_question_num),
        Parsed::Skipped(_) => QaGeneration {
            skipped: true,
            ..QaGeneration::default()
        },
    })
}

/// Grade in `[0, 1]`; 0 when the validator never produced a parseable grade.
pub fn grade_qa<'a>(
    gateway: &Gateway,
    pair: &QePair,
    text: impl Fn(usize) -> Option<&'a str>,
) -> Result<f64, QePairError> {
    if pair.polarity != Polarity::Positive {
        return Err(QePairError::InvalidArgument("only positive pairs are graded".into()));
    }
    let evidence = texts_of(&pair.evidence_ids, &text)?;
    let request = gateway.request(
        prompts::QA_GRADING,
        prompts::grading_user(&pair.question, &evidence),
        LABELING_TEMPERATURE,
    );
    let parsed = gateway.complete_parsed(STAGE_GRADE, &request, |c| {
        match parse_structured(c, SchemaKind::QaGrade)? {
            Structured::QaGrade(g) => Ok(g),
            _ => unreachable!("schema-specific parser"),
        }
    })?;
    Ok(match parsed {
        Parsed::Value(g) => g,
        Parsed::Skipped(_) => 0.0,
    })
}

/// `ratio` negatives per positive. Each negative keeps the positive's
/// question and draws as many paragraphs as the positive cites, uniformly
/// and without replacement, from outside the positive's cluster.
pub fn sample_negatives(
    positives: &[QePair],
    clusters: &[Cluster],
    corpus_size: usize,
    ratio: usize,
    rng_seed: u64,
) -> Result<Vec<QePair>, QePairError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut outside_cache: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut out = Vec::with_capacity(positives.len() * ratio);
    if ratio == 0 {
        return Ok(out);
    }
    for p in positives {
        let cluster = clusters.get(p.cluster_index).ok_or_else(|| {
            QePairError::InvalidArgument(format!("unknown cluster {}", p.cluster_index))
        })?;
        let outside = outside_cache.entry(p.cluster_index).or_insert_with(|| {
            let members: HashSet<usize> = cluster.member_ids.iter().copied().collect();
            (0..corpus_size).filter(|id| !members.contains(id)).collect()
        });
        let size = p.evidence_ids.len();
        if outside.len() < size || outside.is_empty() {
            return Err(QePairError::CorpusTooSmall(format!(
                "{} paragraphs outside cluster {}, need {size}",
                outside.len(),
                p.cluster_index
            )));
        }
        for _ in 0..ratio {
            let mut ids: Vec<usize> = index::sample(&mut rng, outside.len(), size)
                .into_iter()
                .map(|i| outside[i])
                .collect();
            ids.sort_unstable();
            out.push(QePair {
                question: p.question.clone(),
                evidence_ids: ids,
                grade: 1.0,
                polarity: Polarity::Negative,
                cluster_index: p.cluster_index,
                split: None,
            });
        }
    }
    Ok(out)
}

/// Splits by question string so a question and all of its pairs land on the
/// same side. `round(fraction * questions)` questions go to validation,
/// clamped so both sides are non-empty. Pair order is preserved.
pub fn split_train_val(
    pairs: &[QePair],
    fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<QePair>, Vec<QePair>), QePairError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(QePairError::InvalidArgument(format!(
            "fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut questions: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for p in pairs {
        if seen.insert(p.question.as_str()) {
            questions.push(&p.question);
        }
    }
    let nq = questions.len();
    if nq < 2 {
        return Err(QePairError::TooFewQuestions(nq));
    }
    let n_val = ((fraction * nq as f64).round() as usize).clamp(1, nq - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    questions.shuffle(&mut rng);
    let val: HashSet<&str> = questions[..n_val].iter().copied().collect();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for p in pairs {
        let mut p = p.clone();
        if val.contains(p.question.as_str()) {
            p.split = Some(Split::Val);
            valid.push(p);
        } else {
            p.split = Some(Split::Train);
            train.push(p);
        }
    }
    Ok((train, valid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QeConfig {
    pub max_question_num: usize,
    pub negative_ratio: usize,
    pub val_fraction: f64,
}

impl Default for QeConfig {
    fn default() -> Self {
        Self {
            max_question_num: 5,
            negative_ratio: 4,
            val_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QeStats {
    pub clusters: usize,
    pub clusters_excluded: usize,
    pub generation_skipped: usize,
    pub dropped_foreign: usize,
    pub dropped_empty: usize,
    pub truncated: usize,
    pub grade_failures: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QeRun {
    pub descriptions: Vec<ClusterDescription>,
    /// Positives (graded) followed by negatives, each with its split.
    pub pairs: Vec<QePair>,
    pub stats: QeStats,
}

/// Describes every cluster, generates and grades questions, adds negatives
/// and assigns the train/val split.
pub fn synthesize<'a>(
    gateway: &Gateway,
    clusters: &[Cluster],
    corpus_size: usize,
    text: impl Fn(usize) -> Option<&'a str> + Sync,
    config: &QeConfig,
    rng_seed: u64,
) -> Result<QeRun, QePairError> {
    let mut stats = QeStats {
        clusters: clusters.len(),
        ..QeStats::default()
    };
    let described = gateway.map_items(clusters, |i, c| {
        describe_cluster(gateway, i, c, &text).map_err(GatewayError::from)
    })?;
    let descriptions: Vec<ClusterDescription> = described.into_iter().flatten().collect();
    stats.clusters_excluded = clusters.len() - descriptions.len();

    let generated = gateway.map_items(&descriptions, |_, d| {
        generate_qa(
            gateway,
            d.cluster_index,
            &clusters[d.cluster_index],
            &d.description,
            config.max_question_num,
            &text,
        )
        .map_err(GatewayError::from)
    })?;
    let mut positives = Vec::new();
    for g in generated {
        stats.generation_skipped += g.skipped as usize;
        stats.dropped_foreign += g.dropped_foreign;
        stats.dropped_empty += g.dropped_empty;
        stats.truncated += g.truncated;
        positives.extend(g.pairs);
    }

    let grades = gateway.map_items(&positives, |_, p| {
        grade_qa(gateway, p, &text).map_err(GatewayError::from)
    })?;
    for (p, g) in positives.iter_mut().zip(grades) {
        p.grade = g;
    }
    // A grade of exactly 0 from a double parse failure is indistinguishable
    // from a genuine 0; count both as failures of the validator.
    stats.grade_failures = positives.iter().filter(|p| p.grade == 0.0).count();

    let negatives = sample_negatives(
        &positives,
        clusters,
        corpus_size,
        config.negative_ratio,
        rng_seed,
    )?;
    stats.positives = positives.len();
    stats.negatives = negatives.len();
    let mut all = positives;
    all.extend(negatives);
    let (train, val) = split_train_val(&all, config.val_fraction, rng_seed.wrapping_add(1))?;
    let val_questions: HashSet<&str> = val.iter().map(|p| p.question.as_str()).collect();
    let pairs = all
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.split = Some(if val_questions.contains(p.question.as_str()) {
                Split::Val
            } else {
                Split::Train
            });
            p
        })
        .collect();
    debug_assert_eq!(train.len() + val.len(), all.len());
    Ok(QeRun {
        descriptions,
        pairs,
        stats,
    })
}

/// Independent re-check of the persisted pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    /// Indices of positives citing ids outside their cluster.
    pub ungrounded_positives: Vec<usize>,
    /// Indices of negatives overlapping their question's cluster.
    pub overlapping_negatives: Vec<usize>,
    /// Set when `negatives != ratio * positives`.
    pub ratio_mismatch: Option<(usize, usize)>,
    /// Questions present in both splits.
    pub leaked_questions: Vec<String>,
}

impl GroundingReport {
    pub fn is_valid(&self) -> bool {
        self.ungrounded_positives.is_empty()
            && self.overlapping_negatives.is_empty()
            && self.ratio_mismatch.is_none()
            && self.leaked_questions.is_empty()
    }

    pub fn violation_count(&self) -> usize {
        self.ungrounded_positives.len()
            + self.overlapping_negatives.len()
            + self.ratio_mismatch.is_some() as usize
            + self.leaked_questions.len()
    }
}

pub fn validate_pairs(pairs: &[QePair], clusters: &[Cluster], ratio: usize) -> GroundingReport {
    let mut report = GroundingReport::default();
    let sets: Vec<BTreeSet<usize>> = clusters
        .iter()
        .map(|c| c.member_ids.iter().copied().collect())
        .collect();
    let empty = BTreeSet::new();
    let (mut pos, mut neg) = (0, 0);
    let mut splits: HashMap<&str, HashSet<Split>> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let members = sets.get(p.cluster_index).unwrap_or(&empty);
        match p.polarity {
            Polarity::Positive => {
                pos += 1;
                if p.evidence_ids.is_empty() || !p.evidence_ids.iter().all(|id| members.contains(id)) {
                    report.ungrounded_positives.push(i);
                }
            }
            Polarity::Negative => {
                neg += 1;
                if p.evidence_ids.iter().any(|id| members.contains(id)) {
                    report.overlapping_negatives.push(i);
                }
            }
        }
        if let Some(s) = p.split {
            splits.entry(p.question.as_str()).or_default().insert(s);
        }
    }
    if neg != ratio * pos {
        report.ratio_mismatch = Some((pos, neg));
    }
    let mut leaked: Vec<String> = splits
        .into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(q, _)| q.to_string())
        .collect();
    leaked.sort();
    report.leaked_questions = leaked;
    report
}
