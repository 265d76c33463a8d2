#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lmar::corpus::count_tokens;
use lmar::embedding::ProviderConfig;
use lmar::llm::{ChatRequest, ChatResponse, FnChatProvider, Gateway, LlmConfig, LlmKind, TokenLedger};
use lmar::pipeline::PipelineConfig;
use lmar::prompts;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn pseudo_word(rng: &mut impl Rng, len: usize) -> String {
    const CONS: &[u8] = b"bcdfghjklmnprstvz";
    const VOW: &[u8] = b"aeiou";
    (0..len)
        .map(|i| {
            let set = if i % 2 == 0 { CONS } else { VOW };
            set[rng.random_range(0..set.len())] as char
        })
        .collect()
}

/// Planted-topic corpus: every topic has its own keywords, and its
/// paragraphs repeat the topic's base words mixed with fresh filler drawn
/// from a pool shared by all topics.
pub struct Planted {
    pub topics: Vec<Vec<String>>,
    pub filler: Vec<String>,
    pub paragraphs: Vec<(usize, String)>,
}

impl Planted {
    pub fn generate(n_topics: usize, per_topic: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filler: Vec<String> = (0..60).map(|_| pseudo_word(&mut rng, 5)).collect();
        let topics: Vec<Vec<String>> = (0..n_topics)
            .map(|_| (0..3).map(|_| pseudo_word(&mut rng, 8)).collect())
            .collect();
        let mut paragraphs = Vec::new();
        for (t, kws) in topics.iter().enumerate() {
            let mut base: Vec<String> = kws.clone();
            base.extend((0..5).map(|_| filler[rng.random_range(0..filler.len())].clone()));
            for _ in 0..per_topic {
                let mut words = base.clone();
                words.extend((0..12).map(|_| filler[rng.random_range(0..filler.len())].clone()));
                words.shuffle(&mut rng);
                paragraphs.push((t, format!("{}.", words.join(" "))));
            }
        }
        paragraphs.shuffle(&mut rng);
        Self {
            topics,
            filler,
            paragraphs,
        }
    }

    pub fn topic_of(&self, text: &str) -> Option<usize> {
        self.topics
            .iter()
            .position(|kws| kws.iter().any(|k| text.contains(k.as_str())))
    }

    /// One question per topic mention: a keyword buried in shared filler.
    pub fn question(&self, topic: usize, salt: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(salt ^ (topic as u64) << 20);
        let pad: Vec<&str> = (0..8)
            .map(|_| self.filler[rng.random_range(0..self.filler.len())].as_str())
            .collect();
        format!(
            "Which {} {} {} note about {} {} {} {} {} {}?",
            pad[0], pad[1], pad[2], self.topics[topic][0], pad[3], pad[4], pad[5], pad[6], pad[7]
        )
    }

    /// Writes the corpus as four text files split on blank lines.
    pub fn write_corpus(&self, dir: &Path) {
        fs::create_dir_all(dir).unwrap();
        for (d, chunk) in self.paragraphs.chunks(self.paragraphs.len().div_ceil(4)).enumerate() {
            let body: Vec<&str> = chunk.iter().map(|(_, t)| t.as_str()).collect();
            fs::write(dir.join(format!("part{d}.txt")), body.join("\n\n")).unwrap();
        }
    }
}

impl Planted {
    /// Corpus ids in file order: `part0.txt` first, paragraphs in sequence.
    pub fn ids_of_topic(&self, topic: usize) -> Vec<usize> {
        self.paragraphs
            .iter()
            .enumerate()
            .filter(|(_, p)| p.0 == topic)
            .map(|(i, _)| i)
            .collect()
    }

    /// Held-out queries, one per topic, with filler unseen in training.
    pub fn write_eval_queries(&self, path: &Path) {
        let lines: Vec<String> = (0..self.topics.len())
            .map(|t| {
                serde_json::json!({
                    "question": self.question(t, 1_000_003 + t as u64),
                    "gold_ids": self.ids_of_topic(t),
                })
                .to_string()
            })
            .collect();
        fs::write(path, lines.join("\n")).unwrap();
    }
}

fn between<'a>(s: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let i = s.find(start)? + start.len();
    let rest = &s[i..];
    Some(match rest.find(end) {
        Some(j) => &rest[..j],
        None => rest,
    })
}

/// Paragraph ids and texts from a QA-generation user message.
pub fn listed_paragraphs(user: &str) -> Vec<(usize, String)> {
    user.lines()
        .filter_map(|l| {
            let (id, rest) = l.split_once(": \"")?;
            Some((id.parse().ok()?, rest.trim_end_matches('"').to_string()))
        })
        .collect()
}

/// An LLM double that answers every prompt from the planted topics.
pub fn oracle_reply(planted: &Planted, req: &ChatRequest) -> String {
    let user = &req.user_content;
    if req.system_prompt == prompts::TRIPLET_LABELING {
        let anchor = between(user, "Anchor text:\n", "\n\nCandidate").unwrap_or_default();
        let c1 = between(user, "Candidate |<1>|:\n", "\n\nCandidate").unwrap_or_default();
        let c2 = between(user, "Candidate |<2>|:\n", "\u{0}").unwrap_or_default();
        let (ta, t1, t2) = (planted.topic_of(anchor), planted.topic_of(c1), planted.topic_of(c2));
        return match (ta == t1, ta == t2) {
            (true, false) => r#"{"Reason": "same topic", "Token": "|<1>|"}"#.into(),
            (false, true) => r#"{"Reason": "same topic", "Token": "|<2>|"}"#.into(),
            _ => "Error".into(),
        };
    }
    if req.system_prompt == prompts::CLUSTER_DESCRIPTION {
        return r#"{"description": "Notes that share one planted topic"}"#.into();
    }
    if req.system_prompt == prompts::QA_GRADING {
        return r#"{"grade": 1.0}"#.into();
    }
    let listed = listed_paragraphs(user);
    let mut by_topic: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (id, text) in &listed {
        if let Some(t) = planted.topic_of(text) {
            by_topic.entry(t).or_default().push(*id);
        }
    }
    let Some((&topic, ids)) = by_topic.iter().max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
    else {
        return r#"{"qa_pairs": []}"#.into();
    };
    let salt = *ids.iter().min().unwrap() as u64;
    serde_json::json!({
        "qa_pairs": [{"question": planted.question(topic, salt), "evidence_ids": ids}]
    })
    .to_string()
}

pub fn oracle_gateway(planted: Planted) -> Gateway {
    let provider = FnChatProvider::new(move |req: &ChatRequest| {
        let content = oracle_reply(&planted, req);
        Ok(ChatResponse {
            input_tokens: (count_tokens(&req.system_prompt) + count_tokens(&req.user_content)) as u64,
            output_tokens: count_tokens(&content) as u64,
            content,
        })
    });
    Gateway::new(Box::new(provider), "oracle", TokenLedger::default())
}

/// Pipeline config for a planted corpus written under `root`.
pub fn planted_config(root: &Path, seed: u64) -> PipelineConfig {
    // The oracle gateway is injected; the script only satisfies config checks.
    fs::write(root.join("unused.jsonl"), "").unwrap();
    let mut c = PipelineConfig {
        corpus: root.join("corpus"),
        out_dir: root.join("out"),
        rng_seed: seed,
        embedding: ProviderConfig::stub(256),
        llm: LlmConfig {
            kind: LlmKind::Mock,
            mock_script: Some(root.join("unused.jsonl")),
            ..LlmConfig::default()
        },
        ..PipelineConfig::default()
    };
    c.triplet.candidate_k = Some(24);
    c
}

/// Copies the CLI pipeline fixture into `dst` so runs never touch the
/// source tree.
pub fn copy_pipeline_fixture(dst: &Path) -> PathBuf {
    let src = fixture_dir().join("pipeline");
    copy_dir(&src, dst);
    dst.join("pipeline.toml")
}

fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for e in fs::read_dir(src).unwrap() {
        let e = e.unwrap();
        let to = dst.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            if e.file_name() == "out" {
                continue;
            }
            copy_dir(&e.path(), &to);
        } else {
            fs::copy(e.path(), to).unwrap();
        }
    }
}
