//! System prompts and user-message renderers for the four LLM tasks.

pub const TRIPLET_LABELING: &str = r#"You will be provided with a triplet of texts. There is an anchor text and two candidate text paragraphs. Your task is to determine which one is more similar to the anchor text semantically.
Each Candidate is labeled with special token |<1>| or |<2>|. Please first given reason for your decision and return corresponding special label at the end.

Note:

1. Please first given reason for your decision and return a corresponding special label in a dictionary format.

2. First analyze on overall topic consistency, and then consider the context, entities, or event.

3. If the two candidates are equally similar to the anchor text, return "Error" only.

JSON format Example Out:
{
"Reason": "The reason for choosing the first candidate text |<1>| is that it described the potential solutions to the same problem as the anchor text",
"Token": "|<1>|"
}"#;

pub const CLUSTER_DESCRIPTION: &str = r#"You will be provided with a list of text paragraphs that belong to the same pre-defined cluster.
Your task is to:

1.Write a concise summary that captures the **specific topic** shared by these paragraphs. The summary must include key entities such as **people, events, locations, or dates** mentioned in the text. Avoid vague or overly abstract descriptions.

2.Return the response strictly in this JSON format (including all punctuation and braces):
{ "description": "Clear and specific summary of the cluster"}

Instructions:
- Start your response with a left curly brace `{` and end exactly at the closing brace `}`.
- Include double quotes** " ** around all keys and values.
- Do **not** include any explanation or extra text.
- Ensure the summary reflects the **actual shared content** of the cluster, not just generalizations."#;

pub const QA_GRADING: &str = r#"You are an AI assistant that evaluates the semantic alignment between a question and a candidate evidence sentence.

You must return your evaluation **strictly** in this JSON format:

{"grade": float  // A score between 0.0 (completely irrelevant) and 1.0 (perfectly answers the question) }

### Scoring Criteria:
- 1.0: The sentence directly and clearly answers the question with specific, factual support.
- 0.7–0.9: The sentence provides strong partial evidence or indirectly implies the answer.
- 0.4–0.6: The sentence is related in topic but does not actually answer the question.
- 0.1–0.3: The sentence is loosely related or only shares surface-level words.
- 0.0: The sentence is completely irrelevant to the question or misleading.

Return ONLY the JSON object. Do NOT explain your reasoning or add any extra text."#;

const QA_GENERATION_TEMPLATE: &str = r#"You are an AI that generates structured JSON output.

You will be given:
- A brief summary describing the overall topic of a cluster of related text paragraphs.
- A list of original paragraphs, each prepended by its **original ID from a larger corpus**.

Your task is to generate a set of **fact-based questions**, and for each question, return a list of *evidence_ids* corresponding to the corpus IDs of paragraphs that together provide enough information to answer it.

Requirements:
- Some questions should require only **one paragraph** to answer.
- Some questions should require **two or more paragraphs** to answer (multi-hop).
- Only generate questions that are clearly and completely answerable using the given evidence IDs.
- You must use the exact corpus IDs provided for each paragraph (e.g., 51, 243, 921).
---
Input Format:

Summary:
"A description of the cluster topic"

Paragraphs:
51: "Elvis performed a concert in Honolulu, Hawaii, in 1973."
243: "The concert was broadcast live via satellite to over 40 countries."
378: "This was the first time a concert was aired globally in real time."
912: "The show raised money for cancer research."
---
Output Format:
{
  "qa_pairs": [
    {
      "question": "Where did Elvis perform the 1973 concert, and how many countries received the broadcast?",
      "evidence_ids": [51, 243]
    },
    {
      "question": "Why was the 1973 concert considered historically significant?",
      "evidence_ids": [243, 378]
    },
    {
      "question": "What charitable cause benefited from the concert?",
      "evidence_ids": [912]
    }
  ]
}
---
Generation Rules:
- Generate up to {max_question_num} QA pairs.
- Each question must be **distinct and fully grounded** in the provided paragraphs.
- Do **not** invent facts or ask speculative questions.
- At least some questions should require combining two or more `evidence_ids`.
- Only use the **exact paragraph IDs** shown in the input — they correspond to entries in the full corpus.
- Format your response as a valid JSON object, starting with `{` and ending with `}`.
- Do NOT include any explanation or commentary outside the JSON object.
- Double-check that each question is non-redundant and has valid evidence support."#;

pub fn qa_generation(max_question_num: usize) -> String {
    QA_GENERATION_TEMPLATE.replace("{max_question_num}", &max_question_num.to_string())
}

pub fn triplet_user(anchor: &str, first: &str, second: &str) -> String {
    format!("Anchor text:\n{anchor}\n\nCandidate |<1>|:\n{first}\n\nCandidate |<2>|:\n{second}")
}

pub fn description_user(paragraphs: &[&str]) -> String {
    let mut s = String::from("Cluster paragraphs:");
    for (i, p) in paragraphs.iter().enumerate() {
        s.push_str(&format!("\n\n[{}] {}", i + 1, p));
    }
    s
}

/// Paragraphs are listed one per line as `<corpus id>: "<text>"`.
pub fn qa_generation_user(description: &str, paragraphs: &[(usize, &str)]) -> String {
    let mut s = format!("Summary:\n{}\n\nParagraphs:", quoted(description));
    for (id, text) in paragraphs {
        s.push_str(&format!("\n{id}: {}", quoted(text)));
    }
    s
}

pub fn grading_user(question: &str, evidence: &[&str]) -> String {
    format!("Question: {question}\n\nEvidence:\n{}", evidence.join("\n"))
}

fn quoted(text: &str) -> String {
    format!("\"{}\"", text.replace('\n', " "))
}
