//! Prompt rendering and structured-output parsing.
//!
//! A prompt is the role paragraph followed by labelled segments
//! (`### DATASET`, `### TASK`, ...) in a fixed composition order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::domain::{Annotation, ColumnType, Dataset, Question, ThemeId};
use crate::ingest::write_record;

pub const ROLE_TEXT: &str = "The role of the Data Therapist is to elicit knowledge about the dataset from users by asking appropriate questions that, by answering, could help them understand their own data. The questions should aim to bridge the gap between reality (the situation, environment, and background surrounding the dataset) and the dataset itself. While the data is present, it does not, on its own, explain the background or issues. Ideally, annotations should be made so that even someone unfamiliar with the dataset can understand it by reading those annotations. Although the main goal is to help extract annotations by asking questions, the Data Therapist can also assist in other tasks related to annotation, such as validating questions.";

pub const TASK_T1: &str = "Read the dataset. Generate 30 key questions you would ask the experts of the dataset that would help people who do not know about the data understand the dataset. The generated questions should (1) help clarify the dataset from a non-expert's perspective and (2) bridge the gap between the explanations and the dataset itself.";

pub const TASK_V1: &str = "Now, look at the answer and check if the answer makes sense, based on the question. If the answer makes no sense at all, then provide feedback to guide users to answer the question.";

pub const TASK_V2: &str = "Now, compare the candidate annotation with the existing annotations and check whether the candidate contradicts any of them. If it does, explain the conflict in the feedback so the user can revise the answer. If there are no existing annotations, the candidate passes.";

pub const GENERIC_REJECTION_FEEDBACK: &str =
    "The answer was not accepted. Please revise it so that it directly addresses the question.";

pub const NONE_MARKER: &str = "(none)";
pub const ELISION_MARKER: &str = "...";

pub const INITIAL_QUESTION_COUNT: usize = 30;

/// Marker line for a segment, e.g. `### RECENT ANNOTATION`.
pub fn segment_marker(slot: &str) -> String {
    format!("### {}", slot.to_ascii_uppercase().replace('_', " "))
}

pub mod slots {
    pub const ROLE: &str = "role";
    pub const DATASET: &str = "dataset";
    pub const ANSWERED_QUESTIONS: &str = "answered_questions";
    pub const ANNOTATIONS: &str = "annotations";
    pub const RECENT_QUESTION: &str = "recent_question";
    pub const RECENT_ANNOTATION: &str = "recent_annotation";
    pub const TASK: &str = "task";
    pub const OUTPUT_FORMAT: &str = "output_format";
    pub const QUESTION: &str = "question";
    pub const ANSWER: &str = "answer";
    pub const EXISTING_ANNOTATIONS: &str = "existing_annotations";
    pub const CANDIDATE_ANNOTATION: &str = "candidate_annotation";
    pub const THEME: &str = "theme";
    pub const QUESTIONS_AND_ANSWERS: &str = "questions_and_answers";
    pub const REPAIR: &str = "repair";
}

use slots::*;

pub const T1_COMPOSITION: &[&str] = &[ROLE, DATASET, TASK, OUTPUT_FORMAT];
pub const T2_COMPOSITION: &[&str] = &[
    ROLE,
    DATASET,
    ANSWERED_QUESTIONS,
    ANNOTATIONS,
    RECENT_QUESTION,
    RECENT_ANNOTATION,
    TASK,
    OUTPUT_FORMAT,
];
pub const V1_COMPOSITION: &[&str] = &[ROLE, QUESTION, ANSWER, TASK, OUTPUT_FORMAT];
pub const V2_COMPOSITION: &[&str] = &[
    ROLE,
    EXISTING_ANNOTATIONS,
    CANDIDATE_ANNOTATION,
    TASK,
    OUTPUT_FORMAT,
];
pub const IMPORTANCE_COMPOSITION: &[&str] = &[ROLE, DATASET, QUESTION, TASK, OUTPUT_FORMAT];
pub const SUMMARY_COMPOSITION: &[&str] = &[ROLE, THEME, QUESTIONS_AND_ANSWERS, TASK, OUTPUT_FORMAT];
pub const REPORT_COMPOSITION: &[&str] = &[ROLE, DATASET, ANNOTATIONS, TASK, OUTPUT_FORMAT];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("slot {0:?} is not bound")]
    UnboundSlot(String),
    #[error("dataset text is empty")]
    EmptyDataset,
    #[error("at least one annotation is required")]
    NoAnnotations,
    #[error("budget of {budget} tokens cannot hold the {needed}-token dataset header")]
    BudgetTooSmall { budget: usize, needed: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("malformed output: {0}")]
    MalformedOutput(String),
    #[error("expected {expected} questions, found {found}")]
    CountMismatch { expected: usize, found: usize },
}

/// Global slots are shared by every prompt (the role); local slots are per task.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptTemplate {
    pub global_slots: BTreeMap<String, String>,
    pub local_slots: BTreeMap<String, String>,
    pub composition: Vec<String>,
}

impl PromptTemplate {
    pub fn new(composition: &[&str]) -> Self {
        Self {
            global_slots: BTreeMap::from([(ROLE.to_string(), ROLE_TEXT.to_string())]),
            local_slots: BTreeMap::new(),
            composition: composition.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn bind(mut self, slot: &str, text: impl Into<String>) -> Self {
        self.local_slots.insert(slot.to_string(), text.into());
        self
    }

    pub fn render(&self) -> Result<String, PromptError> {
        let mut parts = Vec::with_capacity(self.composition.len());
        for slot in &self.composition {
            let text = self
                .local_slots
                .get(slot)
                .or_else(|| self.global_slots.get(slot))
                .ok_or_else(|| PromptError::UnboundSlot(slot.clone()))?;
            if slot == ROLE {
                parts.push(text.clone());
            } else {
                parts.push(format!("{}\n{}", segment_marker(slot), text));
            }
        }
        Ok(parts.join("\n\n"))
    }
}

pub fn render_role() -> String {
    ROLE_TEXT.to_string()
}

/// Rough token estimate: one token per four characters.
pub fn approx_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

fn question_format(count: usize) -> String {
    let themes = ThemeId::ALL.map(ThemeId::as_str).join(", ");
    format!(
        "Return exactly {count} question objects as a JSON array inside a fenced block labelled json, and nothing else. \
Each object has a \"text\" field holding the question and an optional \"theme\" field naming one of: {themes}.\n\
Example:\n```json\n[{{\"text\": \"Who recorded these values, and why?\", \"theme\": \"motivation\"}}]\n```"
    )
}

const VERDICT_FORMAT: &str = "Return a single JSON object inside a fenced block labelled json, and nothing else. \
The object has a \"verdict\" field set to \"pass\" or \"fail\" and a \"feedback\" field explaining a failure (empty on pass).\n\
Example:\n```json\n{\"verdict\": \"fail\", \"feedback\": \"The answer does not say where the data came from.\"}\n```";

const IMPORTANCE_TASK: &str = "Rate how much an answer to this question would help someone unfamiliar with the data understand the dataset, and how likely the answer is to reveal something that cannot be read off the table itself.";
const IMPORTANCE_FORMAT: &str = "Respond with a single integer from 1 (least important) to 5 (most important) and nothing else.";
const SUMMARY_FORMAT: &str = "Respond with plain prose of at most two short paragraphs.";
const REPORT_TASK: &str = "Write a short overview of the dataset for a reader who has never seen it, using only what the annotations establish. Point out which aspects of the data remain undocumented.";
const REPORT_FORMAT: &str = "Respond with plain prose of at most three short paragraphs.";

pub fn render_t1(dataset_text: &str) -> Result<String, PromptError> {
    if dataset_text.trim().is_empty() {
        return Err(PromptError::EmptyDataset);
    }
    PromptTemplate::new(T1_COMPOSITION)
        .bind(DATASET, dataset_text)
        .bind(TASK, TASK_T1)
        .bind(OUTPUT_FORMAT, question_format(INITIAL_QUESTION_COUNT))
        .render()
}

/// Context for follow-up generation.
///
/// `recent_annotation` is the annotation the new questions should build on;
/// `recent_question` is the question it answered, if any.
pub struct FollowUpContext<'a> {
    pub dataset_text: &'a str,
    pub answered_questions: &'a [Question],
    pub annotations: &'a [Annotation],
    pub recent_question: Option<&'a Question>,
    pub recent_annotation: Option<&'a Annotation>,
    /// Token budget shared by the question and annotation listings.
    pub history_budget: usize,
}

fn follow_up_task(count: usize) -> String {
    format!(
        "Read the dataset, the questions already answered and the annotations made so far. \
Generate {count} follow-up questions you would ask the experts that build on the most recent annotation. \
Each question should (1) dig further into what the most recent annotation says about the data and \
(2) not repeat a question that was already answered."
    )
}

pub fn render_t2(ctx: &FollowUpContext<'_>, count: usize) -> Result<String, PromptError> {
    let recent = ctx.recent_annotation.ok_or(PromptError::NoAnnotations)?;
    if ctx.annotations.is_empty() {
        return Err(PromptError::NoAnnotations);
    }
    let half = ctx.history_budget / 2;
    let questions = list_newest_within(
        ctx.answered_questions,
        half,
        |q| format!("- [{}] {}", q.id, one_line(&q.text)),
    );
    let annotations = list_newest_within(ctx.annotations, half, format_annotation);
    PromptTemplate::new(T2_COMPOSITION)
        .bind(DATASET, ctx.dataset_text)
        .bind(ANSWERED_QUESTIONS, or_none(questions))
        .bind(ANNOTATIONS, or_none(annotations))
        .bind(
            RECENT_QUESTION,
            ctx.recent_question
                .map(|q| one_line(&q.text))
                .unwrap_or_else(|| NONE_MARKER.to_string()),
        )
        .bind(RECENT_ANNOTATION, format_annotation(recent))
        .bind(TASK, follow_up_task(count))
        .bind(OUTPUT_FORMAT, question_format(count))
        .render()
}

pub fn render_v1(question_text: &str, answer_text: &str) -> Result<String, PromptError> {
    PromptTemplate::new(V1_COMPOSITION)
        .bind(QUESTION, one_line(question_text))
        .bind(ANSWER, answer_text.trim())
        .bind(TASK, TASK_V1)
        .bind(OUTPUT_FORMAT, VERDICT_FORMAT)
        .render()
}

/// Contradiction check. Existing annotations are taken newest first until
/// `budget` tokens are used, then listed in sequence order.
pub fn render_v2(existing: &[Annotation], candidate: &str, budget: usize) -> Result<String, PromptError> {
    let listing = list_newest_within(existing, budget, format_annotation);
    PromptTemplate::new(V2_COMPOSITION)
        .bind(EXISTING_ANNOTATIONS, or_none(listing))
        .bind(CANDIDATE_ANNOTATION, candidate.trim())
        .bind(TASK, TASK_V2)
        .bind(OUTPUT_FORMAT, VERDICT_FORMAT)
        .render()
}

pub fn render_importance(dataset_text: &str, question_text: &str) -> Result<String, PromptError> {
    PromptTemplate::new(IMPORTANCE_COMPOSITION)
        .bind(DATASET, dataset_text)
        .bind(QUESTION, one_line(question_text))
        .bind(TASK, IMPORTANCE_TASK)
        .bind(OUTPUT_FORMAT, IMPORTANCE_FORMAT)
        .render()
}

pub fn render_theme_summary(theme: ThemeId, pairs: &[(String, String)]) -> Result<String, PromptError> {
    let mut listing = String::new();
    for (q, a) in pairs {
        let _ = writeln!(listing, "- Q: {}\n  A: {}", one_line(q), one_line(a));
    }
    let task = format!(
        "Summarize in a short paragraph what the answers below establish about the {} of the dataset, \
then name the aspects of this theme that are still undocumented.",
        theme.as_str().replace('_', " ")
    );
    PromptTemplate::new(SUMMARY_COMPOSITION)
        .bind(THEME, theme.as_str())
        .bind(QUESTIONS_AND_ANSWERS, listing.trim_end())
        .bind(TASK, task)
        .bind(OUTPUT_FORMAT, SUMMARY_FORMAT)
        .render()
}

pub fn render_report(dataset_text: &str, annotations: &[Annotation], budget: usize) -> Result<String, PromptError> {
    if annotations.is_empty() {
        return Err(PromptError::NoAnnotations);
    }
    let listing = list_newest_within(annotations, budget, format_annotation);
    PromptTemplate::new(REPORT_COMPOSITION)
        .bind(DATASET, dataset_text)
        .bind(ANNOTATIONS, listing)
        .bind(TASK, REPORT_TASK)
        .bind(OUTPUT_FORMAT, REPORT_FORMAT)
        .render()
}

/// Re-send wrapper used after a parse failure.
pub fn with_repair(prompt: &str, error: &ParseError) -> String {
    format!(
        "{prompt}\n\n{}\nYour previous response could not be parsed ({error}). Respond again with only the fenced json block described in the output format.",
        segment_marker(REPAIR)
    )
}

pub fn format_annotation(a: &Annotation) -> String {
    format!("- [#{}] ({}) {}", a.sequence, a.selection.describe(), one_line(&a.text))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn or_none(s: String) -> String {
    if s.is_empty() {
        NONE_MARKER.to_string()
    } else {
        s
    }
}

/// Keeps the newest items whose rendered lines fit in `budget` tokens and
/// returns them oldest first.
fn list_newest_within<T>(items: &[T], budget: usize, line: impl Fn(&T) -> String) -> String {
    let mut kept = Vec::new();
    let mut used = 0;
    for item in items.iter().rev() {
        let l = line(item);
        let cost = approx_tokens(&l) + 1;
        if used + cost > budget {
            break;
        }
        used += cost;
        kept.push(l);
    }
    kept.reverse();
    kept.join("\n")
}

/// Deterministic text form of a dataset that fits within `budget` tokens.
///
/// When the whole table does not fit, the first and last R rows are kept
/// (largest R that fits) around an elision line, and per-column summaries are added.
pub fn serialize_dataset(dataset: &Dataset, budget: usize) -> Result<String, PromptError> {
    let header = dataset_header(dataset);
    let col_names: Vec<&str> = dataset.columns().iter().map(|c| c.name.as_str()).collect();
    let rows: Vec<String> = dataset
        .rows()
        .iter()
        .map(|r| write_record(&r.iter().map(|c| c.raw.as_str()).collect::<Vec<_>>(), ','))
        .collect();
    let names_line = write_record(&col_names, ',');

    let full = format!(
        "{header}Data ({} rows):\n{names_line}{}",
        rows.len(),
        rows.iter().map(|r| format!("\n{r}")).collect::<String>()
    );
    if approx_tokens(&full) <= budget {
        return Ok(full);
    }

    let summary = column_summaries(dataset);
    let elided = |r: usize| elided_text(&header, &summary, &names_line, &rows, r);

    let smallest = elided(0);
    if approx_tokens(&smallest) > budget {
        return Err(PromptError::BudgetTooSmall {
            budget,
            needed: approx_tokens(&smallest),
        });
    }
    // Largest r with 2r < n that fits; size is monotone in r.
    let (mut lo, mut hi) = (0usize, rows.len().saturating_sub(1) / 2);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if approx_tokens(&elided(mid)) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(elided(lo))
}

fn elided_text(header: &str, summary: &str, names_line: &str, rows: &[String], r: usize) -> String {
    let n = rows.len();
    let mut s = format!("{header}{summary}Data (first {r} and last {r} of {n} rows):\n{names_line}");
    for row in &rows[..r] {
        s.push('\n');
        s.push_str(row);
    }
    let _ = write!(s, "\n{ELISION_MARKER} {} rows omitted {ELISION_MARKER}", n - 2 * r);
    for row in &rows[n - r..] {
        s.push('\n');
        s.push_str(row);
    }
    s
}

fn dataset_header(dataset: &Dataset) -> String {
    let mut s = format!(
        "Dataset: {}\nRows: {}\nColumns ({}):\n",
        dataset.name(),
        dataset.row_count(),
        dataset.column_count()
    );
    for c in dataset.columns() {
        let _ = writeln!(
            s,
            "- name: {} | type: {} | nulls: {}",
            c.name,
            c.inferred_type.as_str(),
            c.null_count
        );
    }
    s
}

fn column_summaries(dataset: &Dataset) -> String {
    let mut s = String::from("Column summaries:\n");
    for (i, c) in dataset.columns().iter().enumerate() {
        let cells = dataset.column_cells(i).filter(|c| !c.is_null);
        let line = match c.inferred_type {
            ColumnType::Numeric => {
                let vals: Vec<f64> = cells.filter_map(|c| c.number()).collect();
                if vals.is_empty() {
                    "no values".to_string()
                } else {
                    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    format!("min {min}, max {max}, mean {mean:.4}")
                }
            }
            ColumnType::Datetime => {
                let mut raws: Vec<_> = cells
                    .filter_map(|c| match c.parsed {
                        Some(crate::domain::ParsedValue::Timestamp(t)) => Some(t),
                        _ => None,
                    })
                    .collect();
                raws.sort();
                match (raws.first(), raws.last()) {
                    (Some(a), Some(b)) => format!("earliest {a}, latest {b}"),
                    _ => "no values".to_string(),
                }
            }
            ColumnType::Categorical | ColumnType::Text => {
                let distinct: std::collections::BTreeSet<&str> = cells.map(|c| c.raw.as_str()).collect();
                format!("{} distinct values", distinct.len())
            }
        };
        let _ = writeln!(s, "- {}: {}", c.name, line);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedQuestion {
    pub text: String,
    pub theme: Option<ThemeId>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum QuestionItem {
    Text(String),
    Object {
        text: String,
        #[serde(default)]
        theme: Option<String>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum QuestionList {
    List(Vec<QuestionItem>),
    Wrapped { questions: Vec<QuestionItem> },
}

fn fenced_blocks(output: &str) -> Vec<&str> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z]*[ \t]*\r?\n(.*?)```").unwrap());
    re.captures_iter(output)
        .filter_map(|c| c.get(1).map(|m| m.as_str()))
        .collect()
}

fn between(s: &str, open: char, close: char) -> Option<&str> {
    let start = s.find(open)?;
    let end = s.rfind(close)?;
    (end > start).then(|| &s[start..=end])
}

/// Candidate JSON payloads: fenced blocks first, then the outermost bracketed span.
fn json_candidates(output: &str, open: char, close: char) -> Vec<&str> {
    let mut out = fenced_blocks(output);
    if let Some(span) = between(output, open, close) {
        out.push(span);
    }
    out
}

/// Extracts exactly `expected` non-empty questions from a structured list,
/// tolerating prose around the block.
pub fn parse_questions(output: &str, expected: usize) -> Result<Vec<GeneratedQuestion>, ParseError> {
    let mut last_err = "no JSON list found".to_string();
    for candidate in json_candidates(output, '[', ']')
        .into_iter()
        .chain(json_candidates(output, '{', '}'))
    {
        let list = match serde_json::from_str::<QuestionList>(candidate.trim()) {
            Ok(QuestionList::List(l)) | Ok(QuestionList::Wrapped { questions: l }) => l,
            Err(e) => {
                last_err = e.to_string();
                continue;
            }
        };
        let questions: Vec<GeneratedQuestion> = list
            .into_iter()
            .map(|item| match item {
                QuestionItem::Text(text) => GeneratedQuestion {
                    text: text.trim().to_string(),
                    theme: None,
                },
                QuestionItem::Object { text, theme } => GeneratedQuestion {
                    text: text.trim().to_string(),
                    theme: theme.as_deref().and_then(ThemeId::parse),
                },
            })
            .collect();
        if questions.iter().any(|q| q.text.is_empty()) {
            return Err(ParseError::MalformedOutput("empty question text".into()));
        }
        if questions.len() != expected {
            return Err(ParseError::CountMismatch {
                expected,
                found: questions.len(),
            });
        }
        return Ok(questions);
    }
    Err(ParseError::MalformedOutput(last_err))
}

#[derive(Deserialize)]
struct VerdictPayload {
    verdict: serde_json::Value,
    #[serde(default)]
    feedback: Option<String>,
}

/// `(passed, feedback)`; a failure without feedback gets the generic message.
pub fn parse_verdict(output: &str) -> Result<(bool, String), ParseError> {
    for candidate in json_candidates(output, '{', '}') {
        let Ok(payload) = serde_json::from_str::<VerdictPayload>(candidate.trim()) else {
            continue;
        };
        let pass = match &payload.verdict {
            serde_json::Value::Bool(b) => *b,
            serde_json::Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
                "pass" | "passed" | "accept" | "accepted" | "valid" => true,
                "fail" | "failed" | "reject" | "rejected" | "invalid" => false,
                other => {
                    return Err(ParseError::MalformedOutput(format!("unknown verdict {other:?}")))
                }
            },
            other => return Err(ParseError::MalformedOutput(format!("unknown verdict {other}"))),
        };
        let feedback = payload.feedback.unwrap_or_default().trim().to_string();
        return Ok(if pass {
            (true, String::new())
        } else if feedback.is_empty() {
            (false, GENERIC_REJECTION_FEEDBACK.to_string())
        } else {
            (false, feedback)
        });
    }
    Err(ParseError::MalformedOutput("no verdict object found".into()))
}

/// First integer in the output, clamped to 1..=5.
pub fn parse_rating(output: &str) -> Result<u8, ParseError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"-?\d+").unwrap());
    let m = re
        .find(output)
        .ok_or_else(|| ParseError::MalformedOutput("no integer rating".into()))?;
    let v: i64 = m.as_str().parse().unwrap_or(if m.as_str().starts_with('-') { i64::MIN } else { i64::MAX });
    Ok(v.clamp(1, 5) as u8)
}

/// Renders questions the way the mock provider and the output format expect.
pub fn format_question_list(questions: &[GeneratedQuestion]) -> String {
    let items: Vec<serde_json::Value> = questions
        .iter()
        .map(|q| match q.theme {
            Some(t) => serde_json::json!({"text": q.text, "theme": t.as_str()}),
            None => serde_json::json!({"text": q.text}),
        })
        .collect();
    format!(
        "```json\n{}\n```",
        serde_json::to_string_pretty(&items).expect("json values serialize")
    )
}
