use std::collections::VecDeque;
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{prompt_hash, stable_hash, CompletionProvider, CompletionRequest, ProviderError, Purpose, Tier};
use crate::domain::ThemeId;
use crate::prompts::{format_question_list, segment_marker, slots, GeneratedQuestion};

pub const MOCK_BRIEF_FEEDBACK: &str = "answer too brief to address the question";
pub const MOCK_CONFLICT_FEEDBACK: &str = "conflicts with an existing annotation";
pub const MOCK_MIN_ANSWER_CHARS: usize = 20;
pub const MOCK_CONTRADICTION_TOKEN: &str = "CONTRA";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallRecord {
    pub purpose: Purpose,
    pub tier: Tier,
    pub prompt_hash: String,
}

/// One-shot failure consumed by the next call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockFault {
    /// Respond with text no parser accepts.
    Garbage,
    Error(ProviderError),
}

/// Deterministic offline provider keyed on request purpose.
///
/// * generation / follow-up: a structured list of the requested count; item k is
///   `MQ-<hash(seed, prompt, k)>: about <column k mod columns>` with themes cycling
///   through the seven genres.
/// * importance: `1 + hash(question) mod 5`.
/// * faithfulness: fails answers shorter than 20 characters.
/// * contradiction: fails candidates containing `CONTRA`.
/// * summary / report: `SUMMARY(<theme>): <n> answers`, `REPORT(<name>): <n> annotations`.
#[derive(Debug)]
pub struct MockProvider {
    seed: u64,
    log: Mutex<Vec<CallRecord>>,
    faults: Mutex<VecDeque<MockFault>>,
}

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            log: Mutex::new(Vec::new()),
            faults: Mutex::new(VecDeque::new()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn inject(&self, fault: MockFault) {
        self.faults.lock().unwrap().push_back(fault);
    }

    pub fn inject_n(&self, fault: MockFault, n: usize) {
        let mut q = self.faults.lock().unwrap();
        for _ in 0..n {
            q.push_back(fault.clone());
        }
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn calls_for(&self, purpose: Purpose) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|c| c.purpose == purpose)
            .count()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }

    fn respond(&self, request: &CompletionRequest) -> String {
        let prompt = request.prompt.as_str();
        match request.purpose {
            Purpose::Generation | Purpose::FollowUp => {
                let count = requested_count(prompt);
                let columns = column_names(prompt);
                let questions: Vec<GeneratedQuestion> = (0..count)
                    .map(|k| {
                        let h = stable_hash(&[
                            &self.seed.to_le_bytes(),
                            prompt.as_bytes(),
                            &(k as u64).to_le_bytes(),
                        ]);
                        let about = if columns.is_empty() {
                            "the dataset".to_string()
                        } else {
                            columns[k % columns.len()].clone()
                        };
                        GeneratedQuestion {
                            text: format!("MQ-{h:016x}: about {about}"),
                            theme: Some(ThemeId::ALL[k % ThemeId::ALL.len()]),
                        }
                    })
                    .collect();
                format_question_list(&questions)
            }
            Purpose::Importance => {
                let q = segment(prompt, slots::QUESTION).unwrap_or_default();
                (1 + stable_hash(&[q.as_bytes()]) % 5).to_string()
            }
            Purpose::Faithfulness => {
                let answer = segment(prompt, slots::ANSWER).unwrap_or_default();
                if answer.chars().count() < MOCK_MIN_ANSWER_CHARS {
                    verdict(false, MOCK_BRIEF_FEEDBACK)
                } else {
                    verdict(true, "")
                }
            }
            Purpose::Contradiction => {
                let candidate = segment(prompt, slots::CANDIDATE_ANNOTATION).unwrap_or_default();
                if candidate.contains(MOCK_CONTRADICTION_TOKEN) {
                    verdict(false, MOCK_CONFLICT_FEEDBACK)
                } else {
                    verdict(true, "")
                }
            }
            Purpose::Summary => {
                let theme = segment(prompt, slots::THEME).unwrap_or_default();
                let n = segment(prompt, slots::QUESTIONS_AND_ANSWERS)
                    .map(|s| s.lines().filter(|l| l.starts_with("- Q:")).count())
                    .unwrap_or(0);
                format!("SUMMARY({}): {n} answers", theme.trim())
            }
            Purpose::Report => {
                let name = segment(prompt, slots::DATASET)
                    .and_then(|d| {
                        d.lines()
                            .next()
                            .and_then(|l| l.strip_prefix("Dataset: "))
                            .map(String::from)
                    })
                    .unwrap_or_default();
                let n = segment(prompt, slots::ANNOTATIONS)
                    .map(|s| s.lines().filter(|l| l.starts_with("- [#")).count())
                    .unwrap_or(0);
                format!("REPORT({name}): {n} annotations")
            }
        }
    }
}

impl CompletionProvider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        self.log.lock().unwrap().push(CallRecord {
            purpose: request.purpose,
            tier: request.tier,
            prompt_hash: prompt_hash(&request.prompt),
        });
        match self.faults.lock().unwrap().pop_front() {
            Some(MockFault::Garbage) => return Ok("I am not sure what you mean.".to_string()),
            Some(MockFault::Error(e)) => return Err(e),
            None => {}
        }
        Ok(self.respond(request))
    }
}

fn verdict(pass: bool, feedback: &str) -> String {
    let v = serde_json::json!({
        "verdict": if pass { "pass" } else { "fail" },
        "feedback": feedback,
    });
    format!("```json\n{v}\n```")
}

/// Body of the first segment with the given slot name.
fn segment(prompt: &str, slot: &str) -> Option<String> {
    let marker = segment_marker(slot);
    let mut lines = prompt.lines();
    lines.by_ref().find(|l| *l == marker)?;
    let body: Vec<&str> = lines.take_while(|l| !l.starts_with("### ")).collect();
    Some(body.join("\n").trim().to_string())
}

fn requested_count(prompt: &str) -> usize {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"Return exactly (\d+) question objects").unwrap());
    re.captures_iter(prompt)
        .last()
        .and_then(|c| c[1].parse().ok())
        .unwrap_or(0)
}

fn column_names(prompt: &str) -> Vec<String> {
    segment(prompt, slots::DATASET)
        .map(|d| {
            d.lines()
                .filter_map(|l| l.strip_prefix("- name: "))
                .filter_map(|l| l.rsplit_once(" | type: ").map(|(n, _)| n.to_string()))
                .collect()
        })
        .unwrap_or_default()
}
