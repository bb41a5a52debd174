//! Session state as a fold over its event log.
//!
//! Every mutation is described by a [`SessionEvent`]; [`Session::apply`] is the
//! only place state changes. Events carry complete outcomes (generated
//! questions, chosen ids, generator position) so replay never calls a provider.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    Annotation, AnnotationId, Dataset, Question, QuestionId, QuestionStatus, SessionId, ThemeId,
    ValidationStage,
};
use crate::questions::{self, DisplayBoard, EngineError, QuestionPool, SeededRng, BOARD_CAPACITY};

/// Answered questions a theme needs before it gets a summary.
pub const SUMMARY_THRESHOLD: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    DatasetIngested {
        dataset: Dataset,
        seed: u64,
    },
    QuestionGenerated {
        questions: Vec<Question>,
    },
    QuestionDisplayed {
        question_ids: Vec<QuestionId>,
        /// Generator position after the selection that chose these ids.
        rng_word_pos: u64,
    },
    QuestionRemoved {
        question_id: QuestionId,
    },
    QuestionAnswered {
        question_id: QuestionId,
    },
    AnnotationCommitted {
        annotation: Annotation,
    },
    /// Follow-up generation for this annotation failed and will be retried.
    FollowUpsDeferred {
        annotation_id: AnnotationId,
    },
    SummaryUpdated {
        theme: ThemeId,
        text: String,
    },
    ExportRequested {},
    /// Audit record of a rejected answer; changes nothing else.
    AnswerRejected {
        question_id: QuestionId,
        stage: ValidationStage,
        feedback: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::DatasetIngested { .. } => "dataset_ingested",
            EventBody::QuestionGenerated { .. } => "question_generated",
            EventBody::QuestionDisplayed { .. } => "question_displayed",
            EventBody::QuestionRemoved { .. } => "question_removed",
            EventBody::QuestionAnswered { .. } => "question_answered",
            EventBody::AnnotationCommitted { .. } => "annotation_committed",
            EventBody::FollowUpsDeferred { .. } => "follow_ups_deferred",
            EventBody::SummaryUpdated { .. } => "summary_updated",
            EventBody::ExportRequested {} => "export_requested",
            EventBody::AnswerRejected { .. } => "answer_rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub sequence: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeSummary {
    pub text: Option<String>,
    /// Set when an answer landed in the theme after the last summary.
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeProgress {
    pub theme: ThemeId,
    pub answered_count: usize,
    pub unanswered_bank_count: usize,
    pub summary_text: Option<String>,
    pub summary_stale: bool,
}

#[derive(Debug, Error)]
pub enum ApplyError {
    #[error("expected sequence {expected}, got {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("session has no dataset yet")]
    NotIngested,
    #[error("session already has a dataset")]
    AlreadyIngested,
    #[error("question {0} already exists")]
    DuplicateQuestion(QuestionId),
    #[error("question {0} must be pooled when generated")]
    NotPooled(QuestionId),
    #[error("board would exceed {BOARD_CAPACITY} questions")]
    BoardOverflow,
    #[error("annotation sequence {found} does not follow {expected}")]
    AnnotationOrder { expected: u64, found: u64 },
    #[error("theme {0} has fewer than {SUMMARY_THRESHOLD} answered questions")]
    SummaryBeforeThreshold(ThemeId),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub dataset: Option<Dataset>,
    pub pool: QuestionPool,
    pub board: DisplayBoard,
    pub annotations: Vec<Annotation>,
    pub summaries: BTreeMap<ThemeId, ThemeSummary>,
    /// Annotations whose follow-up generation failed and is still owed.
    pub pending_follow_ups: Vec<AnnotationId>,
    pub next_question: u64,
    pub last_sequence: u64,
}

impl Session {
    pub fn empty(id: SessionId) -> Self {
        Self {
            id,
            dataset: None,
            pool: QuestionPool::new(0),
            board: DisplayBoard::default(),
            annotations: Vec::new(),
            summaries: BTreeMap::new(),
            pending_follow_ups: Vec::new(),
            next_question: 1,
            last_sequence: 0,
        }
    }

    pub fn replay<'a>(id: SessionId, events: impl IntoIterator<Item = &'a SessionEvent>) -> Result<Self, ApplyError> {
        let mut s = Self::empty(id);
        for e in events {
            s.apply(e)?;
        }
        Ok(s)
    }

    pub fn dataset(&self) -> Result<&Dataset, ApplyError> {
        self.dataset.as_ref().ok_or(ApplyError::NotIngested)
    }

    pub fn next_annotation_sequence(&self) -> u64 {
        self.annotations.len() as u64 + 1
    }

    pub fn find_question(&self, id: &QuestionId) -> Option<&Question> {
        self.board.get(id).or_else(|| self.pool.find(id))
    }

    pub fn annotation(&self, id: &AnnotationId) -> Option<&Annotation> {
        self.annotations.iter().find(|a| &a.id == id)
    }

    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), ApplyError> {
        let expected = self.last_sequence + 1;
        if event.sequence != expected {
            return Err(ApplyError::SequenceGap {
                expected,
                found: event.sequence,
            });
        }
        if self.dataset.is_none() && !matches!(event.body, EventBody::DatasetIngested { .. }) {
            return Err(ApplyError::NotIngested);
        }
        match &event.body {
            EventBody::DatasetIngested { dataset, seed } => {
                if self.dataset.is_some() {
                    return Err(ApplyError::AlreadyIngested);
                }
                self.dataset = Some(dataset.clone());
                self.pool = QuestionPool::new(*seed);
            }
            EventBody::QuestionGenerated { questions } => {
                for q in questions {
                    if self.find_question(&q.id).is_some() {
                        return Err(ApplyError::DuplicateQuestion(q.id.clone()));
                    }
                    if q.status != QuestionStatus::Pooled {
                        return Err(ApplyError::NotPooled(q.id.clone()));
                    }
                }
                for q in questions {
                    if let Some(t) = &q.trigger_annotation_id {
                        self.pending_follow_ups.retain(|p| p != t);
                    }
                }
                self.next_question += questions.len() as u64;
                self.pool.add(questions.iter().cloned());
            }
            EventBody::QuestionDisplayed {
                question_ids,
                rng_word_pos,
            } => {
                if self.board.len() + question_ids.len() > BOARD_CAPACITY {
                    return Err(ApplyError::BoardOverflow);
                }
                for id in question_ids {
                    let pooled = self
                        .pool
                        .find(id)
                        .is_some_and(|q| q.status == QuestionStatus::Pooled);
                    if !pooled {
                        return Err(EngineError::UnknownQuestion(id.clone()).into());
                    }
                }
                questions::display(&mut self.board, &mut self.pool, question_ids)?;
                self.pool.rng = SeededRng::at(self.pool.rng.seed(), u128::from(*rng_word_pos));
            }
            EventBody::QuestionRemoved { question_id } => {
                questions::remove_question(&mut self.board, &mut self.pool, question_id)?;
            }
            EventBody::QuestionAnswered { question_id } => {
                questions::mark_answered(&mut self.board, &mut self.pool, question_id)?;
                let theme = self.pool.answered_history.last().and_then(|q| q.theme);
                if let Some(theme) = theme {
                    if self.answered_in(theme) >= SUMMARY_THRESHOLD {
                        self.summaries.entry(theme).or_default().stale = true;
                    }
                }
            }
            EventBody::AnnotationCommitted { annotation } => {
                let expected = self.next_annotation_sequence();
                if annotation.sequence != expected {
                    return Err(ApplyError::AnnotationOrder {
                        expected,
                        found: annotation.sequence,
                    });
                }
                self.annotations.push(annotation.clone());
                questions::decay_recency(&mut self.pool, &mut self.board);
            }
            EventBody::FollowUpsDeferred { annotation_id } => {
                if !self.pending_follow_ups.contains(annotation_id) {
                    self.pending_follow_ups.push(annotation_id.clone());
                }
            }
            EventBody::SummaryUpdated { theme, text } => {
                if self.answered_in(*theme) < SUMMARY_THRESHOLD {
                    return Err(ApplyError::SummaryBeforeThreshold(*theme));
                }
                self.summaries.insert(
                    *theme,
                    ThemeSummary {
                        text: Some(text.clone()),
                        stale: false,
                    },
                );
            }
            EventBody::ExportRequested {} | EventBody::AnswerRejected { .. } => {}
        }
        self.last_sequence = event.sequence;
        Ok(())
    }

    pub fn answered_in(&self, theme: ThemeId) -> usize {
        self.pool
            .answered_history
            .iter()
            .filter(|q| q.theme == Some(theme))
            .count()
    }

    /// One entry per theme, in theme order.
    pub fn theme_progress(&self) -> Vec<ThemeProgress> {
        let counts = questions::theme_progress(&self.pool);
        ThemeId::ALL
            .into_iter()
            .map(|theme| {
                let c = counts[&theme];
                let summary = self.summaries.get(&theme).cloned().unwrap_or_default();
                ThemeProgress {
                    theme,
                    answered_count: c.answered,
                    unanswered_bank_count: c.unanswered,
                    summary_text: summary.text,
                    summary_stale: summary.stale,
                }
            })
            .collect()
    }

    /// (question, answer) text pairs for a theme, in answer order.
    pub fn theme_answers(&self, theme: ThemeId) -> Vec<(String, String)> {
        self.pool
            .answered_history
            .iter()
            .filter(|q| q.theme == Some(theme))
            .filter_map(|q| {
                self.annotations
                    .iter()
                    .find(|a| a.question_id.as_ref() == Some(&q.id))
                    .map(|a| (q.text.clone(), a.text.clone()))
            })
            .collect()
    }

    /// Hash of everything except the log position, so audit-only events
    /// leave it unchanged.
    pub fn state_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("session serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("last_sequence");
        }
        let bytes = serde_json::to_vec(&v).expect("value serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
