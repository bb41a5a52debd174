//! Session orchestration: every user action becomes one or more committed
//! events, with provider calls made before anything is written.

use std::sync::Arc;

use thiserror::Error;
use tracing::{info, warn};

use crate::domain::{
    validate_selection, Annotation, AnnotationId, AnnotationOrigin, Dataset, QuestionId,
    SelectionError, Selection, SessionId, ThemeId, ValidationResult,
};
use crate::export::{self, ExportDocument, Report, ReportError};
use crate::prompts::{self, FollowUpContext, PromptError};
use crate::provider::{CompletionProvider, CompletionRequest, Purpose};
use crate::questions::{
    self, BankEntry, EngineError, FillReport, FOLLOW_UP_COUNT, REPLENISH_BELOW, REPLENISH_COUNT,
};
use crate::session::{EventBody, Session, SUMMARY_THRESHOLD};
use crate::store::{Clock, EventStore, Journal, StoreError};
use crate::validation::validate_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterviewSettings {
    pub seed: u64,
    /// Token budget for the serialized dataset in prompts.
    pub prompt_budget: usize,
    /// Token budget for annotation and question listings in prompts.
    pub history_budget: usize,
}

impl Default for InterviewSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_budget: 6_000,
            history_budget: 1_500,
        }
    }
}

#[derive(Debug, Error)]
pub enum InterviewError {
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("text must not be empty")]
    EmptyText,
    #[error("theme {theme} has {answered} answered questions, {SUMMARY_THRESHOLD} are needed")]
    PreconditionNotMet { theme: ThemeId, answered: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl InterviewError {
    pub fn name(&self) -> &'static str {
        match self {
            InterviewError::Selection(e) => e.name(),
            InterviewError::EmptyText => "EmptyText",
            InterviewError::PreconditionNotMet { .. } => "PreconditionNotMet",
            InterviewError::Engine(e) => e.name(),
            InterviewError::Prompt(_) => "PromptError",
            InterviewError::Store(e) => e.name(),
            InterviewError::Report(_) => "NoAnnotations",
        }
    }

    pub fn is_provider_failure(&self) -> bool {
        matches!(
            self,
            InterviewError::Engine(EngineError::Provider(_) | EngineError::MalformedProviderOutput(_))
        )
    }
}

/// What happened after an annotation was committed.
#[derive(Debug, Default)]
pub struct FollowUpOutcome {
    pub follow_ups: Vec<QuestionId>,
    pub replenished: Vec<QuestionId>,
    /// Follow-ups owed from earlier failures that were generated this time.
    pub recovered: Vec<AnnotationId>,
    /// Set when generation failed; the annotation itself is still committed.
    pub error: Option<EngineError>,
}

#[derive(Debug)]
pub struct AnswerOutcome {
    pub result: ValidationResult,
    pub annotation: Option<Annotation>,
    pub follow_up: Option<FollowUpOutcome>,
    pub summary_error: Option<EngineError>,
}

#[derive(Debug)]
pub struct AnnotateOutcome {
    pub annotation: Annotation,
    pub follow_up: FollowUpOutcome,
}

pub struct Interview {
    journal: Journal,
    settings: InterviewSettings,
    dataset_text: String,
}

impl Interview {
    /// Ingests `dataset` into a new session and fills the first board.
    ///
    /// All provider work happens first; if any of it fails nothing is stored.
    pub fn create(
        store: Arc<dyn EventStore>,
        clock: Arc<dyn Clock>,
        id: SessionId,
        dataset: Dataset,
        bank: &[BankEntry],
        provider: &dyn CompletionProvider,
        settings: InterviewSettings,
    ) -> Result<Self, InterviewError> {
        let dataset_text = prompts::serialize_dataset(&dataset, settings.prompt_budget)?;
        let mut next_id = 1;
        let boot = questions::bootstrap(&dataset_text, provider, bank, settings.seed, &mut next_id)?;

        let mut journal = Journal::create(store, clock, id)?;
        journal.commit(EventBody::DatasetIngested {
            dataset,
            seed: settings.seed,
        })?;
        journal.commit(EventBody::QuestionGenerated { questions: boot.bank })?;
        journal.commit(EventBody::QuestionGenerated {
            questions: boot.generated,
        })?;
        journal.commit(EventBody::QuestionDisplayed {
            question_ids: boot.fill.displayed(),
            rng_word_pos: word_pos(&boot.pool),
        })?;
        debug_assert_eq!(journal.session().board, boot.board);
        info!(session = %journal.session().id, "session created");
        Ok(Self {
            journal,
            settings,
            dataset_text,
        })
    }

    pub fn open(
        store: Arc<dyn EventStore>,
        clock: Arc<dyn Clock>,
        id: &SessionId,
        settings: InterviewSettings,
    ) -> Result<Self, InterviewError> {
        let journal = Journal::open(store, clock, id)?;
        let dataset = journal.session().dataset().map_err(StoreError::from)?;
        let dataset_text = prompts::serialize_dataset(dataset, settings.prompt_budget)?;
        Ok(Self {
            journal,
            settings,
            dataset_text,
        })
    }

    pub fn session(&self) -> &Session {
        self.journal.session()
    }

    /// The durable event log of this session.
    pub fn events(&self) -> Result<Vec<crate::session::SessionEvent>, InterviewError> {
        Ok(self.journal.store().events(&self.session().id)?)
    }

    pub fn settings(&self) -> InterviewSettings {
        self.settings
    }

    pub fn dataset(&self) -> &Dataset {
        self.session().dataset.as_ref().expect("interview sessions are ingested")
    }

    pub fn refill(&mut self) -> Result<FillReport, InterviewError> {
        let board = &self.session().board;
        if !questions::refill_enabled(board) {
            return Err(EngineError::RefillNotEnabled(board.len()).into());
        }
        let mut pool = self.session().pool.clone();
        let report = questions::plan_fill(board, &mut pool);
        self.journal.commit(EventBody::QuestionDisplayed {
            question_ids: report.displayed(),
            rng_word_pos: word_pos(&pool),
        })?;
        Ok(report)
    }

    fn require_displayed(&self, id: &QuestionId) -> Result<(), EngineError> {
        let s = self.session();
        if s.board.get(id).is_some() {
            Ok(())
        } else if s.pool.find(id).is_some() {
            Err(EngineError::NotDisplayed(id.clone()))
        } else {
            Err(EngineError::UnknownQuestion(id.clone()))
        }
    }

    pub fn remove_question(&mut self, id: &QuestionId) -> Result<(), InterviewError> {
        self.require_displayed(id)?;
        self.journal.commit(EventBody::QuestionRemoved {
            question_id: id.clone(),
        })?;
        Ok(())
    }

    /// Direct annotation of the dataset or a selection within it.
    pub fn annotate(
        &mut self,
        selection: Selection,
        text: &str,
        provider: &dyn CompletionProvider,
    ) -> Result<AnnotateOutcome, InterviewError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(InterviewError::EmptyText);
        }
        let ds = self.dataset();
        let selection = validate_selection(selection, ds.row_count(), ds.column_count())?;
        let annotation = self.commit_annotation(selection, text, AnnotationOrigin::Direct, None)?;
        let follow_up = self.after_annotation(&annotation, None, provider)?;
        Ok(AnnotateOutcome {
            annotation,
            follow_up,
        })
    }

    /// Validates an answer and, if accepted, turns it into an annotation.
    ///
    /// A rejection only appends an audit event. Provider failures during
    /// validation leave the session untouched.
    pub fn submit_answer(
        &mut self,
        question_id: &QuestionId,
        text: &str,
        provider: &dyn CompletionProvider,
    ) -> Result<AnswerOutcome, InterviewError> {
        self.require_displayed(question_id)?;
        let text = text.trim();
        if text.is_empty() {
            return Err(InterviewError::EmptyText);
        }
        let question = self.session().board.get(question_id).cloned().expect("displayed");
        let result = validate_answer(
            &question,
            text,
            &self.session().annotations,
            provider,
            self.settings.history_budget,
        )?;
        if !result.is_accepted() {
            self.journal.commit(EventBody::AnswerRejected {
                question_id: question_id.clone(),
                stage: result.stage.expect("rejections name a stage"),
                feedback: result.feedback.clone(),
            })?;
            return Ok(AnswerOutcome {
                result,
                annotation: None,
                follow_up: None,
                summary_error: None,
            });
        }

        // Follow-up answers stay attached to the data region that prompted them.
        let selection = question
            .trigger_annotation_id
            .as_ref()
            .and_then(|t| self.session().annotation(t))
            .map(|a| a.selection.clone())
            .unwrap_or(Selection::WholeDataset);
        let annotation = self.commit_annotation(
            selection,
            text,
            AnnotationOrigin::Answer,
            Some(question_id.clone()),
        )?;
        self.journal.commit(EventBody::QuestionAnswered {
            question_id: question_id.clone(),
        })?;

        let mut summary_error = None;
        if let Some(theme) = question.theme {
            let stale = self
                .session()
                .summaries
                .get(&theme)
                .is_some_and(|s| s.stale);
            if stale {
                match self.update_theme_summary(theme, provider) {
                    Ok(_) => {}
                    Err(InterviewError::Engine(e)) => {
                        warn!(theme = %theme, error = %e, "theme summary left stale");
                        summary_error = Some(e);
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        let answered = self.session().pool.answered_history.last().cloned();
        let follow_up = self.after_annotation(&annotation, answered.as_ref(), provider)?;
        Ok(AnswerOutcome {
            result,
            annotation: Some(annotation),
            follow_up: Some(follow_up),
            summary_error,
        })
    }

    fn commit_annotation(
        &mut self,
        selection: Selection,
        text: &str,
        origin: AnnotationOrigin,
        question_id: Option<QuestionId>,
    ) -> Result<Annotation, InterviewError> {
        let sequence = self.session().next_annotation_sequence();
        let annotation = Annotation {
            id: AnnotationId(format!("a-{sequence:06}")),
            selection,
            text: text.to_string(),
            origin,
            question_id,
            sequence,
            created_at: self.journal.clock().now(),
        };
        self.journal.commit(EventBody::AnnotationCommitted {
            annotation: annotation.clone(),
        })?;
        Ok(annotation)
    }

    fn follow_up_context<'a>(
        &'a self,
        recent: &'a Annotation,
        recent_question: Option<&'a crate::domain::Question>,
    ) -> FollowUpContext<'a> {
        let s = self.session();
        FollowUpContext {
            dataset_text: &self.dataset_text,
            answered_questions: &s.pool.answered_history,
            annotations: &s.annotations,
            recent_question,
            recent_annotation: Some(recent),
            history_budget: self.settings.history_budget,
        }
    }

    fn generate_for(
        &self,
        annotation: &Annotation,
        recent_question: Option<&crate::domain::Question>,
        count: usize,
        purpose: Purpose,
        trigger: bool,
        provider: &dyn CompletionProvider,
    ) -> Result<Vec<crate::domain::Question>, EngineError> {
        let ctx = self.follow_up_context(annotation, recent_question);
        let raw = questions::generate_follow_ups(&ctx, count, purpose, provider)?;
        let mut next_id = self.session().next_question;
        Ok(questions::materialize(
            raw,
            &mut next_id,
            trigger.then_some(&annotation.id),
            &self.dataset_text,
            &self.session().pool.answered_history,
            provider,
        ))
    }

    /// Owed follow-ups first, then five for this annotation, then a
    /// replenishing batch if the backlog is short.
    fn after_annotation(
        &mut self,
        annotation: &Annotation,
        recent_question: Option<&crate::domain::Question>,
        provider: &dyn CompletionProvider,
    ) -> Result<FollowUpOutcome, InterviewError> {
        let mut outcome = FollowUpOutcome::default();

        let owed: Vec<AnnotationId> = self.session().pending_follow_ups.clone();
        for id in owed {
            let Some(earlier) = self.session().annotation(&id).cloned() else {
                continue;
            };
            match self.generate_for(&earlier, None, FOLLOW_UP_COUNT, Purpose::FollowUp, true, provider) {
                Ok(qs) => {
                    self.journal.commit(EventBody::QuestionGenerated { questions: qs })?;
                    outcome.recovered.push(id);
                }
                Err(e) => {
                    warn!(annotation = %id, error = %e, "owed follow-ups still failing");
                    break;
                }
            }
        }

        match self.generate_for(annotation, recent_question, FOLLOW_UP_COUNT, Purpose::FollowUp, true, provider) {
            Ok(qs) => {
                outcome.follow_ups = qs.iter().map(|q| q.id.clone()).collect();
                self.journal.commit(EventBody::QuestionGenerated { questions: qs })?;
            }
            Err(e) => {
                warn!(annotation = %annotation.id, error = %e, "follow-up generation deferred");
                self.journal.commit(EventBody::FollowUpsDeferred {
                    annotation_id: annotation.id.clone(),
                })?;
                outcome.error = Some(e);
                return Ok(outcome);
            }
        }

        if self.session().pool.generated_backlog.len() < REPLENISH_BELOW {
            match self.generate_for(annotation, recent_question, REPLENISH_COUNT, Purpose::Generation, false, provider) {
                Ok(qs) => {
                    outcome.replenished = qs.iter().map(|q| q.id.clone()).collect();
                    self.journal.commit(EventBody::QuestionGenerated { questions: qs })?;
                }
                Err(e) => {
                    warn!(error = %e, "backlog replenishment failed");
                    outcome.error = Some(e);
                }
            }
        }
        Ok(outcome)
    }

    /// Regenerates the summary of one theme from its answered questions.
    pub fn update_theme_summary(
        &mut self,
        theme: ThemeId,
        provider: &dyn CompletionProvider,
    ) -> Result<String, InterviewError> {
        let answered = self.session().answered_in(theme);
        if answered < SUMMARY_THRESHOLD {
            return Err(InterviewError::PreconditionNotMet { theme, answered });
        }
        let pairs = self.session().theme_answers(theme);
        let prompt = prompts::render_theme_summary(theme, &pairs)?;
        let text = provider
            .complete(&CompletionRequest::standard(Purpose::Summary, prompt))
            .map_err(EngineError::from)?
            .trim()
            .to_string();
        self.journal.commit(EventBody::SummaryUpdated {
            theme,
            text: text.clone(),
        })?;
        Ok(text)
    }

    pub fn export(&mut self) -> Result<ExportDocument, InterviewError> {
        self.journal.commit(EventBody::ExportRequested {})?;
        Ok(export::export_annotations(self.session()))
    }

    pub fn report(&self, provider: &dyn CompletionProvider) -> Result<Report, InterviewError> {
        Ok(export::generate_report(
            self.session(),
            provider,
            self.settings.prompt_budget,
        )?)
    }
}

fn word_pos(pool: &questions::QuestionPool) -> u64 {
    u64::try_from(pool.rng.word_pos()).expect("generator position fits in 64 bits")
}
