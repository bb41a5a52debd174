//! Two-stage answer check: faithfulness to the question, then consistency with
//! the annotations already accepted.

use crate::domain::{Annotation, Question, ValidationResult, ValidationStage};
use crate::prompts;
use crate::provider::{CompletionProvider, CompletionRequest, Purpose};
use crate::questions::{complete_structured, EngineError};

/// Runs stage 1 and, only if it passes, stage 2.
///
/// Provider failures are returned as errors and never turned into a rejection.
pub fn validate_answer(
    question: &Question,
    answer_text: &str,
    annotations: &[Annotation],
    provider: &dyn CompletionProvider,
    history_budget: usize,
) -> Result<ValidationResult, EngineError> {
    let v1 = CompletionRequest::standard(
        Purpose::Faithfulness,
        prompts::render_v1(&question.text, answer_text)?,
    );
    let (pass, feedback) = complete_structured(provider, &v1, prompts::parse_verdict)?;
    if !pass {
        return Ok(ValidationResult::rejected(ValidationStage::Faithfulness, feedback));
    }

    let v2 = CompletionRequest::standard(
        Purpose::Contradiction,
        prompts::render_v2(annotations, answer_text, history_budget)?,
    );
    let (pass, feedback) = complete_structured(provider, &v2, prompts::parse_verdict)?;
    if !pass {
        return Ok(ValidationResult::rejected(ValidationStage::Contradiction, feedback));
    }
    Ok(ValidationResult::accepted())
}
