//! Export document and dataset report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Annotation, AnnotationId, AnnotationOrigin, ColumnType, QuestionId, QuestionOrigin, Selection,
    ThemeId,
};
use crate::prompts;
use crate::provider::{CompletionProvider, CompletionRequest, ProviderError, Purpose};
use crate::session::Session;

pub const EXPORT_FORMAT_VERSION: &str = "1";
pub const NOT_YET_COVERED: &str = "Not yet covered.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportDocument {
    pub format_version: String,
    pub dataset: ExportDataset,
    pub annotations: Vec<ExportAnnotation>,
    pub theme_summaries: BTreeMap<ThemeId, String>,
    pub theme_progress: BTreeMap<ThemeId, ExportThemeCounts>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportDataset {
    pub name: String,
    pub columns: Vec<ExportColumn>,
    pub row_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportColumn {
    pub name: String,
    #[serde(rename = "type")]
    pub column_type: ColumnType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    General,
    DataSpecific,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportAnnotation {
    pub id: AnnotationId,
    pub sequence: u64,
    pub scope: Scope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    pub text: String,
    pub origin: AnnotationOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<ExportQuestion>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportQuestion {
    pub id: QuestionId,
    pub text: String,
    pub origin: QuestionOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theme: Option<ThemeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportThemeCounts {
    pub answered_count: usize,
    pub unanswered_bank_count: usize,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("export document is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported export format version {0:?}")]
    UnsupportedVersion(String),
    #[error("annotation records are not in sequence order at index {0}")]
    OutOfOrder(usize),
    #[error("annotation {0} has a scope that does not match its selection")]
    ScopeMismatch(AnnotationId),
}

/// Everything the session knows, as one structured document.
///
/// # Panics
/// If the session has no dataset.
pub fn export_annotations(session: &Session) -> ExportDocument {
    let dataset = session.dataset.as_ref().expect("exported session has a dataset");
    let annotations = session
        .annotations
        .iter()
        .map(|a| {
            let question = a.question_id.as_ref().and_then(|qid| session.find_question(qid)).map(|q| {
                ExportQuestion {
                    id: q.id.clone(),
                    text: q.text.clone(),
                    origin: q.origin,
                    theme: q.theme,
                }
            });
            let general = a.is_general();
            ExportAnnotation {
                id: a.id.clone(),
                sequence: a.sequence,
                scope: if general { Scope::General } else { Scope::DataSpecific },
                selection: (!general).then(|| a.selection.clone()),
                text: a.text.clone(),
                origin: a.origin,
                question,
                created_at: a.created_at,
            }
        })
        .collect();
    let progress = session.theme_progress();
    ExportDocument {
        format_version: EXPORT_FORMAT_VERSION.to_string(),
        dataset: ExportDataset {
            name: dataset.name().to_string(),
            columns: dataset
                .columns()
                .iter()
                .map(|c| ExportColumn {
                    name: c.name.clone(),
                    column_type: c.inferred_type,
                })
                .collect(),
            row_count: dataset.row_count(),
        },
        annotations,
        theme_summaries: progress
            .iter()
            .filter_map(|p| p.summary_text.clone().map(|t| (p.theme, t)))
            .collect(),
        theme_progress: progress
            .iter()
            .map(|p| {
                (
                    p.theme,
                    ExportThemeCounts {
                        answered_count: p.answered_count,
                        unanswered_bank_count: p.unanswered_bank_count,
                    },
                )
            })
            .collect(),
    }
}

impl ExportDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("export serializes")
    }

    /// Verification loader: parses and checks structural rules.
    pub fn parse(json: &str) -> Result<Self, ExportError> {
        let doc: ExportDocument = serde_json::from_str(json)?;
        if doc.format_version != EXPORT_FORMAT_VERSION {
            return Err(ExportError::UnsupportedVersion(doc.format_version));
        }
        for (i, a) in doc.annotations.iter().enumerate() {
            if a.sequence != i as u64 + 1 {
                return Err(ExportError::OutOfOrder(i));
            }
            let consistent = match (a.scope, &a.selection) {
                (Scope::General, None) => true,
                (Scope::DataSpecific, Some(s)) => !s.is_general(),
                _ => false,
            };
            if !consistent {
                return Err(ExportError::ScopeMismatch(a.id.clone()));
            }
        }
        Ok(doc)
    }

    /// Rebuilds the annotation records exactly as the session held them.
    pub fn to_annotations(&self) -> Vec<Annotation> {
        self.annotations
            .iter()
            .map(|a| Annotation {
                id: a.id.clone(),
                selection: a.selection.clone().unwrap_or(Selection::WholeDataset),
                text: a.text.clone(),
                origin: a.origin,
                question_id: a.question.as_ref().map(|q| q.id.clone()),
                sequence: a.sequence,
                created_at: a.created_at,
            })
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("the session has no annotations to report on")]
    NoAnnotations,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    /// Set when the prose overview could not be generated.
    pub overview_error: Option<ProviderError>,
}

/// Markdown report: header, a provider-written overview, one section per
/// theme and the full annotation listing.
///
/// Provider failures only blank the overview; the rest is always produced.
pub fn generate_report(
    session: &Session,
    provider: &dyn CompletionProvider,
    prompt_budget: usize,
) -> Result<Report, ReportError> {
    if session.annotations.is_empty() {
        return Err(ReportError::NoAnnotations);
    }
    let dataset = session.dataset.as_ref().expect("session has a dataset");

    let overview = prompts::serialize_dataset(dataset, prompt_budget)
        .and_then(|text| prompts::render_report(&text, &session.annotations, prompt_budget))
        .map_err(|e| ProviderError::TransportError(format!("report prompt: {e}")))
        .and_then(|prompt| provider.complete(&CompletionRequest::standard(Purpose::Report, prompt)));

    let mut out = String::new();
    let _ = writeln!(out, "# Dataset report: {}\n", dataset.name());
    let _ = writeln!(out, "Rows: {}\n\nColumns:", dataset.row_count());
    for c in dataset.columns() {
        let _ = writeln!(out, "- {} ({})", c.name, c.inferred_type.as_str());
    }
    out.push_str("\n## Overview\n\n");
    let overview_error = match overview {
        Ok(text) => {
            let _ = writeln!(out, "{}", text.trim());
            None
        }
        Err(e) => {
            let _ = writeln!(out, "Overview unavailable ({}).", e.name());
            Some(e)
        }
    };
    out.push_str("\n## Themes\n");
    for p in session.theme_progress() {
        let _ = writeln!(out, "\n### {}\n", p.theme.as_str().replace('_', " "));
        match p.summary_text {
            Some(t) => {
                let _ = writeln!(out, "{}", t.trim());
            }
            None => {
                let _ = writeln!(out, "{NOT_YET_COVERED}");
            }
        }
    }
    out.push_str("\n## Annotations\n\n");
    for a in &session.annotations {
        let _ = writeln!(out, "{}", prompts::format_annotation(a));
    }
    Ok(Report {
        text: out,
        overview_error,
    })
}
