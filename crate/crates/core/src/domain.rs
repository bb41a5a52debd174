//! Shared vocabulary: datasets, selections, annotations, questions and themes.

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

id_newtype!(
    /// Content-derived dataset identifier.
    DatasetId
);
id_newtype!(AnnotationId);
id_newtype!(QuestionId);
id_newtype!(
    /// Opaque, unguessable session handle.
    SessionId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Numeric,
    Categorical,
    Datetime,
    Text,
}

impl ColumnType {
    pub fn as_str(self) -> &'static str {
        match self {
            ColumnType::Numeric => "numeric",
            ColumnType::Categorical => "categorical",
            ColumnType::Datetime => "datetime",
            ColumnType::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub inferred_type: ColumnType,
    pub null_count: usize,
}

/// Typed view of a non-null cell in a numeric or datetime column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedValue {
    Number(f64),
    Timestamp(NaiveDateTime),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellValue {
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedValue>,
    pub is_null: bool,
}

impl CellValue {
    pub fn number(&self) -> Option<f64> {
        match self.parsed {
            Some(ParsedValue::Number(v)) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
}

/// Immutable rectangular table. Rows keep their ingest order; selections index into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    id: DatasetId,
    name: String,
    columns: Vec<ColumnMeta>,
    cells: Vec<Vec<CellValue>>,
}

impl Dataset {
    pub fn new(
        id: DatasetId,
        name: impl Into<String>,
        columns: Vec<ColumnMeta>,
        cells: Vec<Vec<CellValue>>,
    ) -> Result<Self, DatasetError> {
        let mut seen = BTreeSet::new();
        for col in &columns {
            if !seen.insert(col.name.trim().to_string()) {
                return Err(DatasetError::DuplicateColumn(col.name.trim().to_string()));
            }
        }
        for (row, cells) in cells.iter().enumerate() {
            if cells.len() != columns.len() {
                return Err(DatasetError::RaggedRow {
                    row,
                    found: cells.len(),
                    expected: columns.len(),
                });
            }
        }
        Ok(Self {
            id,
            name: name.into(),
            columns,
            cells,
        })
    }

    pub fn id(&self) -> &DatasetId {
        &self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<CellValue>] {
        &self.cells
    }

    pub fn cell(&self, row: usize, column: usize) -> Option<&CellValue> {
        self.cells.get(row).and_then(|r| r.get(column))
    }

    pub fn row_count(&self) -> usize {
        self.cells.len()
    }

    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    /// Cells of one column in row order.
    pub fn column_cells(&self, column: usize) -> impl Iterator<Item = &CellValue> + '_ {
        self.cells.iter().map(move |row| &row[column])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    WholeDataset,
    Columns,
    Rows,
    Cells,
    Rectangle,
}

/// Inclusive cell rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    Column,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Row => "row",
            Axis::Column => "column",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectionError {
    #[error("{axis} index {index} is out of bounds")]
    OutOfBounds { index: usize, axis: Axis },
    #[error("selection of kind {0:?} carries no indices")]
    EmptySelection(SelectionKind),
    #[error("selection of kind {kind:?} has an invalid shape: {reason}")]
    InvalidShape { kind: SelectionKind, reason: String },
}

impl SelectionError {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionError::OutOfBounds { .. } => "OutOfBounds",
            SelectionError::EmptySelection(_) => "EmptySelection",
            SelectionError::InvalidShape { .. } => "InvalidShape",
        }
    }
}

/// The region of the dataset an annotation talks about.
///
/// Indices always refer to ingest order, never to a sorted presentation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SelectionWire", into = "SelectionWire")]
pub enum Selection {
    WholeDataset,
    Columns(Vec<usize>),
    Rows(Vec<usize>),
    /// (row, column) pairs.
    Cells(Vec<(usize, usize)>),
    Rectangle(Rect),
}

impl Selection {
    pub fn kind(&self) -> SelectionKind {
        match self {
            Selection::WholeDataset => SelectionKind::WholeDataset,
            Selection::Columns(_) => SelectionKind::Columns,
            Selection::Rows(_) => SelectionKind::Rows,
            Selection::Cells(_) => SelectionKind::Cells,
            Selection::Rectangle(_) => SelectionKind::Rectangle,
        }
    }

    pub fn is_general(&self) -> bool {
        matches!(self, Selection::WholeDataset)
    }

    /// Short human-readable form used inside prompts and reports.
    pub fn describe(&self) -> String {
        fn join(v: &[usize]) -> String {
            v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
        }
        match self {
            Selection::WholeDataset => "whole dataset".to_string(),
            Selection::Columns(c) => format!("columns {}", join(c)),
            Selection::Rows(r) => format!("rows {}", join(r)),
            Selection::Cells(cells) => format!(
                "cells {}",
                cells
                    .iter()
                    .map(|(r, c)| format!("({r},{c})"))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            Selection::Rectangle(r) => format!(
                "rows {}-{} x columns {}-{}",
                r.row_start, r.row_end, r.col_start, r.col_end
            ),
        }
    }
}

/// Flat wire form: `{kind, column_indices, row_indices, rect}`.
///
/// For `cells`, the i-th cell is `(row_indices[i], column_indices[i])`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionWire {
    pub kind: SelectionKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub column_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub row_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<Rect>,
}

impl TryFrom<SelectionWire> for Selection {
    type Error = SelectionError;

    fn try_from(w: SelectionWire) -> Result<Self, Self::Error> {
        let kind = w.kind;
        let shape = |reason: &str| SelectionError::InvalidShape {
            kind,
            reason: reason.to_string(),
        };
        match kind {
            SelectionKind::WholeDataset => {
                if !w.column_indices.is_empty() || !w.row_indices.is_empty() || w.rect.is_some() {
                    return Err(shape("whole_dataset carries no indices"));
                }
                Ok(Selection::WholeDataset)
            }
            SelectionKind::Columns => {
                if !w.row_indices.is_empty() || w.rect.is_some() {
                    return Err(shape("only column_indices allowed"));
                }
                if w.column_indices.is_empty() {
                    return Err(SelectionError::EmptySelection(kind));
                }
                Ok(Selection::Columns(w.column_indices))
            }
            SelectionKind::Rows => {
                if !w.column_indices.is_empty() || w.rect.is_some() {
                    return Err(shape("only row_indices allowed"));
                }
                if w.row_indices.is_empty() {
                    return Err(SelectionError::EmptySelection(kind));
                }
                Ok(Selection::Rows(w.row_indices))
            }
            SelectionKind::Cells => {
                if w.rect.is_some() {
                    return Err(shape("rect not allowed"));
                }
                if w.row_indices.len() != w.column_indices.len() {
                    return Err(shape("row_indices and column_indices must pair up"));
                }
                if w.row_indices.is_empty() {
                    return Err(SelectionError::EmptySelection(kind));
                }
                Ok(Selection::Cells(
                    w.row_indices.into_iter().zip(w.column_indices).collect(),
                ))
            }
            SelectionKind::Rectangle => {
                if !w.column_indices.is_empty() || !w.row_indices.is_empty() {
                    return Err(shape("only rect allowed"));
                }
                let rect = w.rect.ok_or(SelectionError::EmptySelection(kind))?;
                if rect.row_start > rect.row_end || rect.col_start > rect.col_end {
                    return Err(SelectionError::EmptySelection(kind));
                }
                Ok(Selection::Rectangle(rect))
            }
        }
    }
}

impl From<Selection> for SelectionWire {
    fn from(s: Selection) -> Self {
        let kind = s.kind();
        let mut w = SelectionWire {
            kind,
            column_indices: Vec::new(),
            row_indices: Vec::new(),
            rect: None,
        };
        match s {
            Selection::WholeDataset => {}
            Selection::Columns(c) => w.column_indices = c,
            Selection::Rows(r) => w.row_indices = r,
            Selection::Cells(cells) => {
                let (rows, cols) = cells.into_iter().unzip();
                w.row_indices = rows;
                w.column_indices = cols;
            }
            Selection::Rectangle(r) => w.rect = Some(r),
        }
        w
    }
}

/// Checks shape rules and bounds; returns the selection unchanged when valid.
pub fn validate_selection(
    selection: Selection,
    row_count: usize,
    column_count: usize,
) -> Result<Selection, SelectionError> {
    let row = |index: usize| {
        if index < row_count {
            Ok(())
        } else {
            Err(SelectionError::OutOfBounds {
                index,
                axis: Axis::Row,
            })
        }
    };
    let col = |index: usize| {
        if index < column_count {
            Ok(())
        } else {
            Err(SelectionError::OutOfBounds {
                index,
                axis: Axis::Column,
            })
        }
    };
    match &selection {
        Selection::WholeDataset => {}
        Selection::Columns(c) => {
            if c.is_empty() {
                return Err(SelectionError::EmptySelection(SelectionKind::Columns));
            }
            c.iter().try_for_each(|&i| col(i))?;
        }
        Selection::Rows(r) => {
            if r.is_empty() {
                return Err(SelectionError::EmptySelection(SelectionKind::Rows));
            }
            r.iter().try_for_each(|&i| row(i))?;
        }
        Selection::Cells(cells) => {
            if cells.is_empty() {
                return Err(SelectionError::EmptySelection(SelectionKind::Cells));
            }
            for &(r, c) in cells {
                row(r)?;
                col(c)?;
            }
        }
        Selection::Rectangle(rect) => {
            if rect.row_start > rect.row_end || rect.col_start > rect.col_end {
                return Err(SelectionError::EmptySelection(SelectionKind::Rectangle));
            }
            row(rect.row_end)?;
            col(rect.col_end)?;
        }
    }
    Ok(selection)
}

/// Sorted, de-duplicated (row, column) coordinates covered by a validated selection.
///
/// `WholeDataset` yields an empty list; highlighting everything is left to the client.
pub fn selection_instances(selection: &Selection, dataset: &Dataset) -> Vec<(usize, usize)> {
    let rows = dataset.row_count();
    let cols = dataset.column_count();
    let mut out: BTreeSet<(usize, usize)> = BTreeSet::new();
    match selection {
        Selection::WholeDataset => {}
        Selection::Columns(c) => {
            for &ci in c {
                out.extend((0..rows).map(|r| (r, ci)));
            }
        }
        Selection::Rows(r) => {
            for &ri in r {
                out.extend((0..cols).map(|c| (ri, c)));
            }
        }
        Selection::Cells(cells) => out.extend(cells.iter().copied()),
        Selection::Rectangle(rect) => {
            for r in rect.row_start..=rect.row_end {
                for c in rect.col_start..=rect.col_end {
                    out.insert((r, c));
                }
            }
        }
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationOrigin {
    Direct,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: AnnotationId,
    pub selection: Selection,
    pub text: String,
    pub origin: AnnotationOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<QuestionId>,
    pub sequence: u64,
    pub created_at: DateTime<Utc>,
}

impl Annotation {
    pub fn is_general(&self) -> bool {
        self.selection.is_general()
    }
}

/// The seven metadata genres used to organise predefined questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThemeId {
    Motivation,
    Composition,
    CollectionProcess,
    Preprocessing,
    Uses,
    Distribution,
    Maintenance,
}

impl ThemeId {
    pub const ALL: [ThemeId; 7] = [
        ThemeId::Motivation,
        ThemeId::Composition,
        ThemeId::CollectionProcess,
        ThemeId::Preprocessing,
        ThemeId::Uses,
        ThemeId::Distribution,
        ThemeId::Maintenance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ThemeId::Motivation => "motivation",
            ThemeId::Composition => "composition",
            ThemeId::CollectionProcess => "collection_process",
            ThemeId::Preprocessing => "preprocessing",
            ThemeId::Uses => "uses",
            ThemeId::Distribution => "distribution",
            ThemeId::Maintenance => "maintenance",
        }
    }

    pub fn parse(s: &str) -> Option<ThemeId> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        ThemeId::ALL.into_iter().find(|t| t.as_str() == norm)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ThemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionOrigin {
    Predefined,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStatus {
    Pooled,
    Displayed,
    Answered,
    Removed,
}

impl QuestionStatus {
    /// pooled -> displayed -> (answered | removed); nothing comes back.
    pub fn can_transition_to(self, next: QuestionStatus) -> bool {
        use QuestionStatus::*;
        matches!(
            (self, next),
            (Pooled, Displayed) | (Displayed, Answered) | (Displayed, Removed)
        )
    }
}

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: QuestionId,
    pub text: String,
    pub origin: QuestionOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theme: Option<ThemeId>,
    pub status: QuestionStatus,
    pub originality: u8,
    pub recency: u8,
    pub importance: u8,
    /// Set when the importance rating fell back to the default after a provider failure.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub importance_degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_annotation_id: Option<AnnotationId>,
}

impl Question {
    pub fn predefined(id: QuestionId, theme: ThemeId, text: impl Into<String>) -> Self {
        Self {
            id,
            text: text.into(),
            origin: QuestionOrigin::Predefined,
            theme: Some(theme),
            status: QuestionStatus::Pooled,
            originality: MAX_SCORE,
            recency: MAX_SCORE,
            importance: 3,
            importance_degraded: false,
            trigger_annotation_id: None,
        }
    }

    pub fn generated(id: QuestionId, text: impl Into<String>, theme: Option<ThemeId>) -> Self {
        Self {
            id,
            text: text.into(),
            origin: QuestionOrigin::Generated,
            theme,
            status: QuestionStatus::Pooled,
            originality: MAX_SCORE,
            recency: MAX_SCORE,
            importance: 3,
            importance_degraded: false,
            trigger_annotation_id: None,
        }
    }

    /// Moves to `next`, panicking on an illegal lifecycle step.
    pub(crate) fn transition(&mut self, next: QuestionStatus) {
        assert!(
            self.status.can_transition_to(next),
            "illegal question transition {:?} -> {:?} for {}",
            self.status,
            next,
            self.id
        );
        self.status = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStage {
    Faithfulness,
    Contradiction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub verdict: Verdict,
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<ValidationStage>,
}

impl ValidationResult {
    pub fn accepted() -> Self {
        Self {
            verdict: Verdict::Accepted,
            feedback: String::new(),
            stage: None,
        }
    }

    /// Empty feedback is never allowed on a rejection.
    pub fn rejected(stage: ValidationStage, feedback: impl Into<String>) -> Self {
        let mut feedback = feedback.into();
        if feedback.trim().is_empty() {
            feedback = crate::prompts::GENERIC_REJECTION_FEEDBACK.to_string();
        }
        Self {
            verdict: Verdict::Rejected,
            feedback,
            stage: Some(stage),
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }
}
