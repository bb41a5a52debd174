//! Tabular ingestion, column type inference and the statistics behind the
//! histogram, scatterplot and cross-filter views.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{CellValue, ColumnMeta, ColumnType, Dataset, DatasetError, DatasetId, ParsedValue};

pub const DEFAULT_MAX_ROWS: usize = 10_000;
pub const DEFAULT_MAX_COLUMNS: usize = 20;
pub const DEFAULT_BIN_COUNT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub max_rows: usize,
    pub max_columns: usize,
    pub null_tokens: Vec<String>,
    pub delimiter: char,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            max_rows: DEFAULT_MAX_ROWS,
            max_columns: DEFAULT_MAX_COLUMNS,
            null_tokens: ["", "NA", "N/A", "null"].map(String::from).to_vec(),
            delimiter: ',',
        }
    }
}

impl IngestConfig {
    pub fn is_null(&self, raw: &str) -> bool {
        raw.is_empty() || self.null_tokens.iter().any(|t| t == raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitKind {
    Rows,
    Columns,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("too many {kind:?}: limit is {limit}")]
    LimitExceeded { kind: LimitKind, limit: usize },
    #[error("row {0} does not have the same number of fields as the header")]
    RaggedRow(usize),
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("input is not valid UTF-8 delimited text: {0}")]
    DecodeError(String),
    #[error("input has no header row")]
    MissingHeader,
    #[error("invalid ingest configuration: {0}")]
    InvalidConfig(String),
}

impl IngestError {
    pub fn name(&self) -> &'static str {
        match self {
            IngestError::LimitExceeded { .. } => "LimitExceeded",
            IngestError::RaggedRow(_) => "RaggedRow",
            IngestError::DuplicateColumn(_) => "DuplicateColumn",
            IngestError::DecodeError(_) => "DecodeError",
            IngestError::MissingHeader => "MissingHeader",
            IngestError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

impl From<DatasetError> for IngestError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::RaggedRow { row, .. } => IngestError::RaggedRow(row),
            DatasetError::DuplicateColumn(n) => IngestError::DuplicateColumn(n),
        }
    }
}

/// Parses delimited UTF-8 text with a header row into a typed [`Dataset`].
///
/// Field contents are kept exactly as written apart from quote unescaping.
/// Data rows are numbered from 0 in errors.
pub fn parse_tabular(bytes: &[u8], name: &str, config: &IngestConfig) -> Result<Dataset, IngestError> {
    if config.max_rows == 0 || config.max_columns == 0 {
        return Err(IngestError::InvalidConfig("limits must be at least 1".into()));
    }
    if !config.delimiter.is_ascii() {
        return Err(IngestError::InvalidConfig("delimiter must be a single ASCII character".into()));
    }
    let text = std::str::from_utf8(bytes).map_err(|e| IngestError::DecodeError(e.to_string()))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(config.delimiter as u8)
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let header = match records.next() {
        None => return Err(IngestError::MissingHeader),
        Some(r) => r.map_err(|e| IngestError::DecodeError(e.to_string()))?,
    };
    if header.len() > config.max_columns {
        return Err(IngestError::LimitExceeded {
            kind: LimitKind::Columns,
            limit: config.max_columns,
        });
    }
    let names: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    let mut seen = BTreeSet::new();
    for n in &names {
        if !seen.insert(n.as_str()) {
            return Err(IngestError::DuplicateColumn(n.clone()));
        }
    }

    let mut raw_rows: Vec<Vec<String>> = Vec::new();
    for (row, record) in records.enumerate() {
        let record = record.map_err(|e| IngestError::DecodeError(e.to_string()))?;
        if row >= config.max_rows {
            return Err(IngestError::LimitExceeded {
                kind: LimitKind::Rows,
                limit: config.max_rows,
            });
        }
        if record.len() != names.len() {
            return Err(IngestError::RaggedRow(row));
        }
        raw_rows.push(record.iter().map(String::from).collect());
    }

    let mut columns = Vec::with_capacity(names.len());
    for (c, name) in names.into_iter().enumerate() {
        let values: Vec<&str> = raw_rows.iter().map(|r| r[c].as_str()).collect();
        let inferred_type = infer_column_type(&values, config);
        let null_count = values.iter().filter(|v| config.is_null(v)).count();
        columns.push(ColumnMeta {
            name,
            inferred_type,
            null_count,
        });
    }

    let cells = raw_rows
        .into_iter()
        .map(|row| {
            row.into_iter()
                .enumerate()
                .map(|(c, raw)| make_cell(raw, columns[c].inferred_type, config))
                .collect()
        })
        .collect();

    let digest = Sha256::digest(bytes);
    let id = DatasetId(format!(
        "ds-{}",
        digest[..8].iter().map(|b| format!("{b:02x}")).collect::<String>()
    ));
    Ok(Dataset::new(id, name, columns, cells)?)
}

fn make_cell(raw: String, ty: ColumnType, config: &IngestConfig) -> CellValue {
    let is_null = config.is_null(&raw);
    let parsed = if is_null {
        None
    } else {
        match ty {
            ColumnType::Numeric => parse_number(&raw).map(ParsedValue::Number),
            ColumnType::Datetime => parse_timestamp(&raw).map(ParsedValue::Timestamp),
            _ => None,
        }
    };
    CellValue { raw, parsed, is_null }
}

fn number_grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$").unwrap())
}

/// Finite decimal number, surrounding whitespace ignored. `inf`/`NaN` are text.
pub fn parse_number(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if !number_grammar().is_match(s) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// ISO-8601 calendar date or date-time (with optional fraction and offset).
/// Offsets are normalised to UTC.
pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let s = raw.trim();
    if s.len() == 10 {
        return NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0));
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        if s.as_bytes().get(10) == Some(&b'T') {
            return Some(dt.naive_utc());
        }
        return None;
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
}

/// Type of a column from its raw values: numeric, then datetime, then
/// categorical when distinct values ≤ max(20, 5% of non-null), else text.
pub fn infer_column_type<S: AsRef<str>>(values: &[S], config: &IngestConfig) -> ColumnType {
    let non_null: Vec<&str> = values
        .iter()
        .map(AsRef::as_ref)
        .filter(|v| !config.is_null(v))
        .collect();
    if non_null.is_empty() {
        return ColumnType::Text;
    }
    if non_null.iter().all(|v| parse_number(v).is_some()) {
        return ColumnType::Numeric;
    }
    if non_null.iter().all(|v| parse_timestamp(v).is_some()) {
        return ColumnType::Datetime;
    }
    let distinct: BTreeSet<&str> = non_null.iter().copied().collect();
    let threshold = 20usize.max(non_null.len() * 5 / 100);
    if distinct.len() <= threshold {
        ColumnType::Categorical
    } else {
        ColumnType::Text
    }
}

/// Writes one record back in delimited form, quoting only where needed.
pub fn write_record<S: AsRef<[u8]>>(fields: &[S], delimiter: char) -> String {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter as u8)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields).expect("writing to memory");
    let mut out = String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 in, utf-8 out");
    if out.ends_with('\n') {
        out.pop();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("column {0} does not exist")]
    UnknownColumn(usize),
    #[error("column {0} is not numeric")]
    NonNumericColumn(usize),
    #[error("column {0} has no non-null values")]
    EmptyColumn(usize),
    #[error("bin count must be at least 1")]
    InvalidBinCount,
    #[error("range low {low} exceeds high {high}")]
    InvalidRange { low: f64, high: f64 },
}

impl StatsError {
    pub fn name(&self) -> &'static str {
        match self {
            StatsError::UnknownColumn(_) => "UnknownColumn",
            StatsError::NonNumericColumn(_) => "NonNumericColumn",
            StatsError::EmptyColumn(_) => "EmptyColumn",
            StatsError::InvalidBinCount => "InvalidBinCount",
            StatsError::InvalidRange { .. } => "InvalidRange",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub column_index: usize,
    pub bin_count: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub matching_row_ids: Vec<Vec<usize>>,
}

impl HistogramSpec {
    /// Half-open bins, the last one closed on the right.
    pub fn bin_contains(&self, bin: usize, value: f64) -> bool {
        let lo = self.bin_edges[bin];
        let hi = self.bin_edges[bin + 1];
        if bin + 1 == self.bin_count {
            lo <= value && value <= hi
        } else {
            lo <= value && value < hi
        }
    }
}

fn numeric_column(dataset: &Dataset, column: usize) -> Result<Vec<(usize, f64)>, StatsError> {
    let meta = dataset
        .columns()
        .get(column)
        .ok_or(StatsError::UnknownColumn(column))?;
    if meta.inferred_type != ColumnType::Numeric {
        return Err(StatsError::NonNumericColumn(column));
    }
    Ok(dataset
        .column_cells(column)
        .enumerate()
        .filter_map(|(row, cell)| cell.number().map(|v| (row, v)))
        .collect())
}

/// Default bin count for a column: 20, clamped to the number of distinct values.
pub fn default_bin_count(dataset: &Dataset, column: usize) -> Result<usize, StatsError> {
    let values = numeric_column(dataset, column)?;
    let distinct: BTreeSet<u64> = values.iter().map(|(_, v)| v.to_bits()).collect();
    Ok(DEFAULT_BIN_COUNT.min(distinct.len()).max(1))
}

/// Equal-width histogram over [min, max] of the non-null values.
///
/// When every value is equal the result is a single bin `[v - 0.5, v + 0.5]`.
pub fn histogram(dataset: &Dataset, column: usize, bin_count: usize) -> Result<HistogramSpec, StatsError> {
    if bin_count == 0 {
        return Err(StatsError::InvalidBinCount);
    }
    let values = numeric_column(dataset, column)?;
    if values.is_empty() {
        return Err(StatsError::EmptyColumn(column));
    }
    let min = values.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let max = values.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);

    let (bin_count, edges) = if min == max {
        (1, vec![min - 0.5, max + 0.5])
    } else {
        let width = (max - min) / bin_count as f64;
        let mut edges: Vec<f64> = (0..bin_count).map(|i| min + width * i as f64).collect();
        edges.push(max);
        (bin_count, edges)
    };

    let mut counts = vec![0usize; bin_count];
    let mut matching = vec![Vec::new(); bin_count];
    let last = bin_count - 1;
    for (row, v) in values {
        let mut bin = if bin_count == 1 {
            0
        } else {
            (((v - min) / (max - min)) * bin_count as f64).floor() as usize
        };
        bin = bin.min(last);
        // Snap to the edge list so membership agrees with the stored edges exactly.
        while bin > 0 && v < edges[bin] {
            bin -= 1;
        }
        while bin < last && v >= edges[bin + 1] {
            bin += 1;
        }
        counts[bin] += 1;
        matching[bin].push(row);
    }

    Ok(HistogramSpec {
        column_index: column,
        bin_count,
        bin_edges: edges,
        counts,
        matching_row_ids: matching,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub row_id: usize,
    pub x: f64,
    pub y: f64,
}

/// One point per row where both cells are non-null, in row order.
pub fn scatter_points(dataset: &Dataset, col_x: usize, col_y: usize) -> Result<Vec<ScatterPoint>, StatsError> {
    numeric_column(dataset, col_x)?;
    numeric_column(dataset, col_y)?;
    Ok(dataset
        .rows()
        .iter()
        .enumerate()
        .filter_map(|(row_id, row)| {
            Some(ScatterPoint {
                row_id,
                x: row[col_x].number()?,
                y: row[col_y].number()?,
            })
        })
        .collect())
}

/// Rows whose value v satisfies `low <= v <= high`, ascending.
pub fn rows_in_range(dataset: &Dataset, column: usize, low: f64, high: f64) -> Result<Vec<usize>, StatsError> {
    if low > high || low.is_nan() || high.is_nan() {
        return Err(StatsError::InvalidRange { low, high });
    }
    Ok(numeric_column(dataset, column)?
        .into_iter()
        .filter(|(_, v)| low <= *v && *v <= high)
        .map(|(row, _)| row)
        .collect())
}
