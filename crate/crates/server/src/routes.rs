use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use elicit_core::domain::{
    Annotation, ColumnMeta, Question, QuestionId, Selection, SelectionWire, SessionId, ValidationStage, Verdict,
};
use elicit_core::ingest::{self, parse_tabular, HistogramSpec, ScatterPoint};
use elicit_core::interview::{FollowUpOutcome, Interview};
use elicit_core::questions::refill_enabled;
use elicit_core::session::ThemeProgress;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::state::Services;

pub type AppState = Arc<Services>;

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let limit = state.max_upload_bytes;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/dataset", get(dataset))
        .route("/sessions/{id}/board", get(board))
        .route("/sessions/{id}/board/refill", post(refill))
        .route("/sessions/{id}/questions/{qid}", delete(remove_question))
        .route("/sessions/{id}/questions/{qid}/answer", post(answer))
        .route("/sessions/{id}/annotations", post(annotate).get(annotations))
        .route("/sessions/{id}/columns/{column}/histogram", get(histogram))
        .route("/sessions/{id}/scatter", get(scatter))
        .route("/sessions/{id}/rows-in-range", get(rows_in_range))
        .route("/sessions/{id}/summaries", get(summaries))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/report", post(report))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.auth_token {
        let expected = format!("Bearer {token}");
        let given = request.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

/// Core calls block (file I/O, provider round trips), so they leave the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("request task failed: {e}")))?
}

fn session_path(path: Result<Path<String>, PathRejection>) -> ApiResult<SessionId> {
    let Path(id) = path?;
    Ok(SessionId(id))
}

fn session_and_question(path: Result<Path<(String, String)>, PathRejection>) -> ApiResult<(SessionId, QuestionId)> {
    let Path((id, qid)) = path?;
    Ok((SessionId(id), QuestionId(qid)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: SessionId,
}

async fn create_session(State(state): State<AppState>, mut multipart: Multipart) -> ApiResult<(StatusCode, Json<Created>)> {
    let mut upload = None;
    while let Some(field) = multipart.next_field().await? {
        if field.file_name().is_some() || field.name() == Some("file") {
            let name = field.file_name().unwrap_or("dataset.csv").to_string();
            upload = Some((name, field.bytes().await?));
            break;
        }
    }
    let (name, bytes) = upload.ok_or_else(|| ApiError::bad_request("MissingFile", "expected a multipart file field"))?;
    let id = blocking(move || {
        let dataset = parse_tabular(&bytes, &name, &state.ingest)?;
        state.create_session(dataset)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetView {
    pub name: String,
    pub columns: Vec<ColumnMeta>,
    pub rows: Vec<Vec<String>>,
}

async fn dataset(State(state): State<AppState>, path: Result<Path<String>, PathRejection>) -> ApiResult<Json<DatasetView>> {
    let id = session_path(path)?;
    blocking(move || {
        state.read(&id, |iv| {
            let ds = iv.dataset();
            Ok(Json(DatasetView {
                name: ds.name().to_string(),
                columns: ds.columns().to_vec(),
                rows: ds.rows().iter().map(|r| r.iter().map(|c| c.raw.clone()).collect()).collect(),
            }))
        })
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardView {
    pub questions: Vec<Question>,
    pub refill_enabled: bool,
    pub board_version: u64,
}

impl BoardView {
    fn of(iv: &Interview) -> Self {
        let board = &iv.session().board;
        Self {
            questions: board.slots.clone(),
            refill_enabled: refill_enabled(board),
            board_version: board.version,
        }
    }
}

fn etag(version: u64) -> HeaderValue {
    HeaderValue::from_str(&format!("\"{version}\"")).expect("digits are valid header text")
}

fn board_response(view: BoardView) -> Response {
    let tag = etag(view.board_version);
    ([(header::ETAG, tag)], Json(view)).into_response()
}

async fn board(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let id = session_path(path)?;
    let view = blocking(move || state.read(&id, |iv| Ok(BoardView::of(iv)))).await?;
    let tag = etag(view.board_version);
    if headers.get(header::IF_NONE_MATCH) == Some(&tag) {
        return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, tag)]).into_response());
    }
    Ok(board_response(view))
}

async fn refill(State(state): State<AppState>, path: Result<Path<String>, PathRejection>) -> ApiResult<Response> {
    let id = session_path(path)?;
    let view = blocking(move || {
        state.mutate(&id, |iv, _| {
            iv.refill()?;
            Ok(BoardView::of(iv))
        })
    })
    .await?;
    Ok(board_response(view))
}

async fn remove_question(
    State(state): State<AppState>,
    path: Result<Path<(String, String)>, PathRejection>,
) -> ApiResult<Response> {
    let (id, qid) = session_and_question(path)?;
    let view = blocking(move || {
        state.mutate(&id, |iv, _| {
            iv.remove_question(&qid)?;
            Ok(BoardView::of(iv))
        })
    })
    .await?;
    Ok(board_response(view))
}

#[derive(Debug, Deserialize)]
pub struct AnswerRequest {
    pub text: String,
}

/// Follow-up bookkeeping shared by answers and direct annotations.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowUpView {
    pub follow_ups: Vec<QuestionId>,
    pub replenished: Vec<QuestionId>,
    /// Core error name when follow-up generation failed and was deferred.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<FollowUpOutcome> for FollowUpView {
    fn from(o: FollowUpOutcome) -> Self {
        Self {
            follow_ups: o.follow_ups,
            replenished: o.replenished,
            error: o.error.map(|e| e.name().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub verdict: Verdict,
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<ValidationStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follow_up: Option<FollowUpView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_error: Option<String>,
    pub board_version: u64,
}

async fn answer(
    State(state): State<AppState>,
    path: Result<Path<(String, String)>, PathRejection>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> ApiResult<Json<AnswerResponse>> {
    let (id, qid) = session_and_question(path)?;
    let Json(req) = body?;
    blocking(move || {
        state.mutate(&id, |iv, provider| {
            let out = iv.submit_answer(&qid, &req.text, provider)?;
            Ok(Json(AnswerResponse {
                verdict: out.result.verdict,
                feedback: out.result.feedback,
                stage: out.result.stage,
                annotation: out.annotation,
                follow_up: out.follow_up.map(FollowUpView::from),
                summary_error: out.summary_error.map(|e| e.name().to_string()),
                board_version: iv.session().board.version,
            }))
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct AnnotateRequest {
    /// Omitted means the whole dataset.
    #[serde(default)]
    pub selection: Option<SelectionWire>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateResponse {
    pub annotation: Annotation,
    pub follow_up: FollowUpView,
}

async fn annotate(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    body: Result<Json<AnnotateRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<AnnotateResponse>)> {
    let id = session_path(path)?;
    let Json(req) = body?;
    let selection = match req.selection {
        None => Selection::WholeDataset,
        Some(w) => Selection::try_from(w).map_err(|e| ApiError::bad_request(e.name(), e.to_string()))?,
    };
    let out = blocking(move || state.mutate(&id, |iv, provider| Ok(iv.annotate(selection, &req.text, provider)?))).await?;
    Ok((
        StatusCode::CREATED,
        Json(AnnotateResponse {
            annotation: out.annotation,
            follow_up: out.follow_up.into(),
        }),
    ))
}

async fn annotations(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
) -> ApiResult<Json<Vec<Annotation>>> {
    let id = session_path(path)?;
    blocking(move || state.read(&id, |iv| Ok(Json(iv.session().annotations.clone())))).await
}

#[derive(Debug, Deserialize)]
pub struct HistogramQuery {
    pub bins: Option<usize>,
}

async fn histogram(
    State(state): State<AppState>,
    path: Result<Path<(String, usize)>, PathRejection>,
    query: Result<Query<HistogramQuery>, QueryRejection>,
) -> ApiResult<Json<HistogramSpec>> {
    let Path((id, column)) = path?;
    let Query(q) = query?;
    blocking(move || {
        state.read(&SessionId(id), |iv| {
            let ds = iv.dataset();
            let bins = match q.bins {
                Some(b) => b,
                None => ingest::default_bin_count(ds, column)?,
            };
            Ok(Json(ingest::histogram(ds, column, bins)?))
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct ScatterQuery {
    pub x: usize,
    pub y: usize,
}

async fn scatter(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    query: Result<Query<ScatterQuery>, QueryRejection>,
) -> ApiResult<Json<Vec<ScatterPoint>>> {
    let id = session_path(path)?;
    let Query(q) = query?;
    blocking(move || state.read(&id, |iv| Ok(Json(ingest::scatter_points(iv.dataset(), q.x, q.y)?)))).await
}

#[derive(Debug, Deserialize)]
pub struct RangeQuery {
    pub column: usize,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowIds {
    pub row_ids: Vec<usize>,
}

async fn rows_in_range(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    query: Result<Query<RangeQuery>, QueryRejection>,
) -> ApiResult<Json<RowIds>> {
    let id = session_path(path)?;
    let Query(q) = query?;
    blocking(move || {
        state.read(&id, |iv| {
            Ok(Json(RowIds {
                row_ids: ingest::rows_in_range(iv.dataset(), q.column, q.low, q.high)?,
            }))
        })
    })
    .await
}

async fn summaries(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
) -> ApiResult<Json<Vec<ThemeProgress>>> {
    let id = session_path(path)?;
    blocking(move || state.read(&id, |iv| Ok(Json(iv.session().theme_progress())))).await
}

fn download_name(dataset_name: &str) -> String {
    let stem = dataset_name.rsplit_once('.').map_or(dataset_name, |(s, _)| s);
    let safe: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.annotations.json")
}

async fn export(State(state): State<AppState>, path: Result<Path<String>, PathRejection>) -> ApiResult<Response> {
    let id = session_path(path)?;
    let (name, json) = blocking(move || {
        state.mutate(&id, |iv, _| {
            let doc = iv.export()?;
            Ok((download_name(&doc.dataset.name), doc.to_json()))
        })
    })
    .await?;
    let disposition = HeaderValue::from_str(&format!("attachment; filename=\"{name}\""))
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        json,
    )
        .into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportView {
    pub text: String,
    /// Provider error name when the overview section fell back to a placeholder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overview_error: Option<String>,
}

async fn report(State(state): State<AppState>, path: Result<Path<String>, PathRejection>) -> ApiResult<Json<ReportView>> {
    let id = session_path(path)?;
    blocking(move || {
        state.read(&id, |iv| {
            let r = iv.report(state.provider.as_ref())?;
            Ok(Json(ReportView {
                text: r.text,
                overview_error: r.overview_error.map(|e| e.name().to_string()),
            }))
        })
    })
    .await
}
