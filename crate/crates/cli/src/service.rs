//! Local HTTP/JSON service. One JSON file per contest and per session under the
//! state directory; mutations of a session are serialized by a per-session lock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ballotaudit_core::contest::{read_contest_csv, validate_contest, Contest, ContestSpec};
use ballotaudit_core::discrepancy::HandTally;
use ballotaudit_core::report::session_report;
use ballotaudit_core::session::{AuditSession, SessionConfig, WhatIfRequest};
use ballotaudit_core::AuditError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use crate::args::ServeArgs;
use crate::commands::CliError;
use crate::files::{self, FileError};
use crate::views::{self, ContestSummary};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn not_found(what: &str, id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: format!("no {what} with id {id:?}"),
        }
    }

    fn bad_request(message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message,
        }
    }

    fn conflict(message: String) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            code: "conflict",
            message,
        }
    }
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        use AuditError::*;
        let status = match e {
            AlreadyComplete
            | NoOpenStage
            | StageAlreadyDrawn(_)
            | MissingTallies(_)
            | DuplicateTally(_)
            | NotInSample(_)
            | ExhaustedPopulation { .. } => StatusCode::CONFLICT,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self {
            status,
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl From<FileError> for ApiError {
    fn from(e: FileError) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "storage",
            message: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

struct Store {
    contests_dir: PathBuf,
    sessions_dir: PathBuf,
    contests: RwLock<BTreeMap<String, Arc<Contest>>>,
    /// Serializes contest uploads so the existence check and the write agree.
    contest_upload: Mutex<()>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<AuditSession>>>>,
}

type Shared = Arc<Store>;

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, FileError> {
    let io = |source| FileError::Io {
        path: dir.to_owned(),
        source,
    };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().is_some_and(|e| e == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

impl Store {
    /// Opens (creating if needed) a state directory and loads everything in it.
    /// Any unreadable or tampered file is an error.
    fn open(root: &Path) -> Result<Self, CliError> {
        let contests_dir = root.join("contests");
        let sessions_dir = root.join("sessions");
        for dir in [&contests_dir, &sessions_dir] {
            std::fs::create_dir_all(dir).map_err(|source| FileError::Io {
                path: dir.clone(),
                source,
            })?;
        }
        let mut contests = BTreeMap::new();
        for path in json_files(&contests_dir)? {
            let contest = files::read_contest(&path, None, 1)?;
            contests.insert(contest.id.clone(), Arc::new(contest));
        }
        let mut sessions = BTreeMap::new();
        for path in json_files(&sessions_dir)? {
            let text = std::fs::read_to_string(&path).map_err(|source| FileError::Io {
                path: path.clone(),
                source,
            })?;
            let session = AuditSession::from_json(&text).map_err(|source| FileError::Audit {
                path: path.clone(),
                source,
            })?;
            sessions.insert(session.id().to_string(), Arc::new(Mutex::new(session)));
        }
        Ok(Self {
            contests_dir,
            sessions_dir,
            contests: RwLock::new(contests),
            contest_upload: Mutex::new(()),
            sessions: RwLock::new(sessions),
        })
    }

    fn contest(&self, id: &str) -> ApiResult<Arc<Contest>> {
        self.contests
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("contest", id))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<AuditSession>>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.sessions_dir.join(format!("{id}.json"))
    }
}

async fn write_file(path: PathBuf, contents: String) -> ApiResult<()> {
    tokio::task::spawn_blocking(move || files::write_atomic(&path, &contents))
        .await
        .expect("writer task")?;
    Ok(())
}

/// Contest upload: a contest document, or CSV text with its id and `f`.
#[derive(Deserialize)]
#[serde(untagged)]
enum ContestUpload {
    Csv { contest_id: String, f: u64, csv: String },
    Spec(ContestSpec),
}

fn check_id(id: &str) -> ApiResult<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(ApiError::bad_request(format!(
            "contest id {id:?} must be non-empty ASCII letters, digits, '-', '_' or '.'"
        )))
    }
}

async fn post_contest(State(store): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<ContestSummary>)> {
    let contest = match parse_body::<ContestUpload>(&body)? {
        ContestUpload::Csv { contest_id, f, csv } => read_contest_csv(csv.as_bytes(), &contest_id, f)?,
        ContestUpload::Spec(spec) => validate_contest(spec)?,
    };
    check_id(&contest.id)?;
    let summary = ContestSummary::of(&contest);
    let _upload = store.contest_upload.lock().await;
    {
        let contests = store.contests.read().unwrap();
        if let Some(existing) = contests.get(&contest.id) {
            return if **existing == contest {
                Ok((StatusCode::OK, Json(summary)))
            } else {
                Err(ApiError::conflict(format!("contest {} already exists with different data", contest.id)))
            };
        }
    }
    let path = store.contests_dir.join(format!("{}.json", contest.id));
    write_file(path, contest.to_json()).await?;
    store.contests.write().unwrap().insert(contest.id.clone(), Arc::new(contest));
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn list_contests(State(store): State<Shared>) -> Json<Vec<ContestSummary>> {
    let contests = store.contests.read().unwrap();
    Json(contests.values().map(|c| ContestSummary::of(c)).collect())
}

async fn get_contest(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ContestSpec>> {
    Ok(Json(store.contest(&id)?.to_spec()))
}

#[derive(Deserialize)]
struct CreateSession {
    contest_id: String,
    #[serde(flatten)]
    config: SessionConfig,
}

async fn post_session(State(store): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<views::CreatedView>)> {
    let request: CreateSession = parse_body(&body)?;
    let contest = store.contest(&request.contest_id)?;
    let (session, view) = views::create((*contest).clone(), request.config)?;
    let id = view.session_id.clone();
    let json = session.to_json();
    // Holding the entry's lock until the file is written keeps other requests
    // from seeing an unsaved session.
    let guard = {
        let mut sessions = store.sessions.write().unwrap();
        if sessions.contains_key(&id) {
            return Err(ApiError::conflict(format!(
                "session {id} already exists for this contest and configuration"
            )));
        }
        let entry = Arc::new(Mutex::new(session));
        let guard = entry.clone().try_lock_owned().expect("new lock is free");
        sessions.insert(id.clone(), entry);
        guard
    };
    let saved = write_file(store.session_path(&id), json).await;
    drop(guard);
    if let Err(e) = saved {
        store.sessions.write().unwrap().remove(&id);
        return Err(e);
    }
    Ok((StatusCode::CREATED, Json(view)))
}

/// Applies `step` to a copy of the session under its lock; the copy replaces the
/// original only once it is safely on disk.
async fn mutate<T>(
    store: &Store,
    id: &str,
    step: impl FnOnce(&mut AuditSession) -> Result<T, AuditError>,
) -> ApiResult<T> {
    let entry = store.session(id)?;
    let mut session = entry.lock().await;
    let mut working = session.clone();
    let view = step(&mut working)?;
    write_file(store.session_path(id), working.to_json()).await?;
    *session = working;
    Ok(view)
}

async fn draw(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<views::DrawView>> {
    Ok(Json(mutate(&store, &id, views::draw).await?))
}

#[derive(Deserialize)]
struct TallyUpload {
    tallies: Vec<HandTally>,
}

async fn tallies(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<views::RecordView>> {
    let upload: TallyUpload = parse_body(&body)?;
    Ok(Json(mutate(&store, &id, |s| views::record(s, upload.tallies)).await?))
}

async fn evaluate(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<views::EvaluateView>> {
    Ok(Json(mutate(&store, &id, views::evaluate).await?))
}

async fn what_if(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let request: WhatIfRequest = parse_body(&body)?;
    let entry = store.session(&id)?;
    let session = entry.lock().await;
    Ok(Json(session.what_if(&request)?).into_response())
}

async fn get_session(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let entry = store.session(&id)?;
    let session = entry.lock().await;
    Ok(Json(session.state()).into_response())
}

#[derive(Deserialize)]
struct ReportQuery {
    format: Option<String>,
}

async fn get_report(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<ReportQuery>,
) -> ApiResult<Response> {
    let entry = store.session(&id)?;
    let report = session_report(&*entry.lock().await);
    match query.format.as_deref() {
        None | Some("json") => Ok(Json(report).into_response()),
        Some("text") => Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], report.to_text()).into_response()),
        Some(other) => Err(ApiError::bad_request(format!("unknown report format {other:?}"))),
    }
}

/// The service's routes over the given state directory.
pub fn router(state_dir: &Path, assets: Option<&Path>) -> Result<Router, CliError> {
    let store = Arc::new(Store::open(state_dir)?);
    let api = Router::new()
        .route("/contests", post(post_contest).get(list_contests))
        .route("/contests/{id}", get(get_contest))
        .route("/sessions", post(post_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/draw", post(draw))
        .route("/sessions/{id}/tallies", post(tallies))
        .route("/sessions/{id}/evaluate", post(evaluate))
        .route("/sessions/{id}/what-if", post(what_if))
        .route("/sessions/{id}/report", get(get_report))
        .with_state(store);
    Ok(match assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    })
}

/// Runs the service until interrupted.
pub fn serve_blocking(args: ServeArgs) -> Result<(), CliError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Service(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let app = router(&args.state_dir, args.assets.as_deref())?;
        let address = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&address)
            .await
            .map_err(|e| CliError::Service(format!("cannot listen on {address}: {e}")))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| CliError::Service(e.to_string()))?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Service(format!("server error: {e}")))
    })
}
