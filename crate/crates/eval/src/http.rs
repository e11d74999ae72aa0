//! HTTP+JSON front of the evaluation state.
//!
//! `POST /session`, `GET /pair?token=`, `POST /vote`, `GET /stats?competitor=`,
//! plus `GET /video/{pair_id}/{side}?token=` for the pending pair's videos.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::EvalError;
use crate::gsb::{round2, Choice, GsbTally};
use crate::state::{EvalState, Side};

pub type Shared = Arc<Mutex<EvalState>>;

impl IntoResponse for EvalError {
    fn into_response(self) -> Response {
        let status = match &self {
            EvalError::UnknownSession | EvalError::UnknownPair(_) => StatusCode::NOT_FOUND,
            EvalError::NotAssigned(_) | EvalError::DuplicateVote(_) => StatusCode::CONFLICT,
            EvalError::Exhausted => StatusCode::GONE,
            EvalError::UndefinedRatio => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, EvalError>;

fn lock(state: &Shared) -> std::sync::MutexGuard<'_, EvalState> {
    state.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Deserialize)]
pub struct TokenQuery {
    pub token: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VoteRequest {
    pub token: String,
    pub pair_id: String,
    pub choice: Choice,
}

#[derive(Debug, Deserialize)]
pub struct StatsQuery {
    pub competitor: Option<String>,
}

/// Wire form of a tally.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsBody {
    pub competitor: String,
    #[serde(rename = "G")]
    pub good: u64,
    #[serde(rename = "S")]
    pub same: u64,
    #[serde(rename = "B")]
    pub bad: u64,
    /// Full precision; `null` when `B + S = 0`.
    pub ratio: Option<f64>,
    pub ratio_rounded: Option<f64>,
}

impl From<GsbTally> for StatsBody {
    fn from(t: GsbTally) -> Self {
        let ratio = t.ratio();
        Self {
            competitor: t.competitor,
            good: t.good,
            same: t.same,
            bad: t.bad,
            ratio,
            ratio_rounded: ratio.map(round2),
        }
    }
}

async fn create_session(State(s): State<Shared>) -> ApiResult<Json<serde_json::Value>> {
    let token = lock(&s).create_session()?;
    Ok(Json(json!({ "token": token })))
}

async fn pair(State(s): State<Shared>, Query(q): Query<TokenQuery>) -> ApiResult<impl IntoResponse> {
    let p = lock(&s).assign_pair(&q.token)?;
    Ok(Json(p))
}

async fn vote(State(s): State<Shared>, Json(v): Json<VoteRequest>) -> ApiResult<Json<serde_json::Value>> {
    let mut st = lock(&s);
    st.record_vote(&v.token, &v.pair_id, v.choice)?;
    Ok(Json(json!({
        "recorded": true,
        "votes": st.votes_by(&v.token)?,
        "remaining": st.remaining(&v.token)?,
    })))
}

async fn stats(State(s): State<Shared>, Query(q): Query<StatsQuery>) -> Response {
    let st = lock(&s);
    match q.competitor {
        Some(c) => Json(StatsBody::from(st.stats(&c))).into_response(),
        None => Json(st.all_stats().into_iter().map(StatsBody::from).collect::<Vec<_>>()).into_response(),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("mp4") => "video/mp4",
        Some("webm") => "video/webm",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    }
}

fn file_response(path: &Path) -> ApiResult<Response> {
    let bytes = std::fs::read(path)?;
    Ok(([(header::CONTENT_TYPE, content_type(path))], bytes).into_response())
}

fn frame_files(dir: &Path) -> ApiResult<Vec<std::path::PathBuf>> {
    let mut frames: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    frames.sort();
    Ok(frames)
}

/// A file asset is served directly; a frame-sequence directory is listed
/// as frame URLs.
async fn video(
    State(s): State<Shared>,
    UrlPath((pair_id, side)): UrlPath<(String, Side)>,
    Query(q): Query<TokenQuery>,
) -> ApiResult<Response> {
    let path = lock(&s).asset(&q.token, &pair_id, side)?.to_path_buf();
    if path.is_dir() {
        let n = frame_files(&path)?.len();
        let side = serde_json::to_value(side)?;
        let side = side.as_str().unwrap_or_default();
        let urls: Vec<String> = (0..n)
            .map(|i| format!("/video/{pair_id}/{side}/{i}?token={}", q.token))
            .collect();
        return Ok(Json(json!({ "frames": urls })).into_response());
    }
    file_response(&path)
}

async fn video_frame(
    State(s): State<Shared>,
    UrlPath((pair_id, side, index)): UrlPath<(String, Side, usize)>,
    Query(q): Query<TokenQuery>,
) -> ApiResult<Response> {
    let path = lock(&s).asset(&q.token, &pair_id, side)?.to_path_buf();
    let frames = frame_files(&path)?;
    match frames.get(index) {
        Some(f) => file_response(f),
        None => Ok((StatusCode::NOT_FOUND, Json(json!({ "error": "no such frame" }))).into_response()),
    }
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/pair", get(pair))
        .route("/vote", post(vote))
        .route("/stats", get(stats))
        .route("/video/{pair_id}/{side}", get(video))
        .route("/video/{pair_id}/{side}/{index}", get(video_frame))
        .with_state(state)
}

pub async fn serve(state: EvalState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("evaluation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(Mutex::new(state)))).await
}
