use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{middleware, Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gensim_core::agent::MemoryRecord;
use gensim_core::correction::{
    export_reward_dataset, export_sft_dataset, trigger_external_finetune, FeedbackSource,
    FinetuneMethod, RevisionFeedback, ScoreFeedback,
};
use gensim_core::environment::InterviewExchange;
use gensim_core::scheduler::ActionEvent;
use gensim_core::{AgentId, AgentProfile, Intervention, Simulation, SimulationConfig};

use super::error::ApiError;
use super::registry::{SimEntry, SimulationHandle, Status};
use super::{idempotency, AppState};

type ApiResult<T> = Result<T, ApiError>;

const DEFAULT_PAGE: usize = 50;
const RECENT_EVENTS: usize = 20;
const SSE_BATCH: usize = 512;

pub(super) fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/simulations", post(create).get(list))
        .route("/simulations/{id}", get(show))
        .route("/simulations/{id}/run", post(run))
        .route("/simulations/{id}/pause", post(pause))
        .route("/simulations/{id}/stop", post(stop))
        .route("/simulations/{id}/checkpoint", post(checkpoint))
        .route("/simulations/{id}/agents", get(agents))
        .route("/simulations/{id}/agents/{aid}", get(agent_in))
        .route("/simulations/{id}/agents/{aid}/interview", post(interview_in))
        .route("/simulations/{id}/events", get(events))
        .route("/simulations/{id}/interventions", post(intervene))
        .route("/agents/{aid}", get(agent))
        .route("/agents/{aid}/interview", post(interview))
        .route("/feedback", get(feedback))
        .route("/feedback/score", post(score))
        .route("/feedback/revision", post(revise))
        .route("/export/{kind}", post(export))
        .route("/finetune", post(finetune))
        .fallback(|| async { ApiError::not_found("no such route") })
        .method_not_allowed_fallback(|| async { ApiError::conflict("method not allowed on this route") })
        .layer(middleware::from_fn_with_state(state.clone(), idempotency::middleware))
        .with_state(state)
}

/// JSON body whose rejections are [`ApiError`]s.
struct Body<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        Ok(Body(Json::<T>::from_request(req, state).await?.0))
    }
}

/// Like [`Body`] but an empty body means `T::default()`.
fn optional_body<T: DeserializeOwned + Default>(bytes: &Bytes) -> ApiResult<T> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::invalid(e.to_string()))
}

fn query<T: DeserializeOwned>(q: Result<Query<T>, axum::extract::rejection::QueryRejection>) -> ApiResult<T> {
    Ok(q?.0)
}

/// Run blocking engine work off the async executor.
async fn blocking<R: Send + 'static>(f: impl FnOnce() -> R + Send + 'static) -> ApiResult<R> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::backend(e.to_string()))
}

async fn create(State(st): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<impl IntoResponse> {
    let text = std::str::from_utf8(&bytes).map_err(|e| ApiError::invalid(e.to_string()))?;
    let config = SimulationConfig::from_json(text)?;
    let sim = blocking(move || Simulation::new(config)).await??;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let entry = st.insert(SimEntry::new(id, sim));
    Ok((StatusCode::CREATED, Json(entry.handle())))
}

async fn list(State(st): State<Arc<AppState>>) -> Json<Vec<SimulationHandle>> {
    Json(st.sims.read().values().map(|e| e.handle()).collect())
}

async fn show(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SimulationHandle>> {
    Ok(Json(st.simulation(&id)?.handle()))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunRequest {
    /// Rounds to run now; defaults to all remaining.
    #[serde(default)]
    pub rounds: Option<u64>,
}

async fn run(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: RunRequest = optional_body(&bytes)?;
    let entry = st.simulation(&id)?;
    Ok((StatusCode::ACCEPTED, Json(entry.start(req.rounds)?)))
}

async fn pause(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SimulationHandle>> {
    Ok(Json(st.simulation(&id)?.halt(Status::Paused).await?))
}

async fn stop(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SimulationHandle>> {
    Ok(Json(st.simulation(&id)?.halt(Status::Stopped).await?))
}

async fn checkpoint(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let entry = st.simulation(&id)?;
    let dir = st.data_dir.clone();
    let path = blocking(move || {
        entry.with_sim(|sim| {
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}-round{}.ckpt.jsonl", entry.id, sim.round()));
            sim.checkpoint(&path)?;
            Ok::<_, gensim_core::SimulationError>(path)
        })
    })
    .await??;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "path": path }))))
}

#[derive(Debug, Deserialize)]
struct AgentQuery {
    #[serde(default)]
    q: String,
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentPage {
    pub total: usize,
    pub offset: usize,
    pub items: Vec<AgentProfile>,
}

async fn agents(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    q: Result<Query<AgentQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<AgentPage>> {
    let q = query(q)?;
    let entry = st.simulation(&id)?;
    let page = blocking(move || {
        entry.with_sim(|sim| {
            let found = sim.search(&q.q);
            AgentPage {
                total: found.len(),
                offset: q.offset,
                items: found
                    .into_iter()
                    .skip(q.offset)
                    .take(q.limit.unwrap_or(DEFAULT_PAGE))
                    .cloned()
                    .collect(),
            }
        })
    })
    .await?;
    Ok(Json(page))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentDetail {
    pub simulation_id: String,
    pub profile: AgentProfile,
    pub short_term: Vec<MemoryRecord>,
    pub recent_events: Vec<ActionEvent>,
}

#[derive(Debug, Default, Deserialize)]
struct Target {
    simulation_id: Option<String>,
}

async fn agent_detail(entry: Arc<SimEntry>, aid: u64) -> ApiResult<Json<AgentDetail>> {
    let e = entry.clone();
    let found = blocking(move || {
        e.with_sim(|sim| {
            sim.agent(AgentId(aid))
                .map(|a| (a.profile.clone(), a.memory.short_term().cloned().collect::<Vec<_>>()))
        })
    })
    .await?;
    let (profile, short_term) = found.ok_or_else(|| ApiError::not_found(format!("agent {aid} not found")))?;
    Ok(Json(AgentDetail {
        simulation_id: entry.id.clone(),
        profile,
        short_term,
        recent_events: entry.agent_events(aid, RECENT_EVENTS),
    }))
}

async fn agent(
    State(st): State<Arc<AppState>>,
    Path(aid): Path<u64>,
    q: Result<Query<Target>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<AgentDetail>> {
    let t = query(q)?;
    agent_detail(st.simulation_or_latest(t.simulation_id.as_deref())?, aid).await
}

async fn agent_in(
    State(st): State<Arc<AppState>>,
    Path((id, aid)): Path<(String, u64)>,
) -> ApiResult<Json<AgentDetail>> {
    agent_detail(st.simulation(&id)?, aid).await
}

#[derive(Debug, Deserialize)]
struct InterviewRequest {
    question: String,
    #[serde(default)]
    simulation_id: Option<String>,
}

async fn do_interview(entry: Arc<SimEntry>, aid: u64, question: String) -> ApiResult<Json<InterviewExchange>> {
    if question.trim().is_empty() {
        return Err(ApiError::invalid("question must not be empty").with_field("question"));
    }
    let ex = blocking(move || entry.with_sim(|sim| sim.interview(AgentId(aid), &question))).await??;
    Ok(Json(ex))
}

async fn interview(
    State(st): State<Arc<AppState>>,
    Path(aid): Path<u64>,
    Body(req): Body<InterviewRequest>,
) -> ApiResult<Json<InterviewExchange>> {
    let entry = st.simulation_or_latest(req.simulation_id.as_deref())?;
    do_interview(entry, aid, req.question).await
}

async fn interview_in(
    State(st): State<Arc<AppState>>,
    Path((id, aid)): Path<(String, u64)>,
    Body(req): Body<InterviewRequest>,
) -> ApiResult<Json<InterviewExchange>> {
    do_interview(st.simulation(&id)?, aid, req.question).await
}

#[derive(Debug, Default, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from_seq: u64,
}

/// Replay of the log after `from_seq` (or the `Last-Event-ID` header, if
/// later), then a live tail. Closes once a stopped or finished simulation
/// has been fully sent.
async fn events(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    q: Result<Query<EventsQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let q = query(q)?;
    let entry = st.simulation(&id)?;
    let last_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(0);
    let cursor = q.from_seq.max(last_id);
    let rx = entry.subscribe();

    let batches = stream::unfold((entry, rx, cursor), |(entry, mut rx, cursor)| async move {
        loop {
            rx.borrow_and_update();
            let done = entry.status().is_terminal();
            let batch = entry.events_after(cursor, SSE_BATCH);
            if let Some(last) = batch.last() {
                let next = last.seq;
                let frames: Vec<Result<Event, Infallible>> = batch
                    .iter()
                    .map(|e| Ok(Event::default().id(e.seq.to_string()).event("action").data(e.to_json_line())))
                    .collect();
                return Some((stream::iter(frames), (entry, rx, next)));
            }
            if done || rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Sse::new(batches.flatten()).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

async fn intervene(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body(i): Body<Intervention>,
) -> ApiResult<impl IntoResponse> {
    let entry = st.simulation(&id)?;
    if entry.status().is_terminal() {
        return Err(ApiError::conflict("simulation has ended"));
    }
    entry.queue().submit(i.clone())?;
    Ok((
        StatusCode::ACCEPTED,
        Json(serde_json::json!({ "accepted": true, "intervention": i })),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    #[serde(default)]
    pub simulation_id: Option<String>,
    pub event_seq: u64,
    pub s: f64,
    #[serde(default = "human")]
    pub source: FeedbackSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevisionRequest {
    #[serde(default)]
    pub simulation_id: Option<String>,
    pub event_seq: u64,
    pub a_prime: String,
    #[serde(default = "human")]
    pub source: FeedbackSource,
}

fn human() -> FeedbackSource {
    FeedbackSource::Human
}

fn find_event(st: &AppState, sim: Option<&str>, seq: u64) -> ApiResult<ActionEvent> {
    st.simulation_or_latest(sim)?
        .event(seq)
        .ok_or_else(|| ApiError::not_found(format!("event {seq} not found")))
}

async fn score(State(st): State<Arc<AppState>>, Body(req): Body<ScoreRequest>) -> ApiResult<impl IntoResponse> {
    let event = find_event(&st, req.simulation_id.as_deref(), req.event_seq)?;
    let f = ScoreFeedback::new(&event, req.s, req.source)?;
    st.feedback.add_score(f.clone())?;
    Ok((StatusCode::CREATED, Json(f)))
}

async fn revise(
    State(st): State<Arc<AppState>>,
    Body(req): Body<RevisionRequest>,
) -> ApiResult<impl IntoResponse> {
    let event = find_event(&st, req.simulation_id.as_deref(), req.event_seq)?;
    let f = RevisionFeedback::new(&event, req.a_prime, req.source)?;
    st.feedback.add_revision(f.clone())?;
    Ok((StatusCode::CREATED, Json(f)))
}

async fn feedback(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "scores": st.feedback.scores(),
        "revisions": st.feedback.revisions(),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportResponse {
    pub path: PathBuf,
    pub records: usize,
}

#[derive(Debug, Default, Deserialize)]
struct ExportRequest {
    #[serde(default)]
    path: Option<PathBuf>,
}

async fn export(
    State(st): State<Arc<AppState>>,
    Path(kind): Path<String>,
    bytes: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: ExportRequest = optional_body(&bytes)?;
    let kind: &'static str = match kind.as_str() {
        "sft" => "sft",
        "reward" => "reward",
        other => return Err(ApiError::not_found(format!("unknown export kind {other:?}"))),
    };
    let path = match req.path {
        Some(p) => p,
        None => {
            std::fs::create_dir_all(&st.data_dir).map_err(|e| ApiError::backend(e.to_string()))?;
            st.data_dir.join(format!("{kind}-{}.jsonl", uuid::Uuid::new_v4().simple()))
        }
    };
    let records = match kind {
        "sft" => export_sft_dataset(&st.feedback.revisions(), &path)?,
        _ => export_reward_dataset(&st.feedback.scores(), &path)?,
    };
    st.exports.lock().insert(kind, path.clone());
    Ok((StatusCode::CREATED, Json(ExportResponse { path, records })))
}

#[derive(Debug, Deserialize)]
struct FinetuneRequest {
    method: FinetuneMethod,
    endpoint: String,
    /// Defaults to the latest export of the matching kind.
    #[serde(default)]
    dataset_path: Option<PathBuf>,
}

async fn finetune(
    State(st): State<Arc<AppState>>,
    Body(req): Body<FinetuneRequest>,
) -> ApiResult<impl IntoResponse> {
    let kind = match req.method {
        FinetuneMethod::Sft => "sft",
        FinetuneMethod::Ppo => "reward",
    };
    let path = match req.dataset_path {
        Some(p) => p,
        None => st
            .exports
            .lock()
            .get(kind)
            .cloned()
            .ok_or_else(|| ApiError::invalid(format!("no {kind} dataset exported yet")).with_field("dataset_path"))?,
    };
    let method = req.method;
    let job_id = blocking(move || trigger_external_finetune(&path, &req.endpoint, method))
        .await?
        .map_err(|e| ApiError::backend(e.to_string()))?;
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job_id }))))
}
