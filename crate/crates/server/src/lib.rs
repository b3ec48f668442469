//! HTTP front end for game sessions.
//!
//! Turns on one session are serialized by a per-session async mutex. Read
//! endpoints never take that mutex; they serve the snapshot published after
//! the last successful mutation.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use aegis_core::game::{GameError, GameState, Phase, Session, SessionConfig, SessionParts, TurnOutcome};
use aegis_core::protocol::{assemble_system_prompt, PersonaProfile, PromptBundle, PromptVersion};
use aegis_core::provider::ChatProvider;
use aegis_core::script::{Clue, EndingId, ScenarioScript};
use aegis_core::store::{SessionStore, StoreError, TranscriptEvent};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(24 * 60 * 60);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub session: SessionConfig,
    /// Idle sessions are dropped from memory after this long. Their
    /// transcripts stay on disk and are resumed on the next request.
    pub session_ttl: Duration,
    pub static_dir: Option<PathBuf>,
    pub default_script: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            session: SessionConfig::default(),
            session_ttl: DEFAULT_SESSION_TTL,
            static_dir: None,
            default_script: aegis_core::script::CANONICAL_SCRIPT_ID.to_string(),
        }
    }
}

impl ServiceConfig {
    /// Longest a turn request may take: every provider attempt timing out
    /// plus every backoff, with some slack.
    pub fn request_timeout(&self) -> Duration {
        let p = &self.session.provider;
        let attempts = p.attempt_budget();
        let backoff: Duration = (0..attempts.saturating_sub(1))
            .map(|i| p.backoff_base.saturating_mul(1 << i.min(16)))
            .sum();
        p.timeout.saturating_mul(attempts) + backoff + Duration::from_secs(5)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClueView {
    pub clue_id: u32,
    pub title: String,
    pub content: String,
    pub image_ref: Option<String>,
}

impl From<&Clue> for ClueView {
    fn from(c: &Clue) -> Self {
        ClueView {
            clue_id: c.clue_id,
            title: c.title.clone(),
            content: c.content.clone(),
            image_ref: c.image_ref.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionView {
    pub option_id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionView {
    pub scene_id: u32,
    pub prompt_text: String,
    pub options: Vec<OptionView>,
}

/// Result of a turn, decision or ending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnView {
    pub session_id: String,
    /// Player inputs so far.
    pub turn: usize,
    /// Last transcript seq written by this request.
    pub seq: u64,
    pub gamemaster_guidance: String,
    pub aegis_reaction: String,
    pub clue: Option<ClueView>,
    pub scene_advanced: Option<u32>,
    pub clamped: bool,
    pub phase: Phase,
    pub decision: Option<DecisionView>,
    pub ending_options: Vec<OptionView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session_id: String,
    pub script_id: String,
    pub prompt_version: PromptVersion,
    pub created_at: DateTime<Utc>,
    pub phase: Phase,
    pub rounds: usize,
    pub seq: u64,
    pub delivered_clues: Vec<ClueView>,
    pub decisions: BTreeMap<u32, String>,
    pub ending_choice: Option<EndingId>,
    pub decision: Option<DecisionView>,
    pub ending_options: Vec<OptionView>,
    pub state_hash: String,
    pub state: GameState,
}

/// The undecided decision of the scene being played, if any.
fn open_decision(state: &GameState, script: &ScenarioScript) -> Option<DecisionView> {
    let k = state.phase.scene_id()?;
    let decision = script.scene(k)?.decision.as_ref()?;
    if state.decisions.contains_key(&k) {
        return None;
    }
    Some(DecisionView {
        scene_id: k,
        prompt_text: decision.prompt_text.clone(),
        options: decision
            .options
            .iter()
            .map(|o| OptionView {
                option_id: o.option_id.clone(),
                label: o.label.clone(),
            })
            .collect(),
    })
}

fn ending_options(state: &GameState, script: &ScenarioScript) -> Vec<OptionView> {
    if state.phase != Phase::Ending {
        return Vec::new();
    }
    script
        .endings
        .iter()
        .map(|e| OptionView {
            option_id: e.option_id.to_string(),
            label: e.label.clone(),
        })
        .collect()
}

fn turn_view(session: &Session, outcome: &TurnOutcome) -> TurnView {
    let state = session.state();
    let script = session.script();
    TurnView {
        session_id: session.id().to_string(),
        turn: state.rounds(),
        seq: state.transcript_cursor,
        gamemaster_guidance: outcome.response.gamemaster_guidance.clone(),
        aegis_reaction: outcome.response.aegis_reaction.clone(),
        clue: outcome.state_delta.clue_delivered.as_ref().map(ClueView::from),
        scene_advanced: outcome.state_delta.scene_advanced,
        clamped: outcome.state_delta.clamped,
        phase: state.phase,
        decision: open_decision(state, script),
        ending_options: ending_options(state, script),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: &'static str,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "NotFound", what)
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", msg)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            kind: self.kind,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownSession(id) => ApiError::not_found(format!("unknown session `{id}`")),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Storage", other.to_string()),
        }
    }
}

impl From<GameError> for ApiError {
    fn from(e: GameError) -> Self {
        let msg = e.to_string();
        match e {
            GameError::EmptyInput => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "EmptyInput", msg),
            GameError::UnknownOption(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "UnknownOption", msg)
            }
            GameError::WrongPhase { .. } => ApiError::new(StatusCode::CONFLICT, "WrongPhase", msg),
            GameError::NoSuchDecision(_) => {
                ApiError::new(StatusCode::CONFLICT, "NoSuchDecision", msg)
            }
            GameError::AlreadyDecided(_) => {
                ApiError::new(StatusCode::CONFLICT, "AlreadyDecided", msg)
            }
            GameError::Provider(_) => ApiError::new(StatusCode::BAD_GATEWAY, "Provider", msg),
            GameError::Store(s) => s.into(),
            GameError::InvalidScript(_) | GameError::BundleMismatch => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", msg)
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Slot {
    session: tokio::sync::Mutex<Session>,
    snapshot: RwLock<Arc<StateView>>,
    last_used: Mutex<Instant>,
    script_id: String,
    created_at: DateTime<Utc>,
}

impl Slot {
    fn publish(&self, session: &Session) {
        let view = state_view(session, &self.script_id, self.created_at);
        *self.snapshot.write().unwrap() = Arc::new(view);
    }

    fn touch(&self) {
        *self.last_used.lock().unwrap() = Instant::now();
    }
}

fn state_view(session: &Session, script_id: &str, created_at: DateTime<Utc>) -> StateView {
    let state = session.state();
    let script = session.script();
    StateView {
        session_id: session.id().to_string(),
        script_id: script_id.to_string(),
        prompt_version: session.prompt_version(),
        created_at,
        phase: state.phase,
        rounds: state.rounds(),
        seq: state.transcript_cursor,
        delivered_clues: state
            .delivered_clues
            .iter()
            .filter_map(|id| script.find_clue(*id).map(|(_, c)| ClueView::from(c)))
            .collect(),
        decisions: state.decisions.clone(),
        ending_choice: state.ending_choice,
        decision: open_decision(state, script),
        ending_options: ending_options(state, script),
        state_hash: state.state_hash(),
        state: state.clone(),
    }
}

struct Inner {
    store: Arc<SessionStore>,
    scripts: BTreeMap<String, Arc<ScenarioScript>>,
    provider: Arc<dyn ChatProvider>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(
        store: Arc<SessionStore>,
        scripts: BTreeMap<String, Arc<ScenarioScript>>,
        provider: Arc<dyn ChatProvider>,
        config: ServiceConfig,
    ) -> Self {
        AppState(Arc::new(Inner {
            store,
            scripts,
            provider,
            config,
            sessions: Mutex::new(HashMap::new()),
        }))
    }

    /// Service with only the bundled script.
    pub fn with_canonical_script(
        store: Arc<SessionStore>,
        provider: Arc<dyn ChatProvider>,
        config: ServiceConfig,
    ) -> Self {
        let mut scripts = BTreeMap::new();
        scripts.insert(
            aegis_core::script::CANONICAL_SCRIPT_ID.to_string(),
            Arc::new(aegis_core::script::canonical_script()),
        );
        AppState::new(store, scripts, provider, config)
    }

    pub fn store(&self) -> &Arc<SessionStore> {
        &self.0.store
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    /// Sessions currently held in memory.
    pub fn live_sessions(&self) -> usize {
        self.0.sessions.lock().unwrap().len()
    }

    fn bundle(
        &self,
        script_id: &str,
        version: PromptVersion,
    ) -> ApiResult<(Arc<ScenarioScript>, Arc<PromptBundle>)> {
        let script = self
            .0
            .scripts
            .get(script_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown script `{script_id}`")))?;
        let persona = PersonaProfile::by_ref(&script.persona_ref).ok_or_else(|| {
            ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "Internal",
                format!("script names unknown persona `{}`", script.persona_ref),
            )
        })?;
        let bundle = assemble_system_prompt(&persona, &script, version).map_err(|e| {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string())
        })?;
        Ok((script, Arc::new(bundle)))
    }

    fn parts(
        &self,
        id: &str,
        script_id: &str,
        version: PromptVersion,
    ) -> ApiResult<SessionParts> {
        let (script, bundle) = self.bundle(script_id, version)?;
        Ok(SessionParts {
            id: id.to_string(),
            script_id: script_id.to_string(),
            script,
            bundle,
            config: self.0.config.session.clone(),
            provider: self.0.provider.clone(),
            store: self.0.store.clone(),
        })
    }

    fn insert(&self, session: Session, script_id: String, created_at: DateTime<Utc>) -> Arc<Slot> {
        let view = state_view(&session, &script_id, created_at);
        Arc::new(Slot {
            session: tokio::sync::Mutex::new(session),
            snapshot: RwLock::new(Arc::new(view)),
            last_used: Mutex::new(Instant::now()),
            script_id,
            created_at,
        })
    }

    pub fn create_session(
        &self,
        script_id: Option<&str>,
        version: PromptVersion,
    ) -> ApiResult<SessionHandle> {
        let script_id = script_id.unwrap_or(&self.0.config.default_script).to_string();
        let id = format!("{:032x}", rand::random::<u128>());
        let session = Session::start(self.parts(&id, &script_id, version)?)?;
        let created_at = self.0.store.meta(&id)?.created_at;
        let handle = SessionHandle {
            session_id: id.clone(),
            created_at,
            phase: session.state().phase,
        };
        let slot = self.insert(session, script_id, created_at);
        self.0.sessions.lock().unwrap().insert(id, slot);
        Ok(handle)
    }

    /// The in-memory slot for `id`, resuming it from disk if needed.
    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        let mut sessions = self.0.sessions.lock().unwrap();
        if let Some(slot) = sessions.get(id) {
            slot.touch();
            return Ok(slot.clone());
        }
        if !self.0.store.exists(id) {
            return Err(ApiError::not_found(format!("unknown session `{id}`")));
        }
        let meta = self.0.store.meta(id)?;
        let session = Session::resume(self.parts(id, &meta.script_id, meta.prompt_version)?)?;
        let slot = self.insert(session, meta.script_id, meta.created_at);
        sessions.insert(id.to_string(), slot.clone());
        Ok(slot)
    }

    pub fn snapshot(&self, id: &str) -> ApiResult<Arc<StateView>> {
        let slot = self.slot(id)?;
        let view = slot.snapshot.read().unwrap().clone();
        Ok(view)
    }

    pub async fn submit_turn(&self, id: &str, text: &str) -> ApiResult<TurnView> {
        let slot = self.slot(id)?;
        let mut session = slot.session.lock().await;
        let outcome = session.submit_input(text).await?;
        slot.publish(&session);
        slot.touch();
        Ok(turn_view(&session, &outcome))
    }

    pub async fn submit_decision(&self, id: &str, scene_id: u32, option_id: &str) -> ApiResult<TurnView> {
        let slot = self.slot(id)?;
        let mut session = slot.session.lock().await;
        let outcome = session.submit_decision(scene_id, option_id)?;
        slot.publish(&session);
        Ok(turn_view(&session, &outcome))
    }

    pub async fn choose_ending(&self, id: &str, option_id: &str) -> ApiResult<TurnView> {
        let slot = self.slot(id)?;
        let mut session = slot.session.lock().await;
        let outcome = session.choose_ending(option_id)?;
        slot.publish(&session);
        Ok(turn_view(&session, &outcome))
    }

    pub fn transcript(&self, id: &str) -> ApiResult<Vec<TranscriptEvent>> {
        if !self.0.store.exists(id) {
            return Err(ApiError::not_found(format!("unknown session `{id}`")));
        }
        Ok(self.0.store.events(id)?)
    }

    /// Drops idle, unlocked sessions from memory. Returns how many.
    pub fn evict_idle(&self) -> usize {
        let ttl = self.0.config.session_ttl;
        let mut sessions = self.0.sessions.lock().unwrap();
        let before = sessions.len();
        sessions.retain(|_, slot| {
            let idle = slot.last_used.lock().unwrap().elapsed() >= ttl;
            let busy = Arc::strong_count(slot) > 1 || slot.session.try_lock().is_err();
            !idle || busy
        });
        before - sessions.len()
    }

    /// Runs [`AppState::evict_idle`] periodically until the runtime stops.
    pub fn spawn_evictor(&self) -> tokio::task::JoinHandle<()> {
        let state = self.clone();
        let period = (self.0.config.session_ttl / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                state.evict_idle();
            }
        })
    }
}

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text = if body.iter().all(u8::is_ascii_whitespace) {
        &b"{}"[..]
    } else {
        &body[..]
    };
    serde_json::from_slice(text).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
struct CreateBody {
    #[serde(default)]
    script_id: Option<String>,
    #[serde(default)]
    prompt_version: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TurnBody {
    #[serde(default)]
    text: String,
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    scene_id: u32,
    option_id: String,
}

#[derive(Debug, Deserialize)]
struct EndingBody {
    option_id: String,
}

async fn create_session(
    State(app): State<AppState>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionHandle>)> {
    let req: CreateBody = parse_json(&body)?;
    let version = match req.prompt_version.as_deref() {
        None => PromptVersion::V3,
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::bad_request(format!("unknown prompt version `{v}`")))?,
    };
    let handle = app.create_session(req.script_id.as_deref(), version)?;
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn submit_turn(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<TurnView>> {
    let req: TurnBody = parse_json(&body)?;
    Ok(Json(app.submit_turn(&id, &req.text).await?))
}

async fn submit_decision(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<TurnView>> {
    let req: DecisionBody = parse_json(&body)?;
    Ok(Json(app.submit_decision(&id, req.scene_id, &req.option_id).await?))
}

async fn choose_ending(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<TurnView>> {
    let req: EndingBody = parse_json(&body)?;
    Ok(Json(app.choose_ending(&id, &req.option_id).await?))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<StateView>> {
    Ok(Json(app.snapshot(&id)?.as_ref().clone()))
}

async fn get_transcript(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<TranscriptEvent>>> {
    Ok(Json(app.transcript(&id)?))
}

async fn healthz() -> &'static str {
    "ok"
}

const PLACEHOLDER_INDEX: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Cracking Aegis</title></head>\n<body><h1>Cracking Aegis</h1><p>The web client is not installed. Start the server with <code>--static-dir</code> pointing at its build output, or play through the HTTP API under <code>/sessions</code>.</p></body></html>\n";

async fn placeholder_index() -> Html<&'static str> {
    Html(PLACEHOLDER_INDEX)
}

pub fn router(app: AppState) -> Router {
    let timeout = app.config().request_timeout();
    let static_dir = app.config().static_dir.clone();
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/turns", post(submit_turn))
        .route("/sessions/{id}/decision", post(submit_decision))
        .route("/sessions/{id}/ending", post(choose_ending))
        .route("/sessions/{id}/transcript", get(get_transcript))
        .route("/healthz", get(healthz))
        .layer(tower_http::timeout::TimeoutLayer::with_status_code(
            StatusCode::GATEWAY_TIMEOUT,
            timeout,
        ))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder_index)),
    }
}
