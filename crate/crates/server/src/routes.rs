use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use futures_util::stream::{self, Stream};
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc};

use vlab_core::export::ExportOptions;
use vlab_core::treatments::BatchSpec;
use vlab_core::EngineError;

use crate::{Out, Shared};

type AppState = State<Arc<Shared>>;

#[derive(Debug, Clone)]
struct Admin(String);

#[derive(Debug)]
pub(crate) struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    diagnostics: Vec<String>,
}

impl ApiError {
    fn unauthorized() -> Self {
        Self {
            status: StatusCode::UNAUTHORIZED,
            code: "unauthenticated",
            message: "missing, invalid or expired admin token".into(),
            diagnostics: Vec::new(),
        }
    }

    fn not_found(what: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not-found",
            message: format!("not found: {what}"),
            diagnostics: Vec::new(),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::NotFound(_) => StatusCode::NOT_FOUND,
            EngineError::Conflict(_) => StatusCode::CONFLICT,
            EngineError::Protocol(_) => StatusCode::UNPROCESSABLE_ENTITY,
            EngineError::Auth(_) => StatusCode::UNAUTHORIZED,
            EngineError::Forbidden(_) => StatusCode::FORBIDDEN,
            EngineError::Halted(_) | EngineError::Journal(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::BAD_REQUEST,
        };
        let diagnostics = match &e {
            EngineError::Protocol(p) => p.diagnostics().iter().map(ToString::to_string).collect(),
            _ => Vec::new(),
        };
        Self {
            status,
            code: e.code(),
            message: e.to_string(),
            diagnostics,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": {"code": self.code, "message": self.message}});
        if !self.diagnostics.is_empty() {
            body["error"]["diagnostics"] = json!(self.diagnostics);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The player socket, plus the health probe when it has its own listener.
pub(crate) fn player_router(shared: Arc<Shared>, health: bool) -> Router {
    let r = Router::new().route("/play", get(play));
    let r = if health { r.route("/healthz", get(healthz)) } else { r };
    r.with_state(shared)
}

pub(crate) fn admin_router(shared: Arc<Shared>) -> Router {
    let guarded = Router::new()
        .route("/api/protocols", post(import_protocol))
        .route("/api/protocols/{id}", get(get_protocol))
        .route("/api/batches", post(create_batch).get(list_batches))
        .route("/api/batches/{id}", get(get_batch))
        .route("/api/batches/{id}/start", post(start_batch))
        .route("/api/batches/{id}/stop", post(stop_batch))
        .route("/api/batches/{id}/export", post(export_batch))
        .route("/api/games/{id}/terminate", post(terminate_game))
        .route("/api/players/{id}/retire", post(retire_player))
        .route("/api/events", get(events))
        .route("/api/metrics", get(metrics))
        .route_layer(middleware::from_fn_with_state(shared.clone(), require_admin));
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/login", post(login))
        .merge(guarded)
        .with_state(shared)
}

async fn healthz() -> &'static str {
    "ok"
}

// ---- player socket ----------------------------------------------------

async fn play(ws: WebSocketUpgrade, State(s): AppState) -> Response {
    ws.on_upgrade(move |socket| session(s, socket))
}

async fn session(s: Arc<Shared>, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel();
    let conn = s.open(tx);
    let writer_shared = s.clone();
    let writer = tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            match out {
                Out::Frame { text, origin } => {
                    if sink.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                    if let Some(t) = origin {
                        writer_shared.latency.record(t.elapsed());
                    }
                }
                Out::Close => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => {
                let origin = Instant::now();
                s.drive(Some(origin), |e, now| e.receive(conn, text.as_str(), now));
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    s.close(conn);
    writer.abort();
}

// ---- admin ------------------------------------------------------------

async fn require_admin(State(s): AppState, mut req: Request, next: Next) -> Result<Response, ApiError> {
    let token = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    match token.and_then(|t| s.auth.verify(t, s.clock.now())) {
        Some(admin) => {
            req.extensions_mut().insert(Admin(admin));
            Ok(next.run(req).await)
        }
        None => Err(ApiError::unauthorized()),
    }
}

#[derive(Deserialize)]
struct LoginBody {
    name: String,
    password: String,
}

async fn login(State(s): AppState, Json(body): Json<LoginBody>) -> ApiResult<Json<Value>> {
    let issued = s
        .auth
        .login(&body.name, &body.password, s.clock.now())
        .ok_or_else(ApiError::unauthorized)?;
    Ok(Json(json!(issued)))
}

async fn import_protocol(
    State(s): AppState,
    Extension(Admin(a)): Extension<Admin>,
    body: String,
) -> ApiResult<Response> {
    let id = s.admin(|e, now| e.import_protocol(&a, &body, now))?;
    Ok((StatusCode::CREATED, Json(json!({"id": id}))).into_response())
}

async fn get_protocol(State(s): AppState, Path(id): Path<String>) -> ApiResult<Response> {
    let yaml = s
        .inspect(|e| e.world().protocols.get(&id).map(|p| p.yaml.clone()))
        .ok_or_else(|| ApiError::not_found(format!("protocol {id}")))?;
    Ok(([(header::CONTENT_TYPE, "application/yaml")], yaml).into_response())
}

#[derive(Deserialize)]
struct CreateBatch {
    protocol: String,
    /// Name of a batch defined in the protocol file.
    #[serde(default)]
    batch: Option<String>,
    /// Or a full batch spec.
    #[serde(default)]
    spec: Option<BatchSpec>,
}

async fn create_batch(
    State(s): AppState,
    Extension(Admin(a)): Extension<Admin>,
    Json(body): Json<CreateBatch>,
) -> ApiResult<Response> {
    let id = s.admin(|e, now| match (body.spec, body.batch) {
        (Some(spec), _) => e.create_batch(&a, &body.protocol, spec, now),
        (None, Some(name)) => e.create_named_batch(&a, &body.protocol, &name, now),
        (None, None) => Err(EngineError::BadRequest("either batch or spec is required".into())),
    })?;
    let summary = s.inspect(|e| e.batch_summary(&id))?;
    Ok((StatusCode::CREATED, Json(json!(summary))).into_response())
}

async fn list_batches(State(s): AppState) -> ApiResult<Json<Value>> {
    let all = s.inspect(|e| {
        e.world()
            .batches
            .keys()
            .map(|id| e.batch_summary(id))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(Json(json!(all)))
}

async fn get_batch(State(s): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(s.inspect(|e| e.batch_summary(&id))?)))
}

async fn start_batch(
    State(s): AppState,
    Extension(Admin(a)): Extension<Admin>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    s.admin(|e, now| e.start_batch(&a, &id, now))?;
    Ok(Json(json!(s.inspect(|e| e.batch_summary(&id))?)))
}

async fn stop_batch(
    State(s): AppState,
    Extension(Admin(a)): Extension<Admin>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    s.admin(|e, now| e.stop_batch(&a, &id, now))?;
    Ok(Json(json!(s.inspect(|e| e.batch_summary(&id))?)))
}

async fn terminate_game(
    State(s): AppState,
    Extension(Admin(a)): Extension<Admin>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    s.admin(|e, now| e.terminate_game(&a, &id, now))?;
    let status = s.inspect(|e| e.world().games.get(&id).map(|g| g.status));
    Ok(Json(json!({"id": id, "status": status})))
}

async fn retire_player(
    State(s): AppState,
    Extension(Admin(a)): Extension<Admin>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    s.admin(|e, now| e.retire_player(&a, &id, now))?;
    Ok(Json(json!({"id": id, "retired": true})))
}

async fn export_batch(
    State(s): AppState,
    Extension(Admin(a)): Extension<Admin>,
    Path(id): Path<String>,
    body: Option<Json<ExportOptions>>,
) -> ApiResult<Json<Value>> {
    let options = body.map(|Json(o)| o).unwrap_or_default();
    let bundle = s.admin(|e, now| e.export(&a, &id, &options, now))?;
    let files: BTreeMap<String, String> = bundle
        .files
        .iter()
        .map(|(name, bytes)| (name.clone(), String::from_utf8_lossy(bytes).into_owned()))
        .collect();
    Ok(Json(json!({"manifest": bundle.manifest, "files": files})))
}

async fn metrics(State(s): AppState) -> Json<Value> {
    let offset = s.inspect(|e| e.journal_offset());
    Json(json!({"journal_offset": offset, "change_latency": s.latency.summary()}))
}

async fn events(State(s): AppState) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let rx = s.subscribe();
    let stream = stream::unfold(rx, |mut rx| async move {
        let ev = match rx.recv().await {
            Ok(text) => {
                let kind = serde_json::from_str::<Value>(&text)
                    .ok()
                    .and_then(|v| v.get("kind").and_then(Value::as_str).map(str::to_string))
                    .unwrap_or_else(|| "event".into());
                SseEvent::default().event(kind).data(text.as_ref())
            }
            Err(broadcast::error::RecvError::Lagged(n)) => SseEvent::default().event("lagged").data(n.to_string()),
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(ev), rx))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
