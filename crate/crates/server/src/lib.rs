//! Network front end for the vlab engine: the player WebSocket at `/play`,
//! the authenticated admin API under `/api`, and a server-sent event feed.
//!
//! The engine itself is sans-IO. This crate owns the clock, one lock around
//! the engine, a timer task that fires deadlines, and one writer task per
//! socket so frames leave in the order the engine produced them.

pub mod auth;
mod latency;
mod routes;
pub mod ws_bots;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde_json::Value;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, watch, Notify};
use tokio::task::JoinHandle;

use vlab_core::journal::{FileBackend, Journal, JournalError, MemoryBackend};
use vlab_core::sync::MessageType;
use vlab_core::{Callbacks, ConnId, Engine, EngineConfig, EngineError, EventKind, EventRecord, Outbound};

pub use auth::{Account, AccountError, Accounts, AdminAuth, IssuedToken};
pub use latency::{quantile, LatencyRecorder, LatencySummary};

/// Longest the timer task sleeps without re-reading the next deadline.
const MAX_IDLE: Duration = Duration::from_millis(250);

/// Milliseconds since the Unix epoch, never going backwards.
#[derive(Debug, Clone)]
pub struct Clock {
    origin: Instant,
    base: u64,
}

impl Clock {
    pub fn system() -> Self {
        let base = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self {
            origin: Instant::now(),
            base,
        }
    }

    /// A clock that reads at least `floor`.
    pub fn not_before(floor: u64) -> Self {
        let mut c = Self::system();
        c.base = c.base.max(floor);
        c
    }

    pub fn now(&self) -> u64 {
        self.base + self.origin.elapsed().as_millis() as u64
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Player WebSocket listener (also serves `/api` when `admin_addr` is unset).
    pub addr: SocketAddr,
    pub admin_addr: Option<SocketAddr>,
    /// Journal file; `None` keeps it in memory.
    pub journal: Option<PathBuf>,
    pub fsync: bool,
    pub engine: EngineConfig,
    pub accounts: Accounts,
    pub admin_ttl_ms: u64,
    /// Effective configuration, journaled at startup.
    pub startup: Value,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            admin_addr: None,
            journal: None,
            fsync: true,
            engine: EngineConfig::default(),
            accounts: Accounts::default(),
            admin_ttl_ms: 8 * 3600 * 1000,
            startup: Value::Null,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
}

impl ServerError {
    pub fn code(&self) -> &'static str {
        match self {
            ServerError::Journal(_) => "journal",
            ServerError::Engine(e) => e.code(),
            ServerError::Bind { .. } => "bind",
        }
    }
}

pub(crate) enum Out {
    Frame { text: String, origin: Option<Instant> },
    Close,
}

/// State shared by every handler.
pub struct Shared {
    engine: Mutex<Engine>,
    conns: Mutex<HashMap<ConnId, mpsc::UnboundedSender<Out>>>,
    events: broadcast::Sender<Arc<str>>,
    wake: Notify,
    pub auth: AdminAuth,
    pub clock: Clock,
    pub latency: LatencyRecorder,
}

impl Shared {
    /// Runs an engine call that returns frames, then routes them. `origin`
    /// is when the triggering client frame arrived, for latency tracking.
    pub(crate) fn drive(&self, origin: Option<Instant>, f: impl FnOnce(&mut Engine, u64) -> Vec<Outbound>) {
        let mut engine = self.engine.lock().expect("engine lock poisoned");
        let now = self.clock.now().max(engine.now());
        let mut outs = f(&mut engine, now);
        outs.extend(engine.take_outbound());
        self.publish(&mut engine);
        self.dispatch(outs, origin);
        drop(engine);
        self.wake.notify_one();
    }

    /// Runs an admin call; any frames it causes are routed.
    pub fn admin<R>(&self, f: impl FnOnce(&mut Engine, u64) -> R) -> R {
        let mut engine = self.engine.lock().expect("engine lock poisoned");
        let now = self.clock.now().max(engine.now());
        let r = f(&mut engine, now);
        let outs = engine.take_outbound();
        self.publish(&mut engine);
        self.dispatch(outs, None);
        drop(engine);
        self.wake.notify_one();
        r
    }

    /// Read-only access to the engine.
    pub fn inspect<R>(&self, f: impl FnOnce(&Engine) -> R) -> R {
        f(&self.engine.lock().expect("engine lock poisoned"))
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.events.subscribe()
    }

    fn publish(&self, engine: &mut Engine) {
        for rec in engine.take_feed() {
            if let Some(text) = feed_text(&rec) {
                let _ = self.events.send(text.into());
            }
        }
    }

    fn dispatch(&self, outs: Vec<Outbound>, origin: Option<Instant>) {
        if outs.is_empty() {
            return;
        }
        let conns = self.conns.lock().expect("conn table poisoned");
        for o in outs {
            match o {
                Outbound::Frame { conn, kind, text } => {
                    if let Some(tx) = conns.get(&conn) {
                        let origin = origin.filter(|_| kind == MessageType::Change);
                        let _ = tx.send(Out::Frame { text, origin });
                    }
                }
                Outbound::Close { conn } => {
                    if let Some(tx) = conns.get(&conn) {
                        let _ = tx.send(Out::Close);
                    }
                }
            }
        }
    }

    pub(crate) fn open(&self, tx: mpsc::UnboundedSender<Out>) -> ConnId {
        let mut engine = self.engine.lock().expect("engine lock poisoned");
        let now = self.clock.now().max(engine.now());
        let conn = engine.connect(now);
        self.conns.lock().expect("conn table poisoned").insert(conn, tx);
        conn
    }

    pub(crate) fn close(&self, conn: ConnId) {
        self.drive(None, |e, now| e.disconnect(conn, now));
        self.conns.lock().expect("conn table poisoned").remove(&conn);
    }
}

async fn ticker(shared: Arc<Shared>, mut stop: watch::Receiver<bool>) {
    loop {
        let now = shared.clock.now();
        let deadline = shared.inspect(|e| e.next_deadline());
        let wait = deadline.map_or(MAX_IDLE, |d| Duration::from_millis(d.saturating_sub(now)).min(MAX_IDLE));
        if !wait.is_zero() {
            tokio::select! {
                _ = tokio::time::sleep(wait) => {}
                _ = shared.wake.notified() => continue,
                _ = stop.changed() => return,
            }
        }
        shared.drive(None, |e, now| e.tick(now));
    }
}

/// A running server. Dropping it leaves the tasks running; call `shutdown`.
pub struct Server {
    pub addr: SocketAddr,
    pub admin_addr: SocketAddr,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl Server {
    /// Opens (or restores) the journal, binds the listeners and starts
    /// serving.
    pub async fn start(config: ServerConfig, callbacks: Arc<dyn Callbacks>) -> Result<Self, ServerError> {
        let (journal, parsed) = match &config.journal {
            Some(p) => Journal::open(FileBackend::open(p, config.fsync).map_err(JournalError::from)?)?,
            None => Journal::open(MemoryBackend::new())?,
        };
        let floor = parsed.records.last().map_or(0, |r| r.at);
        let clock = Clock::not_before(floor);
        let mut engine = if parsed.records.is_empty() {
            Engine::new(config.engine.clone(), journal, callbacks)
        } else {
            Engine::restore(config.engine.clone(), journal, &parsed, callbacks, clock.now())?
        };
        engine.startup(config.startup.clone(), clock.now())?;
        engine.enable_feed();
        engine.take_feed();

        let listener = TcpListener::bind(config.addr)
            .await
            .map_err(|source| ServerError::Bind {
                addr: config.addr,
                source,
            })?;
        let addr = listener.local_addr().map_err(|source| ServerError::Bind {
            addr: config.addr,
            source,
        })?;
        let admin_listener = match config.admin_addr {
            Some(a) => Some(
                TcpListener::bind(a)
                    .await
                    .map_err(|source| ServerError::Bind { addr: a, source })?,
            ),
            None => None,
        };
        let admin_addr = match &admin_listener {
            Some(l) => l.local_addr().map_err(|source| ServerError::Bind { addr, source })?,
            None => addr,
        };

        let (events, _) = broadcast::channel(4096);
        let shared = Arc::new(Shared {
            engine: Mutex::new(engine),
            conns: Mutex::new(HashMap::new()),
            events,
            wake: Notify::new(),
            auth: AdminAuth::new(config.accounts.clone(), config.admin_ttl_ms),
            clock,
            latency: LatencyRecorder::default(),
        });
        let (stop, stop_rx) = watch::channel(false);
        let mut tasks = vec![tokio::spawn(ticker(shared.clone(), stop_rx.clone()))];
        match admin_listener {
            Some(al) => {
                tasks.push(serve(
                    listener,
                    routes::player_router(shared.clone(), true),
                    stop_rx.clone(),
                ));
                tasks.push(serve(al, routes::admin_router(shared.clone()), stop_rx));
            }
            None => {
                let app = routes::player_router(shared.clone(), false).merge(routes::admin_router(shared.clone()));
                tasks.push(serve(listener, app, stop_rx));
            }
        }
        tracing::info!(%addr, %admin_addr, "serving");
        Ok(Self {
            addr,
            admin_addr,
            shared,
            stop,
            tasks,
        })
    }

    pub fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    pub fn play_url(&self) -> String {
        format!("ws://{}/play", self.addr)
    }

    pub fn api_url(&self) -> String {
        format!("http://{}", self.admin_addr)
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        for t in self.tasks {
            t.abort();
            let _ = t.await;
        }
    }
}

fn serve(listener: TcpListener, app: axum::Router, mut stop: watch::Receiver<bool>) -> JoinHandle<()> {
    tokio::spawn(async move {
        let shutdown = async move {
            let _ = stop.changed().await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            tracing::error!(error = %e, "listener failed");
        }
    })
}

/// Admin feed rendering. Experiment logs stay out of live monitoring.
fn feed_text(rec: &EventRecord) -> Option<String> {
    if rec.kind == EventKind::LogEntry {
        return None;
    }
    serde_json::to_string(rec).ok()
}
