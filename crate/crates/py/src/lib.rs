//! Python bindings: protocol parsing, factorial expansion, the sans-IO
//! engine, virtual-clock scenarios, journal replay and export.

use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use vlab_core::bots::{BotScript, Scenario, ScenarioReport};
use vlab_core::export::{export_batch, ExportFormat, ExportOptions};
use vlab_core::journal::replay_text;
use vlab_core::model::GameStatus;
use vlab_core::sync::HeartbeatConfig;
use vlab_core::treatments::{self, FactorDef};
use vlab_core::{Engine, EngineConfig, GameLayout, Journal, Outbound, World};

create_exception!(
    vlab,
    VlabError,
    PyException,
    "Raised with (code, message) for any engine failure."
);

fn fail(code: &str, message: impl ToString) -> PyErr {
    VlabError::new_err((code.to_string(), message.to_string()))
}

/// Crosses the boundary as JSON text through Python's own `json` module.
fn to_py<'py, T: serde::Serialize + ?Sized>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| fail("convert", e))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(v: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = v.py().import("json")?.call_method1("dumps", (v,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| fail("bad-argument", e))
}

/// State as plain data. Attributes become a flat list; recruitment
/// identifiers and session tokens are left out.
fn world_json(w: &World) -> serde_json::Value {
    serde_json::json!({
        "players": w.players,
        "games": w.games,
        "batches": w.batches,
        "protocols": w.protocols.keys().collect::<Vec<_>>(),
        "attributes": w.store.iter().collect::<Vec<_>>(),
        "logs": w.logs,
        "hooks": w.hooks,
    })
}

/// Parses and validates protocol YAML; returns it as a dict.
#[pyfunction]
fn parse_protocol<'py>(py: Python<'py>, yaml: &str) -> PyResult<Bound<'py, PyAny>> {
    let p = treatments::parse_protocol(yaml).map_err(|e| fail(e.code(), e))?;
    to_py(py, &p)
}

/// Problems found in protocol YAML, one string each; empty when valid.
#[pyfunction]
fn validate_protocol(yaml: &str) -> Vec<String> {
    match treatments::parse_protocol(yaml) {
        Ok(_) => Vec::new(),
        Err(e) if e.diagnostics().is_empty() => vec![e.to_string()],
        Err(e) => e.diagnostics().iter().map(ToString::to_string).collect(),
    }
}

/// Every valid treatment in the cross product of `factors`
/// (a list of `{name, type, values}` dicts).
#[pyfunction]
fn expand_factorial<'py>(py: Python<'py>, factors: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let defs: Vec<FactorDef> = from_py(factors)?;
    let ts = treatments::expand_factorial(&defs, &BTreeMap::new()).map_err(|e| fail(e.code(), e))?;
    to_py(py, &ts)
}

#[pyclass(name = "ScenarioReport", module = "vlab", frozen)]
struct PyScenarioReport {
    inner: ScenarioReport,
}

#[pymethods]
impl PyScenarioReport {
    /// No invariant failures and every game ended normally.
    #[getter]
    fn passed(&self) -> bool {
        self.inner.problems().is_empty()
            && !self.inner.games.is_empty()
            && self.inner.games.iter().all(|g| g.status == GameStatus::Ended)
    }

    #[getter]
    fn problems(&self) -> Vec<String> {
        self.inner.problems()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn virtual_ms(&self) -> u64 {
        self.inner.virtual_ms
    }

    #[getter]
    fn journal(&self) -> String {
        self.inner.journal.clone()
    }

    #[getter]
    fn batches(&self) -> Vec<String> {
        self.inner.batches.clone()
    }

    #[getter]
    fn games<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.games)
    }

    #[getter]
    fn bots<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.bots)
    }

    /// Hook names fired for `game`, in order.
    fn hook_trace<'py>(&self, py: Python<'py>, game: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.hook_trace(game))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("report serializes")
    }

    fn __repr__(&self) -> String {
        format!(
            "ScenarioReport(games={}, bots={}, virtual_ms={}, passed={})",
            self.inner.games.len(),
            self.inner.bots.len(),
            self.inner.virtual_ms,
            self.passed()
        )
    }
}

/// Runs every batch (or the named ones) with scripted bots on a virtual clock.
#[pyfunction]
#[pyo3(signature = (protocol, bots, game, seed = 0, batches = None))]
fn run_scenario(
    py: Python<'_>,
    protocol: &str,
    bots: &str,
    game: &str,
    seed: u64,
    batches: Option<Vec<String>>,
) -> PyResult<PyScenarioReport> {
    let script = BotScript::parse(bots).map_err(|e| fail("bot-script", e))?;
    let layout = GameLayout::parse(game).map_err(|e| fail(e.code(), e))?;
    let mut s = Scenario::new(protocol, script, Arc::new(layout)).seed(seed);
    s.batches = batches.unwrap_or_default();
    let inner = py.detach(|| s.run()).map_err(|e| fail(e.code(), e))?;
    Ok(PyScenarioReport { inner })
}

/// Folds journal text into state: `{last_offset, halt, world}`.
#[pyfunction]
#[pyo3(signature = (journal, up_to = None))]
fn replay<'py>(py: Python<'py>, journal: &str, up_to: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let r = replay_text(journal, up_to).map_err(|e| fail("journal", e))?;
    let out = PyDict::new(py);
    out.set_item("last_offset", r.last_offset)?;
    let halt = r.halt.map(|h| (h.last_valid, h.line, h.message));
    out.set_item("halt", halt)?;
    out.set_item("world", to_py(py, &world_json(&r.world))?)?;
    Ok(out.into_any())
}

/// Exports one batch from journal text; returns `{file name: bytes}`.
#[pyfunction]
#[pyo3(signature = (journal, batch, format = "csv", include_identifiers = false, partial = false))]
fn export<'py>(
    py: Python<'py>,
    journal: &str,
    batch: &str,
    format: &str,
    include_identifiers: bool,
    partial: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let format: ExportFormat = format.parse().map_err(|e: String| fail("bad-argument", e))?;
    let r = replay_text(journal, None).map_err(|e| fail("journal", e))?;
    if let Some(h) = r.halt {
        return Err(fail("journal-corrupt", format!("line {}: {}", h.line, h.message)));
    }
    let options = ExportOptions {
        format,
        include_identifiers,
        partial,
    };
    let next = r.last_offset.map_or(0, |o| o + 1);
    let bundle = export_batch(&r.world, batch, &options, next).map_err(|e| fail(e.code(), e))?;
    let out = PyDict::new(py);
    for (name, bytes) in &bundle.files {
        out.set_item(name, PyBytes::new(py, bytes))?;
    }
    Ok(out)
}

/// The engine with an in-memory journal. Time is passed in explicitly, in ms.
///
/// Frame-producing calls return `(conn, kind, text)` tuples; `kind` is
/// `"close"` with `text=None` when the server drops a connection.
#[pyclass(name = "Engine", module = "vlab", unsendable)]
struct PyEngine {
    inner: Engine,
}

type Frames = Vec<(u64, String, Option<String>)>;

fn frames(outs: Vec<Outbound>) -> Frames {
    outs.into_iter()
        .map(|o| match o {
            Outbound::Frame { conn, kind, text } => {
                let kind = serde_json::to_value(kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                (conn, kind, Some(text))
            }
            Outbound::Close { conn } => (conn, "close".to_string(), None),
        })
        .collect()
}

#[pymethods]
impl PyEngine {
    #[new]
    #[pyo3(signature = (game, seed = None, heartbeat_interval_ms = 5000, heartbeat_misses = 3))]
    fn new(game: &str, seed: Option<u64>, heartbeat_interval_ms: u64, heartbeat_misses: u32) -> PyResult<Self> {
        let layout = GameLayout::parse(game).map_err(|e| fail(e.code(), e))?;
        let config = EngineConfig {
            heartbeat: HeartbeatConfig {
                interval_ms: heartbeat_interval_ms,
                misses_allowed: heartbeat_misses,
            },
            token_seed: seed,
            ..EngineConfig::default()
        };
        let (journal, _) = Journal::in_memory();
        Ok(Self {
            inner: Engine::new(config, journal, Arc::new(layout)),
        })
    }

    fn connect(&mut self, now: u64) -> u64 {
        self.inner.connect(now)
    }

    fn receive(&mut self, conn: u64, text: &str, now: u64) -> Frames {
        let mut out = self.inner.receive(conn, text, now);
        out.extend(self.inner.take_outbound());
        frames(out)
    }

    fn disconnect(&mut self, conn: u64, now: u64) -> Frames {
        let mut out = self.inner.disconnect(conn, now);
        out.extend(self.inner.take_outbound());
        frames(out)
    }

    /// Fires every deadline due at `now`.
    fn tick(&mut self, now: u64) -> Frames {
        let mut out = self.inner.tick(now);
        out.extend(self.inner.take_outbound());
        frames(out)
    }

    fn next_deadline(&self) -> Option<u64> {
        self.inner.next_deadline()
    }

    /// Frames queued by admin calls since the last frame-producing call.
    fn take_outbound(&mut self) -> Frames {
        frames(self.inner.take_outbound())
    }

    #[pyo3(signature = (yaml, now, actor = "python"))]
    fn import_protocol(&mut self, yaml: &str, now: u64, actor: &str) -> PyResult<String> {
        self.inner
            .import_protocol(actor, yaml, now)
            .map_err(|e| fail(e.code(), e))
    }

    /// Creates a batch defined by name in an imported protocol.
    #[pyo3(signature = (protocol, name, now, actor = "python"))]
    fn create_batch(&mut self, protocol: &str, name: &str, now: u64, actor: &str) -> PyResult<String> {
        self.inner
            .create_named_batch(actor, protocol, name, now)
            .map_err(|e| fail(e.code(), e))
    }

    #[pyo3(signature = (batch, now, actor = "python"))]
    fn start_batch(&mut self, batch: &str, now: u64, actor: &str) -> PyResult<()> {
        self.inner.start_batch(actor, batch, now).map_err(|e| fail(e.code(), e))
    }

    #[pyo3(signature = (batch, now, actor = "python"))]
    fn stop_batch(&mut self, batch: &str, now: u64, actor: &str) -> PyResult<()> {
        self.inner.stop_batch(actor, batch, now).map_err(|e| fail(e.code(), e))
    }

    #[pyo3(signature = (game, now, actor = "python"))]
    fn terminate_game(&mut self, game: &str, now: u64, actor: &str) -> PyResult<()> {
        self.inner
            .terminate_game(actor, game, now)
            .map_err(|e| fail(e.code(), e))
    }

    #[pyo3(signature = (player, now, actor = "python"))]
    fn retire_player(&mut self, player: &str, now: u64, actor: &str) -> PyResult<()> {
        self.inner
            .retire_player(actor, player, now)
            .map_err(|e| fail(e.code(), e))
    }

    fn batch_summary<'py>(&self, py: Python<'py>, batch: &str) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.batch_summary(batch).map_err(|e| fail(e.code(), e))?;
        to_py(py, &s)
    }

    fn world<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &world_json(self.inner.world()))
    }

    fn journal(&self) -> PyResult<String> {
        self.inner.journal_text().map_err(|e| fail("journal", e))
    }

    #[getter]
    fn journal_offset(&self) -> u64 {
        self.inner.journal_offset()
    }
}

#[pymodule]
fn vlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VlabError", m.py().get_type::<VlabError>())?;
    m.add_function(wrap_pyfunction!(parse_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(validate_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(expand_factorial, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(export, m)?)?;
    m.add_class::<PyEngine>()?;
    m.add_class::<PyScenarioReport>()?;
    Ok(())
}
