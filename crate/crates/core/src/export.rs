//! Tabular export of one batch: games, players, rounds, stages, the two
//! composite tables and the event log, plus a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use crate::model::{id_order, ScopeRef, Value};
use crate::state::World;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Csv,
    Jsonl,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Jsonl => "jsonl",
        }
    }
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(format!("unknown export format {other:?} (expected csv or jsonl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportOptions {
    pub format: ExportFormat,
    /// Adds the recruitment-source identifier column to the players table.
    pub include_identifiers: bool,
    /// Allows exporting a batch that is still running.
    pub partial: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("batch {0} not found")]
    NotFound(String),
    #[error("batch {batch} is still {status}; pass partial to export anyway")]
    NotTerminal { batch: String, status: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ExportError {
    pub fn code(&self) -> &'static str {
        match self {
            ExportError::NotFound(_) => "not-found",
            ExportError::NotTerminal { .. } => "batch-running",
            ExportError::Io(_) => "storage",
        }
    }
}

impl From<ExportError> for crate::engine::EngineError {
    fn from(e: ExportError) -> Self {
        use crate::engine::EngineError;
        match e {
            ExportError::NotFound(b) => EngineError::NotFound(format!("batch {b}")),
            ExportError::NotTerminal { .. } => EngineError::Conflict(e.to_string()),
            ExportError::Io(e) => EngineError::BadRequest(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableInfo {
    pub name: String,
    pub file: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub batch: String,
    pub batch_status: String,
    pub format: ExportFormat,
    pub include_identifiers: bool,
    pub partial: bool,
    pub protocol_sha256: String,
    pub journal_offset: u64,
    pub tables: Vec<TableInfo>,
}

/// Rendered export: file name → bytes, plus the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportBundle {
    pub manifest: Manifest,
    pub files: BTreeMap<String, Vec<u8>>,
}

impl ExportBundle {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    /// Every byte of every file, for redaction scans.
    pub fn all_bytes(&self) -> Vec<u8> {
        self.files.values().flatten().copied().collect()
    }
}

struct Row {
    fixed: Vec<Value>,
    data: BTreeMap<String, Value>,
}

struct Table {
    name: &'static str,
    columns: Vec<&'static str>,
    rows: Vec<Row>,
}

impl Table {
    fn new(name: &'static str, columns: Vec<&'static str>) -> Self {
        Self {
            name,
            columns,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, fixed: Vec<Value>, data: BTreeMap<String, Value>) {
        debug_assert_eq!(fixed.len(), self.columns.len());
        self.rows.push(Row { fixed, data });
    }

    fn data_keys(&self) -> Vec<String> {
        let keys: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.data.keys()).collect();
        keys.into_iter().cloned().collect()
    }

    fn render_csv(&self) -> Vec<u8> {
        let keys = self.data_keys();
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = self
            .columns
            .iter()
            .map(|c| c.to_string())
            .chain(keys.iter().map(|k| format!("data.{k}")))
            .collect();
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec: Vec<String> = row.fixed.iter().map(plain_cell).collect();
            for k in &keys {
                rec.push(row.data.get(k).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    fn render_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for row in &self.rows {
            let mut obj = Map::new();
            for (c, v) in self.columns.iter().zip(&row.fixed) {
                obj.insert(c.to_string(), v.clone());
            }
            obj.insert("data".into(), json!(row.data));
            out.extend(serde_json::to_vec(&Value::Object(obj)).expect("json"));
            out.push(b'\n');
        }
        out
    }
}

fn plain_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn opt<T: Serialize>(v: Option<T>) -> Value {
    v.map(|x| json!(x)).unwrap_or(Value::Null)
}

fn attrs(world: &World, scope: &ScopeRef) -> BTreeMap<String, Value> {
    world
        .store
        .scope(scope)
        .map(|a| (a.key.clone(), a.value.clone()))
        .collect()
}

/// Renders the export for `batch` from a world state.
pub fn export_batch(
    world: &World,
    batch: &str,
    options: &ExportOptions,
    journal_offset: u64,
) -> Result<ExportBundle, ExportError> {
    let b = world
        .batches
        .get(batch)
        .ok_or_else(|| ExportError::NotFound(batch.to_string()))?;
    let status = serde_json::to_value(b.status)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    if !b.status.is_terminal() && !options.partial {
        return Err(ExportError::NotTerminal {
            batch: batch.to_string(),
            status,
        });
    }

    let mut games = Table::new(
        "games",
        vec![
            "id",
            "batch",
            "treatment",
            "factors",
            "status",
            "end_reason",
            "players",
            "rounds",
        ],
    );
    let mut rounds = Table::new("rounds", vec!["id", "game", "index"]);
    let mut stages = Table::new(
        "stages",
        vec![
            "id",
            "game",
            "round",
            "index",
            "name",
            "duration",
            "started_at",
            "ended_at",
            "end_reason",
        ],
    );
    let mut player_rounds = Table::new("player_rounds", vec!["player", "round", "game"]);
    let mut player_stages = Table::new("player_stages", vec!["player", "stage", "round", "game", "submitted"]);

    for gid in &b.games {
        let g = &world.games[gid];
        games.push(
            vec![
                json!(g.id),
                json!(g.batch_id),
                json!(g.treatment.name),
                json!(serde_json::to_string(&g.treatment.assignments).expect("json")),
                json!(g.status.as_str()),
                opt(g.end_reason.as_ref()),
                json!(g.player_ids.join(";")),
                json!(g.rounds.len()),
            ],
            attrs(world, &ScopeRef::game(&g.id)),
        );
        for r in &g.rounds {
            rounds.push(
                vec![json!(r.id), json!(g.id), json!(r.index)],
                attrs(world, &ScopeRef::round(&r.id)),
            );
            for p in &g.player_ids {
                player_rounds.push(
                    vec![json!(p), json!(r.id), json!(g.id)],
                    attrs(world, &ScopeRef::player_round(&r.id, p)),
                );
            }
            for s in &r.stages {
                stages.push(
                    vec![
                        json!(s.id),
                        json!(g.id),
                        json!(r.id),
                        json!(s.index),
                        json!(s.name),
                        opt(s.duration),
                        opt(s.started_at),
                        opt(s.ended_at),
                        opt(s.ended),
                    ],
                    attrs(world, &ScopeRef::stage(&s.id)),
                );
                for p in &g.player_ids {
                    player_stages.push(
                        vec![
                            json!(p),
                            json!(s.id),
                            json!(r.id),
                            json!(g.id),
                            json!(s.submitted.contains(p)),
                        ],
                        attrs(world, &ScopeRef::player_stage(&s.id, p)),
                    );
                }
            }
        }
    }

    let mut player_cols = vec!["id"];
    if options.include_identifiers {
        player_cols.push("identifier");
    }
    player_cols.extend(["game", "phase", "exit_reason", "dropped", "intro_step"]);
    let mut players = Table::new("players", player_cols);
    let mut members: Vec<&crate::model::Player> = world
        .players
        .values()
        .filter(|p| p.batch.as_deref() == Some(batch))
        .collect();
    members.sort_by(|a, b| id_order(&a.id, &b.id));
    for p in &members {
        let mut fixed = vec![json!(p.id)];
        if options.include_identifiers {
            fixed.push(json!(p.identifier));
        }
        fixed.extend([
            opt(p.current_game.as_ref()),
            json!(p.phase.as_str()),
            opt(p.exit_reason.map(|r| r.as_str())),
            json!(p.dropped),
            opt(p.intro_step),
        ]);
        players.push(fixed, attrs(world, &ScopeRef::player(&p.id)));
    }

    let in_batch: BTreeSet<&str> = members.iter().map(|p| p.id.as_str()).collect();
    let mut log = Table::new("log", vec!["at", "scope", "name", "actor", "payload"]);
    for e in &world.logs {
        let owned = match world.scope_game(&e.scope) {
            Some(g) => g.batch_id == batch,
            None => in_batch.contains(e.scope.id.as_str()),
        };
        if owned {
            log.push(
                vec![
                    json!(e.at),
                    json!(e.scope.to_string()),
                    json!(e.name),
                    json!(e.actor),
                    json!(e.payload.to_string()),
                ],
                BTreeMap::new(),
            );
        }
    }

    let tables = [games, players, rounds, stages, player_rounds, player_stages, log];
    let mut files = BTreeMap::new();
    let mut infos = Vec::new();
    for t in &tables {
        let file = format!("{}.{}", t.name, options.format.extension());
        let bytes = match options.format {
            ExportFormat::Csv => t.render_csv(),
            ExportFormat::Jsonl => t.render_jsonl(),
        };
        infos.push(TableInfo {
            name: t.name.to_string(),
            file: file.clone(),
            rows: t.rows.len(),
        });
        files.insert(file, bytes);
    }
    let manifest = Manifest {
        batch: batch.to_string(),
        batch_status: status,
        format: options.format,
        include_identifiers: options.include_identifiers,
        partial: !b.status.is_terminal(),
        protocol_sha256: world
            .protocols
            .get(&b.protocol_id)
            .map(|p| p.sha256.clone())
            .unwrap_or_default(),
        journal_offset,
        tables: infos,
    };
    files.insert(
        "manifest.json".into(),
        serde_json::to_vec_pretty(&manifest).expect("json"),
    );
    Ok(ExportBundle { manifest, files })
}
