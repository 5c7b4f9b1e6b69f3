//! Append-only event journal and replay.
//!
//! On disk the journal is newline-delimited JSON: a header line followed by
//! one `EventRecord` per line with dense offsets starting at 0.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::events::{Event, EventRecord};
use crate::state::World;

pub const JOURNAL_FORMAT: &str = "vlab-journal";
pub const JOURNAL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalHeader {
    pub format: String,
    pub version: u32,
}

impl Default for JournalHeader {
    fn default() -> Self {
        Self {
            format: JOURNAL_FORMAT.into(),
            version: JOURNAL_VERSION,
        }
    }
}

/// Storage behind the journal: append a line, read everything back.
pub trait JournalBackend: Send {
    fn append(&mut self, line: &str) -> io::Result<()>;
    fn scan(&self) -> io::Result<String>;
}

/// In-memory backend. Clones share the same buffer, so a handle can be kept
/// to inspect what the engine wrote.
#[derive(Debug, Clone, Default)]
pub struct MemoryBackend {
    buf: Arc<Mutex<String>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_text(text: &str) -> Self {
        Self {
            buf: Arc::new(Mutex::new(text.to_string())),
        }
    }

    pub fn contents(&self) -> String {
        self.buf.lock().expect("journal buffer poisoned").clone()
    }
}

impl JournalBackend for MemoryBackend {
    fn append(&mut self, line: &str) -> io::Result<()> {
        let mut b = self
            .buf
            .lock()
            .map_err(|_| io::Error::other("journal buffer poisoned"))?;
        b.push_str(line);
        b.push('\n');
        Ok(())
    }

    fn scan(&self) -> io::Result<String> {
        Ok(self.contents())
    }
}

/// File backend. With `sync` set, every append is flushed to stable storage
/// before returning.
#[derive(Debug)]
pub struct FileBackend {
    path: PathBuf,
    file: File,
    sync: bool,
}

impl FileBackend {
    pub fn open(path: impl AsRef<Path>, sync: bool) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).read(true).open(&path)?;
        Ok(Self { path, file, sync })
    }
}

impl JournalBackend for FileBackend {
    fn append(&mut self, line: &str) -> io::Result<()> {
        let mut bytes = Vec::with_capacity(line.len() + 1);
        bytes.extend_from_slice(line.as_bytes());
        bytes.push(b'\n');
        self.file.write_all(&bytes)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    fn scan(&self) -> io::Result<String> {
        let mut s = String::new();
        File::open(&self.path)?.read_to_string(&mut s)?;
        Ok(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal storage failed: {0}")]
    Storage(#[from] io::Error),
    #[error("journal is not a {JOURNAL_FORMAT} v{JOURNAL_VERSION} file: {0}")]
    Header(String),
    #[error("journal corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

/// Where replay stopped early, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayHalt {
    /// Offset of the last record that was applied, if any.
    pub last_valid: Option<u64>,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedJournal {
    pub records: Vec<EventRecord>,
    pub halt: Option<ReplayHalt>,
}

/// Parses journal text. Stops at the first line that is not a well-formed
/// record with the next dense offset and reports it in `halt`.
pub fn parse_journal(text: &str) -> Result<ParsedJournal, JournalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => {
            return Ok(ParsedJournal {
                records: Vec::new(),
                halt: None,
            })
        }
        Some((_, first)) => {
            let h: JournalHeader = serde_json::from_str(first).map_err(|e| JournalError::Header(e.to_string()))?;
            if h != JournalHeader::default() {
                return Err(JournalError::Header(first.to_string()));
            }
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let halt = |message: String| ReplayHalt {
            last_valid: records.last().map(|r: &EventRecord| r.offset),
            line: i + 1,
            message,
        };
        let rec: EventRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                return Ok(ParsedJournal {
                    halt: Some(halt(e.to_string())),
                    records,
                })
            }
        };
        let expected = records.len() as u64;
        if rec.offset != expected {
            let msg = format!("expected offset {expected}, found {}", rec.offset);
            return Ok(ParsedJournal {
                halt: Some(halt(msg)),
                records,
            });
        }
        if rec.kind != rec.body.kind() {
            let msg = format!("kind {:?} does not match body {:?}", rec.kind, rec.body.kind());
            return Ok(ParsedJournal {
                halt: Some(halt(msg)),
                records,
            });
        }
        records.push(rec);
    }
    Ok(ParsedJournal { records, halt: None })
}

#[derive(Debug, Clone)]
pub struct Replayed {
    pub world: World,
    /// Offset of the last applied record.
    pub last_offset: Option<u64>,
    pub halt: Option<ReplayHalt>,
}

/// Folds records `0..=up_to` (or all) into a fresh state. A record that
/// cannot be applied halts replay at the last valid offset.
pub fn replay(records: &[EventRecord], up_to: Option<u64>) -> Replayed {
    replay_onto(World::new(), records, up_to)
}

pub fn replay_onto(mut world: World, records: &[EventRecord], up_to: Option<u64>) -> Replayed {
    let mut last_offset = None;
    for rec in records {
        if up_to.is_some_and(|u| rec.offset > u) {
            break;
        }
        if let Err(e) = world.apply(&rec.body, rec.at) {
            return Replayed {
                world,
                halt: Some(ReplayHalt {
                    last_valid: last_offset,
                    line: rec.offset as usize + 2,
                    message: e.to_string(),
                }),
                last_offset,
            };
        }
        last_offset = Some(rec.offset);
    }
    Replayed {
        world,
        last_offset,
        halt: None,
    }
}

/// Parses and replays journal text in one step.
pub fn replay_text(text: &str, up_to: Option<u64>) -> Result<Replayed, JournalError> {
    let parsed = parse_journal(text)?;
    let mut out = replay(&parsed.records, up_to);
    if out.halt.is_none() {
        out.halt = parsed.halt;
    }
    Ok(out)
}

/// The write side of the journal.
pub struct Journal {
    backend: Box<dyn JournalBackend>,
    next_offset: u64,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal")
            .field("next_offset", &self.next_offset)
            .finish()
    }
}

impl Journal {
    /// Opens a backend, writing the header if it is empty, and returns the
    /// records already present.
    pub fn open(backend: impl JournalBackend + 'static) -> Result<(Self, ParsedJournal), JournalError> {
        let mut backend: Box<dyn JournalBackend> = Box::new(backend);
        let text = backend.scan()?;
        let parsed = if text.is_empty() {
            let header = serde_json::to_string(&JournalHeader::default()).expect("header serializes");
            backend.append(&header)?;
            ParsedJournal {
                records: Vec::new(),
                halt: None,
            }
        } else {
            parse_journal(&text)?
        };
        if let Some(h) = &parsed.halt {
            return Err(JournalError::Corrupt {
                line: h.line,
                message: h.message.clone(),
            });
        }
        let next_offset = parsed.records.len() as u64;
        Ok((Self { backend, next_offset }, parsed))
    }

    pub fn in_memory() -> (Self, MemoryBackend) {
        let mem = MemoryBackend::new();
        let (j, _) = Self::open(mem.clone()).expect("memory journal opens");
        (j, mem)
    }

    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    /// Appends one record and returns its offset. The record is durable (per
    /// the backend) when this returns.
    pub fn record(&mut self, at: u64, event: &Event) -> Result<EventRecord, JournalError> {
        let rec = EventRecord {
            offset: self.next_offset,
            at,
            kind: event.kind(),
            body: event.clone(),
        };
        let line = serde_json::to_string(&rec).expect("records serialize");
        self.backend.append(&line)?;
        self.next_offset += 1;
        Ok(rec)
    }

    pub fn text(&self) -> Result<String, JournalError> {
        Ok(self.backend.scan()?)
    }
}
