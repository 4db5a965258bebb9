//! Design sessions kept in memory and mirrored to an append-only JSON-lines
//! log that is replayed on startup.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use floorgen_core::geom::Point;
use floorgen_core::plan::{Room, ENTRANCE_CORNERS};
use floorgen_core::{FloorPlan, Mode};
use serde::{Deserialize, Serialize};

use crate::api::SampleParams;

/// The request as the sampler saw it, enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub mode: Mode,
    pub rooms: Vec<Room>,
    pub fixed: Vec<usize>,
    #[serde(flatten)]
    pub params: SampleParams,
}

/// One generate or refine call and its candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub constraints: ConstraintRecord,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub candidates: Vec<FloorPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSession {
    pub id: String,
    pub boundary: Option<Vec<Point>>,
    pub entrance: Option<[Point; ENTRANCE_CORNERS]>,
    pub history: Vec<HistoryEntry>,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub updated: u64,
}

/// One log line. The first line for an id creates the session.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogRecord {
    id: String,
    time: u64,
    boundary: Option<Vec<Point>>,
    entrance: Option<[Point; ENTRANCE_CORNERS]>,
    entry: HistoryEntry,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session log {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("session log {path} line {line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
}

#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: Mutex<HashMap<String, DesignSession>>,
    log: Option<(PathBuf, Mutex<File>)>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn apply(sessions: &mut HashMap<String, DesignSession>, rec: LogRecord) -> DesignSession {
    let s = sessions.entry(rec.id.clone()).or_insert_with(|| DesignSession {
        id: rec.id.clone(),
        boundary: None,
        entrance: None,
        history: Vec::new(),
        created: rec.time,
        updated: rec.time,
    });
    if rec.boundary.is_some() {
        s.boundary = rec.boundary;
        s.entrance = rec.entrance;
    }
    s.history.push(rec.entry);
    s.updated = rec.time;
    s.clone()
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays an existing log and appends to it from then on.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        let mut sessions = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: LogRecord = serde_json::from_str(&line).map_err(|source| StoreError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    source,
                })?;
                apply(&mut sessions, rec);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            sessions: Mutex::new(sessions),
            log: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn new_id() -> String {
        uuid::Uuid::new_v4().to_string()
    }

    pub fn get(&self, id: &str) -> Option<DesignSession> {
        self.sessions.lock().expect("session map").get(id).cloned()
    }

    /// Appends an entry, creating the session when needed. The log line is
    /// written before the in-memory state changes.
    pub fn append(
        &self,
        id: &str,
        boundary: Option<Vec<Point>>,
        entrance: Option<[Point; ENTRANCE_CORNERS]>,
        entry: HistoryEntry,
    ) -> Result<DesignSession, StoreError> {
        let mut sessions = self.sessions.lock().expect("session map");
        let rec = LogRecord {
            id: id.to_string(),
            time: now(),
            boundary,
            entrance,
            entry,
        };
        if let Some((path, file)) = &self.log {
            let mut line = serde_json::to_string(&rec).expect("log records serialize");
            line.push('\n');
            let mut f = file.lock().expect("session log");
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|source| StoreError::Io { path: path.clone(), source })?;
        }
        Ok(apply(&mut sessions, rec))
    }
}
