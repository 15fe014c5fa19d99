//! Session persistence: one append-only JSON-lines journal per session plus
//! a snapshot written on every state advance.
//!
//! Mutations for a session go through its writer lock one at a time; each
//! is applied to a copy, journaled, and only then published. Readers take
//! the latest published copy without waiting on the writer.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use elicit_core::distfit::ElicitedTriplet;
use elicit_core::elicitation::{Arm, ExpertProfile, Round, SessionError, SessionState, WorkshopSession, SCHEMA_VERSION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt journal {path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("invalid session id '{0}': use 1-64 characters from [A-Za-z0-9_-]")]
    InvalidId(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
    },
    ExpertRegistered {
        profile: ExpertProfile,
    },
    Submitted {
        expert_id: String,
        round: Round,
        arm: Arm,
        triplet: ElicitedTriplet,
        submitted_at: DateTime<Utc>,
    },
    /// `alias_seed` drives the alias shuffle so replay reproduces it.
    Advanced {
        from: SessionState,
        to: SessionState,
        alias_seed: u64,
    },
}

impl Event {
    fn apply(&self, s: &mut WorkshopSession) -> Result<(), SessionError> {
        match self {
            Event::Created { .. } => Ok(()),
            Event::ExpertRegistered { profile } => s.register_expert(profile.clone()),
            Event::Submitted { expert_id, round, arm, triplet, submitted_at } => {
                s.submit(expert_id, *round, *arm, *triplet, *submitted_at).map(|_| ())
            }
            Event::Advanced { from, alias_seed, .. } => {
                if s.state() != *from {
                    return Err(SessionError::StateMismatch { expected: *from, actual: s.state() });
                }
                s.advance_with_rng(&mut ChaCha8Rng::seed_from_u64(*alias_seed)).map(|_| ())
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JournalLine {
    schema_version: u32,
    seq: u64,
    at: DateTime<Utc>,
    event: Event,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    schema_version: u32,
    seq: u64,
    session: WorkshopSession,
}

struct Writer {
    session: WorkshopSession,
    seq: u64,
    journal: File,
}

pub struct SessionHandle {
    writer: tokio::sync::Mutex<Writer>,
    latest: RwLock<Arc<WorkshopSession>>,
    snapshot_path: PathBuf,
}

impl SessionHandle {
    pub fn current(&self) -> Arc<WorkshopSession> {
        self.latest.read().expect("snapshot lock poisoned").clone()
    }

    /// Builds the event from the current state, applies it, journals it and
    /// publishes the result. Nothing is written when the event is rejected.
    pub async fn commit<F>(&self, make: F) -> Result<Arc<WorkshopSession>, StoreError>
    where
        F: FnOnce(&WorkshopSession) -> Result<Event, SessionError>,
    {
        let mut w = self.writer.lock().await;
        let event = make(&w.session)?;
        let mut next = w.session.clone();
        event.apply(&mut next)?;
        let seq = w.seq + 1;
        let line = JournalLine { schema_version: SCHEMA_VERSION, seq, at: Utc::now(), event };
        let mut text = serde_json::to_string(&line).expect("journal line serializes");
        text.push('\n');
        w.journal.write_all(text.as_bytes()).map_err(io_err(&self.snapshot_path))?;
        w.journal.sync_data().map_err(io_err(&self.snapshot_path))?;
        if matches!(line.event, Event::Advanced { .. }) {
            write_snapshot(&self.snapshot_path, seq, &next)?;
        }
        w.seq = seq;
        w.session = next.clone();
        let published = Arc::new(next);
        *self.latest.write().expect("snapshot lock poisoned") = published.clone();
        Ok(published)
    }
}

fn write_snapshot(path: &Path, seq: u64, session: &WorkshopSession) -> Result<(), StoreError> {
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_vec_pretty(&Snapshot { schema_version: SCHEMA_VERSION, seq, session: session.clone() })
        .expect("snapshot serializes");
    fs::write(&tmp, body).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

pub struct SessionStore {
    dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

pub enum Created {
    New(Arc<SessionHandle>),
    Existing(Arc<SessionHandle>),
}

impl SessionStore {
    /// Opens `dir`, creating it if needed, and replays every journal found.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut sessions = HashMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        for path in entries {
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else { continue };
            if !valid_session_id(&id) {
                continue;
            }
            let handle = Self::load(&dir, &id)?;
            sessions.insert(id, Arc::new(handle));
        }
        Ok(Self { dir, sessions: RwLock::new(sessions) })
    }

    fn journal_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.jsonl"))
    }

    fn snapshot_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.snapshot.json"))
    }

    fn load(dir: &Path, id: &str) -> Result<SessionHandle, StoreError> {
        let jpath = Self::journal_path(dir, id);
        let spath = Self::snapshot_path(dir, id);
        let (mut session, mut seq) = match fs::read(&spath) {
            Ok(bytes) => {
                let snap: Snapshot = serde_json::from_slice(&bytes)
                    .map_err(|e| StoreError::Corrupt { path: spath.clone(), line: 0, message: e.to_string() })?;
                (snap.session, snap.seq)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (WorkshopSession::new(id), 0),
            Err(e) => return Err(io_err(&spath)(e)),
        };
        let file = File::open(&jpath).map_err(io_err(&jpath))?;
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err(&jpath))?;
        let last = lines.len();
        for (i, text) in lines.iter().enumerate() {
            if text.trim().is_empty() {
                continue;
            }
            let line: JournalLine = match serde_json::from_str(text) {
                Ok(l) => l,
                // a torn final write is dropped; anything earlier is corruption
                Err(_) if i + 1 == last => {
                    tracing::warn!(session = id, "ignoring incomplete final journal line");
                    break;
                }
                Err(e) => return Err(StoreError::Corrupt { path: jpath.clone(), line: i + 1, message: e.to_string() }),
            };
            if line.seq <= seq {
                continue;
            }
            line.event
                .apply(&mut session)
                .map_err(|e| StoreError::Corrupt { path: jpath.clone(), line: i + 1, message: e.to_string() })?;
            seq = line.seq;
        }
        let journal = OpenOptions::new().append(true).open(&jpath).map_err(io_err(&jpath))?;
        Ok(SessionHandle {
            latest: RwLock::new(Arc::new(session.clone())),
            writer: tokio::sync::Mutex::new(Writer { session, seq, journal }),
            snapshot_path: spath,
        })
    }

    pub fn get(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.read().expect("registry lock poisoned").get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("registry lock poisoned").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Creates the session, or returns the existing one with that id.
    pub fn create(&self, id: &str) -> Result<Created, StoreError> {
        if !valid_session_id(id) {
            return Err(StoreError::InvalidId(id.to_owned()));
        }
        let mut map = self.sessions.write().expect("registry lock poisoned");
        if let Some(h) = map.get(id) {
            return Ok(Created::Existing(h.clone()));
        }
        let jpath = Self::journal_path(&self.dir, id);
        let mut journal = OpenOptions::new().create_new(true).append(true).open(&jpath).map_err(io_err(&jpath))?;
        let line = JournalLine {
            schema_version: SCHEMA_VERSION,
            seq: 1,
            at: Utc::now(),
            event: Event::Created { session_id: id.to_owned() },
        };
        let mut text = serde_json::to_string(&line).expect("journal line serializes");
        text.push('\n');
        journal.write_all(text.as_bytes()).map_err(io_err(&jpath))?;
        journal.sync_data().map_err(io_err(&jpath))?;
        let session = WorkshopSession::new(id);
        let handle = Arc::new(SessionHandle {
            latest: RwLock::new(Arc::new(session.clone())),
            writer: tokio::sync::Mutex::new(Writer { session, seq: 1, journal }),
            snapshot_path: Self::snapshot_path(&self.dir, id),
        });
        map.insert(id.to_owned(), handle.clone());
        Ok(Created::New(handle))
    }
}
