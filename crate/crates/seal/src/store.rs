//! On-disk session layout.
//!
//! ```text
//! <root>/<id>/session.json
//!            /spec.json | spec.yaml
//!            /report.json, report.txt     (once mapping has run)
//!            /events.log                  (JSON lines)
//!            /transcript/001.json ...
//!            /.lock
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place.
//! `session.json` goes last and records how many transcript entries belong
//! to it, so an interrupted save leaves the previous session loadable.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use seal_core::json::to_canonical_string;
use seal_core::session::{valid_session_id, TranscriptEntry};
use seal_core::Session;

use crate::clock::now_rfc3339;

pub const SESSION_FILE: &str = "session.json";
pub const EVENTS_FILE: &str = "events.log";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const TRANSCRIPT_DIR: &str = "transcript";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0} does not contain a session")]
    NotASession(PathBuf),
    #[error("corrupt session at {path}: {detail}")]
    CorruptSession { path: PathBuf, detail: String },
    #[error("session {0} is locked by another writer")]
    Locked(String),
    #[error("invalid session id {0:?}")]
    InvalidId(String),
    #[error("session {0} already exists")]
    AlreadyExists(String),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io { .. } => "IoFailure",
            StoreError::NotASession(_) => "NotASession",
            StoreError::CorruptSession { .. } => "CorruptSession",
            StoreError::Locked(_) => "SessionLocked",
            StoreError::InvalidId(_) => "InvalidSessionId",
            StoreError::AlreadyExists(_) => "SessionExists",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, detail: impl Into<String>) -> StoreError {
    StoreError::CorruptSession {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// `session.json` contents: the session plus the transcript length it was
/// saved with.
#[derive(Serialize, Deserialize)]
struct Stored<S> {
    #[serde(flatten)]
    session: S,
    transcript_entries: usize,
}

/// One line of `events.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub timestamp: String,
    pub kind: String,
    pub payload: Value,
}

/// A directory holding one subdirectory per session.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store { root: root.into() }
    }

    /// Store rooted at the parent of `dir`, plus the session id `dir` names.
    pub fn for_session_dir(dir: &Path) -> Result<(Store, String), StoreError> {
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .filter(|n| valid_session_id(n))
            .ok_or_else(|| StoreError::InvalidId(dir.display().to_string()))?
            .to_string();
        let root = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Ok((Store::new(root), id))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        valid_session_id(id) && self.session_dir(id).join(SESSION_FILE).is_file()
    }

    /// Ids of every stored session, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.root)(e)),
        };
        let mut ids: Vec<String> = entries
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|id| self.exists(id))
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Takes the single-writer lock for a session directory.
    pub fn lock(&self, id: &str) -> Result<SessionLock, StoreError> {
        if !valid_session_id(id) {
            return Err(StoreError::InvalidId(id.into()));
        }
        let dir = self.session_dir(id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        match file.try_lock() {
            Ok(()) => Ok(SessionLock { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(StoreError::Locked(id.into())),
            Err(fs::TryLockError::Error(e)) => Err(io_err(&path)(e)),
        }
    }

    /// Writes a new session; refuses to overwrite an existing one.
    pub fn create(&self, session: &Session) -> Result<(), StoreError> {
        if self.exists(&session.id) {
            return Err(StoreError::AlreadyExists(session.id.clone()));
        }
        let _lock = self.lock(&session.id)?;
        self.save(session)
    }

    /// Writes the full file set. Callers hold the session lock.
    pub fn save(&self, session: &Session) -> Result<(), StoreError> {
        if !valid_session_id(&session.id) {
            return Err(StoreError::InvalidId(session.id.clone()));
        }
        let dir = self.session_dir(&session.id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        write_if_changed(&dir.join(session.spec.file_name()), session.spec.text.as_bytes())?;

        if !session.transcript.is_empty() {
            let tdir = dir.join(TRANSCRIPT_DIR);
            fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
            for entry in &session.transcript {
                write_if_changed(&tdir.join(transcript_name(entry.seq)), canonical(entry)?.as_bytes())?;
            }
        }

        match &session.report {
            Some(report) => {
                write_if_changed(&dir.join(REPORT_JSON), canonical(report)?.as_bytes())?;
                write_if_changed(&dir.join(REPORT_TEXT), report.render_text().as_bytes())?;
            }
            None => {
                remove_if_present(&dir.join(REPORT_JSON))?;
                remove_if_present(&dir.join(REPORT_TEXT))?;
            }
        }

        let stored = Stored {
            session,
            transcript_entries: session.transcript.len(),
        };
        write_if_changed(&dir.join(SESSION_FILE), canonical(&stored)?.as_bytes())
    }

    pub fn load(&self, id: &str) -> Result<Session, StoreError> {
        if !valid_session_id(id) {
            return Err(StoreError::InvalidId(id.into()));
        }
        load_session(&self.session_dir(id))
    }

    pub fn append_event(&self, id: &str, kind: &str, payload: Value) -> Result<u64, StoreError> {
        append_event(&self.session_dir(id), kind, payload)
    }

    pub fn events(&self, id: &str, after: u64) -> Result<Vec<Event>, StoreError> {
        read_events(&self.session_dir(id), after)
    }
}

/// Held while a process writes a session; released on drop.
#[derive(Debug)]
pub struct SessionLock {
    _file: File,
}

fn transcript_name(seq: u32) -> String {
    format!("{seq:03}.json")
}

fn canonical<T: Serialize + ?Sized>(value: &T) -> Result<String, StoreError> {
    to_canonical_string(value).map_err(|e| StoreError::Io {
        path: PathBuf::new(),
        source: io::Error::other(e),
    })
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(());
    }
    write_atomic(path, bytes)
}

/// Writes to a temporary sibling, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

fn remove_if_present(path: &Path) -> Result<(), StoreError> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(io_err(path)(e)),
        _ => Ok(()),
    }
}

/// Loads the session saved in `dir`, re-checking the spec hash and the
/// session invariants.
pub fn load_session(dir: &Path) -> Result<Session, StoreError> {
    let path = dir.join(SESSION_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(StoreError::NotASession(dir.to_path_buf()))
        }
        Err(e) => return Err(io_err(&path)(e)),
    };
    let stored: Stored<Session> =
        serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    let mut session = stored.session;

    let spec_path = dir.join(session.spec.file_name());
    session.spec.text = fs::read_to_string(&spec_path).map_err(|e| corrupt(&spec_path, e.to_string()))?;
    if !session.spec.hash_matches() {
        return Err(corrupt(&spec_path, "spec document does not match its recorded hash"));
    }

    let tdir = dir.join(TRANSCRIPT_DIR);
    for seq in 1..=stored.transcript_entries as u32 {
        let p = tdir.join(transcript_name(seq));
        let text = fs::read_to_string(&p).map_err(|e| corrupt(&p, e.to_string()))?;
        let entry: TranscriptEntry = serde_json::from_str(&text).map_err(|e| corrupt(&p, e.to_string()))?;
        session.transcript.push(entry);
    }

    session.validate().map_err(|d| corrupt(dir, d))?;
    Ok(session)
}

/// Appends one event and returns its sequence number. The log file is
/// locked for the duration so concurrent appenders never share a number.
pub fn append_event(dir: &Path, kind: &str, payload: Value) -> Result<u64, StoreError> {
    if !dir.join(SESSION_FILE).is_file() {
        return Err(io_err(dir)(io::Error::new(
            io::ErrorKind::NotFound,
            "no session here to append events to",
        )));
    }
    let path = dir.join(EVENTS_FILE);
    let mut file = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    file.lock().map_err(io_err(&path))?;
    let last = last_seq(&path)?;
    let event = Event {
        seq: last + 1,
        timestamp: now_rfc3339(),
        kind: kind.to_string(),
        payload,
    };
    let mut line = serde_json::to_string(&event).map_err(|e| io_err(&path)(io::Error::other(e)))?;
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(io_err(&path))?;
    file.sync_data().map_err(io_err(&path))?;
    Ok(event.seq)
}

fn last_seq(path: &Path) -> Result<u64, StoreError> {
    Ok(read_log(path)?.last().map_or(0, |e| e.seq))
}

fn read_log(path: &Path) -> Result<Vec<Event>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut events = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event =
            serde_json::from_str(&line).map_err(|e| corrupt(path, format!("line {}: {e}", n + 1)))?;
        events.push(event);
    }
    Ok(events)
}

/// Events with a sequence number greater than `after`.
pub fn read_events(dir: &Path, after: u64) -> Result<Vec<Event>, StoreError> {
    if !dir.join(SESSION_FILE).is_file() {
        return Err(StoreError::NotASession(dir.to_path_buf()));
    }
    let mut events = read_log(&dir.join(EVENTS_FILE))?;
    events.retain(|e| e.seq > after);
    Ok(events)
}
