use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use tracing::warn;

use super::{check_session_id, EventStore, StoreError};
use crate::domain::SessionId;
use crate::session::{Session, SessionEvent};

const LOG_FILE: &str = "events.log";
const SNAPSHOT_PREFIX: &str = "snapshot-";

/// One directory per session holding `events.log` and `snapshot-<seq>` files.
///
/// Log records are a little-endian u32 byte length followed by the event as
/// JSON. Each append is flushed with `fsync` before returning; snapshots are
/// written to a temporary file and renamed into place.
pub struct FileStore {
    root: PathBuf,
    tails: Mutex<HashMap<SessionId, LogTail>>,
}

#[derive(Debug, Clone, Copy)]
struct LogTail {
    last_sequence: u64,
    /// Byte length of the intact prefix.
    good_len: u64,
    corrupt: bool,
}

struct Scan {
    events: Vec<SessionEvent>,
    tail: LogTail,
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            tails: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &SessionId) -> PathBuf {
        self.root.join(id.as_str())
    }

    pub fn log_path(&self, id: &SessionId) -> PathBuf {
        self.session_dir(id).join(LOG_FILE)
    }

    fn scan(&self, id: &SessionId) -> Result<Scan, StoreError> {
        check_session_id(id)?;
        let bytes = match fs::read(self.log_path(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut events = Vec::new();
        let mut offset = 0usize;
        let mut corrupt = false;
        while offset < bytes.len() {
            let Some(len_bytes) = bytes.get(offset..offset + 4) else {
                corrupt = true;
                break;
            };
            let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            let Some(body) = bytes.get(offset + 4..offset + 4 + len) else {
                corrupt = true;
                break;
            };
            match serde_json::from_slice::<SessionEvent>(body) {
                Ok(e) if e.sequence == events.len() as u64 + 1 => events.push(e),
                _ => {
                    corrupt = true;
                    break;
                }
            }
            offset += 4 + len;
        }
        let tail = LogTail {
            last_sequence: events.len() as u64,
            good_len: offset as u64,
            corrupt,
        };
        Ok(Scan { events, tail })
    }

    fn tail(&self, id: &SessionId) -> Result<LogTail, StoreError> {
        if let Some(t) = self.tails.lock().unwrap().get(id) {
            return Ok(*t);
        }
        let scan = self.scan(id)?;
        self.tails.lock().unwrap().insert(id.clone(), scan.tail);
        Ok(scan.tail)
    }

    fn snapshot_files(&self, id: &SessionId) -> Result<Vec<(u64, PathBuf)>, StoreError> {
        let dir = self.session_dir(id);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry?;
            let name = entry.file_name();
            let Some(seq) = name
                .to_str()
                .and_then(|n| n.strip_prefix(SNAPSHOT_PREFIX))
                .and_then(|n| n.parse::<u64>().ok())
            else {
                continue;
            };
            out.push((seq, entry.path()));
        }
        out.sort();
        Ok(out)
    }
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

impl EventStore for FileStore {
    fn append(&self, session: &SessionId, event: &SessionEvent) -> Result<u64, StoreError> {
        let tail = self.tail(session)?;
        if tail.corrupt {
            return Err(StoreError::CorruptLog {
                position: tail.last_sequence,
                offset: tail.good_len,
            });
        }
        let expected = tail.last_sequence + 1;
        if event.sequence != expected {
            return Err(StoreError::SequenceConflict {
                expected,
                found: event.sequence,
            });
        }
        let body = serde_json::to_vec(event)?;
        let len = u32::try_from(body.len()).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "event record too large")
        })?;
        let mut record = Vec::with_capacity(body.len() + 4);
        record.extend_from_slice(&len.to_le_bytes());
        record.extend_from_slice(&body);

        let dir = self.session_dir(session);
        let fresh = !dir.exists();
        fs::create_dir_all(&dir)?;
        if fresh {
            sync_dir(&self.root);
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(LOG_FILE))?;
        f.write_all(&record)?;
        f.sync_data()?;

        self.tails.lock().unwrap().insert(
            session.clone(),
            LogTail {
                last_sequence: event.sequence,
                good_len: tail.good_len + record.len() as u64,
                corrupt: false,
            },
        );
        Ok(event.sequence)
    }

    fn events(&self, session: &SessionId) -> Result<Vec<SessionEvent>, StoreError> {
        let scan = self.scan(session)?;
        self.tails.lock().unwrap().insert(session.clone(), scan.tail);
        if scan.tail.corrupt {
            return Err(StoreError::CorruptLog {
                position: scan.tail.last_sequence,
                offset: scan.tail.good_len,
            });
        }
        Ok(scan.events)
    }

    fn write_snapshot(&self, session: &Session) -> Result<(), StoreError> {
        check_session_id(&session.id)?;
        let dir = self.session_dir(&session.id);
        fs::create_dir_all(&dir)?;
        let name = format!("{SNAPSHOT_PREFIX}{}", session.last_sequence);
        let tmp = dir.join(format!(".{name}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer(&mut f, session)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, dir.join(name))?;
        sync_dir(&dir);
        Ok(())
    }

    fn latest_snapshot(&self, session: &SessionId) -> Result<Option<Session>, StoreError> {
        let covered = self.tail(session)?.last_sequence;
        for (seq, path) in self.snapshot_files(session)?.into_iter().rev() {
            if seq > covered {
                continue;
            }
            match fs::read(&path)
                .map_err(StoreError::from)
                .and_then(|b| serde_json::from_slice::<Session>(&b).map_err(StoreError::from))
            {
                Ok(s) if s.last_sequence == seq => return Ok(Some(s)),
                Ok(_) | Err(_) => {
                    warn!(session = %session, snapshot = seq, "ignoring unreadable snapshot");
                }
            }
        }
        Ok(None)
    }

    fn exists(&self, session: &SessionId) -> Result<bool, StoreError> {
        check_session_id(session)?;
        Ok(self.log_path(session).exists())
    }

    fn list_sessions(&self) -> Result<Vec<SessionId>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join(LOG_FILE).exists() {
                if let Some(name) = entry.file_name().to_str() {
                    out.push(SessionId(name.to_string()));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn truncate_corrupt_tail(&self, session: &SessionId) -> Result<u64, StoreError> {
        let scan = self.scan(session)?;
        if scan.tail.corrupt {
            warn!(
                session = %session,
                position = scan.tail.last_sequence,
                "truncating torn event log tail"
            );
            let f = OpenOptions::new().write(true).open(self.log_path(session))?;
            f.set_len(scan.tail.good_len)?;
            f.sync_all()?;
        }
        let tail = LogTail {
            corrupt: false,
            ..scan.tail
        };
        self.tails.lock().unwrap().insert(session.clone(), tail);
        Ok(tail.last_sequence)
    }
}
