//! Durable event logs with periodic snapshots.

mod file;
mod memory;

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use thiserror::Error;

use crate::domain::SessionId;
use crate::session::{ApplyError, EventBody, Session, SessionEvent};

pub use file::FileStore;
pub use memory::MemoryStore;

/// A snapshot is written after every this many events.
pub const SNAPSHOT_INTERVAL: u64 = 50;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} already exists")]
    SessionExists(SessionId),
    #[error("invalid session id {0:?}")]
    InvalidSessionId(String),
    /// `position` is the sequence of the last intact event.
    #[error("event log is corrupt after sequence {position} (byte offset {offset})")]
    CorruptLog { position: u64, offset: u64 },
    #[error("expected sequence {expected}, got {found}")]
    SequenceConflict { expected: u64, found: u64 },
    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("event cannot be applied: {0}")]
    Replay(#[from] ApplyError),
}

impl StoreError {
    pub fn name(&self) -> &'static str {
        match self {
            StoreError::UnknownSession(_) => "UnknownSession",
            StoreError::SessionExists(_) => "SessionExists",
            StoreError::InvalidSessionId(_) => "InvalidSessionId",
            StoreError::CorruptLog { .. } => "CorruptLog",
            StoreError::SequenceConflict { .. } => "SequenceConflict",
            StoreError::Storage(_) => "StorageError",
            StoreError::Serialization(_) => "StorageError",
            StoreError::Replay(_) => "ReplayError",
        }
    }
}

/// Append-only per-session event storage.
pub trait EventStore: Send + Sync {
    /// Persists `event`, which must carry the next sequence number.
    fn append(&self, session: &SessionId, event: &SessionEvent) -> Result<u64, StoreError>;

    /// All durable events in sequence order.
    fn events(&self, session: &SessionId) -> Result<Vec<SessionEvent>, StoreError>;

    /// Events with sequence greater than `after`.
    fn events_after(&self, session: &SessionId, after: u64) -> Result<Vec<SessionEvent>, StoreError> {
        Ok(self
            .events(session)?
            .into_iter()
            .filter(|e| e.sequence > after)
            .collect())
    }

    fn write_snapshot(&self, session: &Session) -> Result<(), StoreError>;

    /// Most recent snapshot whose sequence is covered by the log.
    fn latest_snapshot(&self, session: &SessionId) -> Result<Option<Session>, StoreError>;

    fn exists(&self, session: &SessionId) -> Result<bool, StoreError>;

    fn list_sessions(&self) -> Result<Vec<SessionId>, StoreError>;

    /// Drops any torn tail so the log ends at the last intact event.
    fn truncate_corrupt_tail(&self, session: &SessionId) -> Result<u64, StoreError>;
}

/// Latest snapshot plus the events after it.
pub fn load_session(store: &dyn EventStore, id: &SessionId) -> Result<Session, StoreError> {
    let snapshot = store.latest_snapshot(id)?;
    let after = snapshot.as_ref().map_or(0, |s| s.last_sequence);
    let tail = store.events_after(id, after)?;
    let mut session = match snapshot {
        Some(s) => s,
        None if tail.is_empty() => return Err(StoreError::UnknownSession(id.clone())),
        None => Session::empty(id.clone()),
    };
    for e in &tail {
        session.apply(e)?;
    }
    Ok(session)
}

/// Full replay from the first event, ignoring snapshots.
pub fn replay_session(store: &dyn EventStore, id: &SessionId) -> Result<Session, StoreError> {
    let events = store.events(id)?;
    if events.is_empty() {
        return Err(StoreError::UnknownSession(id.clone()));
    }
    Ok(Session::replay(id.clone(), &events)?)
}

/// Loads a session, cutting off a torn final record first if there is one.
pub fn recover_session(store: &dyn EventStore, id: &SessionId) -> Result<Session, StoreError> {
    match load_session(store, id) {
        Err(StoreError::CorruptLog { .. }) => {
            store.truncate_corrupt_tail(id)?;
            load_session(store, id)
        }
        other => other,
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock: each reading is one second after the previous.
#[derive(Debug)]
pub struct LogicalClock {
    next: AtomicI64,
}

impl LogicalClock {
    pub fn starting_at(unix_seconds: i64) -> Self {
        Self {
            next: AtomicI64::new(unix_seconds),
        }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::starting_at(1_700_000_000)
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.next.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_opt(t, 0).single().expect("timestamp in range")
    }
}

/// In-memory session state kept in step with its durable log.
pub struct Journal {
    store: Arc<dyn EventStore>,
    clock: Arc<dyn Clock>,
    session: Session,
}

impl Journal {
    pub fn create(store: Arc<dyn EventStore>, clock: Arc<dyn Clock>, id: SessionId) -> Result<Self, StoreError> {
        if store.exists(&id)? {
            return Err(StoreError::SessionExists(id));
        }
        Ok(Self {
            store,
            clock,
            session: Session::empty(id),
        })
    }

    pub fn open(store: Arc<dyn EventStore>, clock: Arc<dyn Clock>, id: &SessionId) -> Result<Self, StoreError> {
        let session = load_session(store.as_ref(), id)?;
        Ok(Self {
            store,
            clock,
            session,
        })
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    pub fn store(&self) -> &dyn EventStore {
        self.store.as_ref()
    }

    /// Applies `body` as the next event and persists it.
    ///
    /// Nothing is written if the event does not apply. If the write fails the
    /// in-memory state is reloaded from the store.
    pub fn commit(&mut self, body: EventBody) -> Result<SessionEvent, StoreError> {
        let event = SessionEvent {
            sequence: self.session.last_sequence + 1,
            timestamp: self.clock.now(),
            body,
        };
        self.session.apply(&event)?;
        if let Err(e) = self.store.append(&self.session.id, &event) {
            self.reload()?;
            return Err(e);
        }
        if event.sequence.is_multiple_of(SNAPSHOT_INTERVAL) {
            self.store.write_snapshot(&self.session)?;
        }
        Ok(event)
    }

    fn reload(&mut self) -> Result<(), StoreError> {
        self.session = match load_session(self.store.as_ref(), &self.session.id) {
            Ok(s) => s,
            Err(StoreError::UnknownSession(id)) => Session::empty(id),
            Err(e) => return Err(e),
        };
        Ok(())
    }
}

pub(crate) fn check_session_id(id: &SessionId) -> Result<(), StoreError> {
    let s = id.as_str();
    let ok = !s.is_empty()
        && s.len() <= 128
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidSessionId(s.to_string()))
    }
}
