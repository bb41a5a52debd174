use std::collections::BTreeMap;
use std::sync::Mutex;

use super::{check_session_id, EventStore, StoreError};
use crate::domain::SessionId;
use crate::session::{Session, SessionEvent};

#[derive(Default)]
struct Entry {
    events: Vec<SessionEvent>,
    snapshot: Option<Session>,
}

/// Volatile store for tests and throwaway sessions.
#[derive(Default)]
pub struct MemoryStore {
    sessions: Mutex<BTreeMap<SessionId, Entry>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventStore for MemoryStore {
    fn append(&self, session: &SessionId, event: &SessionEvent) -> Result<u64, StoreError> {
        check_session_id(session)?;
        let mut map = self.sessions.lock().unwrap();
        let entry = map.entry(session.clone()).or_default();
        let expected = entry.events.last().map_or(0, |e| e.sequence) + 1;
        if event.sequence != expected {
            return Err(StoreError::SequenceConflict {
                expected,
                found: event.sequence,
            });
        }
        entry.events.push(event.clone());
        Ok(event.sequence)
    }

    fn events(&self, session: &SessionId) -> Result<Vec<SessionEvent>, StoreError> {
        Ok(self
            .sessions
            .lock()
            .unwrap()
            .get(session)
            .map(|e| e.events.clone())
            .unwrap_or_default())
    }

    fn write_snapshot(&self, session: &Session) -> Result<(), StoreError> {
        let mut map = self.sessions.lock().unwrap();
        map.entry(session.id.clone()).or_default().snapshot = Some(session.clone());
        Ok(())
    }

    fn latest_snapshot(&self, session: &SessionId) -> Result<Option<Session>, StoreError> {
        Ok(self
            .sessions
            .lock()
            .unwrap()
            .get(session)
            .and_then(|e| e.snapshot.clone()))
    }

    fn exists(&self, session: &SessionId) -> Result<bool, StoreError> {
        Ok(self
            .sessions
            .lock()
            .unwrap()
            .get(session)
            .is_some_and(|e| !e.events.is_empty()))
    }

    fn list_sessions(&self) -> Result<Vec<SessionId>, StoreError> {
        Ok(self
            .sessions
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, e)| !e.events.is_empty())
            .map(|(k, _)| k.clone())
            .collect())
    }

    fn truncate_corrupt_tail(&self, session: &SessionId) -> Result<u64, StoreError> {
        Ok(self
            .sessions
            .lock()
            .unwrap()
            .get(session)
            .and_then(|e| e.events.last().map(|e| e.sequence))
            .unwrap_or(0))
    }
}
