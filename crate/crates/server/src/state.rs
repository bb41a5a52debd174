use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};

use elicit_core::domain::{Dataset, SessionId};
use elicit_core::ingest::IngestConfig;
use elicit_core::interview::{Interview, InterviewSettings};
use elicit_core::provider::CompletionProvider;
use elicit_core::questions::BankEntry;
use elicit_core::store::{Clock, EventStore};

use crate::error::ApiError;

/// How new session ids are minted.
#[derive(Debug)]
pub enum SessionIds {
    /// 128 random bits, hex encoded. Knowing the id is the capability.
    Random,
    /// `s-000001`, `s-000002`, ... for reproducible tests.
    Sequential(AtomicU64),
}

impl SessionIds {
    pub fn sequential() -> Self {
        SessionIds::Sequential(AtomicU64::new(1))
    }

    fn next(&self) -> SessionId {
        match self {
            SessionIds::Random => SessionId(format!("{:032x}", rand::random::<u128>())),
            SessionIds::Sequential(n) => SessionId(format!("s-{:06}", n.fetch_add(1, Ordering::Relaxed))),
        }
    }
}

pub type SessionHandle = Arc<Mutex<Interview>>;

/// Everything a request handler needs.
pub struct Services {
    pub store: Arc<dyn EventStore>,
    pub clock: Arc<dyn Clock>,
    pub provider: Arc<dyn CompletionProvider>,
    pub bank: Vec<BankEntry>,
    pub ingest: IngestConfig,
    pub settings: InterviewSettings,
    /// Use `settings.seed` for every session instead of a fresh random seed.
    pub fixed_seed: bool,
    pub ids: SessionIds,
    /// Bearer token required on every request when set.
    pub auth_token: Option<String>,
    pub max_upload_bytes: usize,
    sessions: Mutex<HashMap<SessionId, SessionHandle>>,
}

impl Services {
    pub fn new(
        store: Arc<dyn EventStore>,
        clock: Arc<dyn Clock>,
        provider: Arc<dyn CompletionProvider>,
        bank: Vec<BankEntry>,
    ) -> Self {
        Self {
            store,
            clock,
            provider,
            bank,
            ingest: IngestConfig::default(),
            settings: InterviewSettings::default(),
            fixed_seed: false,
            ids: SessionIds::Random,
            auth_token: None,
            max_upload_bytes: 32 * 1024 * 1024,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn registry(&self) -> MutexGuard<'_, HashMap<SessionId, SessionHandle>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Ingests and bootstraps a new session. Blocks on provider calls.
    pub fn create_session(&self, dataset: Dataset) -> Result<SessionId, ApiError> {
        let settings = InterviewSettings {
            seed: if self.fixed_seed {
                self.settings.seed
            } else {
                rand::random()
            },
            ..self.settings
        };
        let id = self.ids.next();
        let iv = Interview::create(
            self.store.clone(),
            self.clock.clone(),
            id.clone(),
            dataset,
            &self.bank,
            self.provider.as_ref(),
            settings,
        )?;
        self.registry().insert(id.clone(), Arc::new(Mutex::new(iv)));
        Ok(id)
    }

    /// The live session, reloaded from the store when not cached.
    pub fn session(&self, id: &SessionId) -> Result<SessionHandle, ApiError> {
        if let Some(h) = self.registry().get(id) {
            return Ok(h.clone());
        }
        let iv = Interview::open(self.store.clone(), self.clock.clone(), id, self.settings)?;
        Ok(self
            .registry()
            .entry(id.clone())
            .or_insert_with(|| Arc::new(Mutex::new(iv)))
            .clone())
    }

    /// A panic during a change may have left memory ahead of the log, so a
    /// poisoned session is dropped and reloaded from the store.
    fn evict(&self, id: &SessionId) {
        self.registry().remove(id);
    }

    /// Runs a read against the session, waiting for any in-flight change.
    pub fn read<T>(&self, id: &SessionId, f: impl FnOnce(&Interview) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let handle = self.session(id)?;
        let guard = match handle.lock() {
            Ok(g) => g,
            Err(_) => {
                self.evict(id);
                return self.read(id, f);
            }
        };
        f(&guard)
    }

    /// Runs a change against the session. A concurrent change gets 409.
    pub fn mutate<T>(
        &self,
        id: &SessionId,
        f: impl FnOnce(&mut Interview, &dyn CompletionProvider) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let handle = self.session(id)?;
        let mut guard = match handle.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(ApiError::busy()),
            Err(TryLockError::Poisoned(_)) => {
                self.evict(id);
                return self.mutate(id, f);
            }
        };
        f(&mut guard, self.provider.as_ref())
    }
}
