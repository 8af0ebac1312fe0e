//! HTTP control plane: configure, run and observe simulations, intervene,
//! interview agents, collect feedback, export datasets and trigger training.
//!
//! Every mutating route honours an `Idempotency-Key` header. Errors are JSON
//! [`ApiError`] bodies.

mod error;
mod idempotency;
mod registry;
mod routes;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::Router;
use parking_lot::{Mutex, RwLock};

use gensim_core::correction::FeedbackStore;

pub use error::{ApiError, ErrorCode};
pub use idempotency::{IDEMPOTENCY_HEADER, REPLAYED_HEADER};
pub use registry::{SimEntry, SimulationHandle, Status};
pub use routes::{AgentDetail, AgentPage, ExportResponse, RevisionRequest, RunRequest, ScoreRequest};

/// Shared state behind every handler.
pub struct AppState {
    sims: RwLock<BTreeMap<String, Arc<SimEntry>>>,
    /// Target of the top-level `/agents` routes when no simulation is named.
    latest: Mutex<Option<String>>,
    feedback: FeedbackStore,
    exports: Mutex<HashMap<&'static str, PathBuf>>,
    data_dir: PathBuf,
    idempotency: idempotency::IdempotencyCache,
}

impl AppState {
    pub fn new(data_dir: PathBuf) -> Self {
        AppState {
            sims: RwLock::default(),
            latest: Mutex::default(),
            feedback: FeedbackStore::new(),
            exports: Mutex::default(),
            data_dir,
            idempotency: Default::default(),
        }
    }

    pub fn feedback(&self) -> &FeedbackStore {
        &self.feedback
    }

    pub fn simulation(&self, id: &str) -> Result<Arc<SimEntry>, ApiError> {
        self.sims
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("simulation {id} not found")))
    }

    /// The named simulation, or the most recently created one.
    fn simulation_or_latest(&self, id: Option<&str>) -> Result<Arc<SimEntry>, ApiError> {
        match id {
            Some(id) => self.simulation(id),
            None => {
                let latest = self.latest.lock().clone();
                let id = latest.ok_or_else(|| ApiError::not_found("no simulation has been created"))?;
                self.simulation(&id)
            }
        }
    }

    fn insert(&self, entry: SimEntry) -> Arc<SimEntry> {
        let entry = Arc::new(entry);
        self.sims.write().insert(entry.id.clone(), entry.clone());
        *self.latest.lock() = Some(entry.id.clone());
        entry
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    routes::router(state)
}

/// Bind and serve until the process exits.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
