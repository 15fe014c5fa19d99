//! HTTP service for live elicitation workshops: expert registration,
//! round-gated submissions, a stateless fit preview for the sliders, and
//! de-identified boxplots for the discussion.

mod api;
mod auth;
mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;

pub use api::{router, AppState, DEFAULT_PREVIEW_POINTS};
pub use auth::{expert_token, facilitator_token};
pub use error::ApiError;
pub use store::{SessionStore, StoreError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    pub token_secret: String,
}

/// Opens the store, binds, and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), StoreError> {
    let store = SessionStore::open(&config.data_dir)?;
    let io = |source| StoreError::Io { path: config.data_dir.clone(), source };
    let listener = tokio::net::TcpListener::bind(config.bind).await.map_err(io)?;
    tracing::info!(addr = %config.bind, sessions = store.ids().len(), "listening");
    let app = router(AppState::new(store, &config.token_secret));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io)
}
