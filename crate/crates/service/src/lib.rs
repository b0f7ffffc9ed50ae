//! Labeling-queue service for the deduplication engine: run registry,
//! event-sourced persistence and the HTTP API.

pub mod api;
pub mod registry;

pub use api::router;
pub use registry::{OracleMode, Registry, RunHandle, ServiceError};
