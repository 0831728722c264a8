//! Operator gateway: a fleet loop behind a newline-delimited JSON protocol,
//! served over raw TCP and over WebSocket at `/ws`.

pub mod client;
pub mod hub;
pub mod protocol;
pub mod server;

pub use client::{run_script, ScriptedClient, TimedCommand};
pub use hub::Hub;
pub use protocol::{ClientMessage, ServerMessage, PROTOCOL_VERSION};
pub use server::{serve, Gateway, GatewayConfig};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] gcent_core::Error),
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("unexpected message: {0}")]
    Unexpected(String),
}

pub type Result<T> = std::result::Result<T, Error>;
