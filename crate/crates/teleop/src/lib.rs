//! Live rollouts over WebSocket with hold-to-intervene.
//!
//! A client connects to `/ws`, sends `start` with a checkpoint name and env
//! seed, then `resume`. The server steps the env at a fixed tick rate and
//! streams a `state` frame per tick. While the client holds the button its
//! latest `action` is executed and labeled human; otherwise the policy acts.
//! Finished rollouts are appended to the dataset file as JSON lines.

use std::net::SocketAddr;
use std::path::PathBuf;

pub mod server;
pub mod session;
pub mod wire;

pub use server::{serve, ServeConfig, ServerHandle};
pub use session::{PolicyDir, RunState, Session};

#[derive(Debug, thiserror::Error)]
pub enum TeleopError {
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("policy directory {0} is not a directory")]
    PolicyDir(PathBuf),
    #[error("tick rate must be positive, got {0}")]
    TickRate(f64),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Core(#[from] iwr_core::Error),
}
