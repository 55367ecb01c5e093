//! JSON text frames exchanged with the browser client.

use serde::{Deserialize, Serialize};

use iwr_core::env::Primitive;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientMsg {
    Pause,
    Resume,
    Button { down: bool },
    Action { dx: f64, dy: f64, grip: f64 },
    Start { policy: String, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMsg {
    /// Sent once per connection; reconnect with `/ws?session=<id>`.
    Hello { session: u64 },
    State(StateFrame),
    Error { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub t: u32,
    pub primitives: Vec<Primitive>,
    pub phase: String,
    pub intervening: bool,
    pub done: bool,
    pub success: bool,
}

impl ClientMsg {
    pub fn parse(text: &str) -> Result<ClientMsg, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}

impl ServerMsg {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
