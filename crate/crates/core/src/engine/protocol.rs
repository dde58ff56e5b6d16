//! JSON text-frame messages of the live session service.

use serde::{Deserialize, Serialize};

use crate::model::Phase;
use crate::schema::{audio_vocab, text_vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Hello {
        #[serde(default)]
        frame_ms: Option<u64>,
    },
    UserToken {
        token: String,
    },
    Reset,
    Bye,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabInfo {
    pub text: Vec<String>,
    pub audio: Vec<String>,
}

impl VocabInfo {
    pub fn standard() -> VocabInfo {
        VocabInfo {
            text: text_vocab().iter().map(|s| s.to_string()).collect(),
            audio: audio_vocab().iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Ready {
        session: String,
        vocab: VocabInfo,
    },
    Tick {
        t: usize,
        user: String,
        agent: String,
        g: f32,
        phase: Phase,
    },
    Error {
        reason: String,
    },
}

impl ClientMsg {
    /// Parses one text frame; the error string is meant for an error reply.
    pub fn parse(text: &str) -> std::result::Result<ClientMsg, String> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
        let ty = v
            .get("type")
            .and_then(|t| t.as_str())
            .ok_or_else(|| "missing \"type\" field".to_string())?
            .to_string();
        if !matches!(ty.as_str(), "hello" | "user_token" | "reset" | "bye") {
            return Err(format!("unknown message type {ty:?}"));
        }
        serde_json::from_value(v).map_err(|e| format!("bad {ty} message: {e}"))
    }
}

impl ServerMsg {
    pub fn error(reason: impl Into<String>) -> ServerMsg {
        ServerMsg::Error {
            reason: reason.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
