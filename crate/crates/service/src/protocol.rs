//! JSON text frames exchanged over `/session`.
//!
//! Every frame carries `v` (protocol version) and `tick`. Client frames:
//!
//! ```json
//! {"v":1,"tick":41,"type":"input","position":[0.01,0.0,0.01],"pedal":true}
//! ```
//!
//! Input fields are all optional; see [`ClientInput`]. Server frames are
//! `hello` once on connect, `tick` every simulation step and `error` when a
//! client frame is rejected:
//!
//! ```json
//! {"v":1,"tick":0,"type":"hello","session":3,"preset":"reach","config":{...},"entries":[[0.015,0.0,0.0],...]}
//! {"v":1,"tick":42,"type":"tick","record":{...},"psm2":{...},"metrics":null}
//! {"v":1,"tick":42,"type":"error","message":"unsupported protocol version 2"}
//! ```
//!
//! `record` is the log entry for that tick, serialized exactly as in the
//! session log.

use ciac_core::kinematics::{Pose, Vec3};
use ciac_core::metrics::MetricsReport;
use ciac_core::session::{ClientInput, Preset};
use ciac_core::sim::TickRecord;
use ciac_core::world::WorldConfig;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientBody {
    Input(ClientInput),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientMessage {
    /// Last tick the client had seen.
    pub tick: Option<u64>,
    pub body: ClientBody,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}")]
    Version(u64),
    #[error("missing protocol version")]
    MissingVersion,
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, WireError> {
        let mut v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| WireError::Malformed(e.to_string()))?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| WireError::Malformed("expected a JSON object".into()))?;
        let version = obj
            .remove("v")
            .ok_or(WireError::MissingVersion)?
            .as_u64()
            .ok_or_else(|| WireError::Malformed("v must be an integer".into()))?;
        if version != u64::from(PROTOCOL_VERSION) {
            return Err(WireError::Version(version));
        }
        let tick = match obj.remove("tick") {
            None | Some(serde_json::Value::Null) => None,
            Some(t) => Some(
                t.as_u64()
                    .ok_or_else(|| WireError::Malformed("tick must be an integer".into()))?,
            ),
        };
        let body = serde_json::from_value(v).map_err(|e| WireError::Malformed(e.to_string()))?;
        Ok(Self { tick, body })
    }

    pub fn to_text(&self) -> String {
        let mut v = serde_json::to_value(&self.body).expect("client body serializes");
        let obj = v.as_object_mut().expect("tagged body is an object");
        obj.insert("v".into(), PROTOCOL_VERSION.into());
        if let Some(t) = self.tick {
            obj.insert("tick".into(), t.into());
        }
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickSnapshot {
    pub record: TickRecord,
    pub psm2: Pose,
    /// Refreshed once per simulated second.
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerBody {
    Hello {
        session: u64,
        preset: Preset,
        config: Box<WorldConfig>,
        entries: Vec<Vec3>,
    },
    Tick(Box<TickSnapshot>),
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub v: u32,
    pub tick: u64,
    #[serde(flatten)]
    pub body: ServerBody,
}

impl ServerMessage {
    pub fn new(tick: u64, body: ServerBody) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            tick,
            body,
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("server message serializes")
    }
}
