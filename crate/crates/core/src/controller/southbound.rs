//! Agent protocol. Every message travels as a binary frame whose payload is
//! the JSON body of the message.

use serde::{Deserialize, Serialize};

use crate::forwarding::JobFailure;
use crate::ids::{ChannelId, JobId, KeyId, ModuleId, NodeId, PortId, SwitchId};
use crate::linksim::ChannelState;
use crate::time::SimTime;
use crate::topology::ChannelCandidate;
use crate::wire::{Frame, WireError};

use super::RoutePlan;

pub const REGISTER: u8 = 0x01;
pub const HEARTBEAT: u8 = 0x02;
pub const TELEMETRY: u8 = 0x03;
pub const SWITCH_CMD: u8 = 0x04;
pub const CHANNEL_EVENT: u8 = 0x05;
pub const RELAY_CMD: u8 = 0x06;
pub const RELAY_RESULT: u8 = 0x07;

/// Capabilities a node exports when it joins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRegistration {
    pub node_id: NodeId,
    pub modules: Vec<ModuleId>,
    pub switch: Option<SwitchId>,
    pub switch_ports: Vec<PortId>,
    pub kms_enabled: bool,
    pub heartbeat_interval_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryReport {
    pub node_id: NodeId,
    pub channel_id: ChannelId,
    pub skr_kbps: f64,
    pub qber_pct: Option<f64>,
    pub window_start: SimTime,
    pub window_end: SimTime,
    /// Key bytes held for the channel's node pair, all sources.
    pub buffered_bytes: usize,
}

/// Optical-layer order for one node: an optional new matching for its switch
/// and channels to tear down or bring up from its modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchOrder {
    pub switch: Option<SwitchId>,
    pub matching: Option<Vec<(PortId, PortId)>>,
    pub epoch: u64,
    pub teardown: Vec<ChannelId>,
    pub establish: Vec<ChannelCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEvent {
    pub channel_id: Option<ChannelId>,
    pub state: ChannelState,
    pub a: NodeId,
    pub b: NodeId,
    pub vendor: String,
    pub emitter: ModuleId,
    pub receiver: ModuleId,
    pub nominal_skr_kbps: f64,
    pub t: SimTime,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelayOrder {
    pub job_id: JobId,
    pub route: RoutePlan,
    pub size_bytes: usize,
    /// One entry per component delivery: the vendor each hop must draw link
    /// key from, if restricted. Several components are XOR-combined.
    pub hop_vendors: Vec<Vec<Option<String>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelayStatus {
    Delivered,
    Parked,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelayReport {
    pub job_id: JobId,
    pub status: RelayStatus,
    pub key_id: Option<KeyId>,
    pub latency_s: f64,
    pub hops_done: usize,
    /// Link key spent across all hops and components.
    pub link_key_bytes: usize,
    pub component_jobs: Vec<JobId>,
    pub failure: Option<JobFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Southbound {
    Register(AgentRegistration),
    Heartbeat { node_id: NodeId, t: SimTime },
    Telemetry(TelemetryReport),
    SwitchCmd(SwitchOrder),
    ChannelEvent(ChannelEvent),
    RelayCmd(RelayOrder),
    RelayResult(RelayReport),
}

impl Southbound {
    pub fn msg_type(&self) -> u8 {
        match self {
            Southbound::Register(_) => REGISTER,
            Southbound::Heartbeat { .. } => HEARTBEAT,
            Southbound::Telemetry(_) => TELEMETRY,
            Southbound::SwitchCmd(_) => SWITCH_CMD,
            Southbound::ChannelEvent(_) => CHANNEL_EVENT,
            Southbound::RelayCmd(_) => RELAY_CMD,
            Southbound::RelayResult(_) => RELAY_RESULT,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let payload = match self {
            Southbound::Register(m) => serde_json::to_vec(m),
            Southbound::Heartbeat { node_id, t } => serde_json::to_vec(&(node_id, t)),
            Southbound::Telemetry(m) => serde_json::to_vec(m),
            Southbound::SwitchCmd(m) => serde_json::to_vec(m),
            Southbound::ChannelEvent(m) => serde_json::to_vec(m),
            Southbound::RelayCmd(m) => serde_json::to_vec(m),
            Southbound::RelayResult(m) => serde_json::to_vec(m),
        }
        .expect("message bodies serialize");
        Frame::new(self.msg_type(), payload)
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, WireError> {
        fn body<T: serde::de::DeserializeOwned>(p: &[u8]) -> Result<T, WireError> {
            serde_json::from_slice(p).map_err(|e| WireError::Malformed(e.to_string()))
        }
        let p = &frame.payload;
        Ok(match frame.msg_type {
            REGISTER => Southbound::Register(body(p)?),
            HEARTBEAT => {
                let (node_id, t) = body(p)?;
                Southbound::Heartbeat { node_id, t }
            }
            TELEMETRY => Southbound::Telemetry(body(p)?),
            SWITCH_CMD => Southbound::SwitchCmd(body(p)?),
            CHANNEL_EVENT => Southbound::ChannelEvent(body(p)?),
            RELAY_CMD => Southbound::RelayCmd(body(p)?),
            RELAY_RESULT => Southbound::RelayResult(body(p)?),
            other => return Err(WireError::UnknownType(other)),
        })
    }

    /// Full encode/decode pass, as if the message crossed a socket.
    pub fn transit(&self) -> Result<Self, WireError> {
        let bytes = self.to_frame().encode();
        let (frame, _) = Frame::decode(&bytes)?;
        Self::from_frame(&frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heartbeat_round_trip() {
        let m = Southbound::Heartbeat { node_id: "A".into(), t: SimTime(5) };
        assert_eq!(m.transit().unwrap(), m);
        let mut f = m.to_frame();
        f.msg_type = 0x7f;
        assert_eq!(Southbound::from_frame(&f), Err(WireError::UnknownType(0x7f)));
    }
}
