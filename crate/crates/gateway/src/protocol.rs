//! Wire messages. One JSON object per line, tagged by `type`.

use gcent_core::domain::{Mode, RobotId};
use gcent_core::gridworld::WorldState;
use gcent_core::session::Command;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// Reason sent when a line is not a valid client message.
pub const PARSE_REASON: &str = "parse";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol_version: u32,
        robots: u32,
        task: String,
    },
    State {
        robot_id: RobotId,
        tick: u64,
        mode: Mode,
        step_index: u32,
        scene: WorldState,
        buffer_len: usize,
        sentinel_z: Option<bool>,
        score_so_far: f64,
    },
    Request {
        robot_id: RobotId,
        request_tick: u64,
    },
    Ack {
        cmd_id: u64,
    },
    /// `cmd_id` is absent when the offending line carried none.
    Error {
        cmd_id: Option<u64>,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Cmd {
        cmd_id: u64,
        robot_id: RobotId,
        command: Command,
    },
    Subscribe {
        robot_ids: Vec<RobotId>,
    },
    /// Zero switches to lockstep: ticks advance only on `step`.
    Speed {
        ticks_per_second: f64,
    },
    /// Grants ticks in lockstep mode.
    Step {
        ticks: u32,
    },
}

impl ServerMessage {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }

    pub fn is_reply(&self) -> bool {
        matches!(self, ServerMessage::Ack { .. } | ServerMessage::Error { .. })
    }
}

impl ClientMessage {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("client messages serialize")
    }
}

/// Parses one client line. On failure returns the line's `cmd_id` when one
/// can be read.
pub fn parse_client_line(line: &str) -> Result<ClientMessage, Option<u64>> {
    serde_json::from_str(line).map_err(|_| {
        serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("cmd_id").and_then(|id| id.as_u64()))
    })
}

/// The reply to a line that failed to parse.
pub fn parse_error(cmd_id: Option<u64>) -> ServerMessage {
    ServerMessage::Error {
        cmd_id,
        reason: PARSE_REASON.into(),
    }
}
