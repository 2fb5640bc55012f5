//! Wire messages. The published schema lives in `docs/protocol.schema.json`.

use hitld::control::ControlMode;
use hitld::sim::operator::{CartesianMode, UserInput};
use hitld::sim::{GripperCommand, Role, TaskId};
use hitld::geometry::Vec3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Input {
        /// Translation velocity, m/s.
        #[serde(default)]
        v: [f64; 3],
        /// Angular velocity, rad/s. Ignored in hitl_d mode.
        #[serde(default)]
        w: [f64; 3],
        #[serde(default)]
        gripper: GripperCommand,
        /// Cartesian mode only: the device is in rotate mode.
        #[serde(default)]
        rotate: bool,
    },
    Reset,
    Start {
        #[serde(default)]
        task: Option<TaskId>,
        #[serde(default)]
        mode: Option<ControlMode>,
        #[serde(default)]
        seed: Option<u64>,
        /// Pick up a paused session by id.
        #[serde(default)]
        resume: Option<String>,
    },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn from_input(i: &UserInput) -> Self {
        ClientMessage::Input {
            v: i.linear.to_array(),
            w: i.angular.to_array(),
            gripper: i.gripper,
            rotate: i.cartesian_mode == CartesianMode::Rotate,
        }
    }
}

pub fn to_user_input(v: [f64; 3], w: [f64; 3], gripper: GripperCommand, rotate: bool) -> UserInput {
    UserInput {
        linear: Vec3::from_array(v),
        angular: Vec3::from_array(w),
        cartesian_mode: if rotate { CartesianMode::Rotate } else { CartesianMode::Translate },
        gripper,
        switching: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Not started, finished, or paused.
    Idle,
    Running,
    /// Emitted on the tick the task succeeded, once.
    Success,
    /// Emitted on the tick a failure forced a fresh scene.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperFrame {
    pub position: [f64; 3],
    /// `[w, x, y, z]`
    pub orientation: [f64; 4],
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFrame {
    pub id: usize,
    pub name: String,
    pub role: Role,
    pub position: [f64; 3],
    pub orientation: [f64; 4],
    pub attached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub session: String,
    pub tick: u64,
    pub elapsed_ticks: u64,
    pub task: TaskId,
    pub mode: ControlMode,
    pub status: Status,
    pub resets: u32,
    pub gripper: GripperFrame,
    pub objects: Vec<ObjectFrame>,
    /// `[x, y, z, r, g, b]`, at most [`MAX_FRAME_POINTS`].
    pub cloud: Vec<[f64; 6]>,
    /// Present in hitl_d mode only; null until the first prediction or after
    /// a perception error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_orientation: Option<Option<[f64; 3]>>,
}

pub const MAX_FRAME_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateFrame),
    Error { message: String },
    Event { event: String, session: String, tick: u64 },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server message serializes")
    }
}
