//! One live episode: hold-latest input, one control tick per call.

use std::collections::BTreeMap;

use hitld::config::RunConfig;
use hitld::control::{derive_seed, ControlError, ControlMode, Episode, EpisodeOptions};
use hitld::demo::{DemoDataset, DemoError, DemoFrame, DemoMetadata, Demonstration, DEMO_FRAMES};
use hitld::geometry::quat_to_euler;
use hitld::policy::{observe, OrientationSource, TrainedPolicy};
use hitld::sim::operator::UserInput;
use hitld::sim::{render_cloud, SceneState, TaskId};
use thiserror::Error;

use crate::protocol::{ClientMessage, GripperFrame, ObjectFrame, ServerMessage, StateFrame, Status, MAX_FRAME_POINTS};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("hitl_d mode needs a policy for task {0}")]
    MissingPolicy(TaskId),
    #[error("policy perception hash {found} does not match the session's {expected}")]
    PerceptionMismatch { expected: String, found: String },
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Everything needed to open sessions.
#[derive(Debug, Clone)]
pub struct SessionFactory {
    pub run: RunConfig,
    pub task: TaskId,
    pub mode: ControlMode,
    pub seed: u64,
    pub policies: BTreeMap<TaskId, TrainedPolicy>,
}

impl SessionFactory {
    pub fn open(&self, id: String) -> Result<Session, SessionError> {
        let mut s = Session {
            id,
            run: self.run.clone(),
            policies: self.policies.clone(),
            episode: Episode::new(&self.run.task_spec(self.task), self.mode, &self.run.loop_config(), &EpisodeOptions::default())?,
            policy: None,
            pending: None,
            status: Status::Idle,
            connected: true,
            inputs: Vec::new(),
            scenes: Vec::new(),
            predicted: None,
        };
        s.start(self.task, self.mode, self.seed)?;
        s.status = Status::Idle;
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    run: RunConfig,
    policies: BTreeMap<TaskId, TrainedPolicy>,
    episode: Episode,
    policy: Option<TrainedPolicy>,
    pending: Option<UserInput>,
    status: Status,
    pub connected: bool,
    /// Inputs applied since the last start or client reset, one per tick.
    inputs: Vec<UserInput>,
    /// Scene before each applied input, for demo export.
    scenes: Vec<SceneState>,
    predicted: Option<[f64; 3]>,
}

impl Session {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn scene(&self) -> &SceneState {
        self.episode.scene()
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn recorded_inputs(&self) -> &[UserInput] {
        &self.inputs
    }

    pub fn start(&mut self, task: TaskId, mode: ControlMode, seed: u64) -> Result<(), SessionError> {
        let spec = self.run.task_spec(task);
        let policy = if mode == ControlMode::HitlD {
            let p = self.policies.get(&task).ok_or(SessionError::MissingPolicy(task))?;
            let expected = self.run.perception(&spec).hash();
            if p.perception_hash() != expected {
                return Err(SessionError::PerceptionMismatch { expected, found: p.perception_hash() });
            }
            Some(p.clone())
        } else {
            None
        };
        let opts = EpisodeOptions { seed, ..EpisodeOptions::default() };
        self.episode = Episode::new(&spec, mode, &self.run.loop_config(), &opts)?;
        self.policy = policy;
        self.pending = None;
        self.inputs.clear();
        self.scenes.clear();
        self.predicted = None;
        self.status = Status::Running;
        Ok(())
    }

    /// Apply a client message. Returns replies to send right away.
    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Input { v, w, gripper, rotate } => {
                if v.iter().chain(w.iter()).any(|x| !x.is_finite()) {
                    return vec![ServerMessage::Error { message: "input velocities must be finite".into() }];
                }
                self.pending = Some(crate::protocol::to_user_input(v, w, gripper, rotate));
                Vec::new()
            }
            ClientMessage::Reset => {
                self.episode.restart();
                self.inputs.clear();
                self.scenes.clear();
                self.pending = None;
                self.status = Status::Running;
                vec![self.event("reset")]
            }
            ClientMessage::Start { task, mode, seed, resume: None } => {
                let task = task.unwrap_or(self.episode.task().id);
                let mode = mode.unwrap_or(self.episode.mode());
                match self.start(task, mode, seed.unwrap_or(0)) {
                    Ok(()) => vec![self.event("start")],
                    Err(e) => vec![ServerMessage::Error { message: e.to_string() }],
                }
            }
            ClientMessage::Start { resume: Some(_), .. } => {
                vec![ServerMessage::Error { message: "resume is handled by the server, not the session".into() }]
            }
        }
    }

    fn event(&self, name: &str) -> ServerMessage {
        ServerMessage::Event { event: name.into(), session: self.id.clone(), tick: self.episode.tick() }
    }

    /// Advance one tick if running and report the new state. Without fresh
    /// input since the last tick the gripper holds still.
    pub fn tick(&mut self) -> Result<(StateFrame, Vec<ServerMessage>), SessionError> {
        let mut events = Vec::new();
        if self.status == Status::Running && self.connected {
            let input = self.pending.take().unwrap_or_default();
            self.scenes.push(self.episode.scene().clone());
            self.inputs.push(input);
            let source = self.policy.as_mut().map(|p| p as &mut dyn OrientationSource);
            let out = self.episode.step(&input, source)?;
            if self.episode.mode() == ControlMode::HitlD {
                self.predicted = out.record.predicted;
            }
            for e in &out.record.events {
                let name = serde_json::to_value(e).ok().and_then(|v| v["event"].as_str().map(str::to_string));
                if let Some(n) = name {
                    events.push(self.event(&n));
                }
            }
            self.status = if out.record.success {
                Status::Success
            } else if out.restarted {
                Status::Reset
            } else {
                Status::Running
            };
            let frame = self.frame();
            if out.finished {
                if !out.record.success {
                    events.push(self.event("timeout"));
                }
                self.status = Status::Idle;
            } else if self.status != Status::Running {
                self.status = Status::Running;
            }
            return Ok((frame, events));
        }
        let mut frame = self.frame();
        frame.status = if self.connected { self.status } else { Status::Idle };
        Ok((frame, events))
    }

    pub fn frame(&self) -> StateFrame {
        let scene = self.episode.scene();
        let tick = self.episode.tick();
        let cloud = render_cloud(scene, self.run.points_per_m2, derive_seed(0, tick, 99))
            .map(|c| {
                let stride = c.len().div_ceil(MAX_FRAME_POINTS).max(1);
                c.points
                    .iter()
                    .step_by(stride)
                    .map(|p| {
                        let [x, y, z] = p.position.to_array();
                        [x, y, z, p.color[0], p.color[1], p.color[2]]
                    })
                    .collect()
            })
            .unwrap_or_default();
        StateFrame {
            session: self.id.clone(),
            tick,
            elapsed_ticks: self.inputs.len() as u64,
            task: self.episode.task().id,
            mode: self.episode.mode(),
            status: self.status,
            resets: self.episode.metrics().resets,
            gripper: GripperFrame {
                position: scene.gripper.position.to_array(),
                orientation: scene.gripper.orientation.to_array(),
                closed: scene.gripper_closed,
            },
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectFrame {
                    id: o.id,
                    name: o.name.clone(),
                    role: o.role,
                    position: o.pose.position.to_array(),
                    orientation: o.pose.orientation.to_array(),
                    attached: scene.attached == Some(o.id),
                })
                .collect(),
            cloud,
            predicted_orientation: (self.episode.mode() == ControlMode::HitlD).then_some(self.predicted),
        }
    }

    /// The current attempt as a demonstration, labeled with the executed
    /// gripper orientation. Takes up to 256 frames uniformly in time.
    pub fn export_demo(&self) -> Result<DemoDataset, DemoError> {
        let spec = self.episode.task();
        let perception = self.run.perception(spec);
        let mut scenes = self.scenes.clone();
        scenes.push(self.episode.scene().clone());
        let n = scenes.len();
        let k = n.min(DEMO_FRAMES);
        let mut frames = Vec::with_capacity(k);
        for i in 0..k {
            let t = if k == 1 { 0 } else { (i * (n - 1) + (k - 1) / 2) / (k - 1) };
            let s = &scenes[t];
            let raw = render_cloud(s, perception.points_per_m2, derive_seed(0, t as u64, 1))?;
            let obs = observe(&raw, &perception, s.gripper.position)?;
            frames.push(DemoFrame::new(t as u32, obs, quat_to_euler(s.gripper.orientation)?));
        }
        Ok(DemoDataset {
            metadata: DemoMetadata { task: Some(spec.id), seed: 0, perception, source: format!("live session {}", self.id) },
            demonstrations: vec![Demonstration { frames }],
        })
    }
}
