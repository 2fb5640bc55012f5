//! Expert demonstrations and the on-disk dataset container.
//!
//! File layout, all integers and floats little-endian:
//!
//! ```text
//! "HITLDEMO"                8 bytes
//! version                   u32 (= 1)
//! manifest length M         u32
//! manifest                  M bytes of JSON (metadata, frame counts, ranges)
//! per frame, in order:
//!   tick                    u32
//!   point count n           u32
//!   positions               n * 3 f32
//!   colors                  n * 3 f32
//!   state                   3 f32
//!   action (roll,pitch,yaw) 3 f32
//! sha256 of all bytes above 32 bytes
//! ```
//!
//! A frame therefore takes `32 + 24 n` bytes. Values are quantized to f32
//! when a frame is built, so save/load round trips exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{derive_seed, manual_step, ControlMode, LoopConfig};
use crate::geometry::{quat_to_euler, EulerRPY, GeometryError, Vec3};
use crate::pointcloud::{ColoredPoint, ColoredPointCloud};
use crate::policy::{observe, ActionOrientation, Observation, PerceptionConfig, PolicyError, RobotState};
use crate::sim::operator::{Operator, Persona, PersonaParams, ScriptedOperator};
use crate::sim::{check_success, render_cloud, reset, step, SimError, TaskId, TaskSpec};

pub const MAGIC: &[u8; 8] = b"HITLDEMO";
pub const FORMAT_VERSION: u32 = 1;
/// Frames per demonstration (§III-B sequence length).
pub const DEMO_FRAMES: usize = 256;
/// Default render density for the desk-scale tasks, points per square meter.
pub const DEFAULT_DENSITY: f64 = 20_000.0;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("not a demonstration file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}, expected {FORMAT_VERSION}")]
    UnsupportedVersion(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("scripted expert failed on {task} after {ticks} ticks")]
    ExpertFailed { task: TaskId, ticks: u64 },
    #[error("expert episode has {ticks} ticks, fewer than {DEMO_FRAMES} frames")]
    EpisodeTooShort { ticks: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Control(#[from] crate::control::ControlError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoFrame {
    pub tick: u32,
    pub observation: Observation,
    pub action: ActionOrientation,
}

fn q(v: f64) -> f64 {
    v as f32 as f64
}

fn q3(v: Vec3) -> Vec3 {
    Vec3::new(q(v.x), q(v.y), q(v.z))
}

impl DemoFrame {
    /// Build a frame with every float rounded to f32.
    pub fn new(tick: u32, observation: Observation, action: ActionOrientation) -> Self {
        let cloud = ColoredPointCloud::new(
            observation
                .cloud
                .points
                .iter()
                .map(|p| ColoredPoint::new(q3(p.position), p.color.map(q)))
                .collect(),
        );
        let observation = Observation {
            cloud,
            state: RobotState { position: q3(observation.state.position) },
            point_budget: observation.point_budget,
        };
        let action = EulerRPY { roll: q(action.roll), pitch: q(action.pitch), yaw: q(action.yaw) };
        Self { tick, observation, action }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Demonstration {
    pub frames: Vec<DemoFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoMetadata {
    pub task: Option<TaskId>,
    pub seed: u64,
    pub perception: PerceptionConfig,
    /// Free-form provenance, e.g. "scripted_expert".
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub metadata: DemoMetadata,
    pub demonstrations: Vec<Demonstration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub task: Option<TaskId>,
    pub demonstrations: usize,
    pub frames: usize,
    pub point_budget: usize,
    pub perception_hash: String,
    pub action_min: [f64; 3],
    pub action_max: [f64; 3],
    pub state_min: [f64; 3],
    pub state_max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    metadata: DemoMetadata,
    frame_counts: Vec<usize>,
    summary: DatasetSummary,
}

fn ranges(rows: impl Iterator<Item = [f64; 3]>) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for r in rows {
        any = true;
        for i in 0..3 {
            lo[i] = lo[i].min(r[i]);
            hi[i] = hi[i].max(r[i]);
        }
    }
    if any {
        (lo, hi)
    } else {
        ([0.0; 3], [0.0; 3])
    }
}

impl DemoDataset {
    pub fn frames(&self) -> impl Iterator<Item = &DemoFrame> {
        self.demonstrations.iter().flat_map(|d| d.frames.iter())
    }

    pub fn frame_count(&self) -> usize {
        self.demonstrations.iter().map(|d| d.frames.len()).sum()
    }

    pub fn summary(&self) -> DatasetSummary {
        let (action_min, action_max) = ranges(self.frames().map(|f| f.action.to_array()));
        let (state_min, state_max) = ranges(self.frames().map(|f| f.observation.state.position.to_array()));
        DatasetSummary {
            task: self.metadata.task,
            demonstrations: self.demonstrations.len(),
            frames: self.frame_count(),
            point_budget: self.metadata.perception.point_budget,
            perception_hash: self.metadata.perception.hash(),
            action_min,
            action_max,
            state_min,
            state_max,
        }
    }

    /// Tick order and point budgets.
    pub fn validate(&self) -> Result<(), DemoError> {
        let budget = self.metadata.perception.point_budget;
        for (d, demo) in self.demonstrations.iter().enumerate() {
            for (i, f) in demo.frames.iter().enumerate() {
                if i > 0 && f.tick <= demo.frames[i - 1].tick {
                    return Err(DemoError::Malformed(format!("demonstration {d}: ticks not strictly increasing at frame {i}")));
                }
                if f.observation.point_budget != budget || f.observation.cloud.len() > budget {
                    return Err(DemoError::Malformed(format!("demonstration {d}, frame {i}: point budget mismatch")));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DemoError> {
        self.validate()?;
        let manifest = Manifest {
            metadata: self.metadata.clone(),
            frame_counts: self.demonstrations.iter().map(|d| d.frames.len()).collect(),
            summary: self.summary(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| DemoError::Malformed(e.to_string()))?;
        let mut out = Vec::with_capacity(48 + json.len() + self.frame_count() * (32 + 24 * self.metadata.perception.point_budget));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        for f in self.frames() {
            out.extend_from_slice(&f.tick.to_le_bytes());
            out.extend_from_slice(&(f.observation.cloud.len() as u32).to_le_bytes());
            for p in &f.observation.cloud.points {
                for v in p.position.to_array() {
                    put(&mut out, v);
                }
            }
            for p in &f.observation.cloud.points {
                for v in p.color {
                    put(&mut out, v);
                }
            }
            for v in f.observation.state.position.to_array() {
                put(&mut out, v);
            }
            for v in f.action.to_array() {
                put(&mut out, v);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DemoError> {
        if bytes.len() < 8 {
            return Err(DemoError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(DemoError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(DemoError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(DemoError::UnsupportedVersion(version));
        }
        if bytes.len() < 16 + 32 {
            return Err(DemoError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(DemoError::ChecksumMismatch);
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let m_len = r.u32()? as usize;
        let manifest: Manifest =
            serde_json::from_slice(r.take(m_len)?).map_err(|e| DemoError::Malformed(format!("manifest: {e}")))?;
        let budget = manifest.metadata.perception.point_budget;
        let mut demonstrations = Vec::with_capacity(manifest.frame_counts.len());
        for &count in &manifest.frame_counts {
            let mut frames = Vec::with_capacity(count);
            for _ in 0..count {
                let tick = r.u32()?;
                let n = r.u32()? as usize;
                if n > budget {
                    return Err(DemoError::Malformed(format!("frame with {n} points exceeds budget {budget}")));
                }
                let positions = r.f32s(3 * n)?;
                let colors = r.f32s(3 * n)?;
                let state = r.f32s(3)?;
                let action = r.f32s(3)?;
                let points = (0..n)
                    .map(|i| {
                        ColoredPoint::new(
                            Vec3::new(positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]),
                            [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]],
                        )
                    })
                    .collect();
                frames.push(DemoFrame {
                    tick,
                    observation: Observation {
                        cloud: ColoredPointCloud::new(points),
                        state: RobotState { position: Vec3::new(state[0], state[1], state[2]) },
                        point_budget: budget,
                    },
                    action: EulerRPY { roll: action[0], pitch: action[1], yaw: action[2] },
                });
            }
            demonstrations.push(Demonstration { frames });
        }
        if r.pos != body.len() {
            return Err(DemoError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let ds = DemoDataset { metadata: manifest.metadata, demonstrations };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DemoError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DemoError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DemoError> {
        let end = self.pos.checked_add(n).ok_or(DemoError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(DemoError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DemoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, DemoError> {
        let raw = self.take(n.checked_mul(4).ok_or(DemoError::Truncated)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

/// Size in bytes of a file holding `frames` frames of `points` points each.
pub fn expected_file_size(manifest_len: usize, frames: usize, points: usize) -> usize {
    8 + 4 + 4 + manifest_len + frames * (4 + 4 + 24 * points + 12 + 12) + 32
}

/// Perception settings used for a task at a given point budget.
pub fn default_perception(task: &TaskSpec, point_budget: usize) -> PerceptionConfig {
    PerceptionConfig { crop_box: task.crop_box, point_budget, fps_start: 0, points_per_m2: DEFAULT_DENSITY }
}

/// Speed and gains of the demonstrating expert. Slower than the study
/// personas so every task runs well past 256 ticks.
pub fn expert_params() -> PersonaParams {
    PersonaParams { speed: 0.06, position_gain: 3.0, rotation_gain: 2.0, rotation_speed: 0.3 }
}

/// Record one demonstration: the direct persona in full 6-DoF control, 256
/// frames taken uniformly over the episode including the final success state.
/// Each frame's action is the orientation the expert is steering toward.
pub fn scripted_expert(task: &TaskSpec, seed: u64, perception: &PerceptionConfig) -> Result<DemoDataset, DemoError> {
    let cfg = LoopConfig::default();
    let mut scene = reset(task, derive_seed(seed, 0, 3));
    let mut op = ScriptedOperator::new(Persona::Direct, expert_params(), seed);
    op.begin(&scene, task);
    let mut states = Vec::new();
    let mut success = false;
    for _ in 0..task.max_ticks {
        let input = op.act(&scene, task, ControlMode::FullManual6Dof);
        let goal = op.goal().unwrap_or(scene.gripper.orientation);
        states.push((scene.clone(), goal));
        let twist = manual_step(input.linear, input.angular, &cfg)?;
        scene = step(&scene, &task.params, &twist, input.gripper, cfg.dt)?.0;
        if check_success(&scene, task) {
            success = true;
            break;
        }
    }
    if !success {
        return Err(DemoError::ExpertFailed { task: task.id, ticks: states.len() as u64 });
    }
    let last_goal = op.goal().unwrap_or(scene.gripper.orientation);
    states.push((scene, last_goal));
    let n = states.len();
    if n < DEMO_FRAMES {
        return Err(DemoError::EpisodeTooShort { ticks: n });
    }
    let mut frames = Vec::with_capacity(DEMO_FRAMES);
    for i in 0..DEMO_FRAMES {
        let t = (i * (n - 1) + (DEMO_FRAMES - 1) / 2) / (DEMO_FRAMES - 1);
        let (s, goal) = &states[t];
        let raw = render_cloud(s, perception.points_per_m2, derive_seed(seed, t as u64, 1))?;
        let obs = observe(&raw, perception, s.gripper.position)?;
        frames.push(DemoFrame::new(t as u32, obs, quat_to_euler(*goal)?));
    }
    Ok(DemoDataset {
        metadata: DemoMetadata { task: Some(task.id), seed, perception: *perception, source: "scripted_expert".into() },
        demonstrations: vec![Demonstration { frames }],
    })
}
