//! Scripted stand-ins for study participants, plus replay and random operators.
//!
//! Every task is a list of [`Stage`]s: move the gripper (or the held object)
//! to a target, optionally wait for an orientation condition, then open or
//! close. Personas differ only in how they deal with orientation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tasks::{TaskId, TaskSpec, CUBE_SIZE, CUP_HEIGHT, SHAFT_LENGTH};
use super::{
    cross_hole_alignment, grasp_alignment_error, handle_direction, upright_with_yaw, GripperCommand, Role, SceneObject, SceneState, Shape, HANDLE_GRASP_Z,
};
use crate::control::ControlMode;
use crate::geometry::{angular_error, UnitQuat, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CartesianMode {
    #[default]
    Translate,
    Rotate,
}

/// One tick of operator intent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UserInput {
    pub linear: Vec3,
    /// Only used in `cartesian` rotate mode and `full_manual_6dof`.
    pub angular: Vec3,
    pub cartesian_mode: CartesianMode,
    pub gripper: GripperCommand,
    /// The device is mid mode switch and sends nothing useful.
    pub switching: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OperatorStats {
    pub mode_switches: u32,
    pub switch_ticks: u32,
}

pub trait Operator {
    /// Called at the start of every attempt, including after a reset.
    fn begin(&mut self, scene: &SceneState, task: &TaskSpec);
    fn act(&mut self, scene: &SceneState, task: &TaskSpec, mode: ControlMode) -> UserInput;
    /// Orientation the operator is currently steering toward, if it has one.
    fn goal(&self) -> Option<UnitQuat> {
        None
    }
    fn stats(&self) -> OperatorStats {
        OperatorStats::default()
    }
    fn finished(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Persona {
    Direct,
    /// Direct plus uniform per-axis jitter on the translation command.
    Noisy { bound: f64 },
    /// Translate and rotate in separate modes with `switch_ticks` dead time per switch.
    ModeSwitching { switch_ticks: u32 },
}

impl Persona {
    pub fn name(&self) -> &'static str {
        match self {
            Persona::Direct => "direct",
            Persona::Noisy { .. } => "noisy",
            Persona::ModeSwitching { .. } => "mode_switching",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaParams {
    /// Translation speed limit, m/s.
    pub speed: f64,
    /// Proportional gain on position error, 1/s.
    pub position_gain: f64,
    /// Proportional gain on orientation error when the operator rotates, 1/s.
    pub rotation_gain: f64,
    /// Rotation speed limit, rad/s.
    pub rotation_speed: f64,
}

impl Default for PersonaParams {
    fn default() -> Self {
        Self { speed: 0.15, position_gain: 4.0, rotation_gain: 2.0, rotation_speed: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Tcp(Vec3),
    /// A point fixed to an object, raised by `lift`. Tracked live so bumped
    /// objects are still found.
    Object { id: usize, local: Vec3, lift: f64 },
    /// Put the point `local` of the held object at `world`.
    Held { local: Vec3, world: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Goal {
    /// Keep whatever the previous stage ended with.
    Keep,
    Grasp(usize),
    ShaftUp,
    CrossHole,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Condition {
    None,
    Grasp { id: usize, tol: f64 },
    ShaftUp { tol: f64 },
    CrossHole { yaw_tol: f64, lateral_tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stage {
    target: Target,
    goal: Goal,
    tol: f64,
    condition: Condition,
    action: GripperCommand,
    /// Object that must be held during this stage.
    holding: Option<usize>,
    /// Index of the stage to restart from if the held object is lost.
    restart: usize,
    /// Mode-switching operators rotate at the end of this stage.
    rotate_here: bool,
}

const VIA_TOL: f64 = 0.01;
const PLACE_TOL: f64 = 0.002;
/// Where the scripted operators put the three cubes on the plate.
pub const PLATE_SPOTS: [(f64, f64); 3] = [(0.25, 0.10), (0.35, 0.10), (0.30, 0.20)];
const CARRY_Z: f64 = 0.16;
const RETURN_Z: f64 = 0.22;

fn stage(target: Target, goal: Goal, tol: f64) -> Stage {
    Stage {
        target,
        goal,
        tol,
        condition: Condition::None,
        action: GripperCommand::Hold,
        holding: None,
        restart: 0,
        rotate_here: false,
    }
}

fn plan(scene: &SceneState, task: &TaskSpec) -> Vec<Stage> {
    let mut stages = Vec::new();
    match task.id {
        TaskId::Unstack => {
            let mut cubes: Vec<&SceneObject> = scene.objects_with_role(Role::Cube).filter(|c| !c.grasped).collect();
            cubes.sort_by(|a, b| b.pose.position.z.total_cmp(&a.pose.position.z).then(a.id.cmp(&b.id)));
            for (n, c) in cubes.iter().enumerate() {
                let p = c.pose.position;
                let (sx, sy) = PLATE_SPOTS[n % PLATE_SPOTS.len()];
                let start = stages.len();
                let held = |target, goal, tol| Stage { holding: Some(c.id), restart: start, ..stage(target, goal, tol) };
                let above = Target::Object { id: c.id, local: Vec3::ZERO, lift: RETURN_Z - p.z };
                stages.push(Stage { restart: start, ..stage(above, Goal::Grasp(c.id), VIA_TOL) });
                stages.push(Stage {
                    condition: Condition::Grasp { id: c.id, tol: 0.2 },
                    action: GripperCommand::Close,
                    restart: start,
                    ..stage(Target::Object { id: c.id, local: Vec3::ZERO, lift: 0.0 }, Goal::Grasp(c.id), PLACE_TOL)
                });
                stages.push(held(Target::Tcp(Vec3::new(p.x, p.y, CARRY_Z)), Goal::Keep, VIA_TOL));
                stages.push(held(Target::Held { local: Vec3::ZERO, world: Vec3::new(sx, sy, CARRY_Z) }, Goal::Keep, VIA_TOL));
                let place = Vec3::new(sx, sy, 0.01 + CUBE_SIZE / 2.0 + 0.004);
                stages.push(Stage { action: GripperCommand::Open, ..held(Target::Held { local: Vec3::ZERO, world: place }, Goal::Keep, PLACE_TOL) });
                stages.push(Stage { restart: stages.len() + 1, ..stage(Target::Tcp(Vec3::new(sx, sy, RETURN_Z)), Goal::Keep, VIA_TOL) });
            }
        }
        TaskId::Screwdriver => {
            let Some(sd) = scene.objects_with_role(Role::Screwdriver).next() else { return stages };
            let Some(cup) = scene.objects_with_role(Role::Cup).next() else { return stages };
            let handle = sd.pose.transform_point(Vec3::new(0.0, 0.0, HANDLE_GRASP_Z));
            let tip_local = Vec3::new(0.0, 0.0, -SHAFT_LENGTH / 2.0);
            let cup_top = cup.pose.position.z + CUP_HEIGHT / 2.0;
            let (cx, cy) = (cup.pose.position.x, cup.pose.position.y);
            let held = |target, goal, tol| Stage { holding: Some(sd.id), ..stage(target, goal, tol) };
            let grip = Vec3::new(0.0, 0.0, HANDLE_GRASP_Z);
            stages.push(stage(Target::Object { id: sd.id, local: grip, lift: 0.13 }, Goal::Grasp(sd.id), VIA_TOL));
            stages.push(Stage {
                condition: Condition::Grasp { id: sd.id, tol: 0.2 },
                action: GripperCommand::Close,
                ..stage(Target::Object { id: sd.id, local: grip, lift: 0.0 }, Goal::Grasp(sd.id), PLACE_TOL)
            });
            stages.push(Stage { rotate_here: true, ..held(Target::Tcp(Vec3::new(handle.x, handle.y, 0.26)), Goal::ShaftUp, VIA_TOL) });
            stages.push(Stage {
                condition: Condition::ShaftUp { tol: 0.2 },
                ..held(Target::Held { local: tip_local, world: Vec3::new(cx, cy, cup_top + 0.03) }, Goal::ShaftUp, 0.004)
            });
            stages.push(Stage {
                condition: Condition::ShaftUp { tol: 0.2 },
                action: GripperCommand::Open,
                ..held(Target::Held { local: tip_local, world: Vec3::new(cx, cy, cup_top - 0.03) }, Goal::ShaftUp, 0.003)
            });
        }
        TaskId::ShapeMatch => {
            let Some(cross) = scene.objects_with_role(Role::Cross).next() else { return stages };
            let Some(block) = scene.objects_with_role(Role::Container).next() else { return stages };
            let p = cross.pose.position;
            let half = cross.shape.half_extents().z;
            let top = block.top_z();
            let (bx, by) = (block.pose.position.x, block.pose.position.y);
            let held = |target, goal, tol| Stage { holding: Some(cross.id), ..stage(target, goal, tol) };
            stages.push(stage(Target::Object { id: cross.id, local: Vec3::ZERO, lift: 0.13 }, Goal::Grasp(cross.id), VIA_TOL));
            stages.push(Stage {
                condition: Condition::Grasp { id: cross.id, tol: 0.2 },
                action: GripperCommand::Close,
                ..stage(Target::Object { id: cross.id, local: Vec3::ZERO, lift: 0.0 }, Goal::Grasp(cross.id), PLACE_TOL)
            });
            stages.push(held(Target::Tcp(Vec3::new(p.x, p.y, CARRY_Z)), Goal::Keep, VIA_TOL));
            stages.push(Stage {
                rotate_here: true,
                condition: Condition::CrossHole { yaw_tol: 0.07, lateral_tol: 0.004 },
                ..held(Target::Held { local: Vec3::ZERO, world: Vec3::new(bx, by, top + half + 0.03) }, Goal::CrossHole, 0.004)
            });
            stages.push(Stage {
                condition: Condition::CrossHole { yaw_tol: 0.07, lateral_tol: 0.003 },
                action: GripperCommand::Open,
                ..held(Target::Held { local: Vec3::ZERO, world: Vec3::new(bx, by, top + half + 0.004) }, Goal::CrossHole, 0.0015)
            });
        }
    }
    stages
}

fn held_object(scene: &SceneState) -> Option<&SceneObject> {
    scene.attached.and_then(|id| scene.object(id).ok())
}

fn tcp_target(scene: &SceneState, target: Target) -> Vec3 {
    match target {
        Target::Tcp(p) => p,
        Target::Object { id, local, lift } => match scene.object(id) {
            Ok(o) => o.pose.transform_point(local) + Vec3::new(0.0, 0.0, lift),
            Err(_) => scene.gripper.position,
        },
        Target::Held { local, world } => match held_object(scene) {
            Some(o) => world - (o.pose.transform_point(local) - scene.gripper.position),
            None => world,
        },
    }
}

/// Gripper orientation that realizes `goal` in the current scene. `reference`
/// breaks symmetric ties.
fn goal_orientation(scene: &SceneState, goal: Goal, reference: UnitQuat) -> UnitQuat {
    let g = scene.gripper.orientation;
    match goal {
        Goal::Keep => reference,
        Goal::Grasp(id) => {
            let Ok(o) = scene.object(id) else { return reference };
            match o.role {
                Role::Screwdriver => {
                    // gripper y along the shaft, pointing down; pick the heading nearest the reference
                    let d = handle_direction(o);
                    let psi = (-d.x).atan2(d.y);
                    let a = upright_with_yaw(psi);
                    let b = upright_with_yaw(psi + std::f64::consts::PI);
                    if a.angle_to(reference) <= b.angle_to(reference) {
                        a
                    } else {
                        b
                    }
                }
                _ => nearest_quarter_turn(o.pose.orientation, reference),
            }
        }
        Goal::ShaftUp => match held_object(scene) {
            Some(o) => (UnitQuat::between(handle_direction(o), Vec3::Z) * g).renormalized(),
            None => reference,
        },
        Goal::CrossHole => {
            let block = scene.objects_with_role(Role::Container).next();
            match (held_object(scene), block) {
                (Some(o), Some(b)) => {
                    let Shape::CrossHoleBlock { hole_yaw, .. } = b.shape else { return reference };
                    let hole = b.pose.orientation * upright_with_yaw(hole_yaw);
                    let want = nearest_quarter_turn(hole, o.pose.orientation);
                    // gripper = object * offset^-1, with the offset read off the current poses
                    let offset = g.conjugate() * o.pose.orientation;
                    (want * offset.conjugate()).renormalized()
                }
                _ => reference,
            }
        }
    }
}

fn nearest_quarter_turn(q: UnitQuat, reference: UnitQuat) -> UnitQuat {
    (0..4)
        .map(|k| q * UnitQuat::from_axis_angle(Vec3::Z, k as f64 * std::f64::consts::FRAC_PI_2))
        .min_by(|a, b| a.angle_to(reference).total_cmp(&b.angle_to(reference)))
        .expect("four candidates")
}

fn condition_met(scene: &SceneState, c: Condition) -> bool {
    match c {
        Condition::None => true,
        Condition::Grasp { id, tol } => scene
            .object(id)
            .ok()
            .and_then(|o| grasp_alignment_error(o, scene.gripper.orientation))
            .is_some_and(|e| e <= tol),
        Condition::ShaftUp { tol } => held_object(scene).is_some_and(|o| handle_direction(o).z.min(1.0).acos() <= tol),
        Condition::CrossHole { yaw_tol, lateral_tol } => {
            let block = scene.objects_with_role(Role::Container).next();
            match (held_object(scene), block) {
                (Some(o), Some(b)) => cross_hole_alignment(o, b).is_some_and(|(y, l)| y <= yaw_tol && l <= lateral_tol),
                _ => false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Translate,
    Switch { remaining: u32, to: CartesianMode },
    Rotate,
}

/// Waypoint-following operator parameterized by a [`Persona`].
#[derive(Debug, Clone)]
pub struct ScriptedOperator {
    persona: Persona,
    params: PersonaParams,
    rng: ChaCha8Rng,
    stages: Vec<Stage>,
    index: usize,
    /// Orientation goal when the current stage began.
    start_goal: UnitQuat,
    start_distance: f64,
    progress: f64,
    goal: UnitQuat,
    phase: Phase,
    mode: CartesianMode,
    stats: OperatorStats,
    pending_open: bool,
}

impl ScriptedOperator {
    pub fn new(persona: Persona, params: PersonaParams, seed: u64) -> Self {
        Self {
            persona,
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stages: Vec::new(),
            index: 0,
            start_goal: UnitQuat::IDENTITY,
            start_distance: 0.0,
            progress: 0.0,
            goal: UnitQuat::IDENTITY,
            phase: Phase::Translate,
            mode: CartesianMode::Translate,
            stats: OperatorStats::default(),
            pending_open: false,
        }
    }

    pub fn persona(&self) -> Persona {
        self.persona
    }

    fn enter(&mut self, index: usize, scene: &SceneState) {
        self.index = index;
        self.start_goal = self.goal;
        self.progress = 0.0;
        self.start_distance = match self.stages.get(index) {
            Some(s) => (tcp_target(scene, s.target) - scene.gripper.position).norm(),
            None => 0.0,
        };
    }

    fn translation_toward(&self, scene: &SceneState, target: Vec3) -> Vec3 {
        let v = (target - scene.gripper.position) * self.params.position_gain;
        v.clamp_norm(self.params.speed)
    }

    fn rotation_toward(&self, scene: &SceneState, goal: UnitQuat) -> Vec3 {
        let w = angular_error(scene.gripper.orientation, goal) * self.params.rotation_gain;
        w.clamp_norm(self.params.rotation_speed)
    }

    fn start_switch(&mut self, to: CartesianMode) -> UserInput {
        self.stats.mode_switches += 1;
        let Persona::ModeSwitching { switch_ticks } = self.persona else { unreachable!() };
        if switch_ticks == 0 {
            self.mode = to;
            self.phase = if to == CartesianMode::Rotate { Phase::Rotate } else { Phase::Translate };
            return UserInput { cartesian_mode: self.mode, ..UserInput::default() };
        }
        self.phase = Phase::Switch { remaining: switch_ticks, to };
        self.switch_tick()
    }

    fn switch_tick(&mut self) -> UserInput {
        let Phase::Switch { remaining, to } = self.phase else { unreachable!() };
        self.stats.switch_ticks += 1;
        if remaining <= 1 {
            self.mode = to;
            self.phase = if to == CartesianMode::Rotate { Phase::Rotate } else { Phase::Translate };
        } else {
            self.phase = Phase::Switch { remaining: remaining - 1, to };
        }
        UserInput { cartesian_mode: self.mode, switching: true, ..UserInput::default() }
    }
}

const ROTATION_DONE: f64 = 0.02;
const ROTATION_NEEDED: f64 = 0.05;

impl Operator for ScriptedOperator {
    fn begin(&mut self, scene: &SceneState, task: &TaskSpec) {
        self.stages = plan(scene, task);
        self.goal = scene.gripper.orientation;
        self.phase = Phase::Translate;
        self.mode = CartesianMode::Translate;
        self.pending_open = false;
        self.enter(0, scene);
    }

    fn act(&mut self, scene: &SceneState, _task: &TaskSpec, mode: ControlMode) -> UserInput {
        if let Phase::Switch { .. } = self.phase {
            return self.switch_tick();
        }
        if self.pending_open {
            self.pending_open = false;
            return UserInput { gripper: GripperCommand::Open, cartesian_mode: self.mode, ..UserInput::default() };
        }
        let Some(st) = self.stages.get(self.index).copied() else {
            return UserInput { cartesian_mode: self.mode, ..UserInput::default() };
        };
        // lost the object: reopen and go back to its approach
        if let Some(id) = st.holding {
            if scene.attached != Some(id) {
                self.pending_open = scene.gripper_closed;
                self.goal = scene.gripper.orientation;
                self.enter(st.restart, scene);
                return self.act(scene, _task, mode);
            }
        }

        let target = tcp_target(scene, st.target);
        let dist = (target - scene.gripper.position).norm();
        if self.start_distance > 1e-9 {
            self.progress = self.progress.max((1.0 - dist / self.start_distance).clamp(0.0, 1.0));
        } else {
            self.progress = 1.0;
        }
        let final_goal = goal_orientation(scene, st.goal, self.start_goal);
        self.goal = self.start_goal.slerp(final_goal, self.progress);
        let arrived = dist <= st.tol;

        let mut input = UserInput { cartesian_mode: self.mode, ..UserInput::default() };
        let switching = matches!(self.persona, Persona::ModeSwitching { .. }) && mode == ControlMode::Cartesian;
        if switching {
            if self.phase == Phase::Rotate {
                let err = angular_error(scene.gripper.orientation, final_goal).norm();
                if err <= ROTATION_DONE {
                    return self.start_switch(CartesianMode::Translate);
                }
                input.angular = self.rotation_toward(scene, final_goal);
                return input;
            }
            if !arrived {
                input.linear = self.translation_toward(scene, target);
                return input;
            }
            let err = angular_error(scene.gripper.orientation, final_goal).norm();
            let wants_rotation = (st.rotate_here && err > ROTATION_NEEDED) || !condition_met(scene, st.condition);
            if wants_rotation && err > ROTATION_DONE {
                return self.start_switch(CartesianMode::Rotate);
            }
        } else {
            input.linear = self.translation_toward(scene, target);
            if let Persona::Noisy { bound } = self.persona {
                if bound > 0.0 {
                    let mut j = || self.rng.random_range(-bound..=bound);
                    input.linear += Vec3::new(j(), j(), j());
                }
            }
            if mode == ControlMode::FullManual6Dof {
                input.angular = self.rotation_toward(scene, self.goal);
            }
        }
        if arrived && condition_met(scene, st.condition) {
            input.gripper = st.action;
            self.goal = final_goal;
            self.enter(self.index + 1, scene);
        }
        input
    }

    fn goal(&self) -> Option<UnitQuat> {
        Some(self.goal)
    }

    fn stats(&self) -> OperatorStats {
        self.stats
    }

    fn finished(&self) -> bool {
        self.index >= self.stages.len()
    }
}

/// Plays back a recorded input sequence, then idles.
#[derive(Debug, Clone)]
pub struct ReplayOperator {
    inputs: Vec<UserInput>,
    cursor: usize,
}

impl ReplayOperator {
    pub fn new(inputs: Vec<UserInput>) -> Self {
        Self { inputs, cursor: 0 }
    }
}

impl Operator for ReplayOperator {
    fn begin(&mut self, _scene: &SceneState, _task: &TaskSpec) {}

    fn act(&mut self, _scene: &SceneState, _task: &TaskSpec, _mode: ControlMode) -> UserInput {
        let i = self.inputs.get(self.cursor).copied().unwrap_or_default();
        self.cursor += 1;
        i
    }

    fn finished(&self) -> bool {
        self.cursor >= self.inputs.len()
    }
}

/// Random-walk translations and gripper toggles that never look at the scene.
#[derive(Debug, Clone)]
pub struct RandomOperator {
    rng: ChaCha8Rng,
    velocity: Vec3,
    speed: f64,
}

impl RandomOperator {
    pub fn new(seed: u64, speed: f64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), velocity: Vec3::ZERO, speed }
    }
}

impl Operator for RandomOperator {
    fn begin(&mut self, _scene: &SceneState, _task: &TaskSpec) {}

    fn act(&mut self, _scene: &SceneState, _task: &TaskSpec, _mode: ControlMode) -> UserInput {
        let s = self.speed;
        let mut d = || self.rng.random_range(-s..=s);
        let kick = Vec3::new(d(), d(), d());
        self.velocity = (self.velocity * 0.9 + kick * 0.3).clamp_norm(1.5 * s);
        let gripper = match self.rng.random_range(0..40) {
            0 => GripperCommand::Close,
            1 => GripperCommand::Open,
            _ => GripperCommand::Hold,
        };
        UserInput { linear: self.velocity, gripper, ..UserInput::default() }
    }
}
