//! Kinematic desk-scale world: objects, a free-flying gripper, grasping,
//! settle-on-release and the task predicates.

pub mod operator;
pub mod render;
pub mod tasks;

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{integrate_pose, GeometryError, Pose, Twist, UnitQuat, Vec3};

pub use render::render_cloud;
pub use tasks::{check_reset, check_success, reset, Jitter, TaskId, TaskSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("render density must be positive, got {0}")]
    NonPositiveDensity(f64),
    #[error("object {0} does not exist")]
    UnknownObject(usize),
    #[error("object {0} has a non-positive dimension")]
    BadDimensions(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GripperCommand {
    Open,
    Close,
    #[default]
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Cube,
    Plate,
    Screwdriver,
    Cup,
    Cross,
    Container,
}

/// Shapes are centered on their local origin with their axis along local z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box { size: Vec3 },
    /// Solid cylinder.
    Cylinder { radius: f64, length: f64 },
    /// Open-top hollow cylinder with a closed floor.
    Cup { radius: f64, height: f64, wall: f64 },
    /// Plus-shaped prism: two `span x width` bars crossing at the center.
    Cross { span: f64, width: f64, height: f64 },
    /// Block with a through hole shaped like a [`Shape::Cross`] grown by `clearance`.
    CrossHoleBlock { size: Vec3, span: f64, width: f64, clearance: f64, hole_yaw: f64 },
}

impl Shape {
    /// Half extents of the local bounding box.
    pub fn half_extents(&self) -> Vec3 {
        match *self {
            Shape::Box { size } => size * 0.5,
            Shape::Cylinder { radius, length } => Vec3::new(radius, radius, length / 2.0),
            Shape::Cup { radius, height, .. } => Vec3::new(radius, radius, height / 2.0),
            Shape::Cross { span, height, .. } => Vec3::new(span / 2.0, span / 2.0, height / 2.0),
            Shape::CrossHoleBlock { size, .. } => size * 0.5,
        }
    }

    fn dimensions_ok(&self) -> bool {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        match *self {
            Shape::Box { size } => pos(size.x) && pos(size.y) && pos(size.z),
            Shape::Cylinder { radius, length } => pos(radius) && pos(length),
            Shape::Cup { radius, height, wall } => pos(radius) && pos(height) && pos(wall) && wall < radius,
            Shape::Cross { span, width, height } => pos(span) && pos(width) && pos(height) && width < span,
            Shape::CrossHoleBlock { size, span, width, clearance, .. } => {
                pos(size.x) && pos(size.y) && pos(size.z) && pos(span) && pos(width) && clearance >= 0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub name: String,
    pub role: Role,
    pub shape: Shape,
    pub pose: Pose,
    pub color: [f64; 3],
    pub movable: bool,
    pub grasped: bool,
    /// Fell over after a failed support check.
    pub toppled: bool,
    /// Seated in its receptacle (cup or hole).
    pub inserted: bool,
}

impl SceneObject {
    pub fn new(id: usize, name: &str, role: Role, shape: Shape, pose: Pose, color: [f64; 3], movable: bool) -> Self {
        Self {
            id,
            name: name.to_string(),
            role,
            shape,
            pose,
            color,
            movable,
            grasped: false,
            toppled: false,
            inserted: false,
        }
    }

    /// World axis-aligned bounding box `(min, max)`.
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let h = self.shape.half_extents();
        let m = self.pose.orientation.to_matrix();
        let e: [f64; 3] = std::array::from_fn(|i| m[i][0].abs() * h.x + m[i][1].abs() * h.y + m[i][2].abs() * h.z);
        let e = Vec3::from_array(e);
        (self.pose.position - e, self.pose.position + e)
    }

    pub fn top_z(&self) -> f64 {
        self.aabb().1.z
    }

    pub fn bottom_z(&self) -> f64 {
        self.aabb().0.z
    }

    /// World direction of the local z axis.
    pub fn axis(&self) -> Vec3 {
        self.pose.orientation.rotate(Vec3::Z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub objects: Vec<SceneObject>,
    pub gripper: Pose,
    pub gripper_closed: bool,
    pub attached: Option<usize>,
    /// Pose of the attached object in the gripper frame.
    pub attach_offset: Option<Pose>,
    pub tick: u64,
}

impl SceneState {
    pub fn object(&self, id: usize) -> Result<&SceneObject, SimError> {
        self.objects.iter().find(|o| o.id == id).ok_or(SimError::UnknownObject(id))
    }

    pub fn objects_with_role(&self, role: Role) -> impl Iterator<Item = &SceneObject> {
        self.objects.iter().filter(move |o| o.role == role)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for o in &self.objects {
            if !o.shape.dimensions_ok() {
                return Err(SimError::BadDimensions(o.id));
            }
        }
        Ok(())
    }

    fn index(&self, id: usize) -> usize {
        self.objects.iter().position(|o| o.id == id).expect("object id")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Attached { id: usize },
    Detached { id: usize },
    GraspMissed,
    Settled { id: usize },
    Inserted { id: usize },
    Toppled { id: usize },
    Bumped { id: usize },
}

/// Grasp, placement and reach thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub grasp_distance: f64,
    pub grasp_alignment: f64,
    pub reach_radius: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { grasp_distance: 0.02, grasp_alignment: 0.35, reach_radius: 0.6 }
    }
}

/// Handle section of the screwdriver along its local z axis.
pub const HANDLE_RANGE: (f64, f64) = (0.02, 0.08);
/// Local z of the handle center, where the scripted operators grasp.
pub const HANDLE_GRASP_Z: f64 = 0.05;
/// Settling tolerance on support heights.
const SUPPORT_TOL: f64 = 0.005;
const UPRIGHT_TOL: f64 = 0.35;

/// Shaft direction pointing from the tip toward the handle.
pub fn handle_direction(o: &SceneObject) -> Vec3 {
    o.axis()
}

/// Tip of the screwdriver shaft (the end opposite the handle).
pub fn screwdriver_tip(o: &SceneObject) -> Vec3 {
    let len = match o.shape {
        Shape::Cylinder { length, .. } => length,
        _ => 0.0,
    };
    o.pose.transform_point(Vec3::new(0.0, 0.0, -len / 2.0))
}

fn box_distance(local: Vec3, half: Vec3) -> f64 {
    let d = Vec3::new(
        (local.x.abs() - half.x).max(0.0),
        (local.y.abs() - half.y).max(0.0),
        (local.z.abs() - half.z).max(0.0),
    );
    d.norm()
}

/// Distance from a point to the graspable part of an object, or `None` for
/// objects that cannot be grasped.
pub fn grasp_feature_distance(o: &SceneObject, p: Vec3) -> Option<f64> {
    let local = o.pose.inverse().transform_point(p);
    match (o.role, o.shape) {
        (Role::Cube, Shape::Box { size }) => Some(box_distance(local, size * 0.5)),
        (Role::Screwdriver, Shape::Cylinder { radius, .. }) => {
            let z = local.z.clamp(HANDLE_RANGE.0, HANDLE_RANGE.1);
            let radial = (local.x * local.x + local.y * local.y).sqrt();
            let d = ((radial - radius).max(0.0).powi(2) + (local.z - z).powi(2)).sqrt();
            Some(d)
        }
        (Role::Cross, Shape::Cross { span, width, height }) => {
            let a = box_distance(local, Vec3::new(span / 2.0, width / 2.0, height / 2.0));
            let b = box_distance(local, Vec3::new(width / 2.0, span / 2.0, height / 2.0));
            Some(a.min(b))
        }
        _ => None,
    }
}

/// Smallest rotation angle between `q` and `target` composed with any of the
/// four quarter turns about the target's z axis.
pub fn quarter_turn_error(q: UnitQuat, target: UnitQuat) -> f64 {
    (0..4)
        .map(|k| q.angle_to(target * UnitQuat::from_axis_angle(Vec3::Z, k as f64 * FRAC_PI_2)))
        .fold(f64::INFINITY, f64::min)
}

/// How far the gripper orientation is from a valid grasp of `o`, in radians.
pub fn grasp_alignment_error(o: &SceneObject, gripper: UnitQuat) -> Option<f64> {
    match o.role {
        Role::Cube | Role::Cross => Some(quarter_turn_error(gripper, o.pose.orientation)),
        Role::Screwdriver => {
            // fingers close along gripper x, so the shaft must lie along gripper y
            let c = o.axis().dot(gripper.rotate(Vec3::Y)).abs().min(1.0);
            Some(c.acos())
        }
        _ => None,
    }
}

/// Angle between an object's z axis and world up, ignoring sign.
pub fn tilt(o: &SceneObject) -> f64 {
    o.axis().z.abs().min(1.0).acos()
}

/// Heading of the local x axis projected onto the table plane.
pub fn yaw_of(q: UnitQuat) -> f64 {
    let x = q.rotate(Vec3::X);
    x.y.atan2(x.x)
}

fn footprint_contains(o: &SceneObject, p: Vec3) -> bool {
    let (lo, hi) = o.aabb();
    p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y
}

fn footprints_overlap(a: &SceneObject, b: &SceneObject) -> bool {
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    alo.x < bhi.x - 1e-6 && blo.x < ahi.x - 1e-6 && alo.y < bhi.y - 1e-6 && blo.y < ahi.y - 1e-6
}

/// True if some other free object rests on top of `o`.
fn supports_something(scene: &SceneState, o: &SceneObject) -> bool {
    let top = o.top_z();
    scene.objects.iter().any(|other| {
        other.id != o.id
            && other.movable
            && !other.grasped
            && (other.bottom_z() - top).abs() < SUPPORT_TOL
            && footprint_contains(o, other.pose.position)
    })
}

/// Advance the world one tick.
pub fn step(
    scene: &SceneState,
    params: &SimParams,
    twist: &Twist,
    gripper_cmd: GripperCommand,
    dt: f64,
) -> Result<(SceneState, Vec<SimEvent>), SimError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::NonPositiveDt(dt));
    }
    let mut s = scene.clone();
    let mut events = Vec::new();
    s.gripper = integrate_pose(&scene.gripper, twist, dt)?;
    if let (Some(id), Some(offset)) = (s.attached, s.attach_offset) {
        let i = s.index(id);
        s.objects[i].pose = s.gripper.compose(&offset);
        bump(&mut s, id, &mut events);
    }
    match gripper_cmd {
        GripperCommand::Close if !s.gripper_closed => {
            s.gripper_closed = true;
            match grasp_candidate(&s, params) {
                Some(id) => {
                    let i = s.index(id);
                    s.attach_offset = Some(s.gripper.inverse().compose(&s.objects[i].pose));
                    s.attached = Some(id);
                    let o = &mut s.objects[i];
                    o.grasped = true;
                    o.inserted = false;
                    events.push(SimEvent::Attached { id });
                }
                None => events.push(SimEvent::GraspMissed),
            }
        }
        GripperCommand::Open if s.gripper_closed => {
            s.gripper_closed = false;
            if let Some(id) = s.attached.take() {
                s.attach_offset = None;
                let i = s.index(id);
                s.objects[i].grasped = false;
                events.push(SimEvent::Detached { id });
                settle(&mut s, id, &mut events);
            }
        }
        _ => {}
    }
    s.tick += 1;
    Ok((s, events))
}

fn grasp_candidate(s: &SceneState, params: &SimParams) -> Option<usize> {
    let tcp = s.gripper.position;
    let mut best: Option<(f64, f64, usize)> = None;
    for o in s.objects.iter().filter(|o| o.movable && !o.grasped) {
        let (Some(d), Some(a)) = (grasp_feature_distance(o, tcp), grasp_alignment_error(o, s.gripper.orientation)) else {
            continue;
        };
        if d > params.grasp_distance || a > params.grasp_alignment || supports_something(s, o) {
            continue;
        }
        let better = match best {
            None => true,
            Some((bd, bz, _)) => d < bd || (d == bd && o.pose.position.z > bz),
        };
        if better {
            best = Some((d, o.pose.position.z, o.id));
        }
    }
    best.map(|b| b.2)
}

/// Push free objects out of the attached object's bounding box.
fn bump(s: &mut SceneState, held: usize, events: &mut Vec<SimEvent>) {
    let held_box = s.objects[s.index(held)].aabb();
    let mut pushed = Vec::new();
    for o in s.objects.iter_mut().filter(|o| o.movable && !o.grasped && o.id != held) {
        let (lo, hi) = o.aabb();
        let pen = |a0: f64, a1: f64, b0: f64, b1: f64| (a1.min(b1) - a0.max(b0)).max(0.0);
        let px = pen(held_box.0.x, held_box.1.x, lo.x, hi.x);
        let py = pen(held_box.0.y, held_box.1.y, lo.y, hi.y);
        let pz = pen(held_box.0.z, held_box.1.z, lo.z, hi.z);
        if px <= 1e-4 || py <= 1e-4 || pz <= 1e-4 {
            continue;
        }
        let held_c = (held_box.0 + held_box.1) * 0.5;
        let c = (lo + hi) * 0.5;
        let shift = if px < py {
            Vec3::new((px + 1e-4) * if c.x >= held_c.x { 1.0 } else { -1.0 }, 0.0, 0.0)
        } else {
            Vec3::new(0.0, (py + 1e-4) * if c.y >= held_c.y { 1.0 } else { -1.0 }, 0.0)
        };
        o.pose.position += shift;
        o.inserted = false;
        pushed.push(o.id);
    }
    if pushed.is_empty() {
        return;
    }
    for &id in &pushed {
        events.push(SimEvent::Bumped { id });
    }
    // anything that lost its support settles again, lowest first
    let mut order: Vec<(f64, usize)> = s
        .objects
        .iter()
        .filter(|o| o.movable && !o.grasped && !o.toppled)
        .map(|o| (o.pose.position.z, o.id))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, id) in order {
        if pushed.contains(&id) || !is_supported(s, id) {
            settle(s, id, events);
        }
    }
}

fn is_supported(s: &SceneState, id: usize) -> bool {
    let o = &s.objects[s.index(id)];
    if o.inserted || o.bottom_z() < SUPPORT_TOL {
        return true;
    }
    s.objects.iter().any(|other| {
        other.id != id && !other.grasped && (other.top_z() - o.bottom_z()).abs() < SUPPORT_TOL && footprint_contains(other, o.pose.position)
    })
}

/// Height of the highest surface below `o` whose footprint holds its center,
/// and whether `o` overhangs a higher edge it is not centered on.
fn support_below(s: &SceneState, o: &SceneObject) -> (f64, Option<usize>, bool) {
    let bottom = o.bottom_z();
    let mut top = 0.0;
    let mut support = None;
    for other in s.objects.iter().filter(|x| x.id != o.id && !x.grasped) {
        let t = other.top_z();
        if t <= bottom + SUPPORT_TOL && t > top && footprint_contains(other, o.pose.position) {
            top = t;
            support = Some(other.id);
        }
    }
    let overhang = s.objects.iter().filter(|x| x.id != o.id && !x.grasped).any(|other| {
        let t = other.top_z();
        t <= bottom + SUPPORT_TOL && t > top + 1e-6 && footprints_overlap(other, o) && !footprint_contains(other, o.pose.position)
    });
    (top, support, overhang)
}

fn upright_with_yaw(yaw: f64) -> UnitQuat {
    UnitQuat::from_axis_angle(Vec3::Z, yaw)
}

fn topple(o: &mut SceneObject, events: &mut Vec<SimEvent>) {
    let yaw = yaw_of(o.pose.orientation);
    o.pose.orientation = upright_with_yaw(yaw) * UnitQuat::from_axis_angle(Vec3::Y, 1.2);
    o.toppled = true;
    o.inserted = false;
    let lift = o.pose.position.z - o.bottom_z();
    o.pose.position.z = lift;
    events.push(SimEvent::Toppled { id: o.id });
}

/// Drop a released or displaced object onto whatever is below it.
fn settle(s: &mut SceneState, id: usize, events: &mut Vec<SimEvent>) {
    let i = s.index(id);
    let o = s.objects[i].clone();
    match o.role {
        Role::Cube => settle_upright(s, i, events),
        Role::Screwdriver => settle_screwdriver(s, i, events),
        Role::Cross => settle_cross(s, i, events),
        _ => {}
    }
}

fn settle_upright(s: &mut SceneState, i: usize, events: &mut Vec<SimEvent>) {
    let o = s.objects[i].clone();
    if tilt(&o) > UPRIGHT_TOL {
        topple(&mut s.objects[i], events);
        return;
    }
    let (top, _, overhang) = support_below(s, &o);
    let obj = &mut s.objects[i];
    obj.pose.orientation = upright_with_yaw(yaw_of(o.pose.orientation));
    if overhang {
        topple(obj, events);
        return;
    }
    obj.pose.position.z = top + o.shape.half_extents().z;
    events.push(SimEvent::Settled { id: o.id });
}

fn settle_screwdriver(s: &mut SceneState, i: usize, events: &mut Vec<SimEvent>) {
    let o = s.objects[i].clone();
    let Shape::Cylinder { radius, .. } = o.shape else { return };
    let tip = screwdriver_tip(&o);
    let up = handle_direction(&o);
    for cup in s.objects.iter().filter(|c| c.role == Role::Cup) {
        let Shape::Cup { radius: cr, height, wall } = cup.shape else { continue };
        let base = cup.pose.position.z - height / 2.0;
        let lateral = (tip - cup.pose.position).horizontal().norm();
        let upright = up.z.min(1.0).acos();
        if lateral <= cr - wall && tip.z <= base + height + 0.02 && upright <= UPRIGHT_TOL {
            let floor = base + wall;
            let obj = &mut s.objects[i];
            obj.pose.position.z += floor - tip.z;
            obj.inserted = true;
            events.push(SimEvent::Inserted { id: o.id });
            return;
        }
    }
    // otherwise the shaft falls flat, keeping its heading
    let heading = if up.horizontal().norm() > 1e-9 { up.y.atan2(up.x) } else { yaw_of(o.pose.orientation) };
    let lay = UnitQuat::from_axis_angle(Vec3::Z, heading - FRAC_PI_2) * UnitQuat::from_axis_angle(Vec3::X, -FRAC_PI_2);
    let was_flat = up.z.abs() < UPRIGHT_TOL.sin();
    let mut flat = o.clone();
    flat.pose.orientation = lay;
    let (top, _, _) = support_below(s, &flat);
    let obj = &mut s.objects[i];
    obj.pose.orientation = lay;
    obj.pose.position.z = top + radius;
    obj.inserted = false;
    if was_flat {
        events.push(SimEvent::Settled { id: o.id });
    } else {
        events.push(SimEvent::Toppled { id: o.id });
    }
}

/// Cross yaw error against the hole and lateral offset from its center.
pub fn cross_hole_alignment(cross: &SceneObject, block: &SceneObject) -> Option<(f64, f64)> {
    let Shape::CrossHoleBlock { hole_yaw, .. } = block.shape else { return None };
    let hole = block.pose.orientation * upright_with_yaw(hole_yaw);
    let yaw_err = quarter_turn_error(cross.pose.orientation, hole);
    let lateral = (cross.pose.position - block.pose.position).horizontal().norm();
    Some((yaw_err, lateral))
}

/// Yaw tolerance for the cross to drop through the hole.
pub const CROSS_YAW_TOL: f64 = 0.1;

fn settle_cross(s: &mut SceneState, i: usize, events: &mut Vec<SimEvent>) {
    let o = s.objects[i].clone();
    if tilt(&o) > UPRIGHT_TOL {
        topple(&mut s.objects[i], events);
        return;
    }
    let half = o.shape.half_extents().z;
    for block in s.objects.iter().filter(|b| b.role == Role::Container) {
        let Shape::CrossHoleBlock { clearance, .. } = block.shape else { continue };
        let Some((yaw_err, lateral)) = cross_hole_alignment(&o, block) else { continue };
        if !footprint_contains(block, o.pose.position) || o.bottom_z() < block.top_z() - SUPPORT_TOL {
            continue;
        }
        if yaw_err <= CROSS_YAW_TOL && lateral <= clearance {
            let floor = block.bottom_z();
            let obj = &mut s.objects[i];
            obj.pose.position.z = floor + half;
            obj.inserted = true;
            events.push(SimEvent::Inserted { id: o.id });
            return;
        }
    }
    settle_upright(s, i, events);
}
