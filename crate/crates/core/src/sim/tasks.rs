//! The three task analogs: layouts, reset, and success/reset predicates.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    cross_hole_alignment, footprint_contains, screwdriver_tip, tilt, upright_with_yaw, Role, SceneObject, SceneState,
    Shape, SimParams,
};
use crate::geometry::{Pose, UnitQuat, Vec3};
use crate::pointcloud::CropBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Unstack,
    Screwdriver,
    ShapeMatch,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Unstack, TaskId::Screwdriver, TaskId::ShapeMatch];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Unstack => "unstack",
            TaskId::Screwdriver => "screwdriver",
            TaskId::ShapeMatch => "shape_match",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unstack" => Ok(TaskId::Unstack),
            "screwdriver" => Ok(TaskId::Screwdriver),
            "shape_match" => Ok(TaskId::ShapeMatch),
            other => Err(format!("unknown task '{other}' (expected unstack, screwdriver or shape_match)")),
        }
    }
}

/// Seeded perturbation bounds applied at reset. Zero bounds reproduce the
/// canonical layout exactly.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    /// Shared xy offset of the object to be picked, meters.
    pub position: f64,
    /// Per-object yaw offset, radians.
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    pub home: Vec3,
    pub crop_box: CropBox,
    pub jitter: Jitter,
    pub params: SimParams,
    pub max_ticks: u64,
}

pub const HOME: Vec3 = Vec3 { x: 0.30, y: 0.0, z: 0.30 };

pub const CUBE_SIZE: f64 = 0.04;
pub const STACK_XY: (f64, f64) = (0.40, -0.12);
/// Cube yaws from the bottom of the stack up.
pub const STACK_YAWS: [f64; 3] = [0.40, -0.30, 0.15];
pub const PLATE_XY: (f64, f64) = (0.30, 0.15);
pub const PLATE_SIZE: Vec3 = Vec3 { x: 0.22, y: 0.22, z: 0.01 };

pub const SHAFT_RADIUS: f64 = 0.012;
pub const SHAFT_LENGTH: f64 = 0.16;
/// Center of the screwdriver lying on the table.
pub const SCREWDRIVER_XY: (f64, f64) = (0.40, -0.10);
pub const CUP_XY: (f64, f64) = (0.30, 0.15);
pub const CUP_RADIUS: f64 = 0.04;
pub const CUP_HEIGHT: f64 = 0.09;
pub const CUP_WALL: f64 = 0.004;

pub const CROSS_SPAN: f64 = 0.08;
pub const CROSS_WIDTH: f64 = 0.025;
pub const CROSS_HEIGHT: f64 = 0.03;
pub const CROSS_XY: (f64, f64) = (0.40, -0.12);
pub const CONTAINER_XY: (f64, f64) = (0.28, 0.14);
pub const CONTAINER_SIZE: Vec3 = Vec3 { x: 0.16, y: 0.16, z: 0.05 };
pub const HOLE_YAW: f64 = 0.5;
pub const HOLE_CLEARANCE: f64 = 0.006;

impl TaskSpec {
    pub fn new(id: TaskId) -> Self {
        let crop_box = CropBox { min_corner: Vec3::new(0.15, -0.30, 0.003), max_corner: Vec3::new(0.55, 0.35, 0.40) };
        let max_ticks = match id {
            TaskId::Unstack => 3000,
            TaskId::Screwdriver | TaskId::ShapeMatch => 1500,
        };
        Self { id, home: HOME, crop_box, jitter: Jitter::default(), params: SimParams::default(), max_ticks }
    }

    pub fn home_pose(&self) -> Pose {
        Pose::new(self.home, UnitQuat::IDENTITY)
    }
}

const GRAY: [f64; 3] = [0.55, 0.55, 0.55];

fn canonical_objects(id: TaskId) -> Vec<SceneObject> {
    let up = UnitQuat::IDENTITY;
    match id {
        TaskId::Unstack => {
            let colors = [[0.85, 0.15, 0.15], [0.15, 0.7, 0.2], [0.15, 0.3, 0.85]];
            let mut v: Vec<SceneObject> = STACK_YAWS
                .iter()
                .enumerate()
                .map(|(i, &yaw)| {
                    let z = CUBE_SIZE * (i as f64 + 0.5);
                    SceneObject::new(
                        i,
                        &format!("cube_{i}"),
                        Role::Cube,
                        Shape::Box { size: Vec3::new(CUBE_SIZE, CUBE_SIZE, CUBE_SIZE) },
                        Pose::new(Vec3::new(STACK_XY.0, STACK_XY.1, z), upright_with_yaw(yaw)),
                        colors[i],
                        true,
                    )
                })
                .collect();
            v.push(SceneObject::new(
                3,
                "plate",
                Role::Plate,
                Shape::Box { size: PLATE_SIZE },
                Pose::new(Vec3::new(PLATE_XY.0, PLATE_XY.1, PLATE_SIZE.z / 2.0), up),
                GRAY,
                false,
            ));
            v
        }
        TaskId::Screwdriver => vec![
            SceneObject::new(
                0,
                "screwdriver",
                Role::Screwdriver,
                Shape::Cylinder { radius: SHAFT_RADIUS, length: SHAFT_LENGTH },
                // lying along world y with the handle toward -y
                Pose::new(
                    Vec3::new(SCREWDRIVER_XY.0, SCREWDRIVER_XY.1, SHAFT_RADIUS),
                    UnitQuat::from_axis_angle(Vec3::X, std::f64::consts::FRAC_PI_2),
                ),
                [0.95, 0.8, 0.1],
                true,
            ),
            SceneObject::new(
                1,
                "cup",
                Role::Cup,
                Shape::Cup { radius: CUP_RADIUS, height: CUP_HEIGHT, wall: CUP_WALL },
                Pose::new(Vec3::new(CUP_XY.0, CUP_XY.1, CUP_HEIGHT / 2.0), up),
                [0.9, 0.9, 0.85],
                false,
            ),
        ],
        TaskId::ShapeMatch => vec![
            SceneObject::new(
                0,
                "cross",
                Role::Cross,
                Shape::Cross { span: CROSS_SPAN, width: CROSS_WIDTH, height: CROSS_HEIGHT },
                Pose::new(Vec3::new(CROSS_XY.0, CROSS_XY.1, CROSS_HEIGHT / 2.0), up),
                [0.95, 0.5, 0.1],
                true,
            ),
            SceneObject::new(
                1,
                "container",
                Role::Container,
                Shape::CrossHoleBlock {
                    size: CONTAINER_SIZE,
                    span: CROSS_SPAN,
                    width: CROSS_WIDTH,
                    clearance: HOLE_CLEARANCE,
                    hole_yaw: HOLE_YAW,
                },
                Pose::new(Vec3::new(CONTAINER_XY.0, CONTAINER_XY.1, CONTAINER_SIZE.z / 2.0), up),
                [0.55, 0.3, 0.7],
                false,
            ),
        ],
    }
}

/// Fresh scene with the gripper open at home.
pub fn reset(task: &TaskSpec, seed: u64) -> SceneState {
    let mut objects = canonical_objects(task.id);
    let j = task.jitter;
    if j.position > 0.0 || j.yaw > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        let offset = Vec3::new(draw(j.position), draw(j.position), 0.0);
        for o in objects.iter_mut().filter(|o| o.movable) {
            o.pose.position += offset;
            o.pose.orientation = (upright_with_yaw(draw(j.yaw)) * o.pose.orientation).renormalized();
        }
    }
    SceneState {
        objects,
        gripper: task.home_pose(),
        gripper_closed: false,
        attached: None,
        attach_offset: None,
        tick: 0,
    }
}

fn on_support(o: &SceneObject, support: &SceneObject) -> bool {
    (o.bottom_z() - support.top_z()).abs() < 0.005 && footprint_contains(support, o.pose.position)
}

/// Task success predicate.
pub fn check_success(scene: &SceneState, task: &TaskSpec) -> bool {
    match task.id {
        TaskId::Unstack => {
            let Some(plate) = scene.objects_with_role(Role::Plate).next() else { return false };
            let cubes: Vec<&SceneObject> = scene.objects_with_role(Role::Cube).collect();
            cubes.len() == 3
                && cubes.iter().all(|c| !c.grasped && !c.toppled && tilt(c) < 0.1 && on_support(c, plate))
        }
        TaskId::Screwdriver => {
            let (Some(sd), Some(cup)) =
                (scene.objects_with_role(Role::Screwdriver).next(), scene.objects_with_role(Role::Cup).next())
            else {
                return false;
            };
            let Shape::Cup { radius, height, wall } = cup.shape else { return false };
            let tip = screwdriver_tip(sd);
            let base = cup.pose.position.z - height / 2.0;
            let lateral = (tip - cup.pose.position).horizontal().norm();
            let upright = sd.axis().z.min(1.0).acos();
            !sd.grasped
                && lateral <= radius - wall
                && tip.z >= base + wall - 1e-6
                && tip.z <= base + height
                && upright <= task.params.grasp_alignment
        }
        TaskId::ShapeMatch => {
            let (Some(cross), Some(block)) =
                (scene.objects_with_role(Role::Cross).next(), scene.objects_with_role(Role::Container).next())
            else {
                return false;
            };
            let Shape::CrossHoleBlock { clearance, .. } = block.shape else { return false };
            let Some((yaw_err, lateral)) = cross_hole_alignment(cross, block) else { return false };
            !cross.grasped
                && !cross.toppled
                && cross.pose.position.z < block.top_z()
                && yaw_err <= super::CROSS_YAW_TOL
                && lateral <= clearance
        }
    }
}

/// Failure predicate that forces a scored restart.
pub fn check_reset(scene: &SceneState, task: &TaskSpec) -> bool {
    let out_of_reach =
        |o: &SceneObject| (o.pose.position - task.home).horizontal().norm() > task.params.reach_radius;
    scene.objects.iter().filter(|o| o.movable && !o.grasped).any(|o| match o.role {
        Role::Screwdriver => !o.inserted && out_of_reach(o),
        _ => o.toppled || out_of_reach(o),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reset_is_deterministic_and_canonical_without_jitter() {
        for id in TaskId::ALL {
            let t = TaskSpec::new(id);
            let a = reset(&t, 1);
            assert_eq!(a, reset(&t, 1));
            assert_eq!(a, reset(&t, 99));
            assert_eq!(a.objects, canonical_objects(id));
            assert!(a.validate().is_ok());
            assert!(!check_success(&a, &t));
            assert!(!check_reset(&a, &t));
        }
        let mut t = TaskSpec::new(TaskId::Unstack);
        t.jitter = Jitter { position: 0.02, yaw: 0.1 };
        assert_eq!(reset(&t, 5), reset(&t, 5));
        assert_ne!(reset(&t, 5), reset(&t, 6));
    }

    #[test]
    fn unstack_layout_has_three_unaligned_cubes_and_a_plate() {
        let s = reset(&TaskSpec::new(TaskId::Unstack), 0);
        let cubes: Vec<_> = s.objects_with_role(Role::Cube).collect();
        assert_eq!(cubes.len(), 3);
        assert_eq!(s.objects_with_role(Role::Plate).count(), 1);
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(super::super::quarter_turn_error(cubes[i].pose.orientation, cubes[j].pose.orientation) > 0.1);
            }
        }
    }

    #[test]
    fn constructed_terminal_scenes_succeed() {
        let t = TaskSpec::new(TaskId::Unstack);
        let mut s = reset(&t, 0);
        let spots = [(0.25, 0.10), (0.35, 0.10), (0.30, 0.20)];
        for (i, &(x, y)) in spots.iter().enumerate() {
            s.objects[i].pose.position = Vec3::new(x, y, 0.01 + 0.02);
        }
        assert!(check_success(&s, &t));
        assert!(!check_reset(&s, &t));
        // stacking two of them on the plate is not a success
        s.objects[1].pose.position = Vec3::new(0.25, 0.10, 0.01 + 0.06);
        assert!(!check_success(&s, &t));

        let t = TaskSpec::new(TaskId::Screwdriver);
        let mut s = reset(&t, 0);
        // tip on the cup floor, handle straight up
        s.objects[0].pose = Pose::new(Vec3::new(CUP_XY.0, CUP_XY.1, CUP_WALL + SHAFT_LENGTH / 2.0), UnitQuat::IDENTITY);
        assert!(check_success(&s, &t));
        // handle down is not
        s.objects[0].pose.orientation = UnitQuat::from_axis_angle(Vec3::X, std::f64::consts::PI);
        assert!(!check_success(&s, &t));

        let t = TaskSpec::new(TaskId::ShapeMatch);
        let mut s = reset(&t, 0);
        s.objects[0].pose = Pose::new(
            Vec3::new(CONTAINER_XY.0 + 0.003, CONTAINER_XY.1, CROSS_HEIGHT / 2.0),
            upright_with_yaw(HOLE_YAW + 0.05),
        );
        assert!(check_success(&s, &t));
        s.objects[0].pose.orientation = upright_with_yaw(HOLE_YAW + 0.2);
        assert!(!check_success(&s, &t));
    }

    #[test]
    fn screwdriver_beyond_reach_triggers_reset() {
        let t = TaskSpec::new(TaskId::Screwdriver);
        let mut s = reset(&t, 0);
        s.objects[0].pose.position = Vec3::new(0.95, 0.1, SHAFT_RADIUS);
        assert!(check_reset(&s, &t));
        assert!(!check_success(&s, &t));
        assert_abs_diff_eq!(tilt(&s.objects[0]), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }
}
