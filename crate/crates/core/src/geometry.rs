//! Rotation and pose math.
//!
//! Quaternions are the working representation for orientation. Euler angles
//! only appear at the policy boundary, where actions are roll/pitch/yaw in
//! the intrinsic X-Y-Z convention (`R = Rx(roll) * Ry(pitch) * Rz(yaw)`).

use std::f64::consts::{PI, TAU};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the unit-norm check for quaternions.
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("quaternion norm {0} is not 1")]
    NotUnit(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("velocity caps must be positive (linear {linear}, angular {angular})")]
    NonPositiveCap { linear: f64, angular: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Unit vector in the same direction, or zero for the zero vector.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec3::ZERO
        }
    }

    /// Rescale so the norm is at most `cap`, preserving direction.
    pub fn clamp_norm(self, cap: f64) -> Vec3 {
        let n = self.norm();
        if n > cap {
            // rounding can leave the result a few ulps above the cap
            let mut v = self * (cap / n);
            while v.norm() > cap {
                v = v * (1.0 - f64::EPSILON);
            }
            v
        } else {
            self
        }
    }

    pub fn horizontal(self) -> Vec3 {
        Vec3::new(self.x, self.y, 0.0)
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Roll/pitch/yaw in radians, intrinsic X-Y-Z, each wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerRPY {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerRPY {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Result<Self, GeometryError> {
        if !(roll.is_finite() && pitch.is_finite() && yaw.is_finite()) {
            return Err(GeometryError::NonFinite("euler angles"));
        }
        Ok(Self {
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
        })
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(a[0], a[1], a[2])
    }
}

/// Unit quaternion, canonicalized so that `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Checked constructor: the input must already be unit norm.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(GeometryError::NonFinite("quaternion"));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(GeometryError::NotUnit(n));
        }
        Ok(Self::canonical(w, x, y, z))
    }

    /// Normalizing constructor. Panics are avoided by falling back to identity
    /// for a zero-length input.
    pub fn normalize(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Self { w: -w, x: -x, y: -y, z: -z }
        } else {
            Self { w, x, y, z }
        }
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    /// `[w, x, y, z]`
    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::normalize(c, a.x * s, a.y * s, a.z * s)
    }

    /// Exponential map: rotation vector (axis * angle) to quaternion.
    pub fn exp(v: Vec3) -> Self {
        let angle = v.norm();
        if angle < 1e-12 {
            // second-order accurate near zero
            return Self::normalize(1.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z);
        }
        Self::from_axis_angle(v, angle)
    }

    /// Logarithm map: rotation vector with magnitude in `[0, pi]`.
    pub fn log(self) -> Vec3 {
        // w >= 0 after canonicalization, so the angle is in [0, pi].
        let v = Vec3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < 1e-15 {
            return v * 2.0;
        }
        let angle = 2.0 * s.atan2(self.w);
        v * (angle / s)
    }

    pub fn conjugate(self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Rotation angle between two orientations, in `[0, pi]`.
    pub fn angle_to(self, other: UnitQuat) -> f64 {
        let d = (self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z).abs();
        2.0 * d.min(1.0).acos()
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Renormalize to remove accumulated drift.
    /// Constant-rate interpolation from `self` (t = 0) to `other` (t = 1).
    pub fn slerp(self, other: UnitQuat, t: f64) -> UnitQuat {
        (UnitQuat::exp(angular_error(self, other) * t) * self).renormalized()
    }

    /// Smallest rotation taking direction `from` onto direction `to`.
    pub fn between(from: Vec3, to: Vec3) -> UnitQuat {
        let (a, b) = (from.normalized(), to.normalized());
        let axis = a.cross(b);
        let s = axis.norm();
        let c = a.dot(b);
        if s < 1e-12 {
            if c > 0.0 {
                return UnitQuat::IDENTITY;
            }
            let helper = if a.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
            return UnitQuat::from_axis_angle(a.cross(helper), std::f64::consts::PI);
        }
        UnitQuat::from_axis_angle(axis, s.atan2(c))
    }

    pub fn renormalized(self) -> Self {
        Self::normalize(self.w, self.x, self.y, self.z)
    }
}

impl Mul for UnitQuat {
    type Output = UnitQuat;
    fn mul(self, o: UnitQuat) -> UnitQuat {
        let (a, b) = (self, o);
        UnitQuat::canonical(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

pub fn euler_to_quat(e: EulerRPY) -> Result<UnitQuat, GeometryError> {
    if !(e.roll.is_finite() && e.pitch.is_finite() && e.yaw.is_finite()) {
        return Err(GeometryError::NonFinite("euler angles"));
    }
    let qx = UnitQuat::from_axis_angle(Vec3::X, e.roll);
    let qy = UnitQuat::from_axis_angle(Vec3::Y, e.pitch);
    let qz = UnitQuat::from_axis_angle(Vec3::Z, e.yaw);
    Ok((qx * qy * qz).renormalized())
}

/// Inverse of [`euler_to_quat`]. At gimbal lock (`|pitch| = pi/2`) roll is
/// set to zero and yaw absorbs the free angle.
pub fn quat_to_euler(q: UnitQuat) -> Result<EulerRPY, GeometryError> {
    let n = q.to_array().iter().map(|c| c * c).sum::<f64>().sqrt();
    if !n.is_finite() {
        return Err(GeometryError::NonFinite("quaternion"));
    }
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(GeometryError::NotUnit(n));
    }
    let r = q.to_matrix();
    let cos_pitch = (r[0][0] * r[0][0] + r[0][1] * r[0][1]).sqrt();
    let pitch = r[0][2].atan2(cos_pitch);
    let (roll, yaw) = if cos_pitch < 1e-10 {
        (0.0, r[1][0].atan2(r[1][1]))
    } else {
        ((-r[1][2]).atan2(r[2][2]), (-r[0][1]).atan2(r[0][0]))
    };
    EulerRPY::new(roll, pitch, yaw)
}

/// Axis-angle vector of `target * current^-1`, magnitude in `[0, pi]`.
pub fn angular_error(current: UnitQuat, target: UnitQuat) -> Vec3 {
    (target * current.conjugate()).log()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuat,
}

impl Pose {
    pub fn new(position: Vec3, orientation: UnitQuat) -> Self {
        Self { position, orientation }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.position + self.orientation.rotate(p)
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.conjugate();
        Pose::new(-inv.rotate(self.position), inv)
    }

    /// `self * other`
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.transform_point(other.position),
            (self.orientation * other.orientation).renormalized(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vec3,
    pub angular: Vec3,
}

impl Twist {
    pub const ZERO: Twist = Twist { linear: Vec3::ZERO, angular: Vec3::ZERO };

    pub fn new(linear: Vec3, angular: Vec3) -> Self {
        Self { linear, angular }
    }
}

/// Advance a pose by a world-frame twist: translate, then pre-multiply the
/// orientation by the exponential of `angular * dt`.
pub fn integrate_pose(p: &Pose, t: &Twist, dt: f64) -> Result<Pose, GeometryError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(GeometryError::NonPositiveDt(dt));
    }
    if !(t.linear.is_finite() && t.angular.is_finite()) {
        return Err(GeometryError::NonFinite("twist"));
    }
    let position = p.position + t.linear * dt;
    let orientation = if t.angular == Vec3::ZERO {
        p.orientation
    } else {
        (UnitQuat::exp(t.angular * dt) * p.orientation).renormalized()
    };
    Ok(Pose::new(position, orientation))
}

/// Rescale linear and angular parts independently to their caps.
pub fn clamp_twist(t: &Twist, linear_cap: f64, angular_cap: f64) -> Result<Twist, GeometryError> {
    if !(linear_cap > 0.0 && angular_cap > 0.0) {
        return Err(GeometryError::NonPositiveCap { linear: linear_cap, angular: angular_cap });
    }
    Ok(Twist::new(t.linear.clamp_norm(linear_cap), t.angular.clamp_norm(angular_cap)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quat_close(a: UnitQuat, b: UnitQuat, tol: f64) -> bool {
        let d = a.to_array().iter().zip(b.to_array()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let s = a.to_array().iter().zip(b.to_array()).map(|(p, q)| (p + q).abs()).fold(0.0, f64::max);
        d.min(s) <= tol
    }

    fn mat_mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    }

    fn rx(a: f64) -> [[f64; 3]; 3] {
        let (s, c) = a.sin_cos();
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    }
    fn ry(a: f64) -> [[f64; 3]; 3] {
        let (s, c) = a.sin_cos();
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
    }
    fn rz(a: f64) -> [[f64; 3]; 3] {
        let (s, c) = a.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    /// Shepperd's method, written independently of `UnitQuat::to_matrix`.
    fn matrix_to_quat(m: [[f64; 3]; 3]) -> [f64; 4] {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
        };
        if q[0] < 0.0 {
            [-q[0], -q[1], -q[2], -q[3]]
        } else {
            q
        }
    }

    #[test]
    fn euler_identity_and_half_turn() {
        let q = euler_to_quat(EulerRPY::new(0.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(q.to_array(), [1.0, 0.0, 0.0, 0.0]);
        let q = euler_to_quat(EulerRPY::new(PI, 0.0, 0.0).unwrap()).unwrap();
        let a = q.to_array();
        assert!(a[0] >= 0.0);
        assert_abs_diff_eq!(a[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[3], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn euler_matches_matrix_composition() {
        let (r, p, y) = (0.1, 0.2, 0.3);
        let expected = matrix_to_quat(mat_mul(mat_mul(rx(r), ry(p)), rz(y)));
        let q = euler_to_quat(EulerRPY::new(r, p, y).unwrap()).unwrap().to_array();
        for i in 0..4 {
            assert_abs_diff_eq!(q[i], expected[i], epsilon = 1e-12);
        }
        // and against nalgebra's matrix built the same way
        let na = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::x_axis(), r)
            * nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::y_axis(), p)
            * nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), y);
        let nq = nalgebra::UnitQuaternion::from_rotation_matrix(&na);
        let sign = if nq.w < 0.0 { -1.0 } else { 1.0 };
        assert_abs_diff_eq!(q[0], sign * nq.w, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], sign * nq.i, epsilon = 1e-12);
        assert_abs_diff_eq!(q[2], sign * nq.j, epsilon = 1e-12);
        assert_abs_diff_eq!(q[3], sign * nq.k, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(EulerRPY::new(f64::NAN, 0.0, 0.0).is_err());
        let bad = EulerRPY { roll: f64::INFINITY, pitch: 0.0, yaw: 0.0 };
        assert!(matches!(euler_to_quat(bad), Err(GeometryError::NonFinite(_))));
        assert!(matches!(UnitQuat::new(2.0, 0.0, 0.0, 0.0), Err(GeometryError::NotUnit(_))));
    }

    #[test]
    fn quat_to_euler_examples() {
        let e = quat_to_euler(UnitQuat::IDENTITY).unwrap();
        assert_eq!(e.to_array(), [0.0, 0.0, 0.0]);
        let q = euler_to_quat(EulerRPY::new(0.4, -0.7, 1.1).unwrap()).unwrap();
        let e = quat_to_euler(q).unwrap();
        assert_abs_diff_eq!(e.roll, 0.4, epsilon = 1e-9);
        assert_abs_diff_eq!(e.pitch, -0.7, epsilon = 1e-9);
        assert_abs_diff_eq!(e.yaw, 1.1, epsilon = 1e-9);
    }

    #[test]
    fn gimbal_lock_sets_roll_zero() {
        // roll 0.3 and yaw 0.5 at pitch pi/2 equal roll 0, yaw 0.8
        let m = mat_mul(mat_mul(rx(0.3), ry(PI / 2.0)), rz(0.5));
        let q = matrix_to_quat(m);
        let q = UnitQuat::normalize(q[0], q[1], q[2], q[3]);
        let e = quat_to_euler(q).unwrap();
        assert_eq!(e.roll, 0.0);
        assert_abs_diff_eq!(e.pitch, PI / 2.0, epsilon = 1e-7);
        // rebuild with the matrix oracle and compare rotations
        let back = mat_mul(mat_mul(rx(e.roll), ry(e.pitch)), rz(e.yaw));
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(back[i][j], m[i][j], epsilon = 1e-7);
            }
        }
        assert_abs_diff_eq!(e.yaw, 0.8, epsilon = 1e-7);
    }

    #[test]
    fn angular_error_examples() {
        let q = euler_to_quat(EulerRPY::new(0.2, -0.4, 0.9).unwrap()).unwrap();
        assert!(angular_error(q, q).norm() < 1e-15);
        // -q is the same rotation; canonicalization folds it
        let neg = UnitQuat::normalize(-q.w(), -q.x(), -q.y(), -q.z());
        assert!(angular_error(q, neg).norm() < 1e-12);
        let target = UnitQuat::from_axis_angle(Vec3::Z, 0.2) * q;
        let err = angular_error(q, target);
        assert_abs_diff_eq!(err.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(err.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(err.z, 0.2, epsilon = 1e-9);
    }

    #[test]
    fn integrate_pose_examples() {
        let p = Pose::new(Vec3::new(0.1, 0.2, 0.3), UnitQuat::IDENTITY);
        assert_eq!(integrate_pose(&p, &Twist::ZERO, 0.05).unwrap(), p);
        let moved = integrate_pose(&p, &Twist::new(Vec3::X, Vec3::ZERO), 0.05).unwrap();
        assert_eq!(moved.position.x, 0.1 + 1.0 * 0.05);
        let mut pose = Pose::default();
        let tw = Twist::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 0.2));
        for _ in 0..100 {
            pose = integrate_pose(&pose, &tw, 0.05).unwrap();
        }
        let e = quat_to_euler(pose.orientation).unwrap();
        assert_abs_diff_eq!(e.yaw, 1.0, epsilon = 1e-6);
        assert!(matches!(integrate_pose(&p, &tw, 0.0), Err(GeometryError::NonPositiveDt(_))));
    }

    #[test]
    fn clamp_twist_examples() {
        let t = Twist::new(Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.0));
        assert_eq!(clamp_twist(&t, 0.2, 0.5).unwrap(), t);
        let t = Twist::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(clamp_twist(&t, 0.2, 0.5).unwrap().angular, Vec3::new(0.0, 0.0, 0.5));
        let t = Twist::new(Vec3::new(0.3, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.0));
        let c = clamp_twist(&t, 0.2, 0.5).unwrap();
        assert_abs_diff_eq!(c.linear.x, 0.3 * (2.0 / 3.0), epsilon = 1e-15);
        assert_eq!(c.angular, t.angular);
        assert!(clamp_twist(&t, 0.0, 0.5).is_err());
        assert!(clamp_twist(&t, 0.2, -1.0).is_err());
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuat> {
        (-PI..PI, -1.5..1.5, -PI..PI)
            .prop_map(|(r, p, y)| euler_to_quat(EulerRPY::new(r, p, y).unwrap()).unwrap())
    }

    proptest! {
        #[test]
        fn euler_round_trip(r in -PI..PI, p in -(PI / 2.0 - 0.1)..(PI / 2.0 - 0.1), y in -PI..PI) {
            let e = EulerRPY::new(r, p, y).unwrap();
            let back = quat_to_euler(euler_to_quat(e).unwrap()).unwrap();
            for (a, b) in e.to_array().iter().zip(back.to_array()) {
                // compare on the circle so (-pi, pi] wrapping is harmless
                prop_assert!(wrap_angle(a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn quat_round_trip_up_to_sign(q in arb_quat()) {
            let back = euler_to_quat(quat_to_euler(q).unwrap()).unwrap();
            prop_assert!(quat_close(q, back, 1e-9));
        }

        #[test]
        fn angular_error_antisymmetric(a in arb_quat(), b in arb_quat()) {
            let e1 = angular_error(a, b);
            let e2 = angular_error(b, a);
            // near a half turn the axis flips sign freely
            prop_assume!(e1.norm() < PI - 1e-6);
            prop_assert!((e1 + e2).norm() < 1e-9);
            prop_assert!(e1.norm() <= PI + 1e-12);
        }

        #[test]
        fn clamp_idempotent_and_shrinking(
            lx in -2.0..2.0, ly in -2.0..2.0, lz in -2.0..2.0,
            ax in -3.0..3.0, ay in -3.0..3.0, az in -3.0..3.0,
            lc in 0.01..1.0, ac in 0.01..2.0,
        ) {
            let t = Twist::new(Vec3::new(lx, ly, lz), Vec3::new(ax, ay, az));
            let c = clamp_twist(&t, lc, ac).unwrap();
            prop_assert!(c.linear.norm() <= t.linear.norm());
            prop_assert!(c.angular.norm() <= t.angular.norm());
            prop_assert!(c.linear.norm() <= lc * (1.0 + 1e-12));
            prop_assert!(c.angular.norm() <= ac * (1.0 + 1e-12));
            prop_assert_eq!(clamp_twist(&c, lc, ac).unwrap(), c);
        }
    }

    #[test]
    fn integrate_keeps_unit_norm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut pose = Pose::default();
        for _ in 0..100_000 {
            let w = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            pose = integrate_pose(&pose, &Twist::new(Vec3::ZERO, w), 0.05).unwrap();
            let n = pose.orientation.to_array().iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
