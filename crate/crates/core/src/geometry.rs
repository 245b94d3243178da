//! Rigid-body algebra for camera and end-effector poses.
//!
//! Poses act on points by left multiplication of their homogeneous matrices,
//! so `compose(a, b)` is the transform `M(a) * M(b)`. Rotations are stored as
//! unit quaternions in `(w, x, y, z)` order with a non-negative scalar part.
//! Angles are radians internally; degrees appear only in [`EulerAngles`] and
//! [`PoseError`].

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::{Add, Mul, Neg, Sub};

/// Pitch values closer than this (radians) to ±90° are treated as gimbal lock.
pub const GIMBAL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
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

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            self
        } else {
            self.scale(1.0 / n)
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Rotation quaternion, components in `(w, x, y, z)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Raw constructor; call [`Quat::normalize`] before using it as a rotation.
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let a = axis.normalized();
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s).normalize()
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit length with `w >= 0`. When `w == 0` the first non-zero vector
    /// component is made positive so that `q` and `-q` map to the same value.
    /// A zero quaternion normalizes to identity.
    pub fn normalize(self) -> Quat {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Quat::IDENTITY;
        }
        let q = Quat::new(self.w / n, self.x / n, self.y / n, self.z / n);
        let flip = if q.w != 0.0 {
            q.w < 0.0
        } else if q.x != 0.0 {
            q.x < 0.0
        } else if q.y != 0.0 {
            q.y < 0.0
        } else {
            q.z < 0.0
        };
        if flip {
            -q
        } else {
            q
        }
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotates `v` by this (unit) quaternion.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v).scale(2.0);
        v + t.scale(self.w) + u.cross(t)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(self) -> f64 {
        let q = self.normalize();
        let v = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        2.0 * v.atan2(q.w)
    }

    /// Row-major 3×3 rotation matrix.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let Quat { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }
}

impl Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Hamilton product.
impl Mul for Quat {
    type Output = Quat;
    fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

/// Rigid transform. Serialized as `[tx, ty, tz, qw, qx, qy, qz]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: Quat::IDENTITY, translation: Vec3::ZERO };

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Pose { rotation: rotation.normalize(), translation }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose { rotation: Quat::IDENTITY, translation: Vec3::new(x, y, z) }
    }

    pub fn from_rotation(rotation: Quat) -> Self {
        Pose::new(rotation, Vec3::ZERO)
    }

    pub fn from_params(p: [f64; 7]) -> Self {
        Pose::new(Quat::new(p[3], p[4], p[5], p[6]), Vec3::new(p[0], p[1], p[2]))
    }

    pub fn to_params(self) -> [f64; 7] {
        let t = self.translation;
        let q = self.rotation;
        [t.x, t.y, t.z, q.w, q.x, q.y, q.z]
    }

    pub fn transform_point(self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// Row-major homogeneous matrix.
    pub fn to_matrix(self) -> [[f64; 4]; 4] {
        let r = self.rotation.to_matrix();
        let t = self.translation.to_array();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn is_valid(self) -> bool {
        let q = self.rotation;
        self.translation.is_finite()
            && (q.norm() - 1.0).abs() <= 1e-9
            && [q.w, q.x, q.y, q.z].iter().all(|c| c.is_finite())
    }

    /// Largest absolute difference over the seven parameters.
    pub fn max_param_diff(self, other: Pose) -> f64 {
        let a = self.to_params();
        let b = other.to_params();
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_params().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let p = <[f64; 7]>::deserialize(d)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(D::Error::custom("pose parameters must be finite"));
        }
        let q = Quat::new(p[3], p[4], p[5], p[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(D::Error::custom(format!("quaternion norm {} is not unit", q.norm())));
        }
        // keep already-unit components bit-exact so labels reload unchanged
        let rotation = if (q.norm() - 1.0).abs() <= 1e-12 && q.w > 0.0 { q } else { q.normalize() };
        Ok(Pose { rotation, translation: Vec3::new(p[0], p[1], p[2]) })
    }
}

/// Z-Y-X intrinsic Euler angles in degrees: yaw about z, then pitch about
/// the new y, then roll about the newest x.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        EulerAngles { roll, pitch, yaw }
    }
}

/// Per-axis absolute errors: translation in millimeters, rotation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseError {
    pub e_x: f64,
    pub e_y: f64,
    pub e_z: f64,
    pub e_roll: f64,
    pub e_pitch: f64,
    pub e_yaw: f64,
}

impl PoseError {
    pub fn to_array(self) -> [f64; 6] {
        [self.e_x, self.e_y, self.e_z, self.e_roll, self.e_pitch, self.e_yaw]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        PoseError { e_x: a[0], e_y: a[1], e_z: a[2], e_roll: a[3], e_pitch: a[4], e_yaw: a[5] }
    }

    /// Component-wise mean; `None` for an empty input.
    pub fn mean<'a, I: IntoIterator<Item = &'a PoseError>>(errors: I) -> Option<PoseError> {
        let mut acc = [0.0; 6];
        let mut n = 0usize;
        for e in errors {
            for (a, v) in acc.iter_mut().zip(e.to_array()) {
                *a += v;
            }
            n += 1;
        }
        (n > 0).then(|| PoseError::from_array(acc.map(|a| a / n as f64)))
    }

    pub fn max_translation_mm(self) -> f64 {
        self.e_x.max(self.e_y).max(self.e_z)
    }

    pub fn max_rotation_deg(self) -> f64 {
        self.e_roll.max(self.e_pitch).max(self.e_yaw)
    }
}

/// `M(a) * M(b)`.
pub fn compose(a: Pose, b: Pose) -> Pose {
    Pose::new(a.rotation * b.rotation, a.rotation.rotate(b.translation) + a.translation)
}

pub fn inverse(p: Pose) -> Pose {
    let q = p.rotation.conjugate();
    Pose::new(q, -q.rotate(p.translation))
}

/// Relative transform between two sampled poses, `A * B^-1`; the network's
/// regression target for the image pair `(A, B)`.
pub fn relative_label(t_d2e_a: Pose, t_d2e_b: Pose) -> Pose {
    compose(t_d2e_a, inverse(t_d2e_b))
}

/// Pose to move to after predicting `t_delta` from the current pose `t_test`.
pub fn apply_estimate(t_delta: Pose, t_test: Pose) -> Pose {
    compose(t_delta, t_test)
}

/// Result of a quaternion to Euler conversion, flagged near gimbal lock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerConversion {
    pub angles: EulerAngles,
    /// Pitch within [`GIMBAL_EPS`] of ±90°; roll was forced to zero.
    pub gimbal_lock: bool,
}

pub fn quat_to_euler_flagged(q: Quat) -> EulerConversion {
    let q = q.normalize();
    let m = q.to_matrix();
    let sin_pitch = (-m[2][0]).clamp(-1.0, 1.0);
    let pitch = sin_pitch.asin();
    if (std::f64::consts::FRAC_PI_2 - pitch.abs()) < GIMBAL_EPS {
        // Only yaw ∓ roll is observable here.
        let yaw = (-m[0][1]).atan2(m[1][1]);
        return EulerConversion {
            angles: EulerAngles::new(0.0, pitch.to_degrees(), yaw.to_degrees()),
            gimbal_lock: true,
        };
    }
    let roll = (2.0 * (q.w * q.x + q.y * q.z)).atan2(1.0 - 2.0 * (q.x * q.x + q.y * q.y));
    let yaw = (2.0 * (q.w * q.z + q.x * q.y)).atan2(1.0 - 2.0 * (q.y * q.y + q.z * q.z));
    EulerConversion {
        angles: EulerAngles::new(roll.to_degrees(), pitch.to_degrees(), yaw.to_degrees()),
        gimbal_lock: false,
    }
}

pub fn quat_to_euler(q: Quat) -> EulerAngles {
    quat_to_euler_flagged(q).angles
}

pub fn euler_to_quat(e: EulerAngles) -> Quat {
    let qz = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), e.yaw.to_radians());
    let qy = Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), e.pitch.to_radians());
    let qx = Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), e.roll.to_radians());
    (qz * qy * qx).normalize()
}

pub fn pose_error(truth: Pose, estimate: Pose) -> PoseError {
    let dt = truth.translation - estimate.translation;
    let rel = (estimate.rotation.conjugate() * truth.rotation).normalize();
    let e = quat_to_euler(rel);
    PoseError {
        e_x: (dt.x * 1e3).abs(),
        e_y: (dt.y * 1e3).abs(),
        e_z: (dt.z * 1e3).abs(),
        e_roll: e.roll.abs(),
        e_pitch: e.pitch.abs(),
        e_yaw: e.yaw.abs(),
    }
}
