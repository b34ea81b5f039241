use std::fmt;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Name of the coordinate frame a pose is expressed in.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameId(pub String);

impl FrameId {
    pub fn new(name: impl Into<String>) -> Self {
        FrameId(name.into())
    }

    pub fn pelvis() -> Self {
        FrameId("pelvis".to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Position plus unit-quaternion orientation, expressed in `frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub frame: FrameId,
}

impl RigidTransform {
    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>, frame: FrameId) -> Self {
        RigidTransform {
            translation,
            rotation: renormalize(rotation),
            frame,
        }
    }

    pub fn identity(frame: FrameId) -> Self {
        RigidTransform {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
            frame,
        }
    }

    pub fn from_translation(translation: Vector3<f64>, frame: FrameId) -> Self {
        Self::new(translation, UnitQuaternion::identity(), frame)
    }

    /// Build from raw `(w, x, y, z)` components; the quaternion is normalized.
    /// Returns `None` for a zero-norm or non-finite quaternion.
    pub fn from_parts(p: [f64; 3], q_wxyz: [f64; 4], frame: FrameId) -> Option<Self> {
        let q = Quaternion::new(q_wxyz[0], q_wxyz[1], q_wxyz[2], q_wxyz[3]);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 || p.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Self::new(
            Vector3::new(p[0], p[1], p[2]),
            UnitQuaternion::from_quaternion(q),
            frame,
        ))
    }

    pub fn from_isometry(iso: &Isometry3<f64>, frame: FrameId) -> Self {
        Self::new(iso.translation.vector, iso.rotation, frame)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// `self ∘ other`: `other` is expressed in the frame whose pose `self` describes.
    /// The result is expressed in `self.frame`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            translation: self.translation + self.rotation * other.translation,
            rotation: renormalize(self.rotation * other.rotation),
            frame: self.frame.clone(),
        }
    }

    /// Inverse transform. The frame label is kept; callers that care about
    /// labelling relabel explicitly with [`RigidTransform::in_frame`].
    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform {
            translation: -(inv * self.translation),
            rotation: renormalize(inv),
            frame: self.frame.clone(),
        }
    }

    pub fn in_frame(mut self, frame: FrameId) -> RigidTransform {
        self.frame = frame;
        self
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation * p
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }
}

/// Re-project onto the unit sphere so repeated composition cannot drift.
pub fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Rotation-vector (axis·angle) of `b · a⁻¹`, i.e. the rotation taking `a` to `b`.
pub fn rotation_error(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> Vector3<f64> {
    (b * a.inverse()).scaled_axis()
}

/// Angular distance in radians (norm of the relative rotation vector).
pub fn angular_distance(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    rotation_error(a, b).norm()
}

/// Sign-insensitive quaternion distance `min(|a - b|, |a + b|)`.
pub fn quaternion_distance(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let qa = a.quaternion();
    let qb = b.quaternion();
    (qa - qb).norm().min((qa + qb).norm())
}

/// Intrinsic X-Y-Z Euler angles `(roll, pitch, yaw)` such that
/// `q = Rx(roll) · Ry(pitch) · Rz(yaw)`.
///
/// At gimbal lock (`|pitch| = π/2`) the yaw is set to zero and the
/// remaining rotation is folded into roll.
pub fn euler_xyz_intrinsic(q: &UnitQuaternion<f64>) -> (f64, f64, f64) {
    let r = q.to_rotation_matrix();
    let m = r.matrix();
    let s = m[(0, 2)].clamp(-1.0, 1.0);
    let pitch = s.asin();
    if s.abs() < 1.0 - 1e-12 {
        let roll = (-m[(1, 2)]).atan2(m[(2, 2)]);
        let yaw = (-m[(0, 1)]).atan2(m[(0, 0)]);
        (roll, pitch, yaw)
    } else {
        let roll = m[(2, 1)].atan2(m[(1, 1)]);
        (roll, pitch, 0.0)
    }
}

pub fn from_euler_xyz_intrinsic(roll: f64, pitch: f64, yaw: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), roll)
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch)
        * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
}
