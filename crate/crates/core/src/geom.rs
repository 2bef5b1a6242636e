//! Rigid-body geometry: poses, twists, wrenches and the SO(3)/SE(3)
//! operations the controllers need.
//!
//! Six-vectors are always ordered angular part first:
//! twists are `[ω; v]`, wrenches are `[torque; force]` and pose errors are
//! `[rotation-log; translation difference]`.

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Below this rotation-vector norm the exponential map uses its Taylor series.
const EXP_SERIES_THRESHOLD: f64 = 1e-8;
/// Below this `|sin(θ/2)|` the rotation log uses its series branch.
const LOG_SERIES_THRESHOLD: f64 = 1e-6;

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds a pose from the flat telemetry layout `[qw, qx, qy, qz, tx, ty, tz]`.
    /// The quaternion is normalized; a zero quaternion is rejected.
    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        let q = Quaternion::new(a[0], a[1], a[2], a[3]);
        let norm = q.norm();
        if norm < 1e-12 {
            return Err(Error::InvalidInput("pose quaternion has zero norm".into()));
        }
        Ok(Self::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(a[4], a[5], a[6]),
        ))
    }

    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            q.w,
            q.i,
            q.j,
            q.k,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -(r * self.translation))
    }

    /// `self ∘ other`: applies `other` in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.to_array();
        write!(
            f,
            "Pose(q=[{:.4}, {:.4}, {:.4}, {:.4}], t=[{:.4}, {:.4}, {:.4}])",
            a[0], a[1], a[2], a[3], a[4], a[5], a[6]
        )
    }
}

/// Spatial velocity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(angular: Vector3<f64>, linear: Vector3<f64>) -> Self {
        Self { angular, linear }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        stack(&self.angular, &self.linear)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Frame a wrench is expressed in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Replica base (world) frame.
    #[default]
    World,
    /// Master device frame.
    Master,
    /// Frame of a held object.
    Object,
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Frame::World => "world",
            Frame::Master => "master",
            Frame::Object => "object",
        };
        f.write_str(s)
    }
}

/// Force-torque pair tagged with the frame it is expressed in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub frame: Frame,
    pub torque: Vector3<f64>,
    pub force: Vector3<f64>,
}

impl Wrench {
    pub fn zero(frame: Frame) -> Self {
        Self {
            frame,
            torque: Vector3::zeros(),
            force: Vector3::zeros(),
        }
    }

    pub fn new(frame: Frame, torque: Vector3<f64>, force: Vector3<f64>) -> Self {
        Self {
            frame,
            torque,
            force,
        }
    }

    pub fn from_force(frame: Frame, force: Vector3<f64>) -> Self {
        Self::new(frame, Vector3::zeros(), force)
    }

    pub fn from_vector(frame: Frame, v: &Vector6<f64>) -> Self {
        Self::new(
            frame,
            v.fixed_rows::<3>(0).into(),
            v.fixed_rows::<3>(3).into(),
        )
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        stack(&self.torque, &self.force)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.frame, self.torque * s, self.force * s)
    }

    /// Same components, relabelled to another frame. Only valid when the
    /// frames are aligned; callers own that guarantee.
    pub fn relabel(&self, frame: Frame) -> Self {
        Self { frame, ..*self }
    }

    /// Components rotated by `r` and tagged with `frame`.
    pub fn rotated(&self, r: &UnitQuaternion<f64>, frame: Frame) -> Self {
        Self::new(frame, r * self.torque, r * self.force)
    }

    pub fn checked_add(&self, other: &Wrench) -> Result<Wrench> {
        self.same_frame(other)?;
        Ok(Self::new(
            self.frame,
            self.torque + other.torque,
            self.force + other.force,
        ))
    }

    pub fn checked_sub(&self, other: &Wrench) -> Result<Wrench> {
        self.same_frame(other)?;
        Ok(Self::new(
            self.frame,
            self.torque - other.torque,
            self.force - other.force,
        ))
    }

    fn same_frame(&self, other: &Wrench) -> Result<()> {
        if self.frame != other.frame {
            return Err(Error::FrameMismatch {
                expected: self.frame,
                found: other.frame,
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

pub(crate) fn stack(top: &Vector3<f64>, bottom: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(top.x, top.y, top.z, bottom.x, bottom.y, bottom.z)
}

/// Pose composition `a ∘ b`. The result quaternion is renormalized.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let mut rotation = a.rotation * b.rotation;
    rotation.renormalize();
    Pose::new(rotation, a.translation + a.rotation * b.translation)
}

/// Exponential map of a rotation vector to a unit quaternion.
pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = phi.norm();
    let (w, s) = if theta < EXP_SERIES_THRESHOLD {
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, s * phi.x, s * phi.y, s * phi.z))
}

/// Rotation log with the quaternion sign canonicalized to a non-negative
/// scalar part, so `q` and `-q` map to the same rotation vector.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.vector().into_owned())
    } else {
        (q.w, q.vector().into_owned())
    };
    let s = v.norm();
    if s < LOG_SERIES_THRESHOLD {
        // atan2(s, w) / s ≈ (1 - s²/(3w²)) / w
        v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
    } else {
        v * (2.0 * s.atan2(w) / s)
    }
}

/// Advances `x` by the twist `v` held for `dt` seconds. The angular part is
/// a world-frame rotation rate, so the new rotation is `exp(ω dt) · R`.
pub fn integrate_twist(x: &Pose, v: &Twist, dt: f64) -> Pose {
    let mut rotation = so3_exp(&(v.angular * dt)) * x.rotation;
    rotation.renormalize();
    Pose::new(rotation, x.translation + v.linear * dt)
}

/// State error `desired - actual` as `[log(R_d R_aᵀ); t_d - t_a]`.
pub fn pose_error(desired: &Pose, actual: &Pose) -> Vector6<f64> {
    let rel = desired.rotation * actual.rotation.inverse();
    stack(&so3_log(&rel), &(desired.translation - actual.translation))
}

pub fn skew(v: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
