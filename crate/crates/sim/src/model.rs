//! Arm description files.
//!
//! ```toml
//! name = "planar3"
//! gravity = [0.0, -9.81, 0.0]
//! tool = { translation = [0.2, 0.0, 0.0] }
//!
//! [[joints]]
//! axis = [0.0, 0.0, 1.0]
//! offset = { translation = [0.0, 0.0, 0.0], rpy = [0.0, 0.0, 0.0] }
//! mass = 2.0
//! com = [0.2, 0.0, 0.0]
//! inertia = [1e-4, 0.027, 0.027]      # principal, or [xx, yy, zz, xy, xz, yz]
//! q_min = -3.14
//! q_max = 3.14
//! dq_max = 2.5
//! tau_max = 200.0
//! ```
//!
//! Angles are radians everywhere in model files.

use std::path::Path;

use fic_core::geom::Pose;
use fic_core::robot::{ArmModel, Joint};
use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

const BUILTIN: &[(&str, &str)] = &[
    ("planar3", include_str!("../models/planar3.toml")),
    ("spatial7", include_str!("../models/spatial7.toml")),
];

/// Rigid transform written as a translation plus roll–pitch–yaw (rad,
/// applied as `Rz(yaw) Ry(pitch) Rx(roll)`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseSpec {
    pub translation: [f64; 3],
    pub rpy: [f64; 3],
}

impl PoseSpec {
    pub fn to_pose(&self) -> Pose {
        let [r, p, y] = self.rpy;
        Pose::new(
            UnitQuaternion::from_euler_angles(r, p, y),
            Vector3::from(self.translation),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointSpec {
    axis: [f64; 3],
    #[serde(default)]
    offset: PoseSpec,
    mass: f64,
    com: [f64; 3],
    inertia: Vec<f64>,
    q_min: f64,
    q_max: f64,
    dq_max: f64,
    tau_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    gravity: [f64; 3],
    #[serde(default)]
    tool: PoseSpec,
    joints: Vec<JointSpec>,
}

fn inertia(v: &[f64]) -> SimResult<Matrix3<f64>> {
    match *v {
        [xx, yy, zz] => Ok(Matrix3::from_diagonal(&Vector3::new(xx, yy, zz))),
        [xx, yy, zz, xy, xz, yz] => Ok(Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)),
        _ => Err(SimError::config(format!(
            "inertia needs 3 or 6 entries, got {}",
            v.len()
        ))),
    }
}

pub fn parse_model(text: &str) -> SimResult<ArmModel> {
    let file: ModelFile =
        toml::from_str(text).map_err(|e| SimError::config(format!("model file: {e}")))?;
    let mut joints = Vec::with_capacity(file.joints.len());
    for (i, j) in file.joints.iter().enumerate() {
        let axis = Vector3::from(j.axis);
        if !(axis.norm() > 1e-9) {
            return Err(SimError::config(format!("joint {i}: zero axis")));
        }
        joints.push(Joint {
            axis: Unit::new_normalize(axis),
            parent_offset: j.offset.to_pose(),
            mass: j.mass,
            com: Vector3::from(j.com),
            inertia: inertia(&j.inertia)?,
            q_min: j.q_min,
            q_max: j.q_max,
            dq_max: j.dq_max,
            tau_max: j.tau_max,
        });
    }
    ArmModel::new(file.name, joints, file.tool.to_pose(), Vector3::from(file.gravity))
        .map_err(|e| SimError::config(format!("model: {e}")))
}

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

/// Resolves a model reference: a built-in name, or a path relative to `base`.
pub fn load_model(reference: &str, base: Option<&Path>) -> SimResult<ArmModel> {
    if let Some((_, text)) = BUILTIN.iter().find(|(n, _)| *n == reference) {
        return parse_model(text);
    }
    let path = match base {
        Some(dir) => dir.join(reference),
        None => reference.into(),
    };
    if !path.is_file() {
        return Err(SimError::config(format!(
            "model '{reference}' is neither built in nor a file ({})",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| SimError::io(&path, e))?;
    parse_model(&text)
}
