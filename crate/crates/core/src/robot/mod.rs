//! Serial-chain arm description, kinematics and rigid-body dynamics.
//!
//! All chains are revolute. Link `i` carries the frame obtained by
//! `T_{i-1} ∘ parent_offset_i ∘ Rot(axis_i, q_i)`; its centre of mass and
//! inertia are expressed in that frame. The first joint's `parent_offset`
//! places the arm base in the world.

mod dynamics;
mod kinematics;

pub use dynamics::{
    dynamics_terms, forward_dynamics, inverse_dynamics, kinetic_energy, potential_energy,
    step_dynamics, advance, DynamicsTerms, StepReport,
};
pub use kinematics::{
    forward_kinematics, jacobian_relative, jacobian_world, link_frames, relative_pose,
    smallest_singular_value, LinkFrames,
};

use nalgebra::{DVector, Matrix3, Unit, Vector3};

use crate::error::{check_dim, Error, Result};
use crate::geom::Pose;

pub const MAX_JOINTS: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub axis: Unit<Vector3<f64>>,
    pub parent_offset: Pose,
    /// kg
    pub mass: f64,
    /// Centre of mass in the link frame (m).
    pub com: Vector3<f64>,
    /// Rotational inertia about the centre of mass, link frame (kg·m²).
    pub inertia: Matrix3<f64>,
    pub q_min: f64,
    pub q_max: f64,
    pub dq_max: f64,
    pub tau_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmModel {
    pub name: String,
    pub joints: Vec<Joint>,
    pub tool_offset: Pose,
    pub gravity: Vector3<f64>,
}

impl ArmModel {
    /// Validates and builds a model.
    pub fn new(
        name: impl Into<String>,
        joints: Vec<Joint>,
        tool_offset: Pose,
        gravity: Vector3<f64>,
    ) -> Result<Self> {
        let model = Self {
            name: name.into(),
            joints,
            tool_offset,
            gravity,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if n == 0 || n > MAX_JOINTS {
            return Err(Error::InvalidModel(format!(
                "{n} joints, expected 1..={MAX_JOINTS}"
            )));
        }
        if !self.gravity.iter().all(|g| g.is_finite()) || !self.tool_offset.is_finite() {
            return Err(Error::InvalidModel("non-finite gravity or tool offset".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let bad = |what: &str| Err(Error::InvalidModel(format!("joint {i}: {what}")));
            if !(j.q_min < j.q_max) {
                return bad("q_min must be below q_max");
            }
            if !(j.mass > 0.0) || !j.mass.is_finite() {
                return bad("mass must be positive");
            }
            if !(j.dq_max > 0.0) || !(j.tau_max > 0.0) {
                return bad("velocity and torque limits must be positive");
            }
            if (j.inertia - j.inertia.transpose()).amax() > 1e-12 * (1.0 + j.inertia.amax()) {
                return bad("inertia is not symmetric");
            }
            if j.inertia.cholesky().is_none() {
                return bad("inertia is not positive definite");
            }
            if !j.parent_offset.is_finite() || !j.com.iter().all(|c| c.is_finite()) {
                return bad("non-finite geometry");
            }
        }
        Ok(())
    }

    pub fn q_min(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.q_min))
    }

    pub fn q_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.q_max))
    }

    pub fn tau_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.tau_max))
    }

    /// Copy of the model with its base moved by `base` (pre-composed onto the
    /// first joint offset).
    pub fn with_base(&self, base: &Pose) -> Self {
        let mut m = self.clone();
        if let Some(first) = m.joints.first_mut() {
            first.parent_offset = base.compose(&first.parent_offset);
        }
        m
    }

    pub(crate) fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        check_dim(self.dof(), q.len())
    }
}

/// Joint positions and velocities of one arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmState {
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
}

impl ArmState {
    pub fn new(q: DVector<f64>, dq: DVector<f64>) -> Result<Self> {
        check_dim(q.len(), dq.len())?;
        let s = Self { q, dq };
        if !s.is_finite() {
            return Err(Error::NonFinite("arm state"));
        }
        Ok(s)
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            dq: DVector::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.dq.iter()).all(|v| v.is_finite())
    }
}

/// Uniform rod inertia about its centre, rod along the given link axis.
pub fn rod_inertia(mass: f64, length: f64, radius: f64, along: usize) -> Matrix3<f64> {
    let axial = 0.5 * mass * radius * radius;
    let transverse = mass * (3.0 * radius * radius + length * length) / 12.0;
    let mut d = Vector3::repeat(transverse);
    d[along] = axial;
    Matrix3::from_diagonal(&d)
}

/// Planar chain in the x–y plane with z joint axes. Each link of length
/// `lengths[i]` carries a point-like rod with its centre of mass at mid-link;
/// the tool sits at the tip of the last link.
pub fn planar_chain(lengths: &[f64], masses: &[f64], gravity: Vector3<f64>) -> Result<ArmModel> {
    check_dim(lengths.len(), masses.len())?;
    let mut joints = Vec::with_capacity(lengths.len());
    let mut prev = 0.0;
    for (&l, &m) in lengths.iter().zip(masses) {
        joints.push(Joint {
            axis: Vector3::z_axis(),
            parent_offset: Pose::from_translation(Vector3::new(prev, 0.0, 0.0)),
            mass: m,
            com: Vector3::new(0.5 * l, 0.0, 0.0),
            inertia: rod_inertia(m, l, 0.02, 0),
            q_min: -std::f64::consts::PI,
            q_max: std::f64::consts::PI,
            dq_max: 2.5,
            tau_max: 200.0,
        });
        prev = l;
    }
    ArmModel::new(
        "planar",
        joints,
        Pose::from_translation(Vector3::new(prev, 0.0, 0.0)),
        gravity,
    )
}
