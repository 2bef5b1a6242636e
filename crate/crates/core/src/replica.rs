//! Replica-side pipeline: clamped admittance, command fusion and the
//! superimposed joint torque law.

use nalgebra::{DMatrix, DVector, SMatrix, Vector6};

use crate::error::{check_dim, Error, Result};
use crate::fic::{pd_force, CartesianNlpd, CartesianPd, PdParams};
use crate::geom::{compose, integrate_twist, pose_error, Frame, Pose, Twist, Wrench};
use crate::robot::{dynamics_terms, forward_kinematics, jacobian_world, ArmModel, ArmState};

/// Default desired mass (kg) and rotational inertia (kg·m²) of the admittance.
pub const DEFAULT_ADMITTANCE_MASS: f64 = 10.0;
pub const DEFAULT_ADMITTANCE_INERTIA: f64 = 0.5;
/// Default per-tick twist change limit (m/s and rad/s).
pub const DEFAULT_DV_MAX: f64 = 0.002;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmittanceState {
    pub x_f: Pose,
    pub v_f: Twist,
    /// Diagonal of the inverse desired inertia, angular first.
    pub m_inv: Vector6<f64>,
    pub dv_max: Vector6<f64>,
    pub enabled: bool,
}

impl Default for AdmittanceState {
    fn default() -> Self {
        Self::new(
            DEFAULT_ADMITTANCE_MASS,
            DEFAULT_ADMITTANCE_INERTIA,
            Vector6::repeat(DEFAULT_DV_MAX),
        )
        .expect("default admittance parameters are valid")
    }
}

impl AdmittanceState {
    pub fn new(mass: f64, inertia: f64, dv_max: Vector6<f64>) -> Result<Self> {
        if !(mass > 0.0 && inertia > 0.0) || !dv_max.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(
                "admittance needs positive inertia and non-negative dv_max".into(),
            ));
        }
        let (a, l) = (1.0 / inertia, 1.0 / mass);
        Ok(Self {
            x_f: Pose::identity(),
            v_f: Twist::zero(),
            m_inv: Vector6::new(a, a, a, l, l, l),
            dv_max,
            enabled: true,
        })
    }

    /// Disabling resets the offset and its velocity.
    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
        if !enabled {
            self.x_f = Pose::identity();
            self.v_f = Twist::zero();
        }
    }
}

/// `h_est = h_e − h_d`.
pub fn estimate_interaction(h_e: &Wrench, h_d: &Wrench) -> Result<Wrench> {
    h_e.checked_sub(h_d)
}

/// Net external wrench on a held object: `G [h_l; h_r] − w_g`, where `w_g`
/// is the object's own gravity wrench.
pub fn estimate_object_interaction(
    grasp: &SMatrix<f64, 6, 12>,
    h_l: &Wrench,
    h_r: &Wrench,
    gravity: &Wrench,
) -> Result<Wrench> {
    for w in [h_l, h_r] {
        if w.frame != Frame::World {
            return Err(Error::FrameMismatch {
                expected: Frame::World,
                found: w.frame,
            });
        }
    }
    let mut stacked = SMatrix::<f64, 12, 1>::zeros();
    stacked.fixed_rows_mut::<6>(0).copy_from(&h_l.to_vector());
    stacked.fixed_rows_mut::<6>(6).copy_from(&h_r.to_vector());
    let net = Wrench::from_vector(Frame::Object, &(grasp * stacked));
    net.checked_sub(gravity)
}

/// One admittance tick: `a = M⁻¹(h_est − h_D)`, per-axis twist change
/// clamped to `dv_max`, pose advanced with the twist from the start of
/// the tick.
pub fn admittance_step(
    state: &AdmittanceState,
    h_est: &Wrench,
    h_des: &Wrench,
    dt: f64,
) -> Result<AdmittanceState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if !state.enabled {
        let mut s = *state;
        s.set_enabled(false);
        return Ok(s);
    }
    let diff = h_est.checked_sub(h_des)?.to_vector();
    if !diff.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("admittance wrench"));
    }
    let acc = state.m_inv.component_mul(&diff);
    let dv = Vector6::from_fn(|i, _| acc[i].signum() * (acc[i].abs() * dt).min(state.dv_max[i]));
    let dv = dv.map(|v| if v.is_nan() { 0.0 } else { v });
    let x_f = integrate_twist(&state.x_f, &state.v_f, dt);
    let v_f = Twist::from_vector(&(state.v_f.to_vector() + dv));
    Ok(AdmittanceState { x_f, v_f, ..*state })
}

/// `x_δ = x_auto ∘ x_d ∘ x_F`.
pub fn fuse_command(x_d: &Pose, x_f: &Pose, x_auto: Option<&Pose>) -> Pose {
    let base = compose(x_d, x_f);
    match x_auto {
        Some(a) => compose(a, &base),
        None => base,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaCommand {
    pub x_delta: Pose,
    /// Desired end-effector wrench, world frame.
    pub h_d: Wrench,
    pub q_d: DVector<f64>,
}

/// Relative-pose task of a bimanual pair, seen from one arm.
#[derive(Clone, Copy, Debug)]
pub struct RelativeTask<'a> {
    /// Columns of the relative Jacobian belonging to this arm (6 × n).
    pub j_r: &'a DMatrix<f64>,
    pub x_r_d: &'a Pose,
    pub x_r: &'a Pose,
    pub v_r: &'a Twist,
    pub pd: &'a CartesianPd,
}

/// Optional terms of the torque law.
#[derive(Clone, Copy, Debug, Default)]
pub struct TorqueOptions<'a> {
    pub joint_pd: Option<&'a PdParams>,
    /// Jacobian at the interaction location; the tool Jacobian when absent.
    pub j_l: Option<&'a DMatrix<f64>>,
    pub relative: Option<RelativeTask<'a>>,
}

/// Every term of the replica torque, kept separately for telemetry and
/// superposition checks.
#[derive(Clone, Debug, PartialEq)]
pub struct TorqueBreakdown {
    pub coriolis: DVector<f64>,
    pub gravity: DVector<f64>,
    pub joint_pd: DVector<f64>,
    pub interaction: DVector<f64>,
    pub task: DVector<f64>,
    pub relative: DVector<f64>,
    /// Sum of all terms before clamping.
    pub raw: DVector<f64>,
    /// Clamped to the model's torque limits.
    pub command: DVector<f64>,
    pub saturated: bool,
    /// World-frame NLPD wrench used in the task term.
    pub task_wrench: Wrench,
}

/// `τ = C + G + PD_joint(q_d, q, q̇) + J_lᵀ h_d + J_wᵀ NLPD(x_δ, x, ν)
/// [+ J_rᵀ PD_rel]`, clamped to the torque limits.
pub fn replica_torque(
    model: &ArmModel,
    state: &ArmState,
    cmd: &ReplicaCommand,
    nlpd: &mut CartesianNlpd,
    options: &TorqueOptions,
) -> Result<TorqueBreakdown> {
    let n = model.dof();
    check_dim(n, state.q.len())?;
    check_dim(n, cmd.q_d.len())?;
    if cmd.h_d.frame != Frame::World {
        return Err(Error::FrameMismatch {
            expected: Frame::World,
            found: cmd.h_d.frame,
        });
    }
    let terms = dynamics_terms(model, state)?;
    let j_w = jacobian_world(model, &state.q)?;
    let x = forward_kinematics(model, &state.q)?;
    let nu = &j_w * &state.dq;
    let nu = Vector6::from_column_slice(nu.as_slice());

    let joint_pd = match options.joint_pd {
        Some(p) => DVector::from_fn(n, |i, _| pd_force(p, cmd.q_d[i], state.q[i], state.dq[i])),
        None => DVector::zeros(n),
    };

    let interaction = match options.j_l {
        Some(j_l) => {
            if j_l.nrows() != 6 {
                return Err(Error::DimensionMismatch {
                    expected: 6,
                    found: j_l.nrows(),
                });
            }
            check_dim(n, j_l.ncols())?;
            j_l.transpose() * cmd.h_d.to_vector()
        }
        None => j_w.transpose() * cmd.h_d.to_vector(),
    };

    let err = pose_error(&cmd.x_delta, &x);
    let task_wrench = nlpd.wrench_from_error(&err, &nu, Frame::World);
    let task = j_w.transpose() * task_wrench.to_vector();

    let relative = match &options.relative {
        Some(rel) => {
            if rel.j_r.nrows() != 6 {
                return Err(Error::DimensionMismatch {
                    expected: 6,
                    found: rel.j_r.nrows(),
                });
            }
            check_dim(n, rel.j_r.ncols())?;
            let e = pose_error(rel.x_r_d, rel.x_r);
            let w = rel.pd.apply(&e, &rel.v_r.to_vector());
            rel.j_r.transpose() * w
        }
        None => DVector::zeros(n),
    };

    let raw = &terms.c_vec + &terms.g_vec + &joint_pd + &interaction + &task + &relative;
    if !raw.iter().all(|t| t.is_finite()) {
        return Err(Error::NonFinite("replica torque"));
    }
    let mut saturated = false;
    let command = DVector::from_fn(n, |i, _| {
        let lim = model.joints[i].tau_max;
        if raw[i].abs() > lim {
            saturated = true;
        }
        raw[i].clamp(-lim, lim)
    });
    Ok(TorqueBreakdown {
        coriolis: terms.c_vec,
        gravity: terms.g_vec,
        joint_pd,
        interaction,
        task,
        relative,
        raw,
        command,
        saturated,
        task_wrench,
    })
}
