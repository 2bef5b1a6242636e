//! Rigid-body dynamics of a revolute chain, computed in the world frame.
//!
//! `C_vec`/`G_vec` come from recursive Newton–Euler, `M` from the composite
//! rigid-body algorithm. The plant is advanced with classical RK4.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};

use super::kinematics::{jacobian_from_frames, link_frames, LinkFrames};
use super::{ArmModel, ArmState};
use crate::error::{check_dim, Error, Result};
use crate::geom::{skew, Wrench};

#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    /// Joint-space inertia.
    pub m: DMatrix<f64>,
    /// Coriolis and centrifugal generalized forces `C(q, q̇) q̇`.
    pub c_vec: DVector<f64>,
    /// Torque that holds the arm against gravity.
    pub g_vec: DVector<f64>,
}

/// Recursive Newton–Euler: torques realizing `ddq` at `(q, dq)` with
/// the given gravity vector.
pub fn inverse_dynamics(
    model: &ArmModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    ddq: &DVector<f64>,
    gravity: &Vector3<f64>,
) -> Result<DVector<f64>> {
    let frames = link_frames(model, q)?;
    check_dim(model.dof(), dq.len())?;
    check_dim(model.dof(), ddq.len())?;
    Ok(rnea(model, &frames, dq, ddq, gravity))
}

fn rnea(
    model: &ArmModel,
    frames: &LinkFrames,
    dq: &DVector<f64>,
    ddq: &DVector<f64>,
    gravity: &Vector3<f64>,
) -> DVector<f64> {
    let n = model.dof();
    let mut omega = Vector3::zeros();
    let mut alpha = Vector3::zeros();
    let mut acc_origin = -gravity;
    let mut prev_origin = frames.origin(0);

    let mut lin_acc_com = Vec::with_capacity(n);
    let mut omegas = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for i in 0..n {
        let o = frames.origin(i);
        let r = o - prev_origin;
        acc_origin += alpha.cross(&r) + omega.cross(&omega.cross(&r));
        let z = frames.axis(model, i);
        let spin = z * dq[i];
        alpha += z * ddq[i] + omega.cross(&spin);
        omega += spin;
        let rc = frames.com(model, i) - o;
        lin_acc_com.push(acc_origin + alpha.cross(&rc) + omega.cross(&omega.cross(&rc)));
        omegas.push(omega);
        alphas.push(alpha);
        prev_origin = o;
    }

    let mut tau = DVector::zeros(n);
    let mut f_next = Vector3::zeros();
    let mut n_next = Vector3::zeros();
    for i in (0..n).rev() {
        let joint = &model.joints[i];
        let o = frames.origin(i);
        let rc = frames.com(model, i) - o;
        let inertia = frames.inertia(model, i);
        let f_link = lin_acc_com[i] * joint.mass;
        let lever_next = if i + 1 < n {
            frames.origin(i + 1) - o
        } else {
            Vector3::zeros()
        };
        let moment = inertia * alphas[i]
            + omegas[i].cross(&(inertia * omegas[i]))
            + rc.cross(&f_link)
            + n_next
            + lever_next.cross(&f_next);
        let force = f_link + f_next;
        tau[i] = frames.axis(model, i).dot(&moment);
        f_next = force;
        n_next = moment;
    }
    tau
}

/// Spatial inertia of a link about the world origin, `[angular; linear]`.
fn spatial_inertia_at_origin(mass: f64, com: &Vector3<f64>, inertia: &Matrix3<f64>) -> Matrix6<f64> {
    let c = skew(com);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(inertia - c * c * mass));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(c * mass));
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-c * mass));
    out.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * mass));
    out
}

/// Composite rigid-body algorithm for the joint-space inertia.
fn mass_matrix(model: &ArmModel, frames: &LinkFrames) -> DMatrix<f64> {
    let n = model.dof();
    let motion: Vec<Vector6<f64>> = (0..n)
        .map(|i| {
            let z = frames.axis(model, i);
            crate::geom::stack(&z, &frames.origin(i).cross(&z))
        })
        .collect();
    let mut composite = vec![Matrix6::zeros(); n];
    let mut acc = Matrix6::zeros();
    for i in (0..n).rev() {
        acc += spatial_inertia_at_origin(
            model.joints[i].mass,
            &frames.com(model, i),
            &frames.inertia(model, i),
        );
        composite[i] = acc;
    }
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = motion[i].dot(&(composite[j] * motion[j]));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn dynamics_terms(model: &ArmModel, state: &ArmState) -> Result<DynamicsTerms> {
    check_dim(model.dof(), state.dq.len())?;
    let frames = link_frames(model, &state.q)?;
    let n = model.dof();
    let zero = DVector::zeros(n);
    Ok(DynamicsTerms {
        m: mass_matrix(model, &frames),
        c_vec: rnea(model, &frames, &state.dq, &zero, &Vector3::zeros()),
        g_vec: rnea(model, &frames, &zero, &zero, &model.gravity),
    })
}

/// Joint accelerations under `M q̈ = τ + Jᵀh − C − G`. Also returns the
/// total generalized force `τ + Jᵀh` for work bookkeeping.
fn accelerations(
    model: &ArmModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    tau: &DVector<f64>,
    h_ext: &Vector6<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let frames = link_frames(model, q)?;
    let n = model.dof();
    let zero = DVector::zeros(n);
    let bias = rnea(model, &frames, dq, &zero, &model.gravity);
    let jac = jacobian_from_frames(model, &frames);
    let applied = tau + jac.transpose() * h_ext;
    let m = mass_matrix(model, &frames);
    let chol = m.cholesky().ok_or(Error::SingularMassMatrix)?;
    Ok((chol.solve(&(&applied - bias)), applied))
}

pub fn forward_dynamics(
    model: &ArmModel,
    state: &ArmState,
    tau: &DVector<f64>,
    h_ext: &Wrench,
) -> Result<DVector<f64>> {
    check_dim(model.dof(), tau.len())?;
    check_dim(model.dof(), state.dq.len())?;
    Ok(accelerations(model, &state.q, &state.dq, tau, &h_ext.to_vector())?.0)
}

pub fn kinetic_energy(model: &ArmModel, state: &ArmState) -> Result<f64> {
    let frames = link_frames(model, &state.q)?;
    check_dim(model.dof(), state.dq.len())?;
    let m = mass_matrix(model, &frames);
    Ok(0.5 * state.dq.dot(&(m * &state.dq)))
}

/// Gravitational potential relative to the world origin.
pub fn potential_energy(model: &ArmModel, q: &DVector<f64>) -> Result<f64> {
    let frames = link_frames(model, q)?;
    Ok((0..model.dof())
        .map(|i| -model.joints[i].mass * model.gravity.dot(&frames.com(model, i)))
        .sum())
}

/// Result of one plant step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub state: ArmState,
    /// Work done on the arm by `τ` and the external wrench over the step (J).
    pub work: f64,
    /// Joints that hit a position limit and were stopped.
    pub clamped: Vec<usize>,
    /// Kinetic energy removed by the limit clamp (J).
    pub clamp_loss: f64,
}

/// RK4 step of the arm under constant `tau` and external tool wrench, then
/// joint-limit clamping with zeroed velocity on the offending axes.
pub fn advance(
    model: &ArmModel,
    state: &ArmState,
    tau: &DVector<f64>,
    external_wrench: &Wrench,
    dt: f64,
) -> Result<StepReport> {
    let n = model.dof();
    check_dim(n, tau.len())?;
    check_dim(n, state.q.len())?;
    check_dim(n, state.dq.len())?;
    if !tau.iter().all(|t| t.is_finite()) {
        return Err(Error::NonFinite("torque command"));
    }
    if !external_wrench.is_finite() {
        return Err(Error::NonFinite("external wrench"));
    }
    if !(dt > 0.0 && dt <= 5e-3) {
        return Err(Error::InvalidInput(format!("step {dt} outside (0, 5e-3]")));
    }
    let h = external_wrench.to_vector();
    let (q0, v0) = (&state.q, &state.dq);

    let (a1, f1) = accelerations(model, q0, v0, tau, &h)?;
    let q2 = q0 + v0 * (0.5 * dt);
    let v2 = v0 + &a1 * (0.5 * dt);
    let (a2, f2) = accelerations(model, &q2, &v2, tau, &h)?;
    let q3 = q0 + &v2 * (0.5 * dt);
    let v3 = v0 + &a2 * (0.5 * dt);
    let (a3, f3) = accelerations(model, &q3, &v3, tau, &h)?;
    let q4 = q0 + &v3 * dt;
    let v4 = v0 + &a3 * dt;
    let (a4, f4) = accelerations(model, &q4, &v4, tau, &h)?;

    let q = q0 + (v0 + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
    let dq = v0 + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
    let work = (f1.dot(v0) + 2.0 * f2.dot(&v2) + 2.0 * f3.dot(&v3) + f4.dot(&v4)) * (dt / 6.0);

    let mut next = ArmState { q, dq };
    if !next.is_finite() {
        return Err(Error::NonFinite("arm state"));
    }
    let mut clamped = Vec::new();
    for (i, joint) in model.joints.iter().enumerate() {
        if next.q[i] > joint.q_max {
            next.q[i] = joint.q_max;
            clamped.push(i);
        } else if next.q[i] < joint.q_min {
            next.q[i] = joint.q_min;
            clamped.push(i);
        }
    }
    let mut clamp_loss = 0.0;
    if !clamped.is_empty() {
        let before = kinetic_energy(model, &next)?;
        for &i in &clamped {
            next.dq[i] = 0.0;
        }
        clamp_loss = before - kinetic_energy(model, &next)?;
    }
    Ok(StepReport {
        state: next,
        work,
        clamped,
        clamp_loss,
    })
}

/// Advances the simulated plant by `dt`.
pub fn step_dynamics(
    model: &ArmModel,
    state: &ArmState,
    tau: &DVector<f64>,
    external_wrench: &Wrench,
    dt: f64,
) -> Result<ArmState> {
    Ok(advance(model, state, tau, external_wrench, dt)?.state)
}
