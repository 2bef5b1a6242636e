//! Motion adaptation: a per-tick QP on the desired-state increment
//! `Δx_D = [Δq; Δh]` that keeps the commanded state inside the robot's
//! limits, away from singularities and, for a held object, in static
//! equilibrium. It returns the feasible increment closest to the desired
//! one.

pub mod qp;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geom::{compose, pose_error, skew, Pose};
use crate::robot::{
    dynamics_terms, forward_kinematics, jacobian_world, smallest_singular_value, ArmModel,
    ArmState,
};
use qp::{QpProblem, FEAS_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    pub task_translation: f64,
    pub task_rotation: f64,
    pub dq: f64,
    pub dh: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            task_translation: 1e4,
            task_rotation: 1e3,
            dq: 1.0,
            dh: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Margins {
    /// Distance kept from each joint position limit (rad).
    pub q: f64,
    /// Fraction of the joint velocity limit usable per tick.
    pub dq_fraction: f64,
    /// Fraction of the torque limit usable by the static torque.
    pub tau_fraction: f64,
    /// Lower bound on the smallest singular value of the tool Jacobian.
    pub manipulability_floor: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            q: 0.01,
            dq_fraction: 1.0,
            tau_fraction: 1.0,
            manipulability_floor: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub weights: Weights,
    pub margins: Margins,
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let m = &self.margins;
        let positive = [w.task_translation, w.task_rotation, w.dq, w.dh, m.manipulability_floor];
        if !positive.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(
                "adaptation weights and manipulability floor must be positive".into(),
            ));
        }
        if !(m.q >= 0.0) || !(m.dq_fraction > 0.0) || !(m.tau_fraction > 0.0) {
            return Err(Error::InvalidInput("adaptation margins out of range".into()));
        }
        Ok(())
    }
}

/// Desired state `x_D`: joint positions and end-effector wrench per arm.
#[derive(Clone, Debug, PartialEq)]
pub struct DesiredState {
    pub q: Vec<DVector<f64>>,
    /// World-frame wrench each arm applies at its tool, angular first.
    pub h: Vec<Vector6<f64>>,
}

impl DesiredState {
    pub fn new(q: Vec<DVector<f64>>) -> Self {
        let h = vec![Vector6::zeros(); q.len()];
        Self { q, h }
    }
}

/// Rigid object held between two tools.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspSpec {
    pub mass: f64,
    /// Object frame expressed in each tool frame.
    pub offsets: [Pose; 2],
    /// Internal compression force requested along the contact line (N).
    pub squeeze: f64,
    pub gravity: Vector3<f64>,
}

impl GraspSpec {
    /// Object gravity wrench about its origin.
    pub fn gravity_wrench(&self) -> Vector6<f64> {
        let f = self.gravity * self.mass;
        Vector6::new(0.0, 0.0, 0.0, f.x, f.y, f.z)
    }

    /// Object origin from the two tool poses: mean of the two estimates.
    pub fn object_origin(&self, tools: [&Pose; 2]) -> Vector3<f64> {
        let a = compose(tools[0], &self.offsets[0]).translation;
        let b = compose(tools[1], &self.offsets[1]).translation;
        0.5 * (a + b)
    }

    /// Per-arm wrench targets: half the object weight each plus the
    /// requested squeeze along the contact line.
    pub fn wrench_targets(&self, contacts: [&Vector3<f64>; 2]) -> Result<[Vector6<f64>; 2]> {
        let d = contacts[1] - contacts[0];
        if d.norm() < 1e-9 {
            return Err(Error::CoincidentContacts);
        }
        let n = d.normalize();
        let support = -0.5 * self.mass * self.gravity;
        let l = support + n * self.squeeze;
        let r = support - n * self.squeeze;
        Ok([
            Vector6::new(0.0, 0.0, 0.0, l.x, l.y, l.z),
            Vector6::new(0.0, 0.0, 0.0, r.x, r.y, r.z),
        ])
    }
}

/// Maps the stacked contact wrenches `[h_l; h_r]` (world frame, about the
/// contact points) to the net wrench about the object origin.
pub fn grasp_matrix(origin: &Vector3<f64>, contacts: [&Vector3<f64>; 2]) -> Result<SMatrix<f64, 6, 12>> {
    if (contacts[0] - contacts[1]).norm() < 1e-9 {
        return Err(Error::CoincidentContacts);
    }
    let mut g = SMatrix::<f64, 6, 12>::zeros();
    for (i, p) in contacts.iter().enumerate() {
        let c = 6 * i;
        g.fixed_view_mut::<3, 3>(0, c).copy_from(&Matrix3::identity());
        g.fixed_view_mut::<3, 3>(0, c + 3).copy_from(&skew(&(*p - origin)));
        g.fixed_view_mut::<3, 3>(3, c + 3).copy_from(&Matrix3::identity());
    }
    Ok(g)
}

/// One arm's share of the problem.
#[derive(Clone, Copy, Debug)]
pub struct ArmTask<'a> {
    pub model: &'a ArmModel,
    /// Tool pose requested this tick (`x_δ`).
    pub target: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    PositionUpper { arm: usize, joint: usize },
    PositionLower { arm: usize, joint: usize },
    VelocityUpper { arm: usize, joint: usize },
    VelocityLower { arm: usize, joint: usize },
    TorqueUpper { arm: usize, joint: usize },
    TorqueLower { arm: usize, joint: usize },
    Manipulability { arm: usize },
}

/// Linearized problem `min ‖C Δx − c‖²_w  s.t.  C_eq Δx + c_eq = 0,
/// C_in Δx + c_in ≥ 0`, with `Δx = [Δq_0; …; Δq_k; Δh_0; …; Δh_k]`.
#[derive(Clone, Debug)]
pub struct AdaptationProblem {
    pub dofs: Vec<usize>,
    pub c_cost: DMatrix<f64>,
    pub c_cost_vec: DVector<f64>,
    pub weights: DVector<f64>,
    pub c_eq: DMatrix<f64>,
    pub c_eq_vec: DVector<f64>,
    pub c_in: DMatrix<f64>,
    pub c_in_vec: DVector<f64>,
    /// Meaning of each inequality row.
    pub rows: Vec<Constraint>,
}

impl AdaptationProblem {
    pub fn n_vars(&self) -> usize {
        self.dofs.iter().sum::<usize>() + 6 * self.dofs.len()
    }

    fn q_offset(&self, arm: usize) -> usize {
        self.dofs[..arm].iter().sum()
    }

    fn h_offset(&self, arm: usize) -> usize {
        self.dofs.iter().sum::<usize>() + 6 * arm
    }

    /// Slack of each inequality row at `Δx = 0`.
    pub fn initial_slacks(&self) -> &DVector<f64> {
        &self.c_in_vec
    }

    /// The problem as a QP: `H = CᵀWC`, `g = −CᵀWc`.
    pub fn qp(&self) -> QpProblem {
        let w = DMatrix::from_diagonal(&self.weights);
        let ct_w = self.c_cost.transpose() * w;
        QpProblem {
            h: &ct_w * &self.c_cost,
            g: -(&ct_w * &self.c_cost_vec),
            a_eq: self.c_eq.clone(),
            b_eq: self.c_eq_vec.clone(),
            a_in: self.c_in.clone(),
            b_in: self.c_in_vec.clone(),
        }
    }
}

struct RowBuilder {
    n: usize,
    rows: Vec<DVector<f64>>,
    rhs: Vec<f64>,
    weights: Vec<f64>,
}

impl RowBuilder {
    fn new(n: usize) -> Self {
        Self {
            n,
            rows: Vec::new(),
            rhs: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn push(&mut self, entries: &[(usize, f64)], rhs: f64, weight: f64) {
        let mut r = DVector::zeros(self.n);
        for &(i, v) in entries {
            r[i] += v;
        }
        self.rows.push(r);
        self.rhs.push(rhs);
        self.weights.push(weight);
    }

    fn matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), self.n);
        for (i, r) in self.rows.iter().enumerate() {
            m.row_mut(i).copy_from(&r.transpose());
        }
        m
    }
}

/// Derivative of the smallest singular value of the tool Jacobian by
/// central differences of `J` projected on the singular pair.
fn manipulability_gradient(
    model: &ArmModel,
    q: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let h = 1e-6;
    let mut grad = DVector::zeros(q.len());
    for k in 0..q.len() {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[k] += h;
        qm[k] -= h;
        let dj = (jacobian_world(model, &qp)? - jacobian_world(model, &qm)?) / (2.0 * h);
        grad[k] = u.dot(&(dj * v));
    }
    Ok(grad)
}

/// Builds the linearization at the current desired state.
pub fn build_problem(
    arms: &[ArmTask],
    x_d: &DesiredState,
    grasp: Option<&GraspSpec>,
    cfg: &AdaptationConfig,
    dt: f64,
) -> Result<AdaptationProblem> {
    cfg.validate()?;
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if arms.is_empty() {
        return Err(Error::InvalidInput("no arms".into()));
    }
    check_dim(arms.len(), x_d.q.len())?;
    check_dim(arms.len(), x_d.h.len())?;
    if grasp.is_some() && arms.len() != 2 {
        return Err(Error::InvalidInput("a grasp needs exactly two arms".into()));
    }
    let dofs: Vec<usize> = arms.iter().map(|a| a.model.dof()).collect();
    for (a, q) in arms.iter().zip(&x_d.q) {
        check_dim(a.model.dof(), q.len())?;
    }
    let mut problem = AdaptationProblem {
        dofs: dofs.clone(),
        c_cost: DMatrix::zeros(0, 0),
        c_cost_vec: DVector::zeros(0),
        weights: DVector::zeros(0),
        c_eq: DMatrix::zeros(0, 0),
        c_eq_vec: DVector::zeros(0),
        c_in: DMatrix::zeros(0, 0),
        c_in_vec: DVector::zeros(0),
        rows: Vec::new(),
    };
    let n = problem.n_vars();
    let w = &cfg.weights;
    let m = &cfg.margins;

    let tools: Vec<Pose> = arms
        .iter()
        .zip(&x_d.q)
        .map(|(a, q)| forward_kinematics(a.model, q))
        .collect::<Result<_>>()?;

    let h_targets: Vec<Vector6<f64>> = match grasp {
        Some(g) => g
            .wrench_targets([&tools[0].translation, &tools[1].translation])?
            .to_vec(),
        None => vec![Vector6::zeros(); arms.len()],
    };

    let mut cost = RowBuilder::new(n);
    let mut ineq = RowBuilder::new(n);
    let mut rows = Vec::new();

    for (arm, task) in arms.iter().enumerate() {
        let model = task.model;
        let q = &x_d.q[arm];
        let qo = problem.q_offset(arm);
        let ho = problem.h_offset(arm);
        let jac = jacobian_world(model, q)?;
        let err = pose_error(&task.target, &tools[arm]);

        for r in 0..6 {
            let weight = if r < 3 { w.task_rotation } else { w.task_translation };
            let entries: Vec<(usize, f64)> = (0..model.dof()).map(|c| (qo + c, jac[(r, c)])).collect();
            cost.push(&entries, err[r], weight);
        }
        for c in 0..model.dof() {
            cost.push(&[(qo + c, 1.0)], 0.0, w.dq);
        }
        for r in 0..6 {
            cost.push(&[(ho + r, 1.0)], h_targets[arm][r] - x_d.h[arm][r], w.dh);
        }

        for (j, joint) in model.joints.iter().enumerate() {
            let up = (joint.q_max - m.q - q[j]).max(0.0);
            let lo = (q[j] - joint.q_min - m.q).max(0.0);
            ineq.push(&[(qo + j, -1.0)], up, 1.0);
            rows.push(Constraint::PositionUpper { arm, joint: j });
            ineq.push(&[(qo + j, 1.0)], lo, 1.0);
            rows.push(Constraint::PositionLower { arm, joint: j });
            let step = joint.dq_max * m.dq_fraction * dt;
            ineq.push(&[(qo + j, -1.0)], step, 1.0);
            rows.push(Constraint::VelocityUpper { arm, joint: j });
            ineq.push(&[(qo + j, 1.0)], step, 1.0);
            rows.push(Constraint::VelocityLower { arm, joint: j });
        }

        let g_vec = dynamics_terms(model, &ArmState::at_rest(q.clone()))?.g_vec;
        let static_tau = &g_vec + jac.transpose() * x_d.h[arm];
        for (j, joint) in model.joints.iter().enumerate() {
            let lim = joint.tau_max * m.tau_fraction;
            let coeffs: Vec<(usize, f64)> = (0..6).map(|r| (ho + r, jac[(r, j)])).collect();
            let neg: Vec<(usize, f64)> = coeffs.iter().map(|&(i, v)| (i, -v)).collect();
            ineq.push(&neg, lim - static_tau[j], 1.0);
            rows.push(Constraint::TorqueUpper { arm, joint: j });
            ineq.push(&coeffs, lim + static_tau[j], 1.0);
            rows.push(Constraint::TorqueLower { arm, joint: j });
        }

        let (sigma, u, v, gap) = smallest_singular_value(&jac);
        if gap > 1e-6 * sigma.max(1.0) {
            let grad = manipulability_gradient(model, q, &u, &v)?;
            let floor = (1.1 * m.manipulability_floor).min(sigma);
            let entries: Vec<(usize, f64)> = (0..model.dof()).map(|c| (qo + c, grad[c])).collect();
            ineq.push(&entries, sigma - floor, 1.0);
            rows.push(Constraint::Manipulability { arm });
        } else {
            for c in 0..model.dof() {
                cost.push(&[(qo + c, 1.0)], 0.0, 0.1 * w.task_translation * m.manipulability_floor);
            }
        }
    }

    let (c_eq, c_eq_vec) = match grasp {
        Some(g) => {
            let origin = g.object_origin([&tools[0], &tools[1]]);
            let gm = grasp_matrix(&origin, [&tools[0].translation, &tools[1].translation])?;
            let mut a = DMatrix::zeros(6, n);
            let h0 = problem.h_offset(0);
            a.view_mut((0, h0), (6, 12)).copy_from(&gm);
            let mut stacked = SMatrix::<f64, 12, 1>::zeros();
            stacked.fixed_rows_mut::<6>(0).copy_from(&x_d.h[0]);
            stacked.fixed_rows_mut::<6>(6).copy_from(&x_d.h[1]);
            let b = gm * stacked + g.gravity_wrench();
            (a, DVector::from_column_slice(b.as_slice()))
        }
        None => (DMatrix::zeros(0, n), DVector::zeros(0)),
    };

    problem.c_cost = cost.matrix();
    problem.c_cost_vec = DVector::from_vec(cost.rhs);
    problem.weights = DVector::from_vec(cost.weights);
    problem.c_in = ineq.matrix();
    problem.c_in_vec = DVector::from_vec(ineq.rhs);
    problem.c_eq = c_eq;
    problem.c_eq_vec = c_eq_vec;
    problem.rows = rows;
    Ok(problem)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// No inequality is active; the desired increment is returned as is.
    Optimal,
    /// Some limit is active; the increment was modified.
    ClampedFeasible,
    /// Not even a zero increment satisfies the constraints.
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationSolution {
    pub delta_q: Vec<DVector<f64>>,
    pub delta_h: Vec<Vector6<f64>>,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    /// `‖C_eq Δx + c_eq‖∞` of the returned increment (0 without equalities).
    pub equality_residual: f64,
    pub active: Vec<Constraint>,
    pub iterations: usize,
}

/// Solves the linearized problem once.
pub fn solve_sqp_step(problem: &AdaptationProblem) -> AdaptationSolution {
    let zero = || AdaptationSolution {
        delta_q: problem.dofs.iter().map(|&d| DVector::zeros(d)).collect(),
        delta_h: vec![Vector6::zeros(); problem.dofs.len()],
        status: SolveStatus::Infeasible,
        kkt_residual: f64::NAN,
        equality_residual: problem.c_eq_vec.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        active: Vec::new(),
        iterations: 0,
    };
    if problem.c_in_vec.iter().any(|s| *s < -FEAS_TOL) {
        return zero();
    }
    let sol = match qp::solve(&problem.qp()) {
        Ok(s) => s,
        Err(_) => return zero(),
    };
    let delta_q = problem
        .dofs
        .iter()
        .enumerate()
        .map(|(a, &d)| sol.x.rows(problem.q_offset(a), d).into_owned())
        .collect();
    let delta_h = (0..problem.dofs.len())
        .map(|a| Vector6::from_column_slice(sol.x.rows(problem.h_offset(a), 6).as_slice()))
        .collect();
    let equality_residual = (&problem.c_eq * &sol.x + &problem.c_eq_vec)
        .iter()
        .fold(0.0, |m: f64, v| m.max(v.abs()));
    let status = if sol.active.is_empty() {
        SolveStatus::Optimal
    } else {
        SolveStatus::ClampedFeasible
    };
    AdaptationSolution {
        delta_q,
        delta_h,
        status,
        kkt_residual: sol.kkt_residual,
        equality_residual,
        active: sol.active.iter().map(|&r| problem.rows[r]).collect(),
        iterations: sol.iterations,
    }
}

/// `x_D ← x_D + Δx_D`, with joint positions kept inside their limits.
pub fn apply_solution(
    models: &[&ArmModel],
    x_d: &DesiredState,
    sol: &AdaptationSolution,
) -> Result<DesiredState> {
    if sol.status == SolveStatus::Infeasible {
        return Err(Error::Infeasible);
    }
    check_dim(models.len(), x_d.q.len())?;
    check_dim(models.len(), sol.delta_q.len())?;
    let mut next = x_d.clone();
    for (a, model) in models.iter().enumerate() {
        check_dim(model.dof(), sol.delta_q[a].len())?;
        next.q[a] += &sol.delta_q[a];
        for (j, joint) in model.joints.iter().enumerate() {
            next.q[a][j] = next.q[a][j].clamp(joint.q_min, joint.q_max);
        }
        next.h[a] += sol.delta_h[a];
    }
    Ok(next)
}
