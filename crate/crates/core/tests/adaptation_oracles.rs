mod common;

use common::planar3;
use fic_core::adaptation::qp::{solve, QpProblem};
use fic_core::adaptation::{
    apply_solution, build_problem, grasp_matrix, solve_sqp_step, AdaptationConfig, ArmTask,
    DesiredState, GraspSpec, SolveStatus,
};
use fic_core::geom::{pose_error, Pose};
use fic_core::robot::{forward_kinematics, jacobian_world, planar_chain, smallest_singular_value, ArmModel};
use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force minimizer of `f` over a box sampled at `step`.
fn grid_min(f: impl Fn(f64, f64) -> f64, lo: [f64; 2], hi: [f64; 2], step: f64) -> [f64; 2] {
    let nx = ((hi[0] - lo[0]) / step).round() as usize;
    let ny = ((hi[1] - lo[1]) / step).round() as usize;
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for i in 0..=nx {
        let x = lo[0] + (hi[0] - lo[0]) * i as f64 / nx as f64;
        for j in 0..=ny {
            let y = lo[1] + (hi[1] - lo[1]) * j as f64 / ny as f64;
            let v = f(x, y);
            if v < best.0 {
                best = (v, [x, y]);
            }
        }
    }
    best.1
}

fn box_rows(lo: [f64; 2], hi: [f64; 2]) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 1.0]);
    let b = DVector::from_vec(vec![hi[0], hi[1], -lo[0], -lo[1]]);
    (a, b)
}

#[test]
fn box_qp_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..8 {
        let l = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(2, 2) * 0.2;
        let g = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let lo = [-rng.gen_range(0.02..0.1), -rng.gen_range(0.02..0.1)];
        let hi = [rng.gen_range(0.02..0.1), rng.gen_range(0.02..0.1)];
        let (a, b) = box_rows(lo, hi);
        let mut p = QpProblem::unconstrained(h.clone(), g.clone());
        p.a_in = a;
        p.b_in = b;
        let s = solve(&p).unwrap();
        let f = |x: f64, y: f64| {
            let v = DVector::from_vec(vec![x, y]);
            0.5 * v.dot(&(&h * &v)) + g.dot(&v)
        };
        let best = grid_min(f, lo, hi, 1e-4);
        assert!((s.x[0] - best[0]).abs() < 1e-3 && (s.x[1] - best[1]).abs() < 1e-3);
        assert!(p.slacks(&s.x).iter().all(|v| *v >= -1e-6));
    }
}

#[test]
fn two_joint_adaptation_matches_box_projection_oracle() {
    let m = planar_chain(&[0.5, 0.4], &[1.0, 1.0], Vector3::zeros()).unwrap();
    let q = DVector::from_vec(vec![0.4, 1.1]);
    let x = forward_kinematics(&m, &q).unwrap();
    // Far target: the per-tick velocity box must clip the step.
    let target = Pose::new(x.rotation, x.translation + Vector3::new(-0.05, 0.04, 0.0));
    let x_d = DesiredState::new(vec![q.clone()]);
    let cfg = AdaptationConfig::default();
    let dt = 1e-3;
    let p = build_problem(&[ArmTask { model: &m, target }], &x_d, None, &cfg, dt).unwrap();
    let sol = solve_sqp_step(&p);
    assert_eq!(sol.status, SolveStatus::ClampedFeasible);

    let step = m.joints[0].dq_max * dt;
    let qp = p.qp();
    let cost = |a: f64, b: f64| {
        let mut v = DVector::zeros(p.n_vars());
        v[0] = a;
        v[1] = b;
        qp.objective(&v)
    };
    let best = grid_min(cost, [-step, -step], [step, step], 1e-5);
    assert!((sol.delta_q[0][0] - best[0]).abs() < 1e-4);
    assert!((sol.delta_q[0][1] - best[1]).abs() < 1e-4);
    assert!(sol.delta_h[0].amax() < 1e-12);
    let x_full = {
        let mut v = DVector::zeros(p.n_vars());
        v.rows_mut(0, 2).copy_from(&sol.delta_q[0]);
        v
    };
    assert!((&p.c_in * x_full + &p.c_in_vec).iter().all(|s| *s >= -1e-6));
}

/// Unconstrained least-squares optimum of the weighted cost, computed by SVD.
fn unconstrained_optimum(c: &DMatrix<f64>, rhs: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let sw = w.map(f64::sqrt);
    let a = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)] * sw[i]);
    let b = rhs.component_mul(&sw);
    a.svd(true, true).solve(&b, 1e-14).unwrap()
}

#[test]
fn adaptation_is_transparent_when_feasible() {
    let m = planar3();
    let cfg = AdaptationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 1000 {
        attempts += 1;
        assert!(attempts < 5000, "too few feasible samples");
        let q = DVector::from_vec(vec![
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.4..2.0),
            rng.gen_range(-2.0..-0.4),
        ]);
        let x = forward_kinematics(&m, &q).unwrap();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.gen_range(-2e-3..2e-3));
        let target = Pose::new(
            rot * x.rotation,
            x.translation + Vector3::new(rng.gen_range(-5e-4..5e-4), rng.gen_range(-5e-4..5e-4), 0.0),
        );
        let x_d = DesiredState::new(vec![q]);
        let p = build_problem(&[ArmTask { model: &m, target }], &x_d, None, &cfg, 1e-3).unwrap();
        let oracle = unconstrained_optimum(&p.c_cost, &p.c_cost_vec, &p.weights);
        if (&p.c_in * &oracle + &p.c_in_vec).iter().any(|s| *s <= 1e-9) {
            continue;
        }
        let sol = solve_sqp_step(&p);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.kkt_residual < 1e-6);
        let got: Vec<f64> = sol.delta_q[0].iter().chain(sol.delta_h[0].iter()).copied().collect();
        let diff = (DVector::from_vec(got) - oracle).amax();
        assert!(diff < 1e-8, "difference {diff}");
        checked += 1;
    }
}

fn bimanual_pair() -> (ArmModel, ArmModel) {
    let g = Vector3::new(0.0, 0.0, -9.81);
    let left = planar_chain(&[0.4, 0.3, 0.2], &[2.0, 1.5, 1.0], g).unwrap();
    let base = Pose::new(
        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI),
        Vector3::new(0.8, 0.0, 0.0),
    );
    let right = left.with_base(&base);
    (left, right)
}

fn grasp(mass: f64, squeeze: f64) -> GraspSpec {
    GraspSpec {
        mass,
        offsets: [
            Pose::from_translation(Vector3::new(0.048, 0.0, 0.0)),
            Pose::from_translation(Vector3::new(0.048, 0.0, 0.0)),
        ],
        squeeze,
        gravity: Vector3::new(0.0, 0.0, -9.81),
    }
}

fn bimanual_start(left: &ArmModel, right: &ArmModel) -> (DesiredState, [Pose; 2]) {
    // Mirror configuration: the tools face each other 0.096 m apart.
    let ql = DVector::from_vec(vec![0.9, 1.0, -1.9]);
    let qr = ql.clone();
    let xl = forward_kinematics(left, &ql).unwrap();
    let xr = forward_kinematics(right, &qr).unwrap();
    (DesiredState::new(vec![ql, qr]), [xl, xr])
}

#[test]
fn grasp_equality_offset_is_object_weight() {
    let (l, r) = bimanual_pair();
    let (x_d, tools) = bimanual_start(&l, &r);
    let tasks = [ArmTask { model: &l, target: tools[0] }, ArmTask { model: &r, target: tools[1] }];
    let p = build_problem(&tasks, &x_d, Some(&grasp(0.01, 0.0)), &AdaptationConfig::default(), 1e-3).unwrap();
    let expected = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, -0.0981]);
    assert!((&p.c_eq_vec - expected).amax() < 1e-15);
}

#[test]
fn unbalanced_wrench_request_stays_in_equilibrium() {
    let (l, r) = bimanual_pair();
    let (mut x_d, tools) = bimanual_start(&l, &r);
    let spec = grasp(0.02, 1.0);
    let targets = spec
        .wrench_targets([&tools[0].translation, &tools[1].translation])
        .unwrap();
    x_d.h = targets.to_vec();
    let tasks = [ArmTask { model: &l, target: tools[0] }, ArmTask { model: &r, target: tools[1] }];
    let mut p = build_problem(&tasks, &x_d, Some(&spec), &AdaptationConfig::default(), 1e-3).unwrap();
    assert!(p.c_eq_vec.amax() < 1e-12, "start is in equilibrium");

    // Ask only the left arm to push 5 N harder along x: the net force this
    // would put on the object is not allowed, only its internal part is.
    let col = 6 + 3;
    for row in 0..p.c_cost.nrows() {
        if p.c_cost[(row, col)] == 1.0 && p.c_cost.row(row).sum() == 1.0 {
            p.c_cost_vec[row] = 5.0;
        }
    }
    let sol = solve_sqp_step(&p);
    assert_ne!(sol.status, SolveStatus::Infeasible);
    let mut x = DVector::zeros(p.n_vars());
    x.rows_mut(0, 3).copy_from(&sol.delta_q[0]);
    x.rows_mut(3, 3).copy_from(&sol.delta_q[1]);
    x.rows_mut(6, 6).copy_from(&sol.delta_h[0]);
    x.rows_mut(12, 6).copy_from(&sol.delta_h[1]);
    assert!(sol.delta_h[0][3].abs() > 1e-3, "request partially honoured");
    assert!((&p.c_eq * &x).amax() < 1e-6);

    let origin = spec.object_origin([&tools[0], &tools[1]]);
    let g = grasp_matrix(&origin, [&tools[0].translation, &tools[1].translation]).unwrap();
    let mut stacked = nalgebra::SVector::<f64, 12>::zeros();
    stacked.fixed_rows_mut::<6>(0).copy_from(&sol.delta_h[0]);
    stacked.fixed_rows_mut::<6>(6).copy_from(&sol.delta_h[1]);
    assert!((g * stacked).amax() < 1e-6);
}

#[test]
fn repeated_steps_converge_to_reachable_pose() {
    let m = planar3();
    let cfg = AdaptationConfig::default();
    let q0 = DVector::from_vec(vec![0.2, 0.9, -0.7]);
    let target = forward_kinematics(&m, &(&q0 + DVector::from_vec(vec![0.05, -0.08, 0.06]))).unwrap();
    let mut x_d = DesiredState::new(vec![q0]);
    for _ in 0..100 {
        let p = build_problem(&[ArmTask { model: &m, target }], &x_d, None, &cfg, 1e-3).unwrap();
        let sol = solve_sqp_step(&p);
        x_d = apply_solution(&[&m], &x_d, &sol).unwrap();
    }
    let e = pose_error(&target, &forward_kinematics(&m, &x_d.q[0]).unwrap());
    assert!(e.fixed_rows::<3>(3).norm() < 1e-3, "error {}", e.fixed_rows::<3>(3).norm());
}

#[test]
fn limits_and_manipulability_hold_under_unreachable_targets() {
    let mut m = planar3();
    m.joints[1].q_max = 1.2;
    let cfg = AdaptationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let mut x_d = DesiredState::new(vec![DVector::from_vec(vec![0.1, 0.8, -0.9])]);
        let far = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.gen_range(-3.0..3.0)),
            Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0),
        );
        for _ in 0..1500 {
            let p = build_problem(&[ArmTask { model: &m, target: far }], &x_d, None, &cfg, 1e-3).unwrap();
            let sol = solve_sqp_step(&p);
            assert_ne!(sol.status, SolveStatus::Infeasible);
            x_d = apply_solution(&[&m], &x_d, &sol).unwrap();
            for (j, joint) in m.joints.iter().enumerate() {
                assert!(x_d.q[0][j] <= joint.q_max + 1e-9 && x_d.q[0][j] >= joint.q_min - 1e-9);
            }
            let j = jacobian_world(&m, &x_d.q[0]).unwrap();
            let (sigma, ..) = smallest_singular_value(&j);
            assert!(sigma >= cfg.margins.manipulability_floor, "sigma {sigma}");
        }
    }
}

#[test]
fn zero_increment_when_on_target() {
    let (l, r) = bimanual_pair();
    let (mut x_d, tools) = bimanual_start(&l, &r);
    let spec = grasp(0.02, 0.5);
    x_d.h = spec
        .wrench_targets([&tools[0].translation, &tools[1].translation])
        .unwrap()
        .to_vec();
    let tasks = [ArmTask { model: &l, target: tools[0] }, ArmTask { model: &r, target: tools[1] }];
    let p = build_problem(&tasks, &x_d, Some(&spec), &AdaptationConfig::default(), 1e-3).unwrap();
    let sol = solve_sqp_step(&p);
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!(sol.delta_q.iter().all(|d| d.amax() < 1e-12));
    assert!(sol.delta_h.iter().all(|d| d.amax() < 1e-10));
}
