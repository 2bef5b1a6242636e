mod common;

use common::{planar3, seven_dof};
use fic_core::geom::{pose_error, Frame, Wrench};
use fic_core::robot::{
    advance, dynamics_terms, forward_kinematics, jacobian_relative, jacobian_world,
    kinetic_energy, link_frames, potential_energy, relative_pose, ArmModel, ArmState,
};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn homogeneous(p: &fic_core::geom::Pose) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(p.rotation.to_rotation_matrix().matrix());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
    m
}

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Screw exponential for a unit rotation axis `w` through point `p`.
fn screw_exp(w: &Vector3<f64>, p: &Vector3<f64>, theta: f64) -> Matrix4<f64> {
    let k = hat(w);
    let r = Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos());
    let v = -w.cross(p);
    let t = (Matrix3::identity() * theta + k * (1.0 - theta.cos()) + k * k * (theta - theta.sin()))
        * v;
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

/// Product-of-exponentials forward kinematics from the zero configuration.
fn poe_fk(model: &ArmModel, q: &DVector<f64>) -> Matrix4<f64> {
    let zero = DVector::zeros(model.dof());
    let frames = link_frames(model, &zero).unwrap();
    let mut t = Matrix4::<f64>::identity();
    for i in 0..model.dof() {
        let w = frames.axis(model, i);
        let p = frames.origin(i);
        t *= screw_exp(&w, &p, q[i]);
    }
    t * homogeneous(&frames.tool)
}

fn random_q(rng: &mut ChaCha8Rng, n: usize, r: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-r..r))
}

#[test]
fn fk_matches_product_of_exponentials() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for model in [seven_dof(), planar3()] {
        for _ in 0..50 {
            let q = random_q(&mut rng, model.dof(), 3.0);
            let got = homogeneous(&forward_kinematics(&model, &q).unwrap());
            let expected = poe_fk(&model, &q);
            assert!((got - expected).amax() < 1e-12);
        }
    }
}

fn fd_twist_columns(f: impl Fn(&DVector<f64>) -> fic_core::geom::Pose, q: &DVector<f64>) -> DMatrix<f64> {
    let h = 1e-7;
    let mut out = DMatrix::zeros(6, q.len());
    for k in 0..q.len() {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[k] += h;
        qm[k] -= h;
        let col = pose_error(&f(&qp), &f(&qm)) / (2.0 * h);
        out.column_mut(k).copy_from(&col);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jacobian_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for model in [seven_dof(), planar3()] {
            let q = random_q(&mut rng, model.dof(), 3.0);
            let j = jacobian_world(&model, &q).unwrap();
            let fd = fd_twist_columns(|x| forward_kinematics(&model, x).unwrap(), &q);
            prop_assert!((j - fd).amax() < 1e-6);
        }
    }

    #[test]
    fn relative_jacobian_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let left = seven_dof();
        let right = planar3();
        let ql = random_q(&mut rng, 7, 3.0);
        let qr = random_q(&mut rng, 3, 3.0);
        let jr = jacobian_relative(&left, &right, &ql, &qr).unwrap();
        let mut stacked = DVector::zeros(10);
        stacked.rows_mut(0, 7).copy_from(&ql);
        stacked.rows_mut(7, 3).copy_from(&qr);
        let fd = fd_twist_columns(
            |x| {
                let a = x.rows(0, 7).into_owned();
                let b = x.rows(7, 3).into_owned();
                relative_pose(&left, &right, &a, &b).unwrap()
            },
            &stacked,
        );
        prop_assert!((jr - fd).amax() < 1e-6);
    }

    #[test]
    fn inertia_derivative_skew_property(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for model in [seven_dof(), planar3()] {
            let n = model.dof();
            let q = random_q(&mut rng, n, 3.0);
            let dq = random_q(&mut rng, n, 2.0);
            let h = 1e-6;
            let m_at = |x: &DVector<f64>| dynamics_terms(&model, &ArmState::at_rest(x.clone())).unwrap().m;
            let m_dot = (m_at(&(&q + &dq * h)) - m_at(&(&q - &dq * h))) / (2.0 * h);
            let c = dynamics_terms(&model, &ArmState { q: q.clone(), dq: dq.clone() }).unwrap().c_vec;
            let s = dq.dot(&(m_dot * &dq)) - 2.0 * dq.dot(&c);
            prop_assert!(s.abs() < 1e-5 * (1.0 + dq.dot(&c).abs()), "residual {s}");
        }
    }
}

fn total_energy(model: &ArmModel, s: &ArmState) -> f64 {
    kinetic_energy(model, s).unwrap() + potential_energy(model, &s.q).unwrap()
}

#[test]
fn free_motion_conserves_energy() {
    let mut model = planar3();
    for j in &mut model.joints {
        j.q_min = -100.0;
        j.q_max = 100.0;
    }
    let hanging = DVector::from_vec(vec![-std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
    let e_low = potential_energy(&model, &hanging).unwrap();
    let mut s = ArmState::at_rest(DVector::from_vec(vec![0.5, 0.3, -0.2]));
    let e0 = total_energy(&model, &s);
    let tau = DVector::zeros(3);
    let none = Wrench::zero(Frame::World);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        s = advance(&model, &s, &tau, &none, 1e-4).unwrap().state;
        worst = worst.max((total_energy(&model, &s) - e0).abs());
    }
    assert!(worst / (e0 - e_low) < 1e-3, "relative drift {}", worst / (e0 - e_low));
}

#[test]
fn reported_work_matches_energy_change() {
    let model = seven_dof();
    let mut s = ArmState::at_rest(DVector::from_vec(vec![0.1, 0.4, -0.2, -1.0, 0.3, 0.8, 0.0]));
    let tau = DVector::from_vec(vec![1.0, -2.0, 0.5, 1.0, 0.2, -0.3, 0.1]);
    let push = Wrench::from_force(Frame::World, Vector3::new(3.0, 0.0, -1.0));
    let e0 = total_energy(&model, &s);
    let mut work = 0.0;
    for _ in 0..2000 {
        let r = advance(&model, &s, &tau, &push, 2.5e-4).unwrap();
        work += r.work;
        s = r.state;
    }
    let de = total_energy(&model, &s) - e0;
    assert!((de - work).abs() < 1e-3 * (1.0 + work.abs()), "dE {de} vs work {work}");
}
