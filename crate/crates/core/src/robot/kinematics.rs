use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};

use super::ArmModel;
use crate::error::Result;
use crate::geom::{compose, Pose};

/// World poses of every link frame plus the tool.
#[derive(Clone, Debug)]
pub struct LinkFrames {
    pub links: Vec<Pose>,
    pub tool: Pose,
}

impl LinkFrames {
    /// World-frame joint axis of joint `i`.
    pub fn axis(&self, model: &ArmModel, i: usize) -> Vector3<f64> {
        self.links[i].rotation * model.joints[i].axis.into_inner()
    }

    /// World position of joint `i`'s origin.
    pub fn origin(&self, i: usize) -> Vector3<f64> {
        self.links[i].translation
    }

    /// World position of link `i`'s centre of mass.
    pub fn com(&self, model: &ArmModel, i: usize) -> Vector3<f64> {
        self.links[i].transform_point(&model.joints[i].com)
    }

    /// Link `i`'s inertia about its centre of mass, rotated into the world.
    pub fn inertia(&self, model: &ArmModel, i: usize) -> Matrix3<f64> {
        let r = self.links[i].rotation.to_rotation_matrix();
        r.matrix() * model.joints[i].inertia * r.matrix().transpose()
    }
}

pub fn link_frames(model: &ArmModel, q: &DVector<f64>) -> Result<LinkFrames> {
    model.check_q(q)?;
    let mut links = Vec::with_capacity(model.dof());
    let mut t = Pose::identity();
    for (joint, &qi) in model.joints.iter().zip(q.iter()) {
        let spin = Pose::from_rotation(UnitQuaternion::from_axis_angle(&joint.axis, qi));
        t = compose(&compose(&t, &joint.parent_offset), &spin);
        links.push(t);
    }
    let tool = compose(&t, &model.tool_offset);
    Ok(LinkFrames { links, tool })
}

/// Tool pose in the world frame.
pub fn forward_kinematics(model: &ArmModel, q: &DVector<f64>) -> Result<Pose> {
    Ok(link_frames(model, q)?.tool)
}

/// Geometric Jacobian mapping joint rates to the world-frame tool twist
/// `[ω; v]` (v is the tool-point velocity).
pub fn jacobian_world(model: &ArmModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let frames = link_frames(model, q)?;
    Ok(jacobian_from_frames(model, &frames))
}

pub(crate) fn jacobian_from_frames(model: &ArmModel, frames: &LinkFrames) -> DMatrix<f64> {
    let n = model.dof();
    let p = frames.tool.translation;
    let mut j = DMatrix::zeros(6, n);
    for i in 0..n {
        let z = frames.axis(model, i);
        let lin = z.cross(&(p - frames.origin(i)));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&z);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&lin);
    }
    j
}

/// Pose of the right tool expressed in the left tool frame.
pub fn relative_pose(
    left: &ArmModel,
    right: &ArmModel,
    q_l: &DVector<f64>,
    q_r: &DVector<f64>,
) -> Result<Pose> {
    let xl = forward_kinematics(left, q_l)?;
    let xr = forward_kinematics(right, q_r)?;
    Ok(compose(&xl.inverse(), &xr))
}

/// Jacobian of the relative pose (right tool in left tool frame) with
/// respect to the stacked joint vector `[q_l; q_r]`.
pub fn jacobian_relative(
    left: &ArmModel,
    right: &ArmModel,
    q_l: &DVector<f64>,
    q_r: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let fl = link_frames(left, q_l)?;
    let fr = link_frames(right, q_r)?;
    let jl = jacobian_from_frames(left, &fl);
    let jr = jacobian_from_frames(right, &fr);
    let (nl, nr) = (left.dof(), right.dof());
    let rt = fl.tool.rotation.to_rotation_matrix().matrix().transpose();
    let d = fr.tool.translation - fl.tool.translation;
    let d_skew = crate::geom::skew(&d);

    let mut out = DMatrix::zeros(6, nl + nr);
    for c in 0..nl {
        let w: Vector3<f64> = jl.fixed_view::<3, 1>(0, c).into();
        let v: Vector3<f64> = jl.fixed_view::<3, 1>(3, c).into();
        out.fixed_view_mut::<3, 1>(0, c).copy_from(&(-(rt * w)));
        out.fixed_view_mut::<3, 1>(3, c)
            .copy_from(&(rt * (d_skew * w - v)));
    }
    for c in 0..nr {
        let w: Vector3<f64> = jr.fixed_view::<3, 1>(0, c).into();
        let v: Vector3<f64> = jr.fixed_view::<3, 1>(3, c).into();
        out.fixed_view_mut::<3, 1>(0, nl + c).copy_from(&(rt * w));
        out.fixed_view_mut::<3, 1>(3, nl + c).copy_from(&(rt * v));
    }
    Ok(out)
}

/// Smallest singular value of `j` with its singular vectors and the gap to
/// the next smallest one (`f64::INFINITY` when there is no other).
pub fn smallest_singular_value(
    j: &DMatrix<f64>,
) -> (f64, DVector<f64>, DVector<f64>, f64) {
    let svd = j.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let s = &svd.singular_values;
    let mut idx = 0;
    for i in 1..s.len() {
        if s[i] < s[idx] {
            idx = i;
        }
    }
    let gap = s
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, v)| v - s[idx])
        .fold(f64::INFINITY, f64::min);
    (
        s[idx],
        u.column(idx).into_owned(),
        vt.row(idx).transpose(),
        gap,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::pose_error;
    use crate::robot::planar_chain;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn two_link() -> ArmModel {
        planar_chain(&[0.5, 0.5], &[1.0, 1.0], Vector3::new(0.0, -9.81, 0.0)).unwrap()
    }

    #[test]
    fn planar_fk() {
        let m = two_link();
        let x = forward_kinematics(&m, &DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_relative_eq!(x.translation, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        let x = forward_kinematics(&m, &DVector::from_vec(vec![FRAC_PI_2, 0.0])).unwrap();
        assert_relative_eq!(x.translation, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn planar_jacobian_row() {
        let m = two_link();
        let j = jacobian_world(&m, &DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_relative_eq!(j[(4, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(j[(4, 1)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let m = two_link();
        assert!(forward_kinematics(&m, &DVector::zeros(3)).is_err());
        assert!(jacobian_world(&m, &DVector::zeros(1)).is_err());
        assert!(jacobian_relative(&m, &m, &DVector::zeros(2), &DVector::zeros(3)).is_err());
    }

    #[test]
    fn collinear_axis_has_zero_linear_column() {
        // Roll joint about x with the tool straight out along x.
        let mut m = two_link();
        m.joints[1].axis = Vector3::x_axis();
        let j = jacobian_world(&m, &DVector::from_vec(vec![0.0, 0.3])).unwrap();
        let lin: Vector3<f64> = j.fixed_view::<3, 1>(3, 1).into();
        assert!(lin.norm() < 1e-15);
    }

    #[test]
    fn identical_arms_have_zero_relative_twist() {
        let m = two_link();
        let q = DVector::from_vec(vec![0.3, -0.7]);
        let dq = DVector::from_vec(vec![0.4, 1.1]);
        let jr = jacobian_relative(&m, &m, &q, &q).unwrap();
        let mut stacked = DVector::zeros(4);
        stacked.rows_mut(0, 2).copy_from(&dq);
        stacked.rows_mut(2, 2).copy_from(&dq);
        assert!((jr * stacked).norm() < 1e-14);
    }

    #[test]
    fn relative_pose_of_same_arm_is_identity() {
        let m = two_link();
        let q = DVector::from_vec(vec![0.3, -0.7]);
        let r = relative_pose(&m, &m, &q, &q).unwrap();
        assert!(pose_error(&Pose::identity(), &r).norm() < 1e-14);
    }

    #[test]
    fn singular_value_of_stretched_arm() {
        let m3 = planar_chain(&[0.4, 0.3, 0.2], &[1.0; 3], Vector3::zeros()).unwrap();
        let j = jacobian_world(&m3, &DVector::zeros(3)).unwrap();
        let (s, _, _, _) = smallest_singular_value(&j);
        assert!(s < 1e-12);
        let m = two_link();
        let j = jacobian_world(&m, &DVector::from_vec(vec![0.0, 1.2])).unwrap();
        let (s, u, v, gap) = smallest_singular_value(&j);
        assert!(s > 0.05 && gap > 0.0);
        assert_relative_eq!((&j * &v - &u * s).norm(), 0.0, epsilon = 1e-12);
    }
}
