#![allow(dead_code)]

use fic_core::geom::Pose;
use fic_core::robot::{planar_chain, rod_inertia, ArmModel, Joint};
use nalgebra::{Unit, UnitQuaternion, Vector3};

pub fn gravity_y() -> Vector3<f64> {
    Vector3::new(0.0, -9.81, 0.0)
}

pub fn planar3() -> ArmModel {
    planar_chain(&[0.4, 0.3, 0.2], &[2.0, 1.5, 1.0], gravity_y()).unwrap()
}

/// 7-joint spatial arm with alternating z/y axes and tilted link offsets.
pub fn seven_dof() -> ArmModel {
    let axes = [
        Vector3::z_axis(),
        Vector3::y_axis(),
        Vector3::z_axis(),
        Vector3::y_axis(),
        Vector3::z_axis(),
        Vector3::y_axis(),
        Vector3::z_axis(),
    ];
    let lengths = [0.15, 0.33, 0.1, 0.32, 0.08, 0.3, 0.1];
    let mut joints = Vec::new();
    let mut prev = 0.0;
    for (i, (axis, &l)) in axes.iter().zip(&lengths).enumerate() {
        let tilt = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.1 * i as f64);
        joints.push(Joint {
            axis: Unit::new_normalize(axis.into_inner()),
            parent_offset: Pose::new(tilt, Vector3::new(0.01 * i as f64, 0.0, prev)),
            mass: 3.0 - 0.3 * i as f64,
            com: Vector3::new(0.0, 0.01, 0.5 * l),
            inertia: rod_inertia(3.0 - 0.3 * i as f64, l, 0.04, 2),
            q_min: -100.0,
            q_max: 100.0,
            dq_max: 2.5,
            tau_max: 300.0,
        });
        prev = l;
    }
    ArmModel::new(
        "seven",
        joints,
        Pose::from_translation(Vector3::new(0.0, 0.0, 0.1)),
        Vector3::new(0.0, 0.0, -9.81),
    )
    .unwrap()
}
