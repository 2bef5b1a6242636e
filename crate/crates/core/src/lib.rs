//! Control library for fractal-impedance master–replica teleoperation.
//!
//! * [`geom`]: poses, twists, wrenches and the SE(3) operations on them.
//! * [`robot`]: serial-chain kinematics and dynamics.
//! * [`fic`]: saturated PD and the fractal NLPD controllers.
//! * [`master`]: operator command transform and haptic mixing.
//! * [`replica`]: admittance force control and the superimposed torque law.
//! * [`adaptation`]: per-tick QP that keeps commands feasible.

pub mod adaptation;
pub mod error;
pub mod fic;
pub mod geom;
pub mod master;
pub mod replica;
pub mod robot;

pub use error::{Error, Result};
