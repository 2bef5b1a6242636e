//! Passive controllers: the saturated PD and the fractal NLPD.
//!
//! Both are built from decoupled one-dimensional laws `F = F_k − k_d ẋ`
//! with `k_p = f/d` and `k_d = 2ζ√k_p`. The NLPD shapes `F_k` with a
//! bounded divergence profile and, once the error starts shrinking, a
//! convergence spring centred at half the peak error of the current cycle.

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geom::{pose_error, Frame, Pose, Twist, Wrench};

/// Minimum drop (or rise) of `|x̃|` that counts as a change of direction.
pub const PHASE_DEADBAND: f64 = 1e-6;
/// Saturation-onset fraction used throughout.
pub const DEFAULT_XI: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdParams {
    f: f64,
    d: f64,
    zeta: f64,
    kp: f64,
    kd: f64,
}

impl PdParams {
    /// `f`: saturation force, `d`: saturation distance, `zeta`: damping ratio.
    pub fn new(f: f64, d: f64, zeta: f64) -> Result<Self> {
        if !(f > 0.0 && f.is_finite()) || !(d > 0.0 && d.is_finite()) || !(zeta >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "PD parameters need f > 0, d > 0, zeta >= 0 (got {f}, {d}, {zeta})"
            )));
        }
        let kp = f / d;
        Ok(Self {
            f,
            d,
            zeta,
            kp,
            kd: 2.0 * zeta * kp.sqrt(),
        })
    }

    pub fn f(&self) -> f64 {
        self.f
    }
    pub fn d(&self) -> f64 {
        self.d
    }
    pub fn zeta(&self) -> f64 {
        self.zeta
    }
    pub fn kp(&self) -> f64 {
        self.kp
    }
    pub fn kd(&self) -> f64 {
        self.kd
    }

    pub fn with_f(&self, f: f64) -> Result<Self> {
        Self::new(f, self.d, self.zeta)
    }
}

/// Saturated PD: linear inside `d`, clamped at `±f` outside, minus damping.
pub fn pd_force(params: &PdParams, x_d: f64, x: f64, dx: f64) -> f64 {
    let e = x_d - x;
    let fk = if e.abs() < params.d {
        params.kp * e
    } else {
        e.signum() * params.f
    };
    fk - params.kd * dx
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlpdParams {
    pd: PdParams,
    xi: f64,
    e_max: f64,
}

impl NlpdParams {
    /// The full saturation level `E_max` is the PD saturation force `f`.
    pub fn new(pd: PdParams, xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi < 1.0) {
            return Err(Error::InvalidInput(format!("xi must lie in (0, 1), got {xi}")));
        }
        Ok(Self {
            pd,
            xi,
            e_max: pd.f,
        })
    }

    pub fn from_gains(f: f64, d: f64, zeta: f64, xi: f64) -> Result<Self> {
        Self::new(PdParams::new(f, d, zeta)?, xi)
    }

    pub fn pd(&self) -> &PdParams {
        &self.pd
    }
    pub fn xi(&self) -> f64 {
        self.xi
    }
    pub fn kp(&self) -> f64 {
        self.pd.kp
    }
    pub fn kd(&self) -> f64 {
        self.pd.kd
    }
    pub fn e_max(&self) -> f64 {
        self.e_max
    }
    /// Force at the start of saturation, `ξ k_p d`.
    pub fn e0(&self) -> f64 {
        self.xi * self.pd.kp * self.pd.d
    }
    pub fn lambda(&self) -> f64 {
        self.e_max - self.e0()
    }
    /// Saturation speed `(1 − ξ) d / 2π`.
    pub fn s(&self) -> f64 {
        (1.0 - self.xi) * self.pd.d / (2.0 * PI)
    }
    /// Centre of the saturation branch; equal to the linear/saturation boundary.
    pub fn x_b(&self) -> f64 {
        self.xi * self.pd.d
    }

    fn tanh_arg(&self, a: f64) -> f64 {
        (a - self.x_b()) / self.s() - PI
    }

    /// Divergence profile `E(x̃)`, odd in `x̃`.
    pub fn profile(&self, x_tilde: f64) -> f64 {
        let a = x_tilde.abs();
        let e = if a <= self.x_b() {
            self.pd.kp * a
        } else {
            0.5 * self.lambda() * (self.tanh_arg(a).tanh() + 1.0) + self.e0()
        };
        x_tilde.signum() * e
    }

    /// `dE/dx̃` at `x̃`.
    pub fn profile_slope(&self, x_tilde: f64) -> f64 {
        let a = x_tilde.abs();
        if a <= self.x_b() {
            self.pd.kp
        } else {
            let c = self.tanh_arg(a).cosh();
            0.5 * self.lambda() / (self.s() * c * c)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Divergence,
    Convergence,
}

/// Per-axis cycle memory of the NLPD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NlpdAxisState {
    pub phase: Phase,
    pub x_tilde_prev: f64,
    /// Peak `|x̃|` of the current cycle.
    pub x_max: f64,
    /// Smallest `|x̃|` seen since the current convergence started.
    pub x_min: f64,
}

/// Advances the divergence/convergence memory with a new error sample.
///
/// Divergence holds while `|x̃|` grows, tracking the peak. A drop of more
/// than [`PHASE_DEADBAND`] below the peak freezes it and enters
/// Convergence. A rise of more than the deadband above the convergence
/// trough (which includes exceeding the frozen peak) starts a new
/// divergence cycle from the current error. Touching or crossing zero
/// resets the cycle.
pub fn nlpd_update_phase(state: &NlpdAxisState, x_tilde: f64) -> NlpdAxisState {
    let a = x_tilde.abs();
    let prev = state.x_tilde_prev;
    let crossed = x_tilde == 0.0 || (prev != 0.0 && x_tilde.signum() != prev.signum());
    let mut next = *state;
    next.x_tilde_prev = x_tilde;
    if crossed {
        next.phase = Phase::Divergence;
        next.x_max = a;
        next.x_min = a;
        return next;
    }
    match state.phase {
        Phase::Divergence => {
            if a >= state.x_max {
                next.x_max = a;
            } else if a < state.x_max - PHASE_DEADBAND {
                next.phase = Phase::Convergence;
                next.x_min = a;
            }
        }
        Phase::Convergence => {
            if a > state.x_min + PHASE_DEADBAND {
                next.phase = Phase::Divergence;
                next.x_max = a;
                next.x_min = a;
            } else {
                next.x_min = state.x_min.min(a);
            }
        }
    }
    next
}

/// Elastic part `F_k` for an already-updated state.
pub fn nlpd_spring(params: &NlpdParams, state: &NlpdAxisState, x_tilde: f64) -> f64 {
    match state.phase {
        Phase::Divergence => params.profile(x_tilde),
        Phase::Convergence => {
            let peak = state.x_max;
            if peak <= 0.0 {
                return 0.0;
            }
            let slope = 2.0 * params.profile(peak) / peak;
            let f = x_tilde.signum() * slope * (x_tilde.abs() - 0.5 * peak);
            f.clamp(-params.e_max, params.e_max)
        }
    }
}

/// `NLPD(x_d, x, ẋ) = F_k − k_d ẋ`; `state` must already hold this error.
pub fn nlpd_force(params: &NlpdParams, state: &NlpdAxisState, x_d: f64, x: f64, dx: f64) -> f64 {
    nlpd_spring(params, state, x_d - x) - params.kd() * dx
}

/// Slope of the active branch of `F_k` at `x̃`.
pub fn effective_stiffness(params: &NlpdParams, state: &NlpdAxisState, x_tilde: f64) -> f64 {
    match state.phase {
        Phase::Divergence => params.profile_slope(x_tilde),
        Phase::Convergence => {
            let peak = state.x_max;
            if peak <= 0.0 {
                return 0.0;
            }
            let slope = 2.0 * params.profile(peak) / peak;
            if (slope * (x_tilde.abs() - 0.5 * peak)).abs() >= params.e_max {
                0.0
            } else {
                slope
            }
        }
    }
}

/// One NLPD axis with its memory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NlpdAxis {
    pub params: NlpdParams,
    pub state: NlpdAxisState,
}

impl NlpdAxis {
    pub fn new(params: NlpdParams) -> Self {
        Self {
            params,
            state: NlpdAxisState::default(),
        }
    }

    /// Updates the memory with `x_tilde` and returns the force.
    pub fn step(&mut self, x_tilde: f64, dx: f64) -> f64 {
        self.state = nlpd_update_phase(&self.state, x_tilde);
        nlpd_spring(&self.params, &self.state, x_tilde) - self.params.kd() * dx
    }

    pub fn stiffness(&self) -> f64 {
        effective_stiffness(&self.params, &self.state, self.state.x_tilde_prev)
    }

    pub fn reset(&mut self) {
        self.state = NlpdAxisState::default();
    }
}

/// Six decoupled NLPD axes acting on a pose error, angular axes first.
#[derive(Clone, Debug, PartialEq)]
pub struct CartesianNlpd {
    pub axes: [NlpdAxis; 6],
}

impl CartesianNlpd {
    pub fn new(angular: NlpdParams, linear: NlpdParams) -> Self {
        let a = NlpdAxis::new(angular);
        let l = NlpdAxis::new(linear);
        Self {
            axes: [a, a, a, l, l, l],
        }
    }

    /// Applies the axes to an error 6-vector and a velocity 6-vector.
    pub fn wrench_from_error(&mut self, error: &Vector6<f64>, velocity: &Vector6<f64>, frame: Frame) -> Wrench {
        let mut out = Vector6::zeros();
        for (i, axis) in self.axes.iter_mut().enumerate() {
            out[i] = axis.step(error[i], velocity[i]);
        }
        Wrench::from_vector(frame, &out)
    }

    pub fn stiffness(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.axes[i].stiffness())
    }

    pub fn states(&self) -> [NlpdAxisState; 6] {
        std::array::from_fn(|i| self.axes[i].state)
    }

    pub fn reset(&mut self) {
        self.axes.iter_mut().for_each(NlpdAxis::reset);
    }
}

/// Cartesian NLPD wrench pulling `x` toward `x_d`, damped by the measured
/// twist `v`. Updates `states` in place.
pub fn nlpd_wrench(
    params: &[NlpdParams; 6],
    states: &mut [NlpdAxisState; 6],
    x_d: &Pose,
    x: &Pose,
    v: &Twist,
) -> Wrench {
    let err = pose_error(x_d, x);
    let vel = v.to_vector();
    let mut out = Vector6::zeros();
    for i in 0..6 {
        states[i] = nlpd_update_phase(&states[i], err[i]);
        out[i] = nlpd_spring(&params[i], &states[i], err[i]) - params[i].kd() * vel[i];
    }
    Wrench::from_vector(Frame::World, &out)
}

/// Six decoupled saturated PD axes, angular first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CartesianPd {
    pub axes: [PdParams; 6],
}

impl CartesianPd {
    pub fn new(angular: PdParams, linear: PdParams) -> Self {
        Self {
            axes: [angular, angular, angular, linear, linear, linear],
        }
    }

    /// PD on an error 6-vector (desired − actual) with velocity `velocity`.
    pub fn apply(&self, error: &Vector6<f64>, velocity: &Vector6<f64>) -> Vector6<f64> {
        Vector6::from_fn(|i, _| pd_force(&self.axes[i], error[i], 0.0, velocity[i]))
    }
}

/// Controller gains with the same names and units as the tuning table:
/// forces in N, torques in N·m, distances in m, angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FicGains {
    pub f_lin: f64,
    pub d_lin: f64,
    pub zeta_lin: f64,
    pub f_ang: f64,
    pub d_ang: f64,
    pub zeta_ang: f64,
    pub f_rel_lin: f64,
    pub d_rel_lin: f64,
    pub zeta_rel_lin: f64,
    pub f_rel_ang: f64,
    pub d_rel_ang: f64,
    pub zeta_rel_ang: f64,
    pub f_joint: f64,
    pub d_joint: f64,
    pub zeta_joint: f64,
    pub xi: f64,
}

impl Default for FicGains {
    fn default() -> Self {
        Self {
            f_lin: 40.0,
            d_lin: 0.08,
            zeta_lin: 0.8,
            f_ang: 2.0,
            d_ang: 8.0,
            zeta_ang: 0.2,
            f_rel_lin: 50.0,
            d_rel_lin: 0.05,
            zeta_rel_lin: 0.4,
            f_rel_ang: 5.0,
            d_rel_ang: 5.0,
            zeta_rel_ang: 0.1,
            f_joint: 0.3,
            d_joint: 10.0,
            zeta_joint: 0.0,
            xi: DEFAULT_XI,
        }
    }
}

impl FicGains {
    pub fn nlpd_linear(&self) -> Result<NlpdParams> {
        NlpdParams::from_gains(self.f_lin, self.d_lin, self.zeta_lin, self.xi)
    }

    pub fn nlpd_angular(&self) -> Result<NlpdParams> {
        NlpdParams::from_gains(self.f_ang, self.d_ang.to_radians(), self.zeta_ang, self.xi)
    }

    pub fn cartesian_nlpd(&self) -> Result<CartesianNlpd> {
        Ok(CartesianNlpd::new(self.nlpd_angular()?, self.nlpd_linear()?))
    }

    pub fn relative_pd(&self) -> Result<CartesianPd> {
        Ok(CartesianPd::new(
            PdParams::new(self.f_rel_ang, self.d_rel_ang.to_radians(), self.zeta_rel_ang)?,
            PdParams::new(self.f_rel_lin, self.d_rel_lin, self.zeta_rel_lin)?,
        ))
    }

    pub fn joint_pd(&self) -> Result<PdParams> {
        PdParams::new(self.f_joint, self.d_joint.to_radians(), self.zeta_joint)
    }

    pub fn validate(&self) -> Result<()> {
        self.cartesian_nlpd()?;
        self.relative_pd()?;
        self.joint_pd()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lin() -> NlpdParams {
        FicGains::default().nlpd_linear().unwrap()
    }

    fn run(xs: &[f64]) -> NlpdAxisState {
        xs.iter()
            .fold(NlpdAxisState::default(), |s, &x| nlpd_update_phase(&s, x))
    }

    #[test]
    fn pd_cases() {
        let joint = FicGains::default().joint_pd().unwrap();
        assert_eq!(pd_force(&joint, 0.2, 0.2, 0.0), 0.0);
        assert_relative_eq!(pd_force(&joint, 5f64.to_radians(), 0.0, 0.0), 0.15, epsilon = 1e-12);
        assert_eq!(pd_force(&joint, 20f64.to_radians(), 0.0, 0.0), 0.3);
        assert_eq!(pd_force(&joint, -20f64.to_radians(), 0.0, 0.0), -0.3);
    }

    #[test]
    fn pd_rejects_bad_params() {
        assert!(PdParams::new(0.0, 1.0, 0.1).is_err());
        assert!(PdParams::new(1.0, -1.0, 0.1).is_err());
        assert!(PdParams::new(1.0, 1.0, -0.1).is_err());
        let pd = PdParams::new(1.0, 1.0, 0.0).unwrap();
        assert!(NlpdParams::new(pd, 1.0).is_err());
        assert!(NlpdParams::new(pd, 0.0).is_err());
    }

    #[test]
    fn derived_gains() {
        let p = lin();
        assert_relative_eq!(p.kp(), 500.0, epsilon = 1e-12);
        assert_relative_eq!(p.kd(), 2.0 * 0.8 * 500f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(p.e0(), 36.0, epsilon = 1e-12);
        assert_relative_eq!(p.lambda(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(p.s(), 0.1 * 0.08 / (2.0 * PI), epsilon = 1e-15);
        assert_relative_eq!(p.x_b(), 0.072, epsilon = 1e-15);
    }

    #[test]
    fn phase_sequence() {
        let s = run(&[0.01, 0.02, 0.03]);
        assert_eq!(s.phase, Phase::Divergence);
        assert_eq!(s.x_max, 0.03);
        let s = nlpd_update_phase(&s, 0.025);
        assert_eq!(s.phase, Phase::Convergence);
        assert_eq!(s.x_max, 0.03);
        let s = nlpd_update_phase(&s, 0.035);
        assert_eq!(s.phase, Phase::Divergence);
        assert_eq!(s.x_max, 0.035);
    }

    #[test]
    fn zero_crossing_resets_cycle() {
        let s = run(&[0.01, 0.03, 0.02, -0.005]);
        assert_eq!(s.phase, Phase::Divergence);
        assert_eq!(s.x_max, 0.005);
    }

    #[test]
    fn deadband_suppresses_tiny_reversals() {
        let s = run(&[0.01, 0.02, 0.02 - 5e-7]);
        assert_eq!(s.phase, Phase::Divergence);
        assert_eq!(s.x_max, 0.02);
    }

    #[test]
    fn divergence_values() {
        let p = lin();
        let st = NlpdAxisState::default();
        assert_eq!(nlpd_force(&p, &st, 0.0, 0.0, 0.0), 0.0);
        let st = nlpd_update_phase(&st, 0.04);
        assert_relative_eq!(nlpd_force(&p, &st, 0.04, 0.0, 0.0), 20.0, epsilon = 1e-12);
        let st = nlpd_update_phase(&st, 0.2);
        assert!((p.e_max() - nlpd_spring(&p, &st, 0.2)) / p.e_max() < 0.01);
    }

    #[test]
    fn convergence_line() {
        let p = lin();
        let st = NlpdAxisState {
            phase: Phase::Convergence,
            x_tilde_prev: 0.03,
            x_max: 0.04,
            x_min: 0.02,
        };
        assert_eq!(nlpd_spring(&p, &st, 0.02), 0.0);
        assert_relative_eq!(nlpd_spring(&p, &st, 0.04), 20.0, epsilon = 1e-12);
        assert_relative_eq!(effective_stiffness(&p, &st, 0.03), 1000.0, epsilon = 1e-9);
        let degenerate = NlpdAxisState { x_max: 0.0, ..st };
        assert_eq!(nlpd_spring(&p, &degenerate, 0.0), 0.0);
    }

    #[test]
    fn stiffness_by_branch() {
        let p = lin();
        let st = NlpdAxisState::default();
        assert_relative_eq!(effective_stiffness(&p, &st, 0.03), 500.0);
        assert!(effective_stiffness(&p, &st, 0.2) < 1.0);
    }

    #[test]
    fn saturation_boundary_nearly_continuous() {
        let p = lin();
        let below = p.pd().kp() * p.x_b();
        let above = p.profile(p.x_b() + 1e-12);
        assert!((above - below).abs() < 0.02 * p.pd().f());
    }

    #[test]
    fn cartesian_axes_decoupled() {
        let gains = FicGains::default();
        let params: [NlpdParams; 6] = {
            let a = gains.nlpd_angular().unwrap();
            let l = gains.nlpd_linear().unwrap();
            [a, a, a, l, l, l]
        };
        let mut states = [NlpdAxisState::default(); 6];
        let w = nlpd_wrench(&params, &mut states, &Pose::identity(), &Pose::identity(), &Twist::zero());
        assert_eq!(w.to_vector(), Vector6::zeros());

        let target = Pose::from_translation(nalgebra::Vector3::new(0.04, 0.0, 0.0));
        let w = nlpd_wrench(&params, &mut states, &target, &Pose::identity(), &Twist::zero());
        assert_relative_eq!(w.force, nalgebra::Vector3::new(20.0, 0.0, 0.0), epsilon = 1e-12);
        assert_eq!(w.torque, nalgebra::Vector3::zeros());

        let mut states = [NlpdAxisState::default(); 6];
        let pitch = Pose::from_rotation(nalgebra::UnitQuaternion::from_axis_angle(
            &nalgebra::Vector3::y_axis(),
            4f64.to_radians(),
        ));
        let w = nlpd_wrench(&params, &mut states, &pitch, &Pose::identity(), &Twist::zero());
        assert_relative_eq!(w.torque.norm(), 1.0, epsilon = 1e-12);
    }
}
