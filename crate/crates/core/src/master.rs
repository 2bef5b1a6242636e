//! Master-side pipeline: operator motion to replica command, and the
//! haptic wrench rendered back to the operator.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fic::CartesianNlpd;
use crate::geom::{compose, integrate_twist, pose_error, Frame, Pose, Twist, Wrench};

/// Mode requested by the operator, without the captured anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Position,
    Velocity,
}

impl ModeKind {
    pub fn toggled(self) -> Self {
        match self {
            ModeKind::Position => ModeKind::Velocity,
            ModeKind::Velocity => ModeKind::Position,
        }
    }
}

impl std::str::FromStr for ModeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "position" | "pos" | "p" => Ok(ModeKind::Position),
            "velocity" | "vel" | "v" => Ok(ModeKind::Velocity),
            other => Err(Error::InvalidInput(format!("unknown master mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModeKind::Position => "position",
            ModeKind::Velocity => "velocity",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MasterMode {
    /// Absolute mapping; `x_d0` is the anchor captured when the mode was entered.
    Position { x_d0: Pose },
    Velocity,
}

impl MasterMode {
    pub fn kind(&self) -> ModeKind {
        match self {
            MasterMode::Position { .. } => ModeKind::Position,
            MasterMode::Velocity => ModeKind::Velocity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MasterState {
    /// Device pose relative to its home.
    pub x_m: Pose,
    pub v_m: Twist,
    /// Haptic gain in `[0, 1]`.
    pub k_h: f64,
    /// Last commanded replica pose.
    pub x_d_prev: Pose,
}

impl MasterState {
    pub fn new(x_d_prev: Pose) -> Self {
        Self {
            x_m: Pose::identity(),
            v_m: Twist::zero(),
            k_h: 0.0,
            x_d_prev,
        }
    }
}

/// Clamps the operator's raw gain into `[0, 1]`; NaN maps to 0.
pub fn set_haptic_gain(state: &MasterState, raw: f64) -> MasterState {
    let k_h = if raw.is_nan() { 0.0 } else { raw.clamp(0.0, 1.0) };
    MasterState { k_h, ..*state }
}

/// Replica command for this tick; updates `x_d_prev`.
pub fn master_transform(mode: &MasterMode, state: &mut MasterState, dt: f64) -> Result<Pose> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let x_d = match mode {
        MasterMode::Position { x_d0 } => compose(x_d0, &state.x_m),
        MasterMode::Velocity => integrate_twist(&state.x_d_prev, &state.v_m, dt),
    };
    state.x_d_prev = x_d;
    Ok(x_d)
}

/// Region of device motion that produces no boundary feedback.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workspace {
    /// m
    pub linear_radius: f64,
    /// rad
    pub angular_radius: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            linear_radius: 0.10,
            angular_radius: 0.5,
        }
    }
}

impl Workspace {
    /// No free region: feedback pulls toward home from any displacement.
    pub fn home() -> Self {
        Self {
            linear_radius: 0.0,
            angular_radius: 0.0,
        }
    }
}

fn excess(v: &Vector3<f64>, radius: f64) -> Option<Vector3<f64>> {
    let n = v.norm();
    (n > radius).then(|| v * (1.0 - radius / n))
}

/// `h_H = NLPD(−x_M) + K_H h_e`, with the NLPD acting on the displacement
/// beyond the workspace and damping only while outside it.
pub fn master_haptics(
    nlpd: &mut CartesianNlpd,
    workspace: &Workspace,
    state: &MasterState,
    h_e: &Wrench,
) -> Result<Wrench> {
    if h_e.frame != Frame::Master {
        return Err(Error::FrameMismatch {
            expected: Frame::Master,
            found: h_e.frame,
        });
    }
    let disp = pose_error(&state.x_m, &Pose::identity());
    let ang: Vector3<f64> = disp.fixed_rows::<3>(0).into();
    let lin: Vector3<f64> = disp.fixed_rows::<3>(3).into();
    let mut error = Vector6::zeros();
    let mut vel = Vector6::zeros();
    if let Some(e) = excess(&ang, workspace.angular_radius) {
        error.fixed_rows_mut::<3>(0).copy_from(&(-e));
        vel.fixed_rows_mut::<3>(0).copy_from(&state.v_m.angular);
    }
    if let Some(e) = excess(&lin, workspace.linear_radius) {
        error.fixed_rows_mut::<3>(3).copy_from(&(-e));
        vel.fixed_rows_mut::<3>(3).copy_from(&state.v_m.linear);
    }
    let boundary = nlpd.wrench_from_error(&error, &vel, Frame::Master);
    boundary.checked_add(&h_e.scale(state.k_h))
}

/// Master device state machine: mode switching with re-anchoring, command
/// generation and haptic rendering.
#[derive(Clone, Debug)]
pub struct MasterStation {
    pub mode: MasterMode,
    pub state: MasterState,
    pub nlpd: CartesianNlpd,
    pub workspace: Workspace,
}

impl MasterStation {
    /// Starts in position mode anchored at the replica's initial tool pose.
    pub fn new(initial_replica: Pose, nlpd: CartesianNlpd, workspace: Workspace) -> Self {
        Self {
            mode: MasterMode::Position { x_d0: initial_replica },
            state: MasterState::new(initial_replica),
            nlpd,
            workspace,
        }
    }

    /// Takes a fresh device sample.
    pub fn set_input(&mut self, x_m: Pose, v_m: Twist, k_h_raw: f64) -> Result<()> {
        if !x_m.is_finite() || !v_m.to_vector().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("master input"));
        }
        self.state.x_m = x_m;
        self.state.v_m = v_m;
        self.state = set_haptic_gain(&self.state, k_h_raw);
        Ok(())
    }

    /// Switches mode. Entering position mode re-anchors so that the current
    /// device pose maps onto the last command.
    pub fn set_mode(&mut self, kind: ModeKind) {
        if kind == self.mode.kind() {
            return;
        }
        self.mode = match kind {
            ModeKind::Velocity => MasterMode::Velocity,
            ModeKind::Position => MasterMode::Position {
                x_d0: compose(&self.state.x_d_prev, &self.state.x_m.inverse()),
            },
        };
    }

    pub fn command(&mut self, dt: f64) -> Result<Pose> {
        master_transform(&self.mode, &mut self.state, dt)
    }

    pub fn haptics(&mut self, h_e: &Wrench) -> Result<Wrench> {
        master_haptics(&mut self.nlpd, &self.workspace, &self.state, h_e)
    }
}
