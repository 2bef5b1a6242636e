//! Contact models for the four experiments. Every wrench returned here is
//! the one the environment applies to a tool, in the world frame, about
//! the tool point.

use fic_core::geom::{Frame, Pose, Twist, Wrench};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::model::PoseSpec;

/// Tool pose and world-frame twist at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToolSample {
    pub pose: Pose,
    pub twist: Twist,
}

/// Scripted partner key: force applied at `t` and the displacement of the
/// partner's hand from where it first held the tool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartnerKey {
    pub t: f64,
    #[serde(default)]
    pub force: [f64; 3],
    #[serde(default)]
    pub offset: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// Layer thickness (m); the last layer extends indefinitely.
    pub thickness: f64,
    pub stiffness: f64,
}

/// Gaussian bump on the probe surface, in surface coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub sigma: f64,
}

fn default_exponent() -> f64 {
    1.5
}

fn default_phantom_stiffness() -> f64 {
    2000.0
}

fn default_break_force() -> f64 {
    2.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    #[default]
    None,
    /// `k δ^p + c δ̇` along the surface normal (surface frame z) with
    /// optional viscous drag tangentially.
    SoftPhantom {
        #[serde(default = "default_phantom_stiffness")]
        stiffness: f64,
        #[serde(default = "default_exponent")]
        exponent: f64,
        #[serde(default)]
        damping: f64,
        #[serde(default)]
        drag: f64,
        surface: PoseSpec,
        #[serde(default)]
        arm: usize,
    },
    /// A person holding the tool: scripted force plus limb impedance
    /// around a scripted hand position.
    HumanPartner {
        profile: Vec<PartnerKey>,
        stiffness: f64,
        damping: f64,
        #[serde(default)]
        arm: usize,
    },
    /// Layered tissue under a height map (plane plus bumps).
    Probe {
        surface: PoseSpec,
        layers: Vec<Layer>,
        #[serde(default)]
        damping: f64,
        #[serde(default)]
        bumps: Vec<Bump>,
        #[serde(default)]
        arm: usize,
    },
    /// Brittle object squeezed between two tools.
    BrittleObject {
        mass: f64,
        #[serde(default = "default_break_force")]
        break_force: f64,
        stiffness: f64,
        #[serde(default)]
        damping: f64,
        /// Uncompressed width (m); defaults to the initial tool distance.
        #[serde(default)]
        width: Option<f64>,
    },
}

impl EnvironmentConfig {
    pub fn validate(&self, arms: usize) -> SimResult<()> {
        let arm_ok = |a: &usize| {
            if *a < arms {
                Ok(())
            } else {
                Err(SimError::config(format!(
                    "environment.arm = {a} but only {arms} arm(s)"
                )))
            }
        };
        let non_negative = |v: f64, what: &str| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SimError::config(format!("environment.{what} must be >= 0")))
            }
        };
        match self {
            EnvironmentConfig::None => Ok(()),
            EnvironmentConfig::SoftPhantom {
                stiffness,
                exponent,
                damping,
                drag,
                arm,
                ..
            } => {
                arm_ok(arm)?;
                non_negative(*stiffness, "stiffness")?;
                non_negative(*damping, "damping")?;
                non_negative(*drag, "drag")?;
                if !(*exponent >= 1.0) {
                    return Err(SimError::config("environment.exponent must be >= 1"));
                }
                Ok(())
            }
            EnvironmentConfig::HumanPartner {
                profile,
                stiffness,
                damping,
                arm,
            } => {
                arm_ok(arm)?;
                non_negative(*stiffness, "stiffness")?;
                non_negative(*damping, "damping")?;
                if profile.is_empty() {
                    return Err(SimError::config("environment.profile is empty"));
                }
                if profile.windows(2).any(|w| !(w[1].t > w[0].t)) {
                    return Err(SimError::config(
                        "environment.profile times must increase",
                    ));
                }
                Ok(())
            }
            EnvironmentConfig::Probe {
                layers,
                damping,
                bumps,
                arm,
                ..
            } => {
                arm_ok(arm)?;
                non_negative(*damping, "damping")?;
                if layers.is_empty() {
                    return Err(SimError::config("environment.layers is empty"));
                }
                for l in layers {
                    non_negative(l.stiffness, "layers.stiffness")?;
                    if !(l.thickness > 0.0) {
                        return Err(SimError::config("environment.layers.thickness must be > 0"));
                    }
                }
                if bumps.iter().any(|b| !(b.sigma > 0.0)) {
                    return Err(SimError::config("environment.bumps.sigma must be > 0"));
                }
                Ok(())
            }
            EnvironmentConfig::BrittleObject {
                mass,
                break_force,
                stiffness,
                damping,
                width,
            } => {
                if arms != 2 {
                    return Err(SimError::config("brittle_object needs two arms"));
                }
                non_negative(*mass, "mass")?;
                non_negative(*stiffness, "stiffness")?;
                non_negative(*damping, "damping")?;
                if !(*break_force > 0.0) {
                    return Err(SimError::config("environment.break_force must be > 0"));
                }
                if let Some(w) = width {
                    if !(*w > 0.0) {
                        return Err(SimError::config("environment.width must be > 0"));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Penetration of a height-mapped surface: depth along the local normal
/// and that normal, in world coordinates.
fn surface_penetration(surface: &Pose, bumps: &[Bump], p: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let local = surface.inverse().transform_point(p);
    let mut h = 0.0;
    let mut grad = [0.0, 0.0];
    for b in bumps {
        let (dx, dy) = (local.x - b.x, local.y - b.y);
        let s2 = b.sigma * b.sigma;
        let g = b.height * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
        h += g;
        grad[0] -= g * dx / s2;
        grad[1] -= g * dy / s2;
    }
    let n_local = Vector3::new(-grad[0], -grad[1], 1.0).normalize();
    let depth = (h - local.z) * n_local.z;
    (depth, surface.rotation * n_local)
}

/// Force magnitude and stored energy of a stack of linear layers.
fn layered(layers: &[Layer], depth: f64) -> (f64, f64) {
    let mut force = 0.0;
    let mut energy = 0.0;
    let mut left = depth;
    for (i, l) in layers.iter().enumerate() {
        let last = i + 1 == layers.len();
        let span = if last { left } else { left.min(l.thickness) };
        energy += force * span + 0.5 * l.stiffness * span * span;
        force += l.stiffness * span;
        left -= span;
        if left <= 0.0 {
            break;
        }
    }
    (force, energy)
}

fn interp_partner(profile: &[PartnerKey], t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let first = &profile[0];
    let last = &profile[profile.len() - 1];
    let at = |k: &PartnerKey| (Vector3::from(k.force), Vector3::from(k.offset));
    if t <= first.t {
        return at(first);
    }
    if t >= last.t {
        return at(last);
    }
    let i = profile.partition_point(|k| k.t <= t);
    let (a, b) = (&profile[i - 1], &profile[i]);
    let s = (t - a.t) / (b.t - a.t);
    let (fa, oa) = at(a);
    let (fb, ob) = at(b);
    (fa + (fb - fa) * s, oa + (ob - oa) * s)
}

#[derive(Clone, Debug)]
pub struct Environment {
    config: EnvironmentConfig,
    arms: usize,
    /// Partner hand rest position.
    anchor: Vector3<f64>,
    surface: Pose,
    gravity: Vector3<f64>,
    width: f64,
    broken: bool,
    peak_load: f64,
}

/// One evaluation: the wrench on each tool, the elastic energy stored in
/// the environment, and the compressive load on a brittle object.
#[derive(Clone, Debug)]
pub struct Contact {
    pub wrenches: Vec<Wrench>,
    pub stored_energy: f64,
    pub load: f64,
}

impl Environment {
    pub fn new(
        config: &EnvironmentConfig,
        initial_tools: &[Pose],
        gravity: Vector3<f64>,
    ) -> SimResult<Self> {
        config.validate(initial_tools.len())?;
        let mut env = Self {
            config: config.clone(),
            arms: initial_tools.len(),
            anchor: Vector3::zeros(),
            surface: Pose::identity(),
            gravity,
            width: 0.0,
            broken: false,
            peak_load: 0.0,
        };
        match config {
            EnvironmentConfig::HumanPartner { arm, .. } => {
                env.anchor = initial_tools[*arm].translation;
            }
            EnvironmentConfig::SoftPhantom { surface, .. }
            | EnvironmentConfig::Probe { surface, .. } => {
                env.surface = surface.to_pose();
            }
            EnvironmentConfig::BrittleObject { width, .. } => {
                let d = (initial_tools[1].translation - initial_tools[0].translation).norm();
                env.width = width.unwrap_or(d);
            }
            EnvironmentConfig::None => {}
        }
        Ok(env)
    }

    pub fn broken(&self) -> bool {
        self.broken
    }

    /// Largest compressive load seen on a brittle object.
    pub fn peak_load(&self) -> f64 {
        self.peak_load
    }

    /// Contact state at time `t`; does not change the environment.
    pub fn evaluate(&self, t: f64, tools: &[ToolSample]) -> Contact {
        let mut wrenches = vec![Wrench::zero(Frame::World); self.arms];
        let mut stored_energy = 0.0;
        let mut load = 0.0;
        match &self.config {
            EnvironmentConfig::None => {}
            EnvironmentConfig::SoftPhantom {
                stiffness,
                exponent,
                damping,
                drag,
                arm,
                ..
            } => {
                let tool = &tools[*arm];
                let (depth, n) = surface_penetration(&self.surface, &[], &tool.pose.translation);
                if depth > 0.0 {
                    let v = tool.twist.linear;
                    let vn = v.dot(&n);
                    let normal = (stiffness * depth.powf(*exponent) - damping * vn).max(0.0);
                    let tangential = -(v - n * vn) * *drag;
                    wrenches[*arm] = Wrench::from_force(Frame::World, n * normal + tangential);
                    stored_energy = stiffness * depth.powf(exponent + 1.0) / (exponent + 1.0);
                }
            }
            EnvironmentConfig::HumanPartner {
                profile,
                stiffness,
                damping,
                arm,
            } => {
                let tool = &tools[*arm];
                let (f, offset) = interp_partner(profile, t);
                let stretch = self.anchor + offset - tool.pose.translation;
                let force = f + stretch * *stiffness - tool.twist.linear * *damping;
                wrenches[*arm] = Wrench::from_force(Frame::World, force);
                stored_energy = 0.5 * stiffness * stretch.norm_squared();
            }
            EnvironmentConfig::Probe {
                layers,
                damping,
                bumps,
                arm,
                ..
            } => {
                let tool = &tools[*arm];
                let (depth, n) = surface_penetration(&self.surface, bumps, &tool.pose.translation);
                if depth > 0.0 {
                    let (f, e) = layered(layers, depth);
                    let vn = tool.twist.linear.dot(&n);
                    let normal = (f - damping * vn).max(0.0);
                    wrenches[*arm] = Wrench::from_force(Frame::World, n * normal);
                    stored_energy = e;
                }
            }
            EnvironmentConfig::BrittleObject {
                mass,
                stiffness,
                damping,
                ..
            } => {
                if !self.broken {
                    let (pl, pr) = (tools[0].pose.translation, tools[1].pose.translation);
                    let d = pr - pl;
                    let dist = d.norm();
                    let n = if dist > 1e-12 { d / dist } else { Vector3::x() };
                    let compression = self.width - dist;
                    let weight = self.gravity * (0.5 * mass);
                    let mut fl = weight;
                    let mut fr = weight;
                    if compression > 0.0 {
                        let rate = (tools[1].twist.linear - tools[0].twist.linear).dot(&n);
                        load = (stiffness * compression - damping * rate).max(0.0);
                        fl -= n * load;
                        fr += n * load;
                        stored_energy = 0.5 * stiffness * compression * compression;
                    }
                    wrenches[0] = Wrench::from_force(Frame::World, fl);
                    wrenches[1] = Wrench::from_force(Frame::World, fr);
                }
            }
        }
        Contact {
            wrenches,
            stored_energy,
            load,
        }
    }

    /// Latches a break when the load of an accepted evaluation exceeds the
    /// break force.
    pub fn commit(&mut self, contact: &Contact) {
        if let EnvironmentConfig::BrittleObject { break_force, .. } = &self.config {
            self.peak_load = self.peak_load.max(contact.load);
            if contact.load > *break_force {
                self.broken = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(p: [f64; 3]) -> ToolSample {
        ToolSample {
            pose: Pose::from_translation(Vector3::from(p)),
            twist: Twist::zero(),
        }
    }

    fn phantom(exponent: f64) -> EnvironmentConfig {
        EnvironmentConfig::SoftPhantom {
            stiffness: 2000.0,
            exponent,
            damping: 0.0,
            drag: 0.0,
            surface: PoseSpec::default(),
            arm: 0,
        }
    }

    #[test]
    fn phantom_cases() {
        let env = Environment::new(&phantom(1.0), &[Pose::identity()], Vector3::zeros()).unwrap();
        let above = env.evaluate(0.0, &[at([0.0, 0.0, 0.01])]);
        assert_eq!(above.wrenches[0].to_vector().norm(), 0.0);
        let inside = env.evaluate(0.0, &[at([0.0, 0.0, -0.001])]);
        assert!((inside.wrenches[0].force - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn layered_force_is_continuous() {
        let layers = [
            Layer { thickness: 0.005, stiffness: 800.0 },
            Layer { thickness: 1.0, stiffness: 3000.0 },
        ];
        let (f1, e1) = layered(&layers, 0.005);
        assert!((f1 - 4.0).abs() < 1e-12);
        assert!((e1 - 0.01).abs() < 1e-12);
        let (f2, e2) = layered(&layers, 0.006);
        assert!((f2 - 7.0).abs() < 1e-12);
        assert!((e2 - (0.01 + 4.0 * 0.001 + 1.5e-3)).abs() < 1e-12);
    }

    #[test]
    fn bump_raises_surface() {
        let bumps = [Bump { x: 0.0, y: 0.0, height: 0.01, sigma: 0.02 }];
        let (depth, n) = surface_penetration(&Pose::identity(), &bumps, &Vector3::new(0.0, 0.0, 0.005));
        assert!((depth - 0.005).abs() < 1e-12);
        assert!((n - Vector3::z()).norm() < 1e-12);
        let (_, n) = surface_penetration(&Pose::identity(), &bumps, &Vector3::new(0.02, 0.0, 0.0));
        assert!(n.x > 0.0);
    }

    #[test]
    fn partner_interpolates_and_holds() {
        let profile = vec![
            PartnerKey { t: 1.0, force: [0.0; 3], offset: [0.0; 3] },
            PartnerKey { t: 2.0, force: [10.0, 0.0, 0.0], offset: [0.0; 3] },
        ];
        let (f, _) = interp_partner(&profile, 1.5);
        assert!((f.x - 5.0).abs() < 1e-12);
        assert_eq!(interp_partner(&profile, 0.0).0.x, 0.0);
        assert_eq!(interp_partner(&profile, 9.0).0.x, 10.0);
    }
}
