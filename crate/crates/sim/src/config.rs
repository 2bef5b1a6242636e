//! Scenario files.
//!
//! A scenario is one TOML document. Top-level keys: `name`, `description`,
//! `duration` (s), `dt` (s, default 0.001), `substeps` (plant steps per
//! tick, default 4). Tables:
//!
//! - `[[arms]]`: `model` (built-in name or path), `base` pose, `q0` (rad).
//! - `[gains]`: controller gains, tuning-table names (angles in degrees).
//! - `[replica]`: `joint_pd` and an `admittance` table
//!   (`enabled`, `mass`, `inertia`, `dv_max`).
//! - `[master]`: `workspace`, optional `hand`, and `input` with
//!   `source = "idle" | "keyframes" | "csv" | "live"`.
//! - `[adaptation]`: `weights` and `margins` of the motion adaptation.
//! - `[channel]`: `delay_ms` (one way), `jitter_ms`, `drop_rate`, `seed`.
//! - `[environment]`: `kind = "none" | "soft_phantom" | "human_partner" |
//!   "probe" | "brittle_object"` plus its parameters.
//! - `[grasp]` (two arms only): `mass` (kg) and `squeeze` (N).
//! - `[[schedule]]`: entries at time `t` setting any of `label`,
//!   `admittance`, `squeeze`.
//!
//! Relative paths resolve against the scenario file's directory.

use std::path::{Path, PathBuf};

use fic_core::adaptation::AdaptationConfig;
use fic_core::fic::FicGains;
use fic_core::master::Workspace;
use fic_core::replica::{DEFAULT_ADMITTANCE_INERTIA, DEFAULT_ADMITTANCE_MASS, DEFAULT_DV_MAX};
use fic_core::robot::ArmModel;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::environment::EnvironmentConfig;
use crate::error::{SimError, SimResult};
use crate::input::{HandConfig, InputConfig};
use crate::model::{load_model, PoseSpec};

const PRESETS: &[(&str, &str)] = &[
    ("scalpel", include_str!("../scenarios/scalpel.cfg")),
    ("rehab", include_str!("../scenarios/rehab.cfg")),
    ("ultrasound", include_str!("../scenarios/ultrasound.cfg")),
    ("bimanual", include_str!("../scenarios/bimanual.cfg")),
];

fn default_dt() -> f64 {
    1e-3
}

fn default_substeps() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub model: String,
    #[serde(default)]
    pub base: PoseSpec,
    pub q0: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmittanceConfig {
    pub enabled: bool,
    /// kg
    pub mass: f64,
    /// kg·m²
    pub inertia: f64,
    /// Per-tick twist change limit, same value on every axis.
    pub dv_max: f64,
}

impl Default for AdmittanceConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            mass: DEFAULT_ADMITTANCE_MASS,
            inertia: DEFAULT_ADMITTANCE_INERTIA,
            dv_max: DEFAULT_DV_MAX,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicaConfig {
    pub joint_pd: bool,
    pub admittance: AdmittanceConfig,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        Self {
            joint_pd: true,
            admittance: AdmittanceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterConfig {
    pub workspace: Workspace,
    pub hand: Option<HandConfig>,
    pub input: InputConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspConfig {
    /// kg
    pub mass: f64,
    /// N
    #[serde(default)]
    pub squeeze: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub t: f64,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub admittance: Option<bool>,
    #[serde(default)]
    pub squeeze: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub arms: Vec<ArmConfig>,
    #[serde(default)]
    pub gains: FicGains,
    #[serde(default)]
    pub replica: ReplicaConfig,
    #[serde(default)]
    pub master: MasterConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub grasp: Option<GraspConfig>,
    #[serde(default)]
    pub schedule: Vec<ScheduleEntry>,
    /// Directory relative paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn parse(text: &str, base_dir: Option<&Path>) -> SimResult<Self> {
        let mut cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| SimError::config(e.to_string()))?;
        cfg.base_dir = base_dir.map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a scenario file, or a preset when `reference` names one and no
    /// such file exists.
    pub fn load(reference: &str) -> SimResult<Self> {
        let path = Path::new(reference);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
            return Self::parse(&text, path.parent());
        }
        let stem = reference.strip_suffix(".cfg").unwrap_or(reference);
        match PRESETS.iter().find(|(n, _)| *n == stem) {
            Some((_, text)) => Self::parse(text, None),
            None => Err(SimError::config(format!(
                "no scenario file or preset named '{reference}'"
            ))),
        }
    }

    pub fn preset(name: &str) -> SimResult<Self> {
        match PRESETS.iter().find(|(n, _)| *n == name) {
            Some((_, text)) => Self::parse(text, None),
            None => Err(SimError::config(format!("no preset named '{name}'"))),
        }
    }

    pub fn ticks(&self) -> u64 {
        (self.duration / self.dt).round() as u64
    }

    pub fn models(&self) -> SimResult<Vec<ArmModel>> {
        self.arms
            .iter()
            .map(|a| {
                let m = load_model(&a.model, self.base_dir.as_deref())?;
                Ok(m.with_base(&a.base.to_pose()))
            })
            .collect()
    }

    /// Every constraint that can be checked before tick 0.
    pub fn validate(&self) -> SimResult<()> {
        if !(self.dt > 0.0 && self.dt <= 5e-3) {
            return Err(SimError::config(format!("dt = {} outside (0, 5e-3]", self.dt)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::config("duration must be positive"));
        }
        if self.substeps == 0 || self.substeps > 64 {
            return Err(SimError::config("substeps must lie in 1..=64"));
        }
        if self.arms.is_empty() || self.arms.len() > 2 {
            return Err(SimError::config("one or two arms required"));
        }
        let models = self.models()?;
        for (i, (arm, model)) in self.arms.iter().zip(&models).enumerate() {
            if arm.q0.len() != model.dof() {
                return Err(SimError::config(format!(
                    "arms[{i}].q0 has {} entries, model '{}' has {} joints",
                    arm.q0.len(),
                    arm.model,
                    model.dof()
                )));
            }
            for (j, (q, joint)) in arm.q0.iter().zip(&model.joints).enumerate() {
                if !(joint.q_min..=joint.q_max).contains(q) {
                    return Err(SimError::config(format!(
                        "arms[{i}].q0[{j}] = {q} outside joint limits"
                    )));
                }
            }
        }
        self.gains
            .validate()
            .map_err(|e| SimError::config(format!("gains: {e}")))?;
        self.adaptation
            .validate()
            .map_err(|e| SimError::config(format!("adaptation: {e}")))?;
        let adm = &self.replica.admittance;
        if !(adm.mass > 0.0 && adm.inertia > 0.0 && adm.dv_max >= 0.0) {
            return Err(SimError::config("replica.admittance needs positive mass and inertia"));
        }
        let ws = &self.master.workspace;
        if !(ws.linear_radius >= 0.0 && ws.angular_radius >= 0.0) {
            return Err(SimError::config("master.workspace radii must be >= 0"));
        }
        if let Some(h) = &self.master.hand {
            h.validate()?;
        }
        self.channel.validate()?;
        self.environment.validate(self.arms.len())?;
        if let Some(g) = &self.grasp {
            if self.arms.len() != 2 {
                return Err(SimError::config("a grasp needs two arms"));
            }
            if !(g.mass >= 0.0 && g.squeeze >= 0.0) {
                return Err(SimError::config("grasp mass and squeeze must be >= 0"));
            }
        }
        if self.schedule.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(SimError::config("schedule times must not decrease"));
        }
        if self.schedule.iter().any(|s| s.squeeze.is_some()) && self.grasp.is_none() {
            return Err(SimError::config("schedule sets squeeze without a grasp"));
        }
        crate::input::InputSource::from_config(&self.master.input, self.base_dir.as_deref())?;
        Ok(())
    }
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// `(name, description)` of every preset.
pub fn list_presets() -> Vec<(String, String)> {
    PRESETS
        .iter()
        .map(|(n, _)| {
            let d = ScenarioConfig::preset(n)
                .map(|c| c.description)
                .unwrap_or_default();
            (n.to_string(), d)
        })
        .collect()
}
