//! Master device input: scripted keyframes, recorded CSV samples, and an
//! optional model of the operator's hand holding the device.

use std::path::{Path, PathBuf};

use fic_core::geom::{pose_error, so3_exp, Pose, Twist, Wrench};
use fic_core::master::ModeKind;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

/// Release tolerance for sample-and-hold lookups.
const TIME_EPS: f64 = 1e-9;

/// One device reading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MasterSample {
    pub t: f64,
    pub mode: ModeKind,
    pub x_m: Pose,
    pub v_m: Twist,
    pub k_h: f64,
}

impl MasterSample {
    pub fn rest(t: f64) -> Self {
        Self {
            t,
            mode: ModeKind::Position,
            x_m: Pose::identity(),
            v_m: Twist::zero(),
            k_h: 0.0,
        }
    }
}

/// Device displacement at `t`; linear interpolation between keys. Rotation
/// is a rotation vector interpolated componentwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keyframe {
    pub t: f64,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
    /// Mode from this key on; inherits the previous key's when absent.
    #[serde(default)]
    pub mode: Option<ModeKind>,
    /// Haptic gain at this key; inherits the previous key's when absent.
    #[serde(default)]
    pub k_h: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    /// Device held at home.
    #[default]
    Idle,
    Keyframes { keyframes: Vec<Keyframe> },
    /// Recorded samples, held until the next row.
    Csv { path: PathBuf },
    /// Supplied at run time (serve mode).
    Live,
}

/// Operator's hand as a mass–spring–damper pulling the device toward the
/// scripted pose while the haptic force pushes back. Translation only; the
/// device orientation follows the script.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandConfig {
    /// Device plus hand mass (kg).
    pub mass: f64,
    /// N/m
    pub stiffness: f64,
    /// N·s/m
    pub damping: f64,
}

impl HandConfig {
    pub fn validate(&self) -> SimResult<()> {
        if !(self.mass > 0.0 && self.stiffness >= 0.0 && self.damping >= 0.0) {
            return Err(SimError::config("master.hand needs mass > 0 and non-negative gains"));
        }
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 16] = [
    "t", "mode", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "wx", "wy", "wz", "vx", "vy", "vz",
    "k_h",
];

#[derive(Clone, Debug)]
pub enum InputSource {
    Idle,
    Keyframes(Vec<Keyframe>),
    Samples(Vec<MasterSample>),
    Live,
}

fn key_state(keys: &[Keyframe], i: usize) -> (ModeKind, f64) {
    let mut mode = ModeKind::Position;
    let mut k_h = 0.0;
    for k in &keys[..=i] {
        if let Some(m) = k.mode {
            mode = m;
        }
        if let Some(g) = k.k_h {
            k_h = g;
        }
    }
    (mode, k_h)
}

fn keyframe_sample(keys: &[Keyframe], t: f64) -> MasterSample {
    let last = keys.len() - 1;
    let i = keys.partition_point(|k| k.t <= t + TIME_EPS);
    let pose = |tr: Vector3<f64>, rv: Vector3<f64>| Pose::new(so3_exp(&rv), tr);
    if i == 0 || i > last {
        let idx = if i == 0 { 0 } else { last };
        let k = &keys[idx];
        let (mode, k_h) = key_state(keys, idx);
        return MasterSample {
            t,
            mode,
            x_m: pose(k.translation.into(), k.rotation.into()),
            v_m: Twist::zero(),
            k_h,
        };
    }
    let (a, b) = (&keys[i - 1], &keys[i]);
    let (mode, k_a) = key_state(keys, i - 1);
    let k_b = b.k_h.unwrap_or(k_a);
    let span = b.t - a.t;
    let s = ((t - a.t) / span).clamp(0.0, 1.0);
    let (ta, tb) = (Vector3::from(a.translation), Vector3::from(b.translation));
    let (ra, rb) = (Vector3::from(a.rotation), Vector3::from(b.rotation));
    MasterSample {
        t,
        mode,
        x_m: pose(ta + (tb - ta) * s, ra + (rb - ra) * s),
        v_m: Twist::new((rb - ra) / span, (tb - ta) / span),
        k_h: k_a + (k_b - k_a) * s,
    }
}

impl InputSource {
    pub fn from_config(cfg: &InputConfig, base: Option<&Path>) -> SimResult<Self> {
        match cfg {
            InputConfig::Idle => Ok(InputSource::Idle),
            InputConfig::Live => Ok(InputSource::Live),
            InputConfig::Keyframes { keyframes } => {
                if keyframes.is_empty() {
                    return Err(SimError::config("master.input.keyframes is empty"));
                }
                if keyframes.windows(2).any(|w| !(w[1].t > w[0].t)) {
                    return Err(SimError::config("keyframe times must increase"));
                }
                let finite = keyframes.iter().all(|k| {
                    k.t.is_finite()
                        && k.translation.iter().chain(&k.rotation).all(|v| v.is_finite())
                        && k.k_h.map_or(true, f64::is_finite)
                });
                if !finite {
                    return Err(SimError::config("keyframes must be finite"));
                }
                Ok(InputSource::Keyframes(keyframes.clone()))
            }
            InputConfig::Csv { path } => {
                let full = match base {
                    Some(dir) => dir.join(path),
                    None => path.clone(),
                };
                Ok(InputSource::Samples(read_samples(&full)?))
            }
        }
    }

    pub fn is_live(&self) -> bool {
        matches!(self, InputSource::Live)
    }

    /// Device reading at `t`. Live sources report rest; the caller feeds
    /// live samples directly.
    pub fn sample(&self, t: f64) -> MasterSample {
        match self {
            InputSource::Idle | InputSource::Live => MasterSample::rest(t),
            InputSource::Keyframes(keys) => keyframe_sample(keys, t),
            InputSource::Samples(rows) => {
                let i = rows.partition_point(|r| r.t <= t + TIME_EPS);
                if i == 0 {
                    MasterSample::rest(t)
                } else {
                    MasterSample { t, ..rows[i - 1] }
                }
            }
        }
    }
}

pub fn read_samples(path: &Path) -> SimResult<Vec<MasterSample>> {
    if !path.is_file() {
        return Err(SimError::config(format!(
            "master input file {} does not exist",
            path.display()
        )));
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| SimError::config(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| SimError::config(format!("{}: {e}", path.display())))?
        .clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(SimError::config(format!(
            "{}: header must be {}",
            path.display(),
            CSV_HEADER.join(",")
        )));
    }
    let mut rows: Vec<MasterSample> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| SimError::config(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| {
            SimError::config(format!("{} row {}: {what}", path.display(), line + 1))
        };
        let num = |i: usize| -> SimResult<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(&format!("column {} is not a finite number", CSV_HEADER[i])))
        };
        let mode: ModeKind = rec[1].trim().parse().map_err(|_| bad("unknown mode"))?;
        let mut pose = [0.0; 7];
        for (k, v) in pose.iter_mut().enumerate() {
            *v = num(2 + k)?;
        }
        let x_m = Pose::from_array(pose).map_err(|e| bad(&e.to_string()))?;
        let v_m = Twist::new(
            Vector3::new(num(9)?, num(10)?, num(11)?),
            Vector3::new(num(12)?, num(13)?, num(14)?),
        );
        let t = num(0)?;
        if rows.last().is_some_and(|r| !(t > r.t)) {
            return Err(bad("times must increase"));
        }
        rows.push(MasterSample {
            t,
            mode,
            x_m,
            v_m,
            k_h: num(15)?,
        });
    }
    Ok(rows)
}

/// Writes samples in the format [`read_samples`] accepts.
pub fn write_samples(path: &Path, rows: &[MasterSample]) -> SimResult<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| SimError::Trace(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| SimError::Trace(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.t.to_string(), r.mode.to_string()];
        rec.extend(r.x_m.to_array().iter().map(f64::to_string));
        rec.extend(r.v_m.to_vector().iter().map(f64::to_string));
        rec.push(r.k_h.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| SimError::io(path, e))
}

/// Device translation and velocity under the hand model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hand {
    pub config: HandConfig,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl Hand {
    pub fn new(config: HandConfig) -> Self {
        Self {
            config,
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
        }
    }

    /// Advances the device over `dt` (semi-implicit Euler in `substeps`)
    /// and returns the resulting device reading.
    pub fn step(
        &mut self,
        intent: &MasterSample,
        haptic: &Wrench,
        dt: f64,
        substeps: usize,
    ) -> MasterSample {
        let h = dt / substeps as f64;
        let c = &self.config;
        for _ in 0..substeps {
            let pull = (intent.x_m.translation - self.position) * c.stiffness
                + (intent.v_m.linear - self.velocity) * c.damping;
            let acc = (pull + haptic.force) / c.mass;
            self.velocity += acc * h;
            self.position += self.velocity * h;
        }
        MasterSample {
            x_m: Pose::new(intent.x_m.rotation, self.position),
            v_m: Twist::new(intent.v_m.angular, self.velocity),
            ..*intent
        }
    }

    /// Distance between the device and where the operator wants it.
    pub fn lag(&self, intent: &MasterSample) -> f64 {
        let e = pose_error(&intent.x_m, &Pose::new(intent.x_m.rotation, self.position));
        e.fixed_rows::<3>(3).norm()
    }
}
