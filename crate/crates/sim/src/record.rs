//! Per-tick telemetry and its on-disk form: a CSV trace with a JSON
//! sidecar holding the schema version and the scenario it came from.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fic_core::adaptation::SolveStatus;
use fic_core::master::ModeKind;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{SimError, SimResult};

pub const SCHEMA_VERSION: u32 = 1;

const POSE: [&str; 7] = ["qw", "qx", "qy", "qz", "tx", "ty", "tz"];
const WRENCH: [&str; 6] = ["mx", "my", "mz", "fx", "fy", "fz"];
const AXES: [&str; 6] = ["rx", "ry", "rz", "x", "y", "z"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    pub tau: Vec<f64>,
    pub x: [f64; 7],
    /// Wrench the environment applies to the tool.
    pub h_e: [f64; 6],
    pub x_delta: [f64; 7],
    /// Per-axis NLPD stiffness, angular first.
    pub stiffness: [f64; 6],
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub tick: u64,
    pub t: f64,
    pub label: String,
    pub mode: ModeKind,
    pub k_h: f64,
    pub x_m: [f64; 7],
    pub x_d: [f64; 7],
    pub h_h: [f64; 6],
    pub arms: Vec<ArmRecord>,
    pub fwd_depth: usize,
    pub back_depth: usize,
    pub fwd_dropped: u64,
    pub back_dropped: u64,
    pub solver: SolveStatus,
    pub kkt_residual: f64,
    pub active: usize,
    pub eq_residual: f64,
    pub iterations: usize,
    pub broken: bool,
    /// Compressive load on a held object (N).
    pub load: f64,
    pub env_energy: f64,
    pub kinetic: f64,
    pub potential: f64,
    /// Cumulative work of the joint torques (J).
    pub work_actuator: f64,
    /// Cumulative work of the environment on the arms (J).
    pub work_env: f64,
    /// Cumulative kinetic energy removed at joint stops (J).
    pub clamp_loss: f64,
    /// Relative pose error between the two tools (m, rad).
    pub rel_lin: f64,
    pub rel_ang: f64,
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::ClampedFeasible => "clamped_feasible",
        SolveStatus::Infeasible => "infeasible",
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

/// Column names for arms with the given joint counts.
pub fn columns(dofs: &[usize]) -> Vec<String> {
    let mut c: Vec<String> = ["tick", "t", "label", "mode", "k_h"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    c.extend(POSE.iter().map(|s| format!("xm_{s}")));
    c.extend(POSE.iter().map(|s| format!("xd_{s}")));
    c.extend(WRENCH.iter().map(|s| format!("hh_{s}")));
    for (a, &n) in dofs.iter().enumerate() {
        for name in ["q", "dq", "tau"] {
            c.extend((0..n).map(|j| format!("a{a}_{name}{j}")));
        }
        c.extend(POSE.iter().map(|s| format!("a{a}_x_{s}")));
        c.extend(WRENCH.iter().map(|s| format!("a{a}_he_{s}")));
        c.extend(POSE.iter().map(|s| format!("a{a}_xdelta_{s}")));
        c.extend(AXES.iter().map(|s| format!("a{a}_k_{s}")));
        c.push(format!("a{a}_saturated"));
    }
    c.extend(
        [
            "fwd_depth",
            "back_depth",
            "fwd_dropped",
            "back_dropped",
            "solver",
            "kkt_residual",
            "active",
            "eq_residual",
            "iterations",
            "broken",
            "load",
            "env_energy",
            "kinetic",
            "potential",
            "work_actuator",
            "work_env",
            "clamp_loss",
            "rel_lin",
            "rel_ang",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    c
}

impl StepRecord {
    pub fn dofs(&self) -> Vec<usize> {
        self.arms.iter().map(|a| a.q.len()).collect()
    }

    /// Values in [`columns`] order.
    pub fn values(&self) -> Vec<String> {
        let mut v = vec![
            self.tick.to_string(),
            num(self.t),
            self.label.clone(),
            self.mode.to_string(),
            num(self.k_h),
        ];
        v.extend(self.x_m.iter().map(|x| num(*x)));
        v.extend(self.x_d.iter().map(|x| num(*x)));
        v.extend(self.h_h.iter().map(|x| num(*x)));
        for a in &self.arms {
            for series in [&a.q, &a.dq, &a.tau] {
                v.extend(series.iter().map(|x| num(*x)));
            }
            v.extend(a.x.iter().map(|x| num(*x)));
            v.extend(a.h_e.iter().map(|x| num(*x)));
            v.extend(a.x_delta.iter().map(|x| num(*x)));
            v.extend(a.stiffness.iter().map(|x| num(*x)));
            v.push(flag(a.saturated));
        }
        v.extend([
            self.fwd_depth.to_string(),
            self.back_depth.to_string(),
            self.fwd_dropped.to_string(),
            self.back_dropped.to_string(),
            status_name(self.solver).to_string(),
            num(self.kkt_residual),
            self.active.to_string(),
            num(self.eq_residual),
            self.iterations.to_string(),
            flag(self.broken),
            num(self.load),
            num(self.env_energy),
            num(self.kinetic),
            num(self.potential),
            num(self.work_actuator),
            num(self.work_env),
            num(self.clamp_loss),
            num(self.rel_lin),
            num(self.rel_ang),
        ]);
        v
    }

    /// Every float in the record is finite.
    pub fn is_finite(&self) -> bool {
        let scalars = [
            self.t,
            self.k_h,
            self.kkt_residual,
            self.eq_residual,
            self.load,
            self.env_energy,
            self.kinetic,
            self.potential,
            self.work_actuator,
            self.work_env,
            self.clamp_loss,
            self.rel_lin,
            self.rel_ang,
        ];
        let arms = self.arms.iter().all(|a| {
            a.q.iter()
                .chain(&a.dq)
                .chain(&a.tau)
                .chain(&a.x)
                .chain(&a.h_e)
                .chain(&a.x_delta)
                .chain(&a.stiffness)
                .all(|v| v.is_finite())
        });
        arms && scalars
            .iter()
            .chain(&self.x_m)
            .chain(&self.x_d)
            .chain(&self.h_h)
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub dt: f64,
    /// Rows in the trace.
    pub ticks: u64,
    pub arm_dofs: Vec<usize>,
    pub columns: Vec<String>,
    /// False when the run aborted; `abort` then says why.
    pub complete: bool,
    pub abort: Option<String>,
    pub config: ScenarioConfig,
}

/// Sidecar path for a trace: `trace.csv` → `trace.json`.
pub fn sidecar_path(trace: &Path) -> PathBuf {
    trace.with_extension("json")
}

pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<File>,
    sidecar: Sidecar,
}

impl TraceWriter {
    pub fn create(path: &Path, cfg: &ScenarioConfig, dofs: &[usize]) -> SimResult<Self> {
        let file = File::create(path).map_err(|e| SimError::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            sidecar: Sidecar {
                schema_version: SCHEMA_VERSION,
                scenario: cfg.name.clone(),
                seed: cfg.channel.seed,
                dt: cfg.dt,
                ticks: 0,
                arm_dofs: dofs.to_vec(),
                columns: columns(dofs),
                complete: false,
                abort: None,
                config: cfg.clone(),
            },
        };
        let header = w.sidecar.columns.join(",");
        w.line(&header)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> SimResult<()> {
        writeln!(self.out, "{s}").map_err(|e| SimError::io(&self.path, e))
    }

    pub fn write(&mut self, r: &StepRecord) -> SimResult<()> {
        let row = r.values().join(",");
        self.line(&row)?;
        self.sidecar.ticks += 1;
        Ok(())
    }

    /// Flushes the trace and writes the sidecar. `abort` marks a run that
    /// stopped early.
    pub fn finish(mut self, abort: Option<String>) -> SimResult<PathBuf> {
        self.out.flush().map_err(|e| SimError::io(&self.path, e))?;
        self.sidecar.complete = abort.is_none();
        self.sidecar.abort = abort;
        let side = sidecar_path(&self.path);
        let json = serde_json::to_string_pretty(&self.sidecar)
            .map_err(|e| SimError::Trace(e.to_string()))?;
        std::fs::write(&side, json + "\n").map_err(|e| SimError::io(&side, e))?;
        Ok(self.path)
    }
}

/// A trace read back from disk.
#[derive(Clone, Debug)]
pub struct Trace {
    pub sidecar: Sidecar,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Trace {
    /// Reads a complete trace; truncated or aborted traces are rejected.
    pub fn read(path: &Path) -> SimResult<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| SimError::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| SimError::Trace(format!("{}: {e}", side.display())))?;
        if sidecar.schema_version != SCHEMA_VERSION {
            return Err(SimError::Trace(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                sidecar.schema_version
            )));
        }
        if !sidecar.complete {
            return Err(SimError::Trace(format!(
                "run did not complete: {}",
                sidecar.abort.as_deref().unwrap_or("unknown reason")
            )));
        }
        let raw = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        if !raw.ends_with('\n') {
            return Err(SimError::Trace("trace ends mid-row (truncated)".into()));
        }
        let mut reader = csv::ReaderBuilder::new().from_reader(raw.as_bytes());
        let columns: Vec<String> = reader
            .headers()
            .map_err(|e| SimError::Trace(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if columns != sidecar.columns {
            return Err(SimError::Trace("trace header does not match sidecar".into()));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| SimError::Trace(format!("malformed row: {e}")))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        if rows.len() as u64 != sidecar.ticks {
            return Err(SimError::Trace(format!(
                "{} rows but sidecar records {} (truncated)",
                rows.len(),
                sidecar.ticks
            )));
        }
        Ok(Self {
            sidecar,
            columns,
            rows,
        })
    }

    pub fn index(&self, name: &str) -> SimResult<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| SimError::Trace(format!("no column '{name}'")))
    }

    pub fn column(&self, name: &str) -> SimResult<Vec<f64>> {
        let i = self.index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                row[i].parse::<f64>().map_err(|_| {
                    SimError::Trace(format!("row {r}, column '{name}': not a number"))
                })
            })
            .collect()
    }

    pub fn text_column(&self, name: &str) -> SimResult<Vec<String>> {
        let i = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[i].clone()).collect())
    }
}
