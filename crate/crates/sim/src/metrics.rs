//! Trace summaries: force percentiles, tracking, settling, energy
//! bookkeeping and per-phase windows taken from the schedule labels.

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::SimResult;
use crate::record::{columns, Sidecar, StepRecord, Trace, SCHEMA_VERSION};

pub const DEFAULT_SETTLE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForceStats {
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl ForceStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            p50: percentile(&v, 50.0),
            p95: percentile(&v, 95.0),
            max: v[v.len() - 1],
        }
    }
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub label: String,
    pub start: f64,
    pub end: f64,
    /// Largest tool force norm across arms, per tick.
    pub force: ForceStats,
    /// Largest distance of arm 0's tool from where it was at the window start.
    pub max_displacement: f64,
    pub saturation_ticks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverCounts {
    pub optimal: u64,
    pub clamped_feasible: u64,
    pub infeasible: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: String,
    pub ticks: u64,
    pub dt: f64,
    /// Tool force norm per arm.
    pub force: Vec<ForceStats>,
    /// Largest translational distance between commanded and actual tool (m).
    pub max_tracking_error: f64,
    pub settle_tolerance: f64,
    /// Time after which the tracking error stays within tolerance; `None`
    /// if it never does.
    pub settling_time: Option<f64>,
    /// Net work done by the environment on the arms over the run (J).
    pub interaction_work: f64,
    /// Peak of arm kinetic energy plus environment elastic energy (J).
    pub peak_replica_energy: f64,
    /// `|ΔE_plant − W_actuator − W_env + clamp loss|` over the total
    /// absolute work exchanged.
    pub energy_balance_residual: f64,
    pub saturation_ticks: u64,
    pub solver: SolverCounts,
    pub max_eq_residual: f64,
    pub max_relative_lin: f64,
    pub max_relative_ang: f64,
    pub peak_load: f64,
    pub broken: bool,
    pub phases: Vec<PhaseMetrics>,
}

impl Trace {
    /// Builds an in-memory trace from records, as if written and read back.
    pub fn from_records(cfg: &ScenarioConfig, records: &[StepRecord]) -> Self {
        let dofs = records.first().map(StepRecord::dofs).unwrap_or_default();
        let cols = columns(&dofs);
        Trace {
            sidecar: Sidecar {
                schema_version: SCHEMA_VERSION,
                scenario: cfg.name.clone(),
                seed: cfg.channel.seed,
                dt: cfg.dt,
                ticks: records.len() as u64,
                arm_dofs: dofs,
                columns: cols.clone(),
                complete: true,
                abort: None,
                config: cfg.clone(),
            },
            columns: cols,
            rows: records.iter().map(StepRecord::values).collect(),
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm3(a: &[f64], b: &[f64], c: &[f64], i: usize) -> f64 {
    (a[i] * a[i] + b[i] * b[i] + c[i] * c[i]).sqrt()
}

pub fn compute(trace: &Trace, settle_tolerance: f64) -> SimResult<Metrics> {
    let n = trace.rows.len();
    let arms = trace.sidecar.arm_dofs.len();
    let t = trace.column("t")?;

    let mut force_norms = Vec::with_capacity(arms);
    let mut tracking = vec![0.0; n];
    let mut saturated = vec![false; n];
    let mut positions = Vec::with_capacity(arms);
    for a in 0..arms {
        let f = |s: &str| trace.column(&format!("a{a}_{s}"));
        let (fx, fy, fz) = (f("he_fx")?, f("he_fy")?, f("he_fz")?);
        force_norms.push((0..n).map(|i| norm3(&fx, &fy, &fz, i)).collect::<Vec<_>>());
        let (x, y, z) = (f("x_tx")?, f("x_ty")?, f("x_tz")?);
        let (dx, dy, dz) = (f("xdelta_tx")?, f("xdelta_ty")?, f("xdelta_tz")?);
        for i in 0..n {
            let e = ((dx[i] - x[i]).powi(2) + (dy[i] - y[i]).powi(2) + (dz[i] - z[i]).powi(2)).sqrt();
            tracking[i] = f64::max(tracking[i], e);
        }
        for (i, s) in f("saturated")?.iter().enumerate() {
            saturated[i] |= *s != 0.0;
        }
        positions.push((x, y, z));
    }

    let settling_time = match tracking.iter().rposition(|e| *e > settle_tolerance) {
        None => Some(t.first().copied().unwrap_or(0.0)),
        Some(last) if last + 1 < n => Some(t[last + 1]),
        Some(_) => None,
    };

    let kinetic = trace.column("kinetic")?;
    let potential = trace.column("potential")?;
    let w_act = trace.column("work_actuator")?;
    let w_env = trace.column("work_env")?;
    let clamp = trace.column("clamp_loss")?;
    let env_energy = trace.column("env_energy")?;
    let (energy_balance_residual, interaction_work) = if n > 0 {
        let last = n - 1;
        let d_e = kinetic[last] + potential[last] - kinetic[0] - potential[0];
        let d_w = w_act[last] - w_act[0] + w_env[last] - w_env[0] - (clamp[last] - clamp[0]);
        let mut scale = 0.0;
        for i in 1..n {
            scale += (w_act[i] - w_act[i - 1]).abs() + (w_env[i] - w_env[i - 1]).abs();
        }
        let r = if scale > 0.0 { (d_e - d_w).abs() / scale } else { 0.0 };
        (r, w_env[last])
    } else {
        (0.0, 0.0)
    };
    let peak_replica_energy = (0..n).fold(0.0, |m: f64, i| m.max(kinetic[i] + env_energy[i]));

    let status = trace.text_column("solver")?;
    let count = |s: &str| status.iter().filter(|x| x.as_str() == s).count() as u64;
    let solver = SolverCounts {
        optimal: count("optimal"),
        clamped_feasible: count("clamped_feasible"),
        infeasible: count("infeasible"),
    };

    let labels = trace.text_column("label")?;
    let mut phases = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && labels[end + 1] == labels[start] {
            end += 1;
        }
        if !labels[start].is_empty() {
            let per_tick: Vec<f64> = (start..=end)
                .map(|i| force_norms.iter().fold(0.0, |m: f64, f| m.max(f[i])))
                .collect();
            let max_displacement = match positions.first() {
                Some((x, y, z)) => (start..=end).fold(0.0, |m: f64, i| {
                    let d = ((x[i] - x[start]).powi(2)
                        + (y[i] - y[start]).powi(2)
                        + (z[i] - z[start]).powi(2))
                    .sqrt();
                    m.max(d)
                }),
                None => 0.0,
            };
            phases.push(PhaseMetrics {
                label: labels[start].clone(),
                start: t[start],
                end: t[end],
                force: ForceStats::of(&per_tick),
                max_displacement,
                saturation_ticks: saturated[start..=end].iter().filter(|s| **s).count() as u64,
            });
        }
        start = end + 1;
    }

    Ok(Metrics {
        scenario: trace.sidecar.scenario.clone(),
        ticks: n as u64,
        dt: trace.sidecar.dt,
        force: force_norms.iter().map(|f| ForceStats::of(f)).collect(),
        max_tracking_error: tracking.iter().fold(0.0, |m: f64, e| m.max(*e)),
        settle_tolerance,
        settling_time,
        interaction_work,
        peak_replica_energy,
        energy_balance_residual,
        saturation_ticks: saturated.iter().filter(|s| **s).count() as u64,
        solver,
        max_eq_residual: max_abs(&trace.column("eq_residual")?),
        max_relative_lin: max_abs(&trace.column("rel_lin")?),
        max_relative_ang: max_abs(&trace.column("rel_ang")?),
        peak_load: max_abs(&trace.column("load")?),
        broken: trace.column("broken")?.iter().any(|b| *b != 0.0),
        phases,
    })
}

/// Reads a trace (and its sidecar) and summarizes it.
pub fn metrics_for_file(path: &std::path::Path, settle_tolerance: f64) -> SimResult<Metrics> {
    compute(&Trace::read(path)?, settle_tolerance)
}
