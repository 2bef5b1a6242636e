//! Fixed-step master–replica loop.
//!
//! Each tick: master input → forward channel → admittance and command
//! fusion → motion adaptation → replica torque → plant substeps with the
//! environment in the loop → sensed wrench → backward channel → haptics.

use std::path::{Path, PathBuf};

use fic_core::adaptation::{
    apply_solution, build_problem, solve_sqp_step, ArmTask, DesiredState, GraspSpec, SolveStatus,
};
use fic_core::fic::{CartesianNlpd, CartesianPd, PdParams};
use fic_core::geom::{pose_error, Frame, Pose, Twist, Wrench};
use fic_core::master::{MasterStation, ModeKind};
use fic_core::replica::{
    admittance_step, estimate_interaction, estimate_object_interaction, fuse_command,
    replica_torque, AdmittanceState, RelativeTask, ReplicaCommand, TorqueOptions,
};
use fic_core::robot::{
    advance, forward_kinematics, jacobian_relative, jacobian_world, kinetic_energy,
    potential_energy, relative_pose, ArmModel, ArmState,
};
use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector6};

use crate::channel::DelayChannel;
use crate::config::ScenarioConfig;
use crate::environment::{Environment, ToolSample};
use crate::error::{SimError, SimResult};
use crate::input::{Hand, InputSource, MasterSample};
use crate::record::{ArmRecord, StepRecord, TraceWriter};

const SCHEDULE_EPS: f64 = 1e-9;

/// Streams of the two channel directions under one seed.
const FORWARD_STREAM: u64 = 1;
const BACKWARD_STREAM: u64 = 2;

fn vec6(w: &Wrench) -> [f64; 6] {
    let v = w.to_vector();
    [v[0], v[1], v[2], v[3], v[4], v[5]]
}

struct Bimanual {
    grasp: GraspSpec,
    /// Tool pose in the object frame, per arm.
    tool_in_object: [Pose; 2],
}

pub struct Simulation {
    cfg: ScenarioConfig,
    models: Vec<ArmModel>,
    states: Vec<ArmState>,
    nlpd: Vec<CartesianNlpd>,
    joint_pd: PdParams,
    relative_pd: CartesianPd,
    admittance: AdmittanceState,
    master: MasterStation,
    /// Orientation of the initial command; device axes are world axes and
    /// are carried into the command frame through it.
    device_frame: UnitQuaternion<f64>,
    hand: Option<Hand>,
    haptic: Wrench,
    input: InputSource,
    last_live_mode: Option<ModeKind>,
    fwd: DelayChannel<Pose>,
    back: DelayChannel<Wrench>,
    remote_command: Pose,
    remote_feedback: Wrench,
    desired: DesiredState,
    x_delta: Vec<Pose>,
    bimanual: Option<Bimanual>,
    env: Environment,
    sensed: Vec<Wrench>,
    label: String,
    schedule_next: usize,
    tick: u64,
    work_actuator: f64,
    work_env: f64,
    clamp_loss: f64,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig) -> SimResult<Self> {
        cfg.validate()?;
        let models = cfg.models()?;
        let states: Vec<ArmState> = cfg
            .arms
            .iter()
            .map(|a| ArmState::at_rest(DVector::from_vec(a.q0.clone())))
            .collect();
        let init = |e: fic_core::Error| SimError::config(format!("initial state: {e}"));
        let tools: Vec<Pose> = models
            .iter()
            .zip(&states)
            .map(|(m, s)| forward_kinematics(m, &s.q))
            .collect::<Result<_, _>>()
            .map_err(init)?;
        let cfg_err = |e: fic_core::Error| SimError::config(e.to_string());
        let nlpd = cfg.gains.cartesian_nlpd().map_err(cfg_err)?;

        let (origin, bimanual) = match &cfg.grasp {
            Some(g) => {
                let mid = (tools[0].translation + tools[1].translation) * 0.5;
                let object = Pose::from_translation(mid);
                let tool_in_object = [
                    object.inverse().compose(&tools[0]),
                    object.inverse().compose(&tools[1]),
                ];
                let grasp = GraspSpec {
                    mass: g.mass,
                    offsets: [tool_in_object[0].inverse(), tool_in_object[1].inverse()],
                    squeeze: g.squeeze,
                    gravity: models[0].gravity,
                };
                (object, Some(Bimanual { grasp, tool_in_object }))
            }
            None => (tools[0], None),
        };

        let a = &cfg.replica.admittance;
        let mut admittance = AdmittanceState::new(a.mass, a.inertia, Vector6::repeat(a.dv_max))
            .map_err(cfg_err)?;
        admittance.set_enabled(a.enabled);

        let mut desired = DesiredState::new(states.iter().map(|s| s.q.clone()).collect());
        if let Some(b) = &bimanual {
            let contacts = [&tools[0].translation, &tools[1].translation];
            desired.h = b.grasp.wrench_targets(contacts).map_err(init)?.to_vec();
        }

        let env = Environment::new(&cfg.environment, &tools, models[0].gravity)?;
        let n = models.len();
        Ok(Self {
            device_frame: origin.rotation,
            master: MasterStation::new(origin, nlpd.clone(), cfg.master.workspace),
            hand: cfg.master.hand.map(Hand::new),
            haptic: Wrench::zero(Frame::Master),
            input: InputSource::from_config(&cfg.master.input, cfg.base_dir.as_deref())?,
            last_live_mode: None,
            fwd: DelayChannel::new(&cfg.channel, FORWARD_STREAM)?,
            back: DelayChannel::new(&cfg.channel, BACKWARD_STREAM)?,
            remote_command: origin,
            remote_feedback: Wrench::zero(Frame::World),
            joint_pd: cfg.gains.joint_pd().map_err(cfg_err)?,
            relative_pd: cfg.gains.relative_pd().map_err(cfg_err)?,
            nlpd: vec![nlpd; n],
            admittance,
            desired,
            x_delta: tools,
            bimanual,
            env,
            sensed: vec![Wrench::zero(Frame::World); n],
            label: String::new(),
            schedule_next: 0,
            tick: 0,
            work_actuator: 0.0,
            work_env: 0.0,
            clamp_loss: 0.0,
            models,
            states,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt
    }

    pub fn finished(&self) -> bool {
        self.tick >= self.cfg.ticks()
    }

    pub fn dofs(&self) -> Vec<usize> {
        self.models.iter().map(ArmModel::dof).collect()
    }

    pub fn models(&self) -> &[ArmModel] {
        &self.models
    }

    pub fn states(&self) -> &[ArmState] {
        &self.states
    }

    pub fn desired(&self) -> &DesiredState {
        &self.desired
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn mode(&self) -> ModeKind {
        self.master.mode.kind()
    }

    /// Flips the master mode; takes effect on the next tick.
    pub fn toggle_mode(&mut self) {
        let next = self.master.mode.kind().toggled();
        self.master.set_mode(next);
    }

    fn numerical(&self, source: fic_core::Error) -> SimError {
        SimError::Numerical {
            tick: self.tick,
            source,
        }
    }

    fn apply_schedule(&mut self, t: f64) {
        while let Some(entry) = self.cfg.schedule.get(self.schedule_next) {
            if entry.t > t + SCHEDULE_EPS {
                break;
            }
            if let Some(l) = &entry.label {
                self.label = l.clone();
            }
            if let Some(on) = entry.admittance {
                self.admittance.set_enabled(on);
            }
            if let (Some(s), Some(b)) = (entry.squeeze, self.bimanual.as_mut()) {
                b.grasp.squeeze = s;
            }
            self.schedule_next += 1;
        }
    }

    fn tool_samples(&self) -> fic_core::Result<Vec<ToolSample>> {
        self.models
            .iter()
            .zip(&self.states)
            .map(|(m, s)| {
                let pose = forward_kinematics(m, &s.q)?;
                let v = jacobian_world(m, &s.q)? * &s.dq;
                Ok(ToolSample {
                    pose,
                    twist: Twist::from_vector(&Vector6::from_column_slice(v.as_slice())),
                })
            })
            .collect()
    }

    /// Device reading for this tick, after the hand model if any.
    fn device(&mut self, intent: MasterSample) -> MasterSample {
        let dt = self.cfg.dt;
        let substeps = self.cfg.substeps;
        match self.hand.as_mut() {
            Some(h) => h.step(&intent, &self.haptic, dt, substeps),
            None => intent,
        }
    }

    /// Interaction estimate fed to the admittance, world frame.
    fn interaction_estimate(&self, tools: &[Pose]) -> fic_core::Result<Wrench> {
        match &self.bimanual {
            Some(b) => {
                let origin = b.grasp.object_origin([&tools[0], &tools[1]]);
                let g = fic_core::adaptation::grasp_matrix(
                    &origin,
                    [&tools[0].translation, &tools[1].translation],
                )?;
                let w_g = Wrench::from_vector(Frame::Object, &b.grasp.gravity_wrench());
                let net = estimate_object_interaction(&g, &self.sensed[0], &self.sensed[1], &w_g)?;
                Ok(net.relabel(Frame::World))
            }
            None => {
                let h_d = Wrench::from_vector(Frame::World, &self.desired.h[0]);
                estimate_interaction(&self.sensed[0], &h_d.scale(-1.0))
            }
        }
    }

    /// Advances one tick. `live` replaces the configured input source.
    pub fn step(&mut self, live: Option<&MasterSample>) -> SimResult<StepRecord> {
        self.step_inner(live).map_err(|e| match e {
            StepError::Core(c) => self.numerical(c),
            StepError::Sim(s) => s,
        })
    }

    fn step_inner(&mut self, live: Option<&MasterSample>) -> Result<StepRecord, StepError> {
        let dt = self.cfg.dt;
        let t = self.time();
        self.apply_schedule(t);

        // Master station.
        let intent = match live {
            Some(s) => MasterSample { t, ..*s },
            None => self.input.sample(t),
        };
        match live {
            Some(s) => {
                if self.last_live_mode != Some(s.mode) {
                    self.master.set_mode(s.mode);
                    self.last_live_mode = Some(s.mode);
                }
            }
            None => self.master.set_mode(intent.mode),
        }
        let device = self.device(intent);
        let r0 = self.device_frame;
        let x_m = Pose::new(
            r0.inverse() * device.x_m.rotation * r0,
            r0.inverse() * device.x_m.translation,
        );
        self.master.set_input(x_m, device.v_m, device.k_h)?;
        let x_d = self.master.command(dt)?;

        // Forward channel.
        self.fwd.send(x_d, t);
        if let Some(cmd) = self.fwd.poll(t).pop() {
            self.remote_command = cmd;
        }

        // Admittance and command fusion.
        let tools: Vec<Pose> = self
            .models
            .iter()
            .zip(&self.states)
            .map(|(m, s)| forward_kinematics(m, &s.q))
            .collect::<Result<_, _>>()?;
        let h_est = self.interaction_estimate(&tools)?;
        self.admittance =
            admittance_step(&self.admittance, &h_est, &Wrench::zero(Frame::World), dt)?;
        let cmd = self.remote_command;
        let offset = Pose::new(
            cmd.rotation.inverse() * self.admittance.x_f.rotation * cmd.rotation,
            cmd.rotation.inverse() * self.admittance.x_f.translation,
        );
        let fused = fuse_command(&cmd, &offset, None);
        let mut x_delta: Vec<Pose> = match &self.bimanual {
            Some(b) => b.tool_in_object.iter().map(|p| fused.compose(p)).collect(),
            None => vec![fused],
        };

        // Motion adaptation.
        let tasks: Vec<ArmTask> = self
            .models
            .iter()
            .zip(&x_delta)
            .map(|(model, target)| ArmTask {
                model,
                target: *target,
            })
            .collect();
        let grasp = self.bimanual.as_ref().map(|b| b.grasp);
        let problem = build_problem(&tasks, &self.desired, grasp.as_ref(), &self.cfg.adaptation, dt)?;
        let sol = solve_sqp_step(&problem);
        if sol.status != SolveStatus::Infeasible {
            let models: Vec<&ArmModel> = self.models.iter().collect();
            self.desired = apply_solution(&models, &self.desired, &sol)?;
        }
        if sol.status != SolveStatus::Optimal {
            for (i, m) in self.models.iter().enumerate() {
                x_delta[i] = forward_kinematics(m, &self.desired.q[i])?;
            }
        }
        self.x_delta = x_delta;

        // Replica torque.
        let relative = match self.models.len() {
            2 => {
                let (ql, qr) = (&self.states[0].q, &self.states[1].q);
                let j_r = jacobian_relative(&self.models[0], &self.models[1], ql, qr)?;
                let dq = DVector::from_iterator(
                    ql.len() + qr.len(),
                    self.states[0].dq.iter().chain(self.states[1].dq.iter()).copied(),
                );
                let v = &j_r * dq;
                let x_r = relative_pose(&self.models[0], &self.models[1], ql, qr)?;
                let x_r_d = self.x_delta[0].inverse().compose(&self.x_delta[1]);
                Some((j_r, x_r, x_r_d, Twist::from_vector(&Vector6::from_column_slice(v.as_slice()))))
            }
            _ => None,
        };
        let mut torques = Vec::with_capacity(self.models.len());
        let mut offset_cols = 0;
        for i in 0..self.models.len() {
            let n = self.models[i].dof();
            let cols: Option<DMatrix<f64>> =
                relative.as_ref().map(|(j, ..)| j.columns(offset_cols, n).into_owned());
            offset_cols += n;
            let rel = match (&relative, &cols) {
                (Some((_, x_r, x_r_d, v_r)), Some(c)) => Some(RelativeTask {
                    j_r: c,
                    x_r_d,
                    x_r,
                    v_r,
                    pd: &self.relative_pd,
                }),
                _ => None,
            };
            let options = TorqueOptions {
                joint_pd: self.cfg.replica.joint_pd.then_some(&self.joint_pd),
                j_l: None,
                relative: rel,
            };
            let command = ReplicaCommand {
                x_delta: self.x_delta[i],
                h_d: Wrench::from_vector(Frame::World, &self.desired.h[i]),
                q_d: self.desired.q[i].clone(),
            };
            torques.push(replica_torque(
                &self.models[i],
                &self.states[i],
                &command,
                &mut self.nlpd[i],
                &options,
            )?);
        }

        // Plant with the environment in the loop.
        let substeps = self.cfg.substeps;
        let h = dt / substeps as f64;
        for s in 0..substeps {
            let samples = self.tool_samples()?;
            let contact = self.env.evaluate(t + s as f64 * h, &samples);
            self.env.commit(&contact);
            for (i, model) in self.models.iter().enumerate() {
                let tau = &torques[i].command;
                let rep = advance(model, &self.states[i], tau, &contact.wrenches[i], h)?;
                let w_act = tau.dot(&(&rep.state.q - &self.states[i].q));
                self.work_actuator += w_act;
                self.work_env += rep.work - w_act;
                self.clamp_loss += rep.clamp_loss;
                self.states[i] = rep.state;
            }
        }
        let samples = self.tool_samples()?;
        let contact = self.env.evaluate(t + dt, &samples);
        self.env.commit(&contact);
        self.sensed = contact.wrenches.clone();

        // Backward channel and haptics.
        let poses: Vec<Pose> = samples.iter().map(|s| s.pose).collect();
        let feedback = match &self.bimanual {
            Some(_) => self.interaction_estimate(&poses)?,
            None => self.sensed[0],
        };
        self.back.send(feedback, t);
        if let Some(w) = self.back.poll(t).pop() {
            self.remote_feedback = w;
        }
        let r0 = self.device_frame;
        let h_cmd = self.remote_feedback.rotated(&r0.inverse(), Frame::Master);
        self.haptic = self.master.haptics(&h_cmd)?.rotated(&r0, Frame::Master);

        // Telemetry.
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for (m, s) in self.models.iter().zip(&self.states) {
            kinetic += kinetic_energy(m, s)?;
            potential += potential_energy(m, &s.q)?;
        }
        let (rel_lin, rel_ang) = match &relative {
            Some(_) => {
                let x_r = relative_pose(
                    &self.models[0],
                    &self.models[1],
                    &self.states[0].q,
                    &self.states[1].q,
                )?;
                let x_r_d = self.x_delta[0].inverse().compose(&self.x_delta[1]);
                let e = pose_error(&x_r_d, &x_r);
                (e.fixed_rows::<3>(3).norm(), e.fixed_rows::<3>(0).norm())
            }
            None => (0.0, 0.0),
        };
        let arms = (0..self.models.len())
            .map(|i| ArmRecord {
                q: self.states[i].q.as_slice().to_vec(),
                dq: self.states[i].dq.as_slice().to_vec(),
                tau: torques[i].command.as_slice().to_vec(),
                x: samples[i].pose.to_array(),
                h_e: vec6(&self.sensed[i]),
                x_delta: self.x_delta[i].to_array(),
                stiffness: self.nlpd[i].stiffness(),
                saturated: torques[i].saturated,
            })
            .collect();
        let record = StepRecord {
            tick: self.tick,
            t,
            label: self.label.clone(),
            mode: self.master.mode.kind(),
            k_h: self.master.state.k_h,
            x_m: device.x_m.to_array(),
            x_d: x_d.to_array(),
            h_h: vec6(&self.haptic),
            arms,
            fwd_depth: self.fwd.depth(),
            back_depth: self.back.depth(),
            fwd_dropped: self.fwd.dropped(),
            back_dropped: self.back.dropped(),
            solver: sol.status,
            kkt_residual: if sol.kkt_residual.is_finite() { sol.kkt_residual } else { 0.0 },
            active: sol.active.len(),
            eq_residual: sol.equality_residual,
            iterations: sol.iterations,
            broken: self.env.broken(),
            load: contact.load,
            env_energy: contact.stored_energy,
            kinetic,
            potential,
            work_actuator: self.work_actuator,
            work_env: self.work_env,
            clamp_loss: self.clamp_loss,
            rel_lin,
            rel_ang,
        };
        if !record.is_finite() {
            return Err(StepError::Core(fic_core::Error::NonFinite("telemetry")));
        }
        self.tick += 1;
        Ok(record)
    }
}

enum StepError {
    Core(fic_core::Error),
    Sim(SimError),
}

impl From<fic_core::Error> for StepError {
    fn from(e: fic_core::Error) -> Self {
        StepError::Core(e)
    }
}

impl From<SimError> for StepError {
    fn from(e: SimError) -> Self {
        StepError::Sim(e)
    }
}

/// Runs a scripted scenario to completion, handing every record to `sink`.
pub fn run_with(
    cfg: &ScenarioConfig,
    mut sink: impl FnMut(&StepRecord) -> SimResult<()>,
) -> SimResult<()> {
    let mut sim = Simulation::new(cfg)?;
    if sim.input.is_live() {
        return Err(SimError::config("live input needs serve mode"));
    }
    while !sim.finished() {
        let r = sim.step(None)?;
        sink(&r)?;
    }
    Ok(())
}

/// Runs a scripted scenario and keeps every record in memory.
pub fn run_in_memory(cfg: &ScenarioConfig) -> SimResult<Vec<StepRecord>> {
    let mut out = Vec::with_capacity(cfg.ticks() as usize);
    run_with(cfg, |r| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Runs a scenario and writes `<out_dir>/<name>.csv` plus its sidecar.
/// A numerical abort still leaves the partial trace, marked incomplete.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: &Path) -> SimResult<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| SimError::io(out_dir, e))?;
    let path = out_dir.join(format!("{}.csv", cfg.name));
    let sim = Simulation::new(cfg)?;
    let mut writer = TraceWriter::create(&path, cfg, &sim.dofs())?;
    drop(sim);
    match run_with(cfg, |r| writer.write(r)) {
        Ok(()) => writer.finish(None),
        Err(e) => {
            writer.finish(Some(e.to_string()))?;
            Err(e)
        }
    }
}
