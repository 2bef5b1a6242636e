//! Live sessions over TCP.
//!
//! Every message is a 4-byte big-endian length followed by that many bytes
//! of UTF-8 JSON. Every message carries `"schema_version"`; a missing or
//! different version closes the session.
//!
//! Client to server:
//!
//! - `{"type": "master_input", "t", "mode", "x_M": [7], "v_M": [6], "K_H"}`
//!   applied at the first tick whose time reaches `t` (immediately if
//!   already past).
//! - `{"type": "control", "action"}` with `action` one of `pause`,
//!   `resume`, `toggle_mode`, `reset`, `stop`.
//!
//! Server to client:
//!
//! - `{"type": "hello", scenario, dt, decimation, ticks, arm_dofs, live}`
//!   on connect.
//! - `{"type": "step", ...StepRecord}` every `decimation` ticks.
//! - `{"type": "close", "code", "reason"}` before the server hangs up.
//!
//! One client at a time. The scenario idles at t = 0 until a client
//! connects and every connection starts a fresh session. Scripted
//! scenarios run their own input and reject `master_input`.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use fic_core::geom::{Pose, Twist};
use fic_core::master::ModeKind;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{SimError, SimResult};
use crate::input::{write_samples, InputConfig, MasterSample};
use crate::record::{StepRecord, TraceWriter, SCHEMA_VERSION};
use crate::sim::Simulation;

pub const DEFAULT_DECIMATION: u64 = 10;
/// Largest accepted frame (bytes).
pub const MAX_FRAME: usize = 1 << 20;
/// Telemetry frames buffered per client before the oldest are dropped.
pub const TELEMETRY_QUEUE: usize = 256;

const TIME_EPS: f64 = 1e-9;
const IDLE_SLEEP: Duration = Duration::from_millis(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Pause,
    Resume,
    ToggleMode,
    Reset,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    MasterInput {
        t: f64,
        mode: ModeKind,
        #[serde(rename = "x_M")]
        x_m: [f64; 7],
        #[serde(rename = "v_M")]
        v_m: [f64; 6],
        #[serde(rename = "K_H")]
        k_h: f64,
    },
    Control {
        action: Action,
    },
}

/// Why the server ended a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseCode {
    Finished,
    Stopped,
    BadFrame,
    BadMessage,
    SchemaVersion,
    ScriptedSession,
    NumericalAbort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        scenario: String,
        dt: f64,
        decimation: u64,
        ticks: u64,
        arm_dofs: Vec<usize>,
        live: bool,
    },
    Step(StepRecord),
    Close {
        code: CloseCode,
        reason: String,
    },
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

/// Writes one framed message.
pub fn write_frame<W: Write, T: Serialize>(w: &mut W, body: &T) -> io::Result<()> {
    let json = serde_json::to_vec(&Envelope {
        schema_version: SCHEMA_VERSION,
        body,
    })
    .map_err(io::Error::other)?;
    let len = u32::try_from(json.len()).map_err(io::Error::other)?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&json)?;
    w.flush()
}

/// Reads one frame's bytes; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Decodes a frame, checking the schema version.
pub fn decode<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, (CloseCode, String)> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| (CloseCode::BadMessage, e.to_string()))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err((
                CloseCode::SchemaVersion,
                format!("schema_version {v}, server speaks {SCHEMA_VERSION}"),
            ))
        }
        None => return Err((CloseCode::SchemaVersion, "schema_version missing".into())),
    }
    serde_json::from_value(value).map_err(|e| (CloseCode::BadMessage, e.to_string()))
}

impl ClientMessage {
    fn sample(&self) -> Result<MasterSample, String> {
        match self {
            ClientMessage::MasterInput {
                t,
                mode,
                x_m,
                v_m,
                k_h,
            } => {
                if !(t.is_finite() && k_h.is_finite() && v_m.iter().all(|v| v.is_finite())) {
                    return Err("master_input has non-finite values".into());
                }
                Ok(MasterSample {
                    t: *t,
                    mode: *mode,
                    x_m: Pose::from_array(*x_m).map_err(|e| e.to_string())?,
                    v_m: Twist::new(
                        Vector3::new(v_m[0], v_m[1], v_m[2]),
                        Vector3::new(v_m[3], v_m[4], v_m[5]),
                    ),
                    k_h: *k_h,
                })
            }
            ClientMessage::Control { .. } => Err("not an input".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServeOptions {
    pub decimation: u64,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    /// Where each session's trace and input log go, if anywhere.
    pub out_dir: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            decimation: DEFAULT_DECIMATION,
            speed: 1.0,
            out_dir: None,
        }
    }
}

/// Outcome of one session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionSummary {
    pub code: CloseCode,
    pub ticks: u64,
    /// Inputs that arrived after the tick they were stamped for.
    pub late_inputs: u64,
    pub trace: Option<PathBuf>,
    pub input_log: Option<PathBuf>,
}

/// Bounded telemetry queue; pushing onto a full queue drops the oldest.
struct Outbox {
    queue: Mutex<(VecDeque<ServerMessage>, bool)>,
    ready: Condvar,
}

impl Outbox {
    fn new() -> Self {
        Self {
            queue: Mutex::new((VecDeque::new(), false)),
            ready: Condvar::new(),
        }
    }

    fn push(&self, m: ServerMessage) {
        let mut q = self.queue.lock().unwrap_or_else(|p| p.into_inner());
        if q.0.len() >= TELEMETRY_QUEUE {
            q.0.pop_front();
        }
        q.0.push_back(m);
        self.ready.notify_one();
    }

    fn close(&self) {
        let mut q = self.queue.lock().unwrap_or_else(|p| p.into_inner());
        q.1 = true;
        self.ready.notify_one();
    }

    /// Next message; `None` once closed and drained.
    fn pop(&self) -> Option<ServerMessage> {
        let mut q = self.queue.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if let Some(m) = q.0.pop_front() {
                return Some(m);
            }
            if q.1 {
                return None;
            }
            q = self.ready.wait(q).unwrap_or_else(|p| p.into_inner());
        }
    }
}

enum Inbound {
    Message(ClientMessage),
    Violation(CloseCode, String),
    Disconnected,
}

fn spawn_reader(mut stream: TcpStream) -> Receiver<Inbound> {
    let (tx, rx) = mpsc::sync_channel(1024);
    thread::spawn(move || loop {
        let msg = match read_frame(&mut stream) {
            Ok(Some(bytes)) => match decode::<ClientMessage>(&bytes) {
                Ok(m) => Inbound::Message(m),
                Err((code, reason)) => Inbound::Violation(code, reason),
            },
            Ok(None) => Inbound::Disconnected,
            Err(e) => Inbound::Violation(CloseCode::BadFrame, e.to_string()),
        };
        let last = !matches!(msg, Inbound::Message(_));
        if tx.send(msg).is_err() || last {
            return;
        }
    });
    rx
}

fn spawn_writer(mut stream: TcpStream, outbox: Arc<Outbox>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        while let Some(m) = outbox.pop() {
            if write_frame(&mut stream, &m).is_err() {
                return;
            }
        }
        let _ = stream.shutdown(std::net::Shutdown::Both);
    })
}

/// A bound server for one scenario.
pub struct Server {
    cfg: ScenarioConfig,
    listener: TcpListener,
    options: ServeOptions,
}

impl Server {
    pub fn bind(cfg: &ScenarioConfig, addr: impl ToSocketAddrs, options: ServeOptions) -> SimResult<Self> {
        cfg.validate()?;
        if options.decimation == 0 || !(options.speed > 0.0 && options.speed.is_finite()) {
            return Err(SimError::config("decimation must be >= 1 and speed > 0"));
        }
        let listener = TcpListener::bind(addr)
            .map_err(|e| SimError::config(format!("cannot bind: {e}")))?;
        Ok(Self {
            cfg: cfg.clone(),
            listener,
            options,
        })
    }

    pub fn local_addr(&self) -> SimResult<SocketAddr> {
        self.listener
            .local_addr()
            .map_err(|e| SimError::Protocol(e.to_string()))
    }

    /// Serves sessions one after another; stops after `limit` sessions if
    /// given.
    pub fn run(&self, limit: Option<usize>) -> SimResult<Vec<SessionSummary>> {
        let mut done = Vec::new();
        for (i, stream) in self.listener.incoming().enumerate() {
            let stream = stream.map_err(|e| SimError::Protocol(e.to_string()))?;
            done.push(self.session(stream, i)?);
            if limit.is_some_and(|l| done.len() >= l) {
                break;
            }
        }
        Ok(done)
    }

    fn session(&self, stream: TcpStream, index: usize) -> SimResult<SessionSummary> {
        let proto = |e: io::Error| SimError::Protocol(e.to_string());
        stream.set_nodelay(true).map_err(proto)?;
        let inbound = spawn_reader(stream.try_clone().map_err(proto)?);
        let outbox = Arc::new(Outbox::new());
        let writer = spawn_writer(stream, Arc::clone(&outbox));

        let mut session = Session::new(&self.cfg, &self.options, index)?;
        outbox.push(ServerMessage::Hello {
            scenario: self.cfg.name.clone(),
            dt: self.cfg.dt,
            decimation: self.options.decimation,
            ticks: self.cfg.ticks(),
            arm_dofs: session.sim.dofs(),
            live: session.live,
        });
        let (code, reason) = session.run(&inbound, &outbox);
        outbox.push(ServerMessage::Close {
            code,
            reason: reason.clone(),
        });
        outbox.close();
        let _ = writer.join();
        session.finish(code, reason)
    }
}

struct Session {
    sim: Simulation,
    live: bool,
    dt: f64,
    decimation: u64,
    speed: f64,
    pending: VecDeque<MasterSample>,
    current: MasterSample,
    log: Vec<MasterSample>,
    late: u64,
    writer: Option<TraceWriter>,
    trace_path: Option<PathBuf>,
    log_path: Option<PathBuf>,
    cfg: ScenarioConfig,
    error: Option<SimError>,
}

impl Session {
    fn new(cfg: &ScenarioConfig, options: &ServeOptions, index: usize) -> SimResult<Self> {
        let sim = Simulation::new(cfg)?;
        let live = matches!(cfg.master.input, InputConfig::Live);
        let (writer, trace_path, log_path) = match &options.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
                let stem = format!("{}.session{index}", cfg.name);
                let trace = dir.join(format!("{stem}.csv"));
                let log = dir.join(format!("{stem}.input.csv"));
                let w = TraceWriter::create(&trace, cfg, &sim.dofs())?;
                (Some(w), Some(trace), Some(log))
            }
            None => (None, None, None),
        };
        Ok(Self {
            live,
            dt: cfg.dt,
            decimation: options.decimation,
            speed: options.speed,
            pending: VecDeque::new(),
            current: MasterSample::rest(0.0),
            log: Vec::new(),
            late: 0,
            writer,
            trace_path,
            log_path,
            cfg: cfg.clone(),
            error: None,
            sim,
        })
    }

    fn reset(&mut self) -> SimResult<()> {
        self.sim = Simulation::new(&self.cfg)?;
        self.pending.clear();
        self.current = MasterSample::rest(0.0);
        self.log.clear();
        if let (Some(path), Some(_)) = (&self.trace_path, &self.writer) {
            self.writer = Some(TraceWriter::create(path, &self.cfg, &self.sim.dofs())?);
        }
        Ok(())
    }

    fn queue_input(&mut self, s: MasterSample) {
        // Inputs stamped earlier than one already queued replace the tail.
        while self.pending.back().is_some_and(|p| p.t >= s.t) {
            self.pending.pop_back();
        }
        if s.t < self.sim.time() - TIME_EPS {
            self.late += 1;
        }
        self.pending.push_back(s);
    }

    /// Runs until the client leaves, misbehaves, or the scenario ends.
    fn run(&mut self, inbound: &Receiver<Inbound>, outbox: &Outbox) -> (CloseCode, String) {
        let mut paused = false;
        let mut anchor = Instant::now();
        let mut anchor_tick = 0u64;
        loop {
            loop {
                let msg = match inbound.try_recv() {
                    Ok(m) => m,
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => {
                        return (CloseCode::Stopped, "client disconnected".into())
                    }
                };
                match msg {
                    Inbound::Disconnected => {
                        return (CloseCode::Stopped, "client disconnected".into())
                    }
                    Inbound::Violation(code, reason) => return (code, reason),
                    Inbound::Message(m @ ClientMessage::MasterInput { .. }) => {
                        if !self.live {
                            return (
                                CloseCode::ScriptedSession,
                                "scenario input is scripted".into(),
                            );
                        }
                        match m.sample() {
                            Ok(s) => self.queue_input(s),
                            Err(reason) => return (CloseCode::BadMessage, reason),
                        }
                    }
                    Inbound::Message(ClientMessage::Control { action }) => match action {
                        Action::Pause => paused = true,
                        Action::Resume => {
                            paused = false;
                            anchor = Instant::now();
                            anchor_tick = self.sim.tick();
                        }
                        Action::ToggleMode => {
                            self.sim.toggle_mode();
                            self.current.mode = self.sim.mode();
                        }
                        Action::Reset => {
                            if let Err(e) = self.reset() {
                                let reason = e.to_string();
                                self.error = Some(e);
                                return (CloseCode::NumericalAbort, reason);
                            }
                            anchor = Instant::now();
                            anchor_tick = 0;
                        }
                        Action::Stop => return (CloseCode::Stopped, "stop requested".into()),
                    },
                }
            }
            if self.sim.finished() {
                return (CloseCode::Finished, "scenario complete".into());
            }
            if paused {
                thread::sleep(IDLE_SLEEP);
                continue;
            }
            let due = anchor
                + Duration::from_secs_f64(
                    (self.sim.tick() - anchor_tick) as f64 * self.dt / self.speed,
                );
            let now = Instant::now();
            if now < due {
                thread::sleep((due - now).min(IDLE_SLEEP));
                continue;
            }
            match self.tick() {
                Ok(record) => {
                    if record.tick % self.decimation == 0 {
                        outbox.push(ServerMessage::Step(record));
                    }
                }
                Err(e) => {
                    let reason = e.to_string();
                    self.error = Some(e);
                    return (CloseCode::NumericalAbort, reason);
                }
            }
        }
    }

    fn tick(&mut self) -> SimResult<StepRecord> {
        let t = self.sim.time();
        if self.live {
            while self.pending.front().is_some_and(|s| s.t <= t + TIME_EPS) {
                if let Some(s) = self.pending.pop_front() {
                    self.current = s;
                }
            }
        }
        let record = if self.live {
            let sample = self.current;
            let r = self.sim.step(Some(&sample))?;
            // Effective mode, so the log replays toggles too.
            self.log.push(MasterSample {
                t,
                mode: self.sim.mode(),
                ..sample
            });
            r
        } else {
            self.sim.step(None)?
        };
        if let Some(w) = self.writer.as_mut() {
            w.write(&record)?;
        }
        Ok(record)
    }

    fn finish(self, code: CloseCode, reason: String) -> SimResult<SessionSummary> {
        let ticks = self.sim.tick();
        let trace = match self.writer {
            Some(w) => {
                let abort = (code == CloseCode::NumericalAbort).then_some(reason);
                Some(w.finish(abort)?)
            }
            None => None,
        };
        let input_log = match (&self.log_path, self.live) {
            (Some(p), true) => {
                write_samples(p, &self.log)?;
                Some(p.clone())
            }
            _ => None,
        };
        if let Some(e) = self.error {
            if !matches!(e, SimError::Numerical { .. }) {
                return Err(e);
            }
        }
        Ok(SessionSummary {
            code,
            ticks,
            late_inputs: self.late,
            trace,
            input_log,
        })
    }
}

/// Scenario that replays a recorded session headlessly: the input log
/// becomes a CSV source and the duration covers the recorded ticks.
pub fn replay_config(cfg: &ScenarioConfig, input_log: &Path, ticks: u64) -> ScenarioConfig {
    let mut replay = cfg.clone();
    replay.master.input = InputConfig::Csv {
        path: input_log.to_path_buf(),
    };
    replay.duration = ticks as f64 * cfg.dt;
    replay.base_dir = None;
    replay
}

/// Binds `port` on localhost and serves until interrupted.
pub fn serve(cfg: &ScenarioConfig, port: u16, options: ServeOptions) -> SimResult<()> {
    let server = Server::bind(cfg, ("127.0.0.1", port), options)?;
    server.run(None).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let msg = ClientMessage::Control {
            action: Action::ToggleMode,
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg).unwrap();
        let bytes = read_frame(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(decode::<ClientMessage>(&bytes).unwrap(), msg);
    }

    #[test]
    fn version_is_mandatory() {
        let bare = br#"{"type":"control","action":"pause"}"#;
        assert_eq!(decode::<ClientMessage>(bare).unwrap_err().0, CloseCode::SchemaVersion);
        let wrong = br#"{"schema_version":99,"type":"control","action":"pause"}"#;
        assert_eq!(decode::<ClientMessage>(wrong).unwrap_err().0, CloseCode::SchemaVersion);
        let junk = br#"{"schema_version":1,"type":"dance"}"#;
        assert_eq!(decode::<ClientMessage>(junk).unwrap_err().0, CloseCode::BadMessage);
    }

    #[test]
    fn outbox_drops_oldest() {
        let o = Outbox::new();
        for i in 0..TELEMETRY_QUEUE + 5 {
            o.push(ServerMessage::Close {
                code: CloseCode::Finished,
                reason: i.to_string(),
            });
        }
        o.close();
        match o.pop() {
            Some(ServerMessage::Close { reason, .. }) => assert_eq!(reason, "5"),
            other => panic!("{other:?}"),
        }
    }
}
