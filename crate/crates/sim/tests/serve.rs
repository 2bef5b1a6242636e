use std::io::Write;
use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use fic_core::geom::{Pose, Twist};
use fic_core::master::ModeKind;
use fic_sim::config::ScenarioConfig;
use fic_sim::input::{write_samples, InputConfig, MasterSample};
use fic_sim::record::Trace;
use fic_sim::serve::{
    decode, read_frame, replay_config, write_frame, Action, ClientMessage, CloseCode,
    ServeOptions, Server, ServerMessage, SessionSummary,
};
use fic_sim::{run_scenario, StepRecord};
use nalgebra::{UnitQuaternion, Vector3};

fn live(duration: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::preset("ultrasound").unwrap();
    cfg.name = "live".into();
    cfg.duration = duration;
    cfg.master.input = InputConfig::Live;
    cfg.schedule.clear();
    cfg
}

fn start(
    cfg: &ScenarioConfig,
    options: ServeOptions,
) -> (SocketAddr, thread::JoinHandle<Vec<SessionSummary>>) {
    let server = Server::bind(cfg, "127.0.0.1:0", options).unwrap();
    let addr = server.local_addr().unwrap();
    let handle = thread::spawn(move || server.run(Some(1)).unwrap());
    (addr, handle)
}

/// Reads every server message until the close frame.
fn drain(mut stream: TcpStream) -> Vec<ServerMessage> {
    let mut out = Vec::new();
    while let Ok(Some(bytes)) = read_frame(&mut stream) {
        let m: ServerMessage = decode(&bytes).unwrap();
        let last = matches!(m, ServerMessage::Close { .. });
        out.push(m);
        if last {
            break;
        }
    }
    out
}

fn steps(msgs: &[ServerMessage]) -> Vec<&StepRecord> {
    msgs.iter()
        .filter_map(|m| match m {
            ServerMessage::Step(r) => Some(r),
            _ => None,
        })
        .collect()
}

fn close_code(msgs: &[ServerMessage]) -> CloseCode {
    match msgs.last() {
        Some(ServerMessage::Close { code, .. }) => *code,
        other => panic!("no close frame: {other:?}"),
    }
}

fn send(stream: &mut TcpStream, m: &ClientMessage) {
    write_frame(stream, m).unwrap();
}

/// Circle in the device's horizontal plane, starting from rest.
fn circle(t: f64) -> MasterSample {
    if t <= 0.0 {
        return MasterSample::rest(0.0);
    }
    let (r, w) = (0.02, std::f64::consts::TAU);
    let p = Vector3::new(r * ((w * t).cos() - 1.0), r * (w * t).sin(), 0.0);
    let v = Vector3::new(-r * w * (w * t).sin(), r * w * (w * t).cos(), 0.0);
    MasterSample {
        t,
        mode: ModeKind::Position,
        x_m: Pose::new(UnitQuaternion::identity(), p),
        v_m: Twist::new(Vector3::zeros(), v),
        k_h: 0.5,
    }
}

fn input(s: &MasterSample) -> ClientMessage {
    let v = s.v_m.to_vector();
    ClientMessage::MasterInput {
        t: s.t,
        mode: s.mode,
        x_m: s.x_m.to_array(),
        v_m: [v[0], v[1], v[2], v[3], v[4], v[5]],
        k_h: s.k_h,
    }
}

fn assert_rows_match(a: &Trace, b: &Trace) {
    assert_eq!(a.columns, b.columns);
    assert_eq!(a.rows.len(), b.rows.len());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        for ((x, y), name) in ra.iter().zip(rb).zip(&a.columns) {
            match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert!((x - y).abs() <= 1e-9, "{name}: {x} vs {y}"),
                _ => assert_eq!(x, y, "{name}"),
            }
        }
    }
}

#[test]
fn scenario_idles_until_a_client_connects() {
    let cfg = live(0.2);
    let (addr, server) = start(
        &cfg,
        ServeOptions {
            decimation: 1,
            ..ServeOptions::default()
        },
    );
    thread::sleep(Duration::from_millis(300));
    let msgs = drain(TcpStream::connect(addr).unwrap());
    match &msgs[0] {
        ServerMessage::Hello {
            scenario,
            ticks,
            live,
            ..
        } => {
            assert_eq!(scenario, "live");
            assert_eq!(*ticks, 200);
            assert!(*live);
        }
        other => panic!("{other:?}"),
    }
    let s = steps(&msgs);
    assert_eq!(s[0].tick, 0);
    assert_eq!(s[0].t, 0.0);
    assert_eq!(close_code(&msgs), CloseCode::Finished);
    let summary = server.join().unwrap();
    assert_eq!(summary[0].ticks, 200);
}

#[test]
fn toggle_mode_shows_up_in_the_next_records() {
    let cfg = live(2.0);
    let (addr, server) = start(
        &cfg,
        ServeOptions {
            decimation: 1,
            ..ServeOptions::default()
        },
    );
    let stream = TcpStream::connect(addr).unwrap();
    let mut tx = stream.try_clone().unwrap();
    let reader = thread::spawn(move || drain(stream));
    thread::sleep(Duration::from_millis(300));
    send(
        &mut tx,
        &ClientMessage::Control {
            action: Action::ToggleMode,
        },
    );
    let msgs = reader.join().unwrap();
    server.join().unwrap();

    let s = steps(&msgs);
    assert_eq!(s[0].mode, ModeKind::Position);
    let first = s.iter().position(|r| r.mode == ModeKind::Velocity).unwrap();
    assert!(first > 0);
    assert!(s[first..].iter().all(|r| r.mode == ModeKind::Velocity));
    // Every tick was streamed, so the switch is visible on the record that
    // follows the last position-mode one.
    assert!(s.windows(2).all(|w| w[1].tick == w[0].tick + 1));
}

#[test]
fn live_circle_matches_headless_run() {
    let cfg = live(2.0);
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<MasterSample> = (0..200).map(|k| circle(k as f64 * 0.01)).collect();

    let (addr, server) = start(
        &cfg,
        ServeOptions {
            decimation: 10,
            speed: 1.0,
            out_dir: Some(dir.path().join("live")),
        },
    );
    let stream = TcpStream::connect(addr).unwrap();
    let mut tx = stream.try_clone().unwrap();
    let reader = thread::spawn(move || drain(stream));
    // 100 Hz client, each sample stamped 200 ms ahead of the wall clock.
    let t0 = Instant::now();
    for s in &samples {
        let due = Duration::from_secs_f64((s.t - 0.2).max(0.0));
        if let Some(wait) = due.checked_sub(t0.elapsed()) {
            thread::sleep(wait);
        }
        send(&mut tx, &input(s));
    }
    let msgs = reader.join().unwrap();
    let summary = server.join().unwrap().remove(0);
    assert_eq!(close_code(&msgs), CloseCode::Finished);
    assert_eq!(summary.code, CloseCode::Finished);
    // Only the opening rest sample can lose the race with tick 0.
    assert!(summary.late_inputs <= 1);
    assert_eq!(steps(&msgs).len(), 200);
    let live_trace = Trace::read(summary.trace.as_ref().unwrap()).unwrap();

    // Same circle from a CSV file.
    let csv = dir.path().join("circle.csv");
    write_samples(&csv, &samples).unwrap();
    let mut headless = cfg.clone();
    headless.name = "headless".into();
    headless.master.input = InputConfig::Csv { path: csv };
    let path = run_scenario(&headless, &dir.path().join("headless")).unwrap();
    assert_rows_match(&live_trace, &Trace::read(&path).unwrap());

    // And from the session's own input log.
    let replay = replay_config(&cfg, summary.input_log.as_ref().unwrap(), summary.ticks);
    let path = run_scenario(&replay, &dir.path().join("replay")).unwrap();
    assert_rows_match(&live_trace, &Trace::read(&path).unwrap());
}

#[test]
fn missing_schema_version_closes_the_session() {
    let (addr, server) = start(&live(5.0), ServeOptions::default());
    let mut stream = TcpStream::connect(addr).unwrap();
    let body = br#"{"type":"control","action":"pause"}"#;
    stream.write_all(&(body.len() as u32).to_be_bytes()).unwrap();
    stream.write_all(body).unwrap();
    let msgs = drain(stream);
    assert_eq!(close_code(&msgs), CloseCode::SchemaVersion);
    assert_eq!(server.join().unwrap()[0].code, CloseCode::SchemaVersion);
}

#[test]
fn malformed_message_closes_the_session() {
    let (addr, server) = start(&live(5.0), ServeOptions::default());
    let mut stream = TcpStream::connect(addr).unwrap();
    let body = br#"{"schema_version":1,"type":"master_input","t":0.0}"#;
    stream.write_all(&(body.len() as u32).to_be_bytes()).unwrap();
    stream.write_all(body).unwrap();
    let msgs = drain(stream);
    assert_eq!(close_code(&msgs), CloseCode::BadMessage);
    server.join().unwrap();
}

#[test]
fn scripted_scenario_rejects_master_input() {
    let mut cfg = ScenarioConfig::preset("scalpel").unwrap();
    cfg.duration = 5.0;
    let (addr, server) = start(&cfg, ServeOptions::default());
    let mut stream = TcpStream::connect(addr).unwrap();
    send(&mut stream, &input(&circle(0.1)));
    let msgs = drain(stream);
    match &msgs[0] {
        ServerMessage::Hello { live, .. } => assert!(!live),
        other => panic!("{other:?}"),
    }
    assert_eq!(close_code(&msgs), CloseCode::ScriptedSession);
    assert_eq!(server.join().unwrap()[0].code, CloseCode::ScriptedSession);
}

#[test]
fn stop_ends_the_session() {
    let (addr, server) = start(&live(30.0), ServeOptions::default());
    let mut stream = TcpStream::connect(addr).unwrap();
    send(
        &mut stream,
        &ClientMessage::Control {
            action: Action::Stop,
        },
    );
    let msgs = drain(stream);
    assert_eq!(close_code(&msgs), CloseCode::Stopped);
    assert!(server.join().unwrap()[0].ticks < 30_000);
}
