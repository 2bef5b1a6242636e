use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fic_sim::config::{list_presets, ScenarioConfig};
use fic_sim::metrics::{metrics_for_file, DEFAULT_SETTLE_TOLERANCE};
use fic_sim::serve::{serve, ServeOptions, DEFAULT_DECIMATION};
use fic_sim::{run_scenario, SimError};

#[derive(Parser)]
#[command(name = "fic-sim", version, about = "Master-replica teleoperation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario headless and write its trace.
    Run {
        /// Scenario file or preset name.
        config: String,
        /// Overrides the channel seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Summarize a trace as JSON.
    Metrics {
        trace: PathBuf,
        /// Tracking error band for the settling time (m).
        #[arg(long, default_value_t = DEFAULT_SETTLE_TOLERANCE)]
        settle_tol: f64,
    },
    /// Run a scenario in real time for a connected client.
    Serve {
        config: String,
        #[arg(long)]
        port: u16,
        /// Ticks per telemetry frame.
        #[arg(long, default_value_t = DEFAULT_DECIMATION)]
        decimation: u64,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Directory for session traces and input logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the built-in scenarios.
    ListScenarios,
}

fn load(config: &str, seed: Option<u64>) -> Result<ScenarioConfig, SimError> {
    let mut cfg = ScenarioConfig::load(config)?;
    if let Some(s) = seed {
        cfg.channel.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let path = run_scenario(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::Metrics { trace, settle_tol } => {
            let m = metrics_for_file(&trace, settle_tol)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Serve {
            config,
            port,
            decimation,
            speed,
            out,
        } => {
            let cfg = load(&config, None)?;
            eprintln!("serving {} on 127.0.0.1:{port}", cfg.name);
            serve(
                &cfg,
                port,
                ServeOptions {
                    decimation,
                    speed,
                    out_dir: out,
                },
            )?;
        }
        Command::ListScenarios => {
            for (name, description) in list_presets() {
                println!("{name:<12} {description}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<SimError>().map_or(1, SimError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
