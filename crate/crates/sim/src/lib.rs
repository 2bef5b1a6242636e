//! Scenario runner for the fractal impedance teleoperation stack: plant,
//! environments, delay channel, traces, metrics and the live session
//! server.

pub mod channel;
pub mod config;
pub mod environment;
pub mod error;
pub mod input;
pub mod metrics;
pub mod model;
pub mod record;
pub mod serve;
pub mod sim;

pub use config::ScenarioConfig;
pub use error::{SimError, SimResult};
pub use metrics::{compute as compute_metrics, Metrics};
pub use record::{StepRecord, Trace};
pub use sim::{run_in_memory, run_scenario, run_with, Simulation};
