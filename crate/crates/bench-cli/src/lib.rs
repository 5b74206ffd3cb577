//! Benchmark front end for the session-churn federated learning simulator:
//! settings resolution, experiment runs, and post-run reporting.

pub mod config;
pub mod metrics;
pub mod run;
pub mod tables;

/// How a command failed, which decides the process exit code: configuration
/// problems exit 2, everything after a valid configuration exits 3.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

/// Errors surfacing from a run are configuration failures when the settings
/// themselves can never work, runtime failures otherwise.
pub fn classify(error: fedsession::Error) -> Failure {
    use fedsession::Error::*;
    match error {
        InvalidConfig(_) | InfeasibleSchedule(_) | InfeasiblePartition(_) => {
            Failure::Config(error.to_string())
        }
        _ => Failure::Runtime(error.to_string()),
    }
}
