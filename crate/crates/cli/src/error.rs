use std::path::Path;

use mfeq_core::mckv_sim::SimError;
use mfeq_core::verifier::VerifyError;
use mfeq_core::{ModelError, RiccatiError};
use serde_json::{json, Value};

/// Failure of a command, carrying the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or malformed input: exit 2.
    Input { kind: &'static str, message: String, detail: Value },
    /// Solver or simulation breakdown: exit 3.
    Numerical { kind: &'static str, message: String, detail: Value },
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError::Input { kind: "InvalidInput", message: message.into(), detail: Value::Null }
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Input { .. } => 2,
            CliError::Numerical { .. } => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input { message, .. } | CliError::Numerical { message, .. } => message,
        }
    }

    pub fn to_json(&self) -> Value {
        let (kind, detail) = match self {
            CliError::Input { kind, detail, .. } | CliError::Numerical { kind, detail, .. } => (kind, detail),
        };
        json!({ "exit_code": self.code(), "kind": kind, "message": self.message(), "detail": detail })
    }

    /// Best effort: a failure to write the error file is only logged.
    pub fn write(&self, dir: &Path) {
        let res = std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(dir.join("error.json"), serde_json::to_string_pretty(&self.to_json()).unwrap_or_default()));
        if let Err(e) = res {
            log::warn!("could not write error.json: {e}");
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input { kind: "Io", message: e.to_string(), detail: Value::Null }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Input { kind: "ModelError", message: e.to_string(), detail: json!({ "location": e.location }) }
    }
}

impl From<RiccatiError> for CliError {
    fn from(e: RiccatiError) -> Self {
        let message = e.to_string();
        match e {
            RiccatiError::InvalidGrid(_) => CliError::Input { kind: "InvalidGrid", message, detail: Value::Null },
            RiccatiError::ConditionsViolated(rep) => {
                CliError::Numerical { kind: "ConditionsViolated", message, detail: serde_json::to_value(rep).unwrap_or_default() }
            }
            RiccatiError::IllConditioned { t, min_eig } => CliError::Numerical { kind: "IllConditioned", message, detail: json!({ "t": t, "min_eig": min_eig }) },
            RiccatiError::NotConverged { window } => CliError::Numerical { kind: "NotConverged", message, detail: json!({ "window": window }) },
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let message = e.to_string();
        match e {
            SimError::InvalidConfig(_) => CliError::Input { kind: "InvalidConfig", message, detail: Value::Null },
            SimError::SimulationDiverged { path, step } => {
                CliError::Numerical { kind: "SimulationDiverged", message, detail: json!({ "path": path, "step": step }) }
            }
            SimError::DomainViolation(_) => CliError::Numerical { kind: "DomainViolation", message, detail: Value::Null },
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Sim(e) => e.into(),
            VerifyError::Riccati(e) => e.into(),
            VerifyError::Schedule(m) => CliError::Input { kind: "InvalidSchedule", message: m, detail: Value::Null },
        }
    }
}
