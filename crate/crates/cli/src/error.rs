//! Error classification for exit codes: 1 = validation (bad arguments or
//! schemas), 2 = data (malformed files, mismatched inputs), 3 = I/O.

use stylevec_core::analysis::AnalysisError;
use stylevec_core::checkpoint::CheckpointError;
use stylevec_core::fixtures::FixtureError;
use stylevec_core::lora::LoraError;
use stylevec_core::merge::MergeError;
use stylevec_core::taskvector::TaskVectorError;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Data(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Data(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Data(m) | CliError::Io(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TaskVectorError> for CliError {
    fn from(e: TaskVectorError) -> Self {
        match e {
            TaskVectorError::NonFiniteCoefficient(_)
            | TaskVectorError::CoefficientOutOfRange { .. } => CliError::Validation(e.to_string()),
            TaskVectorError::Checkpoint(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<LoraError> for CliError {
    fn from(e: LoraError) -> Self {
        match e {
            LoraError::NonFiniteScale(_) => CliError::Validation(e.to_string()),
            LoraError::Checkpoint(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::SchemaError(_)
            | MergeError::RoleViolation(_)
            | MergeError::InvalidTopology(_) => CliError::Validation(e.to_string()),
            MergeError::MissingInput(_, _) => CliError::Io(e.to_string()),
            MergeError::Checkpoint(inner) => inner.into(),
            MergeError::Lora(i, inner) => match CliError::from(inner) {
                CliError::Io(m) => CliError::Io(format!("input {i}: {m}")),
                CliError::Validation(m) => CliError::Data(format!("input {i}: {m}")),
                CliError::Data(m) => CliError::Data(format!("input {i}: {m}")),
            },
            MergeError::Vector(i, inner) => match CliError::from(inner) {
                CliError::Io(m) => CliError::Io(format!("input {i}: {m}")),
                CliError::Validation(m) => CliError::Data(format!("input {i}: {m}")),
                CliError::Data(m) => CliError::Data(format!("input {i}: {m}")),
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::InvalidSigma(_)
            | AnalysisError::TooFewVectors { .. }
            | AnalysisError::TrajectoryTooShort(_) => CliError::Validation(e.to_string()),
            AnalysisError::Topology(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<FixtureError> for CliError {
    fn from(e: FixtureError) -> Self {
        match e {
            FixtureError::InvalidSpec(_) => CliError::Validation(e.to_string()),
            FixtureError::Topology(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}
