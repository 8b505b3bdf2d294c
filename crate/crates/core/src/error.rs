use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("numerical divergence at neuron {neuron} (step {step}): membrane potential {value}")]
    Divergence { neuron: u32, step: u64, value: f32 },

    #[error("hemodynamic instability in voxel {voxel}: {what} became nonpositive ({value})")]
    Hemodynamic {
        voxel: usize,
        what: &'static str,
        value: f64,
    },

    #[error("deadlock: step {step} batch from worker {src} to worker {dst} did not arrive")]
    Deadlock { step: u64, src: usize, dst: usize },

    #[error("corrupted spike traffic: {0}")]
    Corruption(String),

    #[error("infeasible partition: unit {unit} (capacity {size}) cannot be placed under bound {bound}")]
    Infeasible { unit: usize, size: f64, bound: f64 },

    #[error("partition enumeration refused: {units} units exceeds the limit of {limit}")]
    TooManyUnits { units: usize, limit: usize },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("oracle mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for bad input, 3 for runtime failure, 4 for
    /// an oracle mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::Infeasible { .. }
            | Error::TooManyUnits { .. } => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Mismatch(_) => 4,
            _ => 3,
        }
    }
}
