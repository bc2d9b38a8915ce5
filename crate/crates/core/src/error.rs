use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("code {code} is outside the representable range [{min}, {max}]")]
    Range { code: i64, min: i64, max: i64 },

    #[error("{0}")]
    Argument(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged in epoch {epoch}: loss is {loss}")]
    Training { epoch: usize, loss: f64 },

    #[error("accumulator overflow in {stage}: {value} does not fit in {bits} bits")]
    Overflow { stage: String, value: i64, bits: u32 },

    #[error("dataflow simulation deadlocked; blocked actors: {blocked:?}")]
    Deadlock { blocked: Vec<String> },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("cost model parameters are not calibrated")]
    CalibrationRequired,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure stems from bad input or configuration rather
    /// than from a computation going wrong at run time.
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            Error::Training { .. } | Error::Overflow { .. } | Error::Deadlock { .. } | Error::Calibration(_)
        )
    }
}
