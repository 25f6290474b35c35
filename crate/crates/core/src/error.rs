use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("voltage {vdd} V is outside the model range (must exceed {threshold} V)")]
    OutOfModelRange { vdd: f64, threshold: f64 },

    #[error("{what} threshold not reached within {horizon_ns} ns")]
    UnreachableThreshold { what: &'static str, horizon_ns: f64 },

    #[error("invalid calibration input: {0}")]
    InvalidCalibrationInput(String),

    #[error("no operating point at {0} V")]
    NoSuchOperatingPoint(f64),

    #[error("invalid reference: {0}")]
    InvalidReference(String),

    #[error("trace parse error at line {line}: {message}")]
    TraceParse { line: usize, message: String },

    #[error("address {0:#x} is outside the mapped address space")]
    AddressDecode(u64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("energy accounting error: {0}")]
    Accounting(String),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("statistic undefined: {0}")]
    UndefinedStatistic(String),

    #[error("unsupported channel rate: {0} MT/s")]
    UnsupportedRate(u32),

    #[error("CSV parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
