use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed row at line {line}: {msg}")]
    MalformedRow { line: usize, msg: String },

    #[error("duplicate observation (subject {subject}, task {task}, time {time}) at line {line}")]
    DuplicateObservation {
        subject: usize,
        task: usize,
        time: f64,
        line: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("Cholesky factorization failed after max jitter {max_jitter} (min eigenvalue estimate {min_eig:.3e})")]
    CholeskyFailure { max_jitter: f64, min_eig: f64 },

    #[error("Cholesky failure on subject {subject}: {source}")]
    SubjectBlock {
        subject: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::MalformedRow { .. }
            | Error::DuplicateObservation { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 3,
            Error::Numerical(_) | Error::CholeskyFailure { .. } | Error::SubjectBlock { .. } => 4,
        }
    }
}
