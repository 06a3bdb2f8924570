use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("csv header: column {column:?}: {message}")]
    Header { column: String, message: String },

    #[error("csv parse error at row {row}, column {column:?}: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("validation: {0}")]
    Validation(String),

    #[error("range: {0}")]
    Range(String),

    #[error("study: {0}")]
    Study(String),

    #[error("parameter: {0}")]
    Parameter(String),

    #[error("inference: {0}")]
    Inference(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
