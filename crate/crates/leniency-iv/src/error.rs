//! Error type shared across the crate.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// Input problems (schema, parsing, configuration) are distinguished from
/// design problems (rank deficiency, degenerate leverage, capacity) so that
/// callers can map them to different exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A named column is missing, duplicated, or plays two roles at once.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell could not be parsed; `row` is the 1-based data-row number.
    #[error("parse error at data row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// The input contains no usable observations.
    #[error("empty data: {0}")]
    EmptyData(String),

    /// An invalid simulation or run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A requested operation is out of scope for this tool.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The design matrix is degenerate (rank deficient, no instruments left,
    /// or every observation pruned away).
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    /// An observation has leverage one under the full design, so a
    /// leave-one-out weight is undefined. Should be impossible after pruning.
    #[error("degenerate leverage at observation {observation}: {message}")]
    DegenerateLeverage {
        observation: usize,
        message: String,
    },

    /// The FEJIV weight system is singular or numerically unusable.
    #[error("FEJIV unavailable: {0}")]
    FejivUnavailable(String),

    /// A dense (desk-scale) computation was requested above its size cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Not enough residual degrees of freedom (for example n - K - L <= 0).
    #[error("insufficient degrees of freedom: {0}")]
    InsufficientDof(String),

    /// A diagnostic is undefined for the given inputs (for example a
    /// correlation with a non-positive variance estimate).
    #[error("diagnostic unavailable: {0}")]
    Diagnostic(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by user input (data, schema, configuration)
    /// rather than by a degenerate or oversized design.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Parse { .. }
                | Error::EmptyData(_)
                | Error::Config(_)
                | Error::Dimension(_)
                | Error::Unsupported(_)
                | Error::Io(_)
                | Error::Csv(_)
        )
    }
}
