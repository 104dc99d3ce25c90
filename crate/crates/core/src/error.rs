use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A scenario or chart configuration is structurally invalid.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A numeric routine failed to converge within its budget.
    #[error("no convergence in {what}: {detail}")]
    NoConvergence { what: &'static str, detail: String },

    /// A search finished without finding the requested object.
    #[error("not found: {0}")]
    NotFound(String),

    /// A quantity left its admissible range (step underflow, singular
    /// geometry, degenerate linearization).
    #[error("numeric degeneracy in {what}: {detail}")]
    Degenerate { what: &'static str, detail: String },

    /// A point or curve left the chart domain where an operation needed it.
    #[error("out of domain: {0}")]
    OutOfDomain(String),

    /// An induced metric stopped being positive definite; the section is not
    /// spacelike there.
    #[error("positivity lost: {0}")]
    Positivity(String),

    /// An edge label split into admissible -2 summands somewhere along a
    /// found flowline; `parts` is the witnessing decomposition.
    #[error("label splits at ({:.4}, {:.4}, {:.4}) into {parts:?}", at[0], at[1], at[2])]
    Reducible { at: [f64; 3], parts: Vec<Vec<i64>> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn not_found(msg: impl Into<String>) -> Self {
        Error::NotFound(msg.into())
    }
}
