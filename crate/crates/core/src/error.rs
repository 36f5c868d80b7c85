use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate link: AP {ap} serves UE {ue} with zero estimate energy")]
    DegenerateLink { ap: usize, ue: usize },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("subproblem infeasible: {0}")]
    Infeasible(String),

    #[error("solver did not converge after {iterations} iterations (gap {gap:.3e}, dual residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        gap: f64,
        residual: f64,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI for this class of failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Csv(_) | Error::Mode(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
