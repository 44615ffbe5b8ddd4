use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("empty population")]
    EmptyPopulation,

    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    Convergence {
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("singular linear system: {0}")]
    Singular(&'static str),

    #[error("degenerate data: {0}")]
    DegenerateData(&'static str),

    #[error("calibration target is infeasible (residual {residual:e})")]
    Infeasible { residual: f64 },

    #[error("degenerate calibration constraints")]
    DegenerateConstraints,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite aggregate at round {round}")]
    NonFinite { round: usize },

    #[error("step-size condition violated: effective step {eta_eff} > 1/(c0*L) = {bound}")]
    StepSize { eta_eff: f64, bound: f64 },

    #[error("{clients} clients is too many for exact enumeration (max {max}); use Monte Carlo")]
    TooManyClients { clients: usize, max: usize },
}
