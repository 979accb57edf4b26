use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing metadata tag {0}")]
    MissingTag(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("unsupported BPR exponent {0} (must be >= 1)")]
    UnsupportedExponent(f64),

    #[error("network is not strongly connected; unreachable pairs (tail, head): {pairs:?}")]
    Disconnected { pairs: Vec<(u32, u32)> },

    #[error("agent {agent}: feasible set is empty: {reason}")]
    Infeasible { agent: usize, reason: String },

    #[error("projection did not converge after {iterations} iterations (best residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("numerical rank computation failed (condition estimate {condition:.3e})")]
    NumericalRank { condition: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("inner loop diverging at iteration {iteration} (residual {residual:.3e}); use a smaller gamma")]
    Divergence { iteration: usize, residual: f64 },

    #[error("verification solver failed: {0}")]
    Oracle(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
