use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spin value {0}; expected -1, 0 or +1")]
    InvalidSpin(i64),

    #[error("invalid spin character {0:?}; expected '-', '0' or '+'")]
    InvalidSpinChar(char),

    #[error("lattice size {0} is too small (need at least {1} sites)")]
    LatticeTooSmall(usize, usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("state ({rho}, {u}) lies outside the domain rho + |u| <= 1, rho >= 0")]
    OutsideDomain { rho: f64, u: f64 },

    #[error("state space too large: {states} states (limit {limit})")]
    StateSpaceTooLarge { states: u64, limit: u64 },

    #[error("hyperplane (l={l}, N={holes}, Z={charge}) is empty")]
    InfeasibleHyperplane { l: usize, holes: i64, charge: i64 },

    #[error("block-size window is empty for n={n}, sigma={sigma} (need n*sigma^2 > 1)")]
    EmptyBlockWindow { n: usize, sigma: f64 },

    #[error("event budget of {0} exhausted before the final time")]
    EventBudgetExhausted(u64),

    #[error("negative density {rho:.3e} at cell {cell}, step {step}")]
    NegativeDensity { rho: f64, cell: usize, step: usize },

    #[error("degenerate cell: {0}")]
    DegenerateCell(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
