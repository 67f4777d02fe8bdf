//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by the
//! stage that raises them: input validation (`Domain`, `Dimension`, `Config`),
//! linear-algebra health (`NotPsd`, `DegenerateDirection`, `SingularGradient`,
//! `SingularInnovation`), optimization (`Infeasible`, `RelativeDegree`,
//! `NonConvergence`), and I/O (`Io`, `Json`).

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All error conditions raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument lies outside the mathematical domain of the
    /// operation (e.g. inverse error function at |p| >= 1).
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix or vector dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A covariance matrix has an eigenvalue below the accepted floor.
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPsd {
        /// Smallest eigenvalue found.
        min_eig: f64,
    },

    /// The half-space direction has zero (or numerically zero) variance, so
    /// a probability over it is undefined.
    #[error("degenerate half-space direction: variance along alpha is {variance:.3e}")]
    DegenerateDirection {
        /// Value of alpha' * Sigma * alpha.
        variance: f64,
    },

    /// The risk-gradient is singular because the directional variance is at
    /// or below the configured threshold.
    #[error("singular risk gradient: alpha'*Sigma*alpha = {variance:.3e} <= {threshold:.3e}")]
    SingularGradient {
        /// Value of alpha' * Sigma * alpha.
        variance: f64,
        /// Threshold below which the gradient is rejected.
        threshold: f64,
    },

    /// The innovation covariance S = H Sigma H' + R is singular or too badly
    /// conditioned for a trustworthy gain.
    #[error("singular innovation covariance (condition estimate {condition:.3e})")]
    SingularInnovation {
        /// Estimated spectral condition number (infinite if singular).
        condition: f64,
    },

    /// The quadratic program has no feasible point (with slack disabled).
    #[error("infeasible QP: most violated row {row} by {violation:.3e}")]
    Infeasible {
        /// Index of the most violated constraint row.
        row: usize,
        /// Amount by which that row is violated where the active-set method
        /// detected inconsistency.
        violation: f64,
    },

    /// A constraint row has (numerically) zero input coefficients while its
    /// right-hand side still demands progress: the barrier does not have the
    /// assumed relative degree at this state.
    #[error("constraint has no input authority but requires rhs {rhs:.3e} > 0")]
    RelativeDegree {
        /// Right-hand side the vanished row would have to satisfy.
        rhs: f64,
    },

    /// An iterative routine (QP active set, Riccati solve, ...) exceeded its
    /// iteration budget.
    #[error("iteration limit reached in {what}")]
    NonConvergence {
        /// Name of the routine that failed to converge.
        what: String,
    },

    /// Invalid configuration value (rates, tolerances, risk levels, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
