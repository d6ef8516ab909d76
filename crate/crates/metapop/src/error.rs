//! Crate-wide error type. Configuration problems are kept separate from
//! runtime (experiment) failures so the CLI can map them to distinct exit
//! codes.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Model structure violates a validity rule (negative rate, diagonal
    /// type-change entry, migration out of an absent variety, ...).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A configuration file or CLI argument could not be understood.
    #[error("config error: {0}")]
    Config(String),

    /// State and model disagree on dimensions or grids.
    #[error("dimension mismatch: {0}")]
    Mismatch(String),

    /// The jump chain reached a state with total rate zero before the
    /// horizon, where a single step was explicitly requested.
    #[error("process is absorbed: total event rate is zero")]
    Absorbed,

    /// A rate exceeded its declared bound during thinned simulation; the
    /// declared bounds on the model's rate evaluators are wrong.
    #[error("rate majorant violated: rate {rate} > declared bound {bound} at t={t}")]
    MajorantViolation { rate: f64, bound: f64, t: f64 },

    /// Suppressed boundary events exceeded the configured budget.
    #[error("truncation-loss budget exhausted: {count} suppressed events (budget {budget})")]
    TruncationBudget { count: u64, budget: u64 },

    /// Adaptive integration could not proceed (step size underflow or
    /// unbounded growth of the solution).
    #[error("integration failure: {0}")]
    Integration(String),

    /// Damped fixed-point iteration for an equilibrium did not converge.
    #[error("equilibrium iteration failed: {0}")]
    FixedPoint(String),

    /// A statistical routine was asked for more resolution than the sample
    /// supports (e.g. joint alphabet too large for the replica count).
    #[error("underpowered estimate: {0}")]
    Underpowered(String),

    /// An experiment produced no usable replicas (all stopped early, ...).
    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: config problems exit 2, everything
    /// else (runtime/experiment failures) exits 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidModel(_) => 2,
            _ => 1,
        }
    }
}
