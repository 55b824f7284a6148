//! Operator-level search over chain-of-thought decision points.
//!
//! Autoregressive reasoners commit to a direction at every step boundary by
//! emitting a thinking token ("Wait", "Then", "Alternatively", ...). This
//! crate treats those tokens as a discrete action space and intervenes at
//! the boundaries: pause, look one operator ahead, score each branch with a
//! dual-factor heuristic (a distilled success-potential head plus a
//! progress-regression head), and sample the next operator through a
//! temperature softmax.
//!
//! Everything is verified end to end against a synthetic reasoning
//! environment ([`backend::EnvBackend`]) whose ground truth is enumerable:
//! a brute-force path oracle, uniform-random solution-space
//! characterization with Monte Carlo aggregation, an efficiency metric, and
//! hybrid planner/executor guidance.
//!
//! All randomness flows through keyed streams ([`rng`]), so every pipeline
//! is reproducible from its seed at any thread count.

pub mod backend;
pub mod exec;
pub mod explorer;
pub mod heads;
pub mod metrics;
pub mod rng;
pub mod search;
pub mod segment;
pub mod trace;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("at line {line}: {source}")]
    Line { line: usize, source: Box<Error> },
    #[error("unknown operator id {id}")]
    UnknownOperator { id: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("horizon {horizon} too large: enumeration would exceed {bound} sequences")]
    HorizonTooLarge { horizon: usize, bound: u128 },
    #[error("{0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use backend::{Backend, EnvBackend, EnvQuery, EnvSpec};
pub use heads::{PotentialHead, ProgressHead, TrainConfig};
pub use search::{run_search, SearchConfig, SelectionMode};
pub use trace::{Operator, OperatorSet, Query, ReasoningTrace};
