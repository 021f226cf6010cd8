use thiserror::Error;

use crate::graph::VarId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("misconfigured family: {0}")]
    Misconfigured(String),

    #[error("unknown environment id {0}")]
    UnknownEnv(usize),

    #[error("invalid action {action} (family has {n_actions} actions)")]
    InvalidAction { action: usize, n_actions: usize },

    #[error("rank-deficient design: columns {columns:?} are collinear with earlier columns")]
    RankDeficient { columns: Vec<usize> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{d} candidate variables exceeds the subset-enumeration limit of {max}; pre-screen variables first")]
    TooManyVariables { d: usize, max: usize },

    #[error("not a bisimulation: {0}")]
    NotBisimulation(crate::abstraction::BisimViolation),

    #[error("chain has {0} closed classes and no restart distribution")]
    ReducibleChain(usize),

    #[error("bound hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("state space of {0} states exceeds the discretization limit")]
    GridTooLarge(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("interventions on ancestors of the reward: {0:?}")]
    InterventionOnAncestor(Vec<VarId>),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
