use thiserror::Error;

use crate::topology::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input falls outside the domain where a formula is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("event scheduled in the past: fire time {fire_time_s} < clock {now_s}")]
    PastEvent { fire_time_s: f64, now_s: f64 },

    #[error("invalid flow: {0}")]
    InvalidFlow(String),

    #[error("no route from node {src} to node {dst}")]
    NoRoute { src: NodeId, dst: NodeId },

    #[error("node {b} is out of radio range of node {a}")]
    OutOfRange { a: NodeId, b: NodeId },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A simulation invariant was breached. This is a bug, not a user error.
    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user input (bad config, bad arguments, IO).
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Invariant(_))
    }
}
