use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training produced a NaN/Inf loss or gradient. Usually means the learning rate is too high.
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite {what}")]
    Diverged {
        epoch: usize,
        batch: usize,
        what: &'static str,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FedError>,
    },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<FedError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FedError {
    pub(crate) fn in_round(self, round: usize) -> Self {
        FedError::Round {
            round,
            source: Box::new(self),
        }
    }

    pub(crate) fn for_client(self, client: usize) -> Self {
        FedError::Client {
            client,
            source: Box::new(self),
        }
    }

    /// True when the root cause is divergence or another numerical failure.
    pub fn is_numerical(&self) -> bool {
        match self {
            FedError::Diverged { .. } | FedError::NonFinite(_) => true,
            FedError::Round { source, .. } | FedError::Client { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, FedError>;
