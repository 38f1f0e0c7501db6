//! Action-centric task graphs learned from annotated demonstration videos.
//!
//! The pipeline: [`corpus`] loads per-second feature streams and action
//! segments; [`graph`] builds one task graph per task from the training
//! sequences; [`embedding`] learns action embeddings as transformations from
//! pre-condition to post-condition features; [`guidance`] tracks progress,
//! recommends next actions and plans with beam search; [`eval`] scores all
//! of it.

pub mod config;
pub mod corpus;
pub mod embedding;
pub mod eval;
#[doc(hidden)]
pub mod fuzz_checks;
pub mod graph;
pub mod guidance;
pub mod numkit;
pub mod store;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numkit::NumError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("planning error: {0}")]
    Planning(String),
}

impl Error {
    /// Bad input or configuration, as opposed to an environment or runtime
    /// failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Corpus(corpus::CorpusError::Io { .. }) | Error::Store(store::StoreError::Io { .. }) => false,
            Error::Corpus(_) | Error::Graph(_) | Error::Store(_) | Error::Config(_) | Error::Usage(_) => true,
            Error::Num(numkit::NumError::NonFinite(_)) => false,
            Error::Num(_) => true,
            Error::Training(_) | Error::Planning(_) => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
