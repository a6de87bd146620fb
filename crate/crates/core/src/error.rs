use std::path::PathBuf;

use thiserror::Error;

use crate::graph::NodeId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("edge {index} ({a}, {b}): dangling endpoint {missing}")]
    DanglingEndpoint {
        index: usize,
        a: NodeId,
        b: NodeId,
        missing: NodeId,
    },
    #[error("node record {index}: duplicate node id {id}")]
    DuplicateNode { index: usize, id: NodeId },
    #[error("edge {index}: self-loop on node {id}")]
    SelfLoop { index: usize, id: NodeId },
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    CoordinateRange { lat: f64, lon: f64 },
    #[error("undefined bearing: zero displacement")]
    UndefinedBearing,
    #[error("unknown POI category {0:?}")]
    UnknownCategory(String),
    #[error("missing structural embedding for node {0}")]
    MissingEmbedding(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("label {0} is not among the candidates")]
    LabelNotCandidate(NodeId),
    #[error("AUC undefined: no example has two or more candidates")]
    AucUndefined,
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("missing {path}: run `roadnext {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
