use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("position {pos} out of range for sequence length {seq_len}")]
    Position { pos: usize, seq_len: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("i/o error at byte offset {offset} while {context}: {source}")]
    Io {
        context: String,
        offset: u64,
        #[source]
        source: io::Error,
    },

    #[error("failed to load layer {layer}: {source}")]
    LayerLoad {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("logits do not form a valid distribution: {0}")]
    InvalidDistribution(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, offset: u64, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            offset,
            source,
        }
    }
}
