use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("invalid data in {id}: {message}")]
    Invariant { id: String, message: String },

    #[error("action {index}: expected a {expected} action, got `{actual}`")]
    IllTyped { index: usize, expected: String, actual: String },

    #[error("action sequence ends with {missing} unexpanded nonterminal(s)")]
    Truncated { missing: usize },

    #[error("action sequence has {extra} trailing action(s) after a complete program")]
    Trailing { extra: usize },

    #[error("unknown action `{0}`")]
    UnknownAction(String),

    #[error("at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("empty support: no candidates to normalize over")]
    EmptySupport,

    #[error("span [{start}, {end}] out of range for {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("stuck decoder state: no valid actions")]
    Stuck,

    #[error("no trainable utterances: {0}")]
    NothingToTrain(String),
}
