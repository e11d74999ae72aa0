use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ratio undefined: B + S = 0")]
    UndefinedRatio,

    #[error("unknown session token")]
    UnknownSession,

    #[error("unknown pair {0}")]
    UnknownPair(String),

    #[error("pair {0} is not assigned to this session")]
    NotAssigned(String),

    #[error("pair {0} was already voted on in this session")]
    DuplicateVote(String),

    #[error("no unvoted pairs remain in this session")]
    Exhausted,

    #[error("invalid pool: {0}")]
    Pool(String),

    #[error("vote log {path} line {line}: {msg}")]
    Log { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
