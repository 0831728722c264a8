use thiserror::Error;

use crate::domain::Mode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid score: {completed}/{total}")]
    InvalidScore { completed: u32, total: u32 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("illegal transition: {command} in mode {mode:?}")]
    IllegalTransition { mode: Mode, command: String },
    #[error("rewind depth {k} outside buffer of length {len}")]
    RewindOutOfRange { k: u32, len: usize },
    #[error("episode already complete; only reset or mode changes apply")]
    EpisodeComplete,
    #[error("robot {0} is not awaiting intervention")]
    NotAwaiting(u32),
    #[error("header already written")]
    DuplicateHeader,
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("boundary references unknown episode {robot_id}/{episode_id}")]
    UnknownEpisode { robot_id: u32, episode_id: String },
    #[error("boundary tick {tick} outside episode range")]
    BoundaryOutOfRange { tick: u64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
