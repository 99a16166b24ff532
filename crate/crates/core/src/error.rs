use thiserror::Error;

use crate::trajectory::TrajectoryStatus;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("cannot append a step after a terminal action")]
    AppendAfterTerminal,
    #[error("observation mismatch: {0}")]
    ObservationMismatch(String),
    #[error("trajectory is not in progress (status {0:?})")]
    NotInProgress(TrajectoryStatus),
    #[error("final answer presence does not match status {0:?}")]
    AnswerMismatch(TrajectoryStatus),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("step index {found} where {expected} was expected")]
    NonContiguousIndex { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RecordError {
    pub(crate) fn malformed(line: usize, reason: impl Into<String>) -> Self {
        Self::MalformedRecord {
            line,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("tool `{0}` is already registered")]
    DuplicateToolName(String),
    #[error("backend set has no {0} backend")]
    MissingBackend(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("malformed tool call: {0}")]
    MalformedToolCall(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("model backend error: {message}")]
pub struct BackendError {
    pub message: String,
}

impl BackendError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("invalid batch spec: {0}")]
    InvalidSpec(String),
    #[error(
        "starvation: {completed_groups} of {needed_groups} groups complete \
         (submitted {submitted}, carried {carried}, dropped {dropped})"
    )]
    Starvation {
        submitted: usize,
        completed_groups: usize,
        needed_groups: usize,
        carried: usize,
        dropped: usize,
    },
    #[error("group for prompt `{prompt_id}` has {found} of {expected} members")]
    IncompleteGroup {
        prompt_id: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("task `{0}` has no ground truth")]
    MissingGroundTruth(String),
    #[error("invalid reward config: {0}")]
    Config(String),
    #[error("grader failed: {0}")]
    Grader(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObjectiveError {
    #[error("sequence has no masked-in tokens")]
    EmptyMask,
    #[error("empty batch")]
    EmptyBatch,
    #[error("group has {0} members; at least 2 required")]
    GroupTooSmall(usize),
    #[error("unknown loss `{0}`")]
    UnknownLoss(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("no runs to score")]
    EmptyRuns,
    #[error("reward error: {0}")]
    Reward(String),
    #[error("objective error: {0}")]
    Objective(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
