//! Runtime for long-horizon tool-using agents: trajectories, a recency-masked
//! context manager, a sandboxed tool registry, the ReAct loop, a streaming
//! rollout scheduler, reward curation and the training objectives.

pub mod agent;
pub mod context;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod record;
pub mod reward;
pub mod rollout;
pub mod tools;
pub mod trajectory;

pub use error::*;
pub use trajectory::{
    Action, ActionKind, ErrorClass, Observation, ObservationError, RunAnnotations, Step,
    TaskInstruction, Trajectory, TrajectoryStatus,
};

pub type ScoredSequence64 = objectives::ScoredSequence<f64>;
pub type ScoredSequence32 = objectives::ScoredSequence<f32>;
pub type PreferencePair64 = objectives::PreferencePair<f64>;
pub type PreferencePair32 = objectives::PreferencePair<f32>;
pub type ScoredGroup64 = objectives::ScoredGroup<f64>;
pub type ScoredGroup32 = objectives::ScoredGroup<f32>;
pub type Objective64 = objectives::Objective<f64>;
pub type Objective32 = objectives::Objective<f32>;
pub type RewardConfig64 = reward::RewardConfig<f64>;
pub type RewardConfig32 = reward::RewardConfig<f32>;
