//! Trajectory data model: the ordered thought/action/observation history of
//! one task, with append and termination semantics.
//!
//! A [`Trajectory`] is a value. [`Trajectory::append_step`] returns a new
//! trajectory and leaves its input untouched; steps are held behind `Arc` so
//! that appending copies pointers rather than observation text. Loop drivers
//! that own their trajectory exclusively may use [`Trajectory::push_step`],
//! which applies the same validation in place.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::TrajectoryError;

/// A query handed to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub task_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl TaskInstruction {
    pub fn new(task_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            text: text.into(),
            ground_truth: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_ground_truth(mut self, truth: impl Into<String>) -> Self {
        self.ground_truth = Some(truth.into());
        self
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.task_id.is_empty() {
            return Err(TrajectoryError::InvalidTask("task_id is empty".into()));
        }
        if self.text.is_empty() {
            return Err(TrajectoryError::InvalidTask(format!(
                "task {} has empty text",
                self.task_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    ToolCall,
    Terminal,
}

/// One model action: either a single structured tool invocation or the
/// terminal "no further action" marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    #[serde(default)]
    pub tool_name: Option<String>,
    #[serde(default)]
    pub arguments: Option<Value>,
    #[serde(default)]
    pub raw_text: String,
}

impl Action {
    pub fn tool_call(name: impl Into<String>, arguments: Value, raw_text: impl Into<String>) -> Self {
        Self {
            kind: ActionKind::ToolCall,
            tool_name: Some(name.into()),
            arguments: Some(arguments),
            raw_text: raw_text.into(),
        }
    }

    pub fn terminal(raw_text: impl Into<String>) -> Self {
        Self {
            kind: ActionKind::Terminal,
            tool_name: None,
            arguments: None,
            raw_text: raw_text.into(),
        }
    }

    pub fn is_tool_call(&self) -> bool {
        self.kind == ActionKind::ToolCall
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        match self.kind {
            ActionKind::Terminal if self.tool_name.is_some() || self.arguments.is_some() => Err(
                TrajectoryError::InvalidAction("terminal action carries a tool call".into()),
            ),
            ActionKind::ToolCall if self.tool_name.as_deref().is_none_or(str::is_empty) => Err(
                TrajectoryError::InvalidAction("tool call without a tool name".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Key used to decide whether two tool calls are the same action:
    /// the tool name plus the key-sorted serialization of the arguments.
    pub fn canonical_key(&self) -> Option<String> {
        let name = self.tool_name.as_deref()?;
        let args = self
            .arguments
            .as_ref()
            .map(canonical_json)
            .unwrap_or_else(|| "{}".to_string());
        Some(format!("{name}:{args}"))
    }
}

/// Serializes a JSON tree with object keys in sorted order.
///
/// `serde_json::Map` is ordered by key unless the `preserve_order` feature is
/// enabled somewhere in the build, so re-sort explicitly.
pub fn canonical_json(value: &Value) -> String {
    fn sort(value: &Value) -> Value {
        match value {
            Value::Object(map) => {
                let sorted: BTreeMap<&String, Value> = map.iter().map(|(k, v)| (k, sort(v))).collect();
                Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(value)).expect("JSON values always serialize")
}

/// Fixed error taxonomy for tool outcomes. Curation rules count these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorClass {
    NetworkException,
    Timeout,
    ToolError,
    BlockedDomain,
    UnknownTool,
    SchemaViolation,
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationError {
    pub class: ErrorClass,
    pub message: String,
}

/// A tool response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub content: String,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default)]
    pub error: Option<ObservationError>,
    #[serde(default)]
    pub latency_ms: u64,
}

impl Observation {
    pub fn ok(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            truncated: false,
            error: None,
            latency_ms: 0,
        }
    }

    pub fn failed(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            content: String::new(),
            truncated: false,
            error: Some(ObservationError {
                class,
                message: message.into(),
            }),
            latency_ms: 0,
        }
    }

    pub fn error_class(&self) -> Option<ErrorClass> {
        self.error.as_ref().map(|e| e.class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub thought: String,
    pub action: Action,
    pub observation: Option<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrajectoryStatus {
    InProgress,
    Completed,
    TurnBudgetExhausted,
    ContextBudgetExhausted,
    Aborted,
}

impl TrajectoryStatus {
    pub fn requires_answer(self) -> bool {
        matches!(
            self,
            Self::Completed | Self::TurnBudgetExhausted | Self::ContextBudgetExhausted
        )
    }
}

/// Bookkeeping the loop attaches to a trajectory besides its steps.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunAnnotations {
    /// Malformed tool blocks that survived the corrective re-prompt.
    #[serde(default)]
    pub format_violations: u32,
    /// Model calls that failed and were retried.
    #[serde(default)]
    pub backend_retries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: TaskInstruction,
    steps: Vec<Arc<Step>>,
    pub final_answer: Option<String>,
    pub status: TrajectoryStatus,
    pub annotations: RunAnnotations,
}

impl Trajectory {
    pub fn new(task: TaskInstruction) -> Self {
        Self {
            task,
            steps: Vec::new(),
            final_answer: None,
            status: TrajectoryStatus::InProgress,
            annotations: RunAnnotations::default(),
        }
    }

    pub fn steps(&self) -> impl ExactSizeIterator<Item = &Step> + DoubleEndedIterator {
        self.steps.iter().map(|s| s.as_ref())
    }

    pub fn step(&self, index: usize) -> Option<&Step> {
        index.checked_sub(1).and_then(|i| self.steps.get(i)).map(|s| s.as_ref())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_step(&self) -> Option<&Step> {
        self.steps.last().map(|s| s.as_ref())
    }

    /// True iff the last step's action is terminal.
    pub fn is_terminal(&self) -> bool {
        self.last_step()
            .is_some_and(|s| s.action.kind == ActionKind::Terminal)
    }

    pub fn tool_call_count(&self) -> usize {
        self.steps().filter(|s| s.action.is_tool_call()).count()
    }

    /// Returns a new trajectory with one more step. `self` is unchanged.
    pub fn append_step(
        &self,
        thought: impl Into<String>,
        action: Action,
        observation: Option<Observation>,
    ) -> Result<Trajectory, TrajectoryError> {
        let mut next = self.clone();
        next.push_step(thought, action, observation)?;
        Ok(next)
    }

    /// In-place variant of [`append_step`](Self::append_step).
    pub fn push_step(
        &mut self,
        thought: impl Into<String>,
        action: Action,
        observation: Option<Observation>,
    ) -> Result<(), TrajectoryError> {
        if self.is_terminal() {
            return Err(TrajectoryError::AppendAfterTerminal);
        }
        if self.status != TrajectoryStatus::InProgress {
            return Err(TrajectoryError::NotInProgress(self.status));
        }
        action.validate()?;
        match (action.kind, observation.is_some()) {
            (ActionKind::ToolCall, false) => {
                return Err(TrajectoryError::ObservationMismatch(
                    "tool call without an observation".into(),
                ))
            }
            (ActionKind::Terminal, true) => {
                return Err(TrajectoryError::ObservationMismatch(
                    "terminal action with an observation".into(),
                ))
            }
            _ => {}
        }
        let step = Step {
            index: self.steps.len() + 1,
            thought: thought.into(),
            action,
            observation,
        };
        self.steps.push(Arc::new(step));
        Ok(())
    }

    /// Closes the trajectory with a status and, where required, an answer.
    pub fn finish(
        &mut self,
        status: TrajectoryStatus,
        answer: Option<String>,
    ) -> Result<(), TrajectoryError> {
        if status == TrajectoryStatus::InProgress {
            return Err(TrajectoryError::NotInProgress(status));
        }
        if status.requires_answer() != answer.is_some() {
            return Err(TrajectoryError::AnswerMismatch(status));
        }
        self.status = status;
        self.final_answer = answer;
        Ok(())
    }

    /// Checks every structural invariant. Used when loading records.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        self.task.validate()?;
        let last = self.steps.len();
        for (pos, step) in self.steps().enumerate() {
            if step.index != pos + 1 {
                return Err(TrajectoryError::NonContiguousIndex {
                    expected: pos + 1,
                    found: step.index,
                });
            }
            step.action.validate()?;
            if step.action.is_tool_call() != step.observation.is_some() {
                return Err(TrajectoryError::ObservationMismatch(format!(
                    "step {} observation does not match action kind",
                    step.index
                )));
            }
            if step.action.kind == ActionKind::Terminal && pos + 1 != last {
                return Err(TrajectoryError::AppendAfterTerminal);
            }
        }
        if self.status.requires_answer() != self.final_answer.is_some() {
            return Err(TrajectoryError::AnswerMismatch(self.status));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn task() -> TaskInstruction {
        TaskInstruction::new("t1", "What is the capital of France?")
    }

    fn call() -> Action {
        Action::tool_call("google_search", json!({"q": "capital of france"}), "<tool>…</tool>")
    }

    #[test]
    fn first_append_gets_index_one() {
        let t = Trajectory::new(task());
        let t2 = t.append_step("search", call(), Some(Observation::ok("Paris"))).unwrap();
        assert_eq!(t2.len(), 1);
        assert_eq!(t2.step(1).unwrap().index, 1);
        assert!(t.is_empty());
    }

    #[test]
    fn append_after_terminal_is_rejected() {
        let t = Trajectory::new(task())
            .append_step("done", Action::terminal("done"), None)
            .unwrap();
        let err = t
            .append_step("more", call(), Some(Observation::ok("x")))
            .unwrap_err();
        assert_eq!(err, TrajectoryError::AppendAfterTerminal);
    }

    #[test]
    fn terminal_with_observation_is_mismatch() {
        let err = Trajectory::new(task())
            .append_step("x", Action::terminal("x"), Some(Observation::ok("o")))
            .unwrap_err();
        assert!(matches!(err, TrajectoryError::ObservationMismatch(_)));
        let err = Trajectory::new(task()).append_step("x", call(), None).unwrap_err();
        assert!(matches!(err, TrajectoryError::ObservationMismatch(_)));
    }

    #[test]
    fn is_terminal_cases() {
        let mut t = Trajectory::new(task());
        assert!(!t.is_terminal());
        for _ in 0..3 {
            t = t.append_step("", call(), Some(Observation::ok("r"))).unwrap();
        }
        assert!(!t.is_terminal());
        let t = t
            .append_step("", call(), Some(Observation::ok("r")))
            .unwrap()
            .append_step("", Action::terminal("answer"), None)
            .unwrap();
        assert!(t.is_terminal());
    }

    #[test]
    fn finish_requires_answer_for_completed() {
        let mut t = Trajectory::new(task());
        assert!(t.finish(TrajectoryStatus::Completed, None).is_err());
        assert!(t.finish(TrajectoryStatus::Aborted, Some("x".into())).is_err());
        t.finish(TrajectoryStatus::Completed, Some("Paris".into())).unwrap();
        assert!(t.validate().is_ok());
    }

    #[test]
    fn canonical_key_ignores_argument_order() {
        let a = Action::tool_call("s", json!({"b": 1, "a": {"y": 2, "x": 1}}), "");
        let b = Action::tool_call("s", json!({"a": {"x": 1, "y": 2}, "b": 1}), "");
        assert_eq!(a.canonical_key(), b.canonical_key());
        assert_eq!(Action::terminal("x").canonical_key(), None);
    }
}
