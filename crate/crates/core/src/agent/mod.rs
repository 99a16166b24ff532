//! ReAct driver: render the retained history, generate, parse one action,
//! dispatch it, append, and repeat until the model stops calling tools or a
//! budget runs out. A summary phase then produces the final answer.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{
    count_message_tokens, render_view, retain, Message, RetainedView, RetentionBudget,
    TokenBudget, TokenCounter, TEMPLATE_OVERHEAD,
};
use crate::error::BackendError;
use crate::tools::{DispatchLimits, ToolRegistry};
use crate::trajectory::{Action, ActionKind, TaskInstruction, Trajectory, TrajectoryStatus};

mod backend;
mod parse;

pub use backend::{HttpChatBackend, ModelBackend, SamplingParams, ScriptedBackend};
pub use parse::{extract_answer, parse_action, TOOL_CLOSE, TOOL_OPEN};

pub const SYSTEM_PROMPT_V1: &str = include_str!("../../assets/system_prompt.v1.txt");
pub const SUMMARY_PROMPT_V1: &str = include_str!("../../assets/summary_prompt.v1.txt");
pub const CORRECTION_PROMPT_V1: &str = include_str!("../../assets/correction_prompt.v1.txt");

/// First line of every summary request.
pub const SUMMARY_HEADER: &str = "## Final answer required";

/// Used when neither the model nor the summary call yields any text.
pub const NO_ANSWER: &str = "No answer.";

/// True when the last message of a request is the summary instruction.
pub fn is_summary_request(messages: &[Message]) -> bool {
    messages
        .last()
        .is_some_and(|m| m.content.starts_with(SUMMARY_HEADER))
}

#[derive(Debug, Clone)]
pub struct LoopLimits {
    pub max_turns: usize,
    pub token_budget: TokenBudget,
    pub retention: RetentionBudget,
}

impl Default for LoopLimits {
    fn default() -> Self {
        Self {
            max_turns: 600,
            token_budget: TokenBudget::default(),
            retention: RetentionBudget::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub sampling: SamplingParams,
    pub limits: LoopLimits,
    pub dispatch: DispatchLimits,
    pub retry: RetryPolicy,
    /// Produce the thought and the action with two separate model calls.
    pub split_thought_action: bool,
    pub system_prompt: String,
    pub summary_prompt: String,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingParams::default(),
            limits: LoopLimits::default(),
            dispatch: DispatchLimits::default(),
            retry: RetryPolicy::default(),
            split_thought_action: false,
            system_prompt: SYSTEM_PROMPT_V1.to_string(),
            summary_prompt: SUMMARY_PROMPT_V1.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    ModelTerminated,
    TurnBudgetExhausted,
    ContextBudgetExhausted,
}

impl Termination {
    fn status(self) -> TrajectoryStatus {
        match self {
            Self::ModelTerminated => TrajectoryStatus::Completed,
            Self::TurnBudgetExhausted => TrajectoryStatus::TurnBudgetExhausted,
            Self::ContextBudgetExhausted => TrajectoryStatus::ContextBudgetExhausted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub trajectory: Trajectory,
    pub answer: String,
    pub termination: Termination,
    /// Loop turns plus the summary call, if one was made.
    pub turn_count: usize,
    pub tool_call_count: usize,
    pub summary_called: bool,
    /// Largest prompt, in tokens, sent to the backend.
    pub peak_request_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("model backend failed after retries: {message}")]
    BackendFailure { message: String, trajectory: Box<Trajectory> },
    #[error("even an empty history does not fit the context budget")]
    ContextOverflow { trajectory: Box<Trajectory> },
    #[error("invalid run input: {0}")]
    InvalidInput(String),
}

impl RunError {
    /// The aborted trajectory, when the failure happened mid-run.
    pub fn trajectory(&self) -> Option<&Trajectory> {
        match self {
            Self::BackendFailure { trajectory, .. } | Self::ContextOverflow { trajectory } => Some(trajectory),
            Self::InvalidInput(_) => None,
        }
    }
}

/// Renders the tool list for the system prompt.
pub fn describe_tools(registry: &ToolRegistry) -> String {
    let mut out = String::new();
    for spec in registry.specs() {
        let params: Vec<String> = spec
            .param_schema
            .params
            .iter()
            .map(|p| {
                let opt = if p.required { "" } else { "?" };
                format!("{}{opt}: {:?}", p.name, p.ty).to_lowercase()
            })
            .collect();
        out.push_str(&format!("- {}({}): {}\n", spec.name, params.join(", "), spec.description));
    }
    out
}

fn request_tokens(messages: &[Message], counter: &dyn TokenCounter) -> usize {
    TEMPLATE_OVERHEAD + count_message_tokens(messages, counter)
}

struct Driver<'a> {
    backend: &'a dyn ModelBackend,
    registry: &'a ToolRegistry,
    config: &'a AgentConfig,
    namespace: &'a str,
    prefix: Vec<Message>,
    peak_request_tokens: usize,
}

enum Turn {
    Step { thought: String, action: Action },
    Malformed { text: String, error: String },
}

impl<'a> Driver<'a> {
    fn messages(&self, view: &RetainedView<'_>, extra: &[Message]) -> Vec<Message> {
        let mut msgs = self.prefix.clone();
        msgs.extend(render_view(view));
        msgs.extend_from_slice(extra);
        msgs
    }

    fn fits(&self, messages: &[Message]) -> bool {
        let budget = &self.config.limits.token_budget;
        budget.fits(request_tokens(messages, budget.counter.as_ref()))
    }

    fn generate(&mut self, traj: &mut Trajectory, messages: &[Message]) -> Result<String, BackendError> {
        let budget = &self.config.limits.token_budget;
        let tokens = request_tokens(messages, budget.counter.as_ref());
        assert!(budget.fits(tokens), "oversized request: {tokens} prompt tokens");
        self.peak_request_tokens = self.peak_request_tokens.max(tokens);

        let policy = self.config.retry;
        let mut last = BackendError::new("no attempts configured");
        for attempt in 0..policy.attempts.max(1) {
            if attempt > 0 {
                traj.annotations.backend_retries += 1;
                std::thread::sleep(policy.base_delay * 2u32.saturating_pow(attempt - 1));
            }
            match self.backend.generate(messages, &self.config.sampling) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    tracing::warn!(task = %traj.task.task_id, attempt, error = %e, "model call failed");
                    last = e;
                }
            }
        }
        Err(last)
    }

    /// One model turn. `None` means the request would not fit.
    fn turn(&mut self, traj: &mut Trajectory, correction: &[Message]) -> Result<Option<Turn>, BackendError> {
        let view = retain(traj, self.config.limits.retention);
        let messages = self.messages(&view, correction);
        if !self.fits(&messages) {
            return Ok(None);
        }
        if !self.config.split_thought_action {
            let text = self.generate(traj, &messages)?;
            return Ok(Some(match parse_action(&text) {
                Ok((thought, action)) => Turn::Step { thought, action },
                Err(e) => Turn::Malformed { text, error: e.to_string() },
            }));
        }

        let mut think = messages;
        think.push(Message::user("Think about the next step. Do not call a tool yet."));
        if !self.fits(&think) {
            return Ok(None);
        }
        let thought_text = self.generate(traj, &think)?;
        let thought = match thought_text.find(TOOL_OPEN) {
            Some(i) => thought_text[..i].trim().to_string(),
            None => thought_text.trim().to_string(),
        };
        let mut act = think;
        act.push(Message::assistant(thought.clone()));
        act.push(Message::user("Now emit your action: one tool call, or your final answer."));
        if !self.fits(&act) {
            return Ok(None);
        }
        let text = self.generate(traj, &act)?;
        Ok(Some(match parse_action(&text) {
            Ok((_, action)) if action.kind == ActionKind::Terminal => {
                Turn::Step { thought: format!("{thought}\n{}", text.trim()).trim().to_string(), action }
            }
            Ok((_, action)) => Turn::Step { thought, action },
            Err(e) => Turn::Malformed { text, error: e.to_string() },
        }))
    }

    fn summarize(&mut self, traj: &mut Trajectory) -> Result<(String, bool), RunError> {
        if let Some(answer) = direct_answer(traj) {
            return Ok((answer, false));
        }
        let instruction = [Message::user(self.config.summary_prompt.clone())];
        let retention = self.config.limits.retention;
        let mut messages = self.messages(&retain(traj, retention), &instruction);
        if !self.fits(&messages) {
            messages = self.messages(&retain(traj, RetentionBudget(0)), &instruction);
        }
        if !self.fits(&messages) {
            let full = retain(traj, RetentionBudget(0));
            let mut start = 0;
            loop {
                start += 1;
                if start > full.steps.len() {
                    return Err(RunError::ContextOverflow { trajectory: Box::new(abort(traj)) });
                }
                let tail = RetainedView {
                    next_index: full.next_index,
                    steps: full.steps[start..].to_vec(),
                };
                messages = self.messages(&tail, &instruction);
                if self.fits(&messages) {
                    break;
                }
            }
        }
        let text = self.generate(traj, &messages).map_err(|e| RunError::BackendFailure {
            message: e.message,
            trajectory: Box::new(abort(traj)),
        })?;
        let answer = extract_answer(&text).unwrap_or_else(|| text.trim().to_string());
        let answer = if answer.is_empty() { NO_ANSWER.to_string() } else { answer };
        Ok((answer, true))
    }
}

fn abort(traj: &Trajectory) -> Trajectory {
    let mut t = traj.clone();
    t.status = TrajectoryStatus::Aborted;
    t.final_answer = None;
    t
}

/// The answer stated in a terminal step, if it states one explicitly.
fn direct_answer(traj: &Trajectory) -> Option<String> {
    let last = traj.last_step().filter(|s| s.action.kind == ActionKind::Terminal)?;
    if traj.annotations.format_violations > 0 && last.action.raw_text.contains(TOOL_OPEN) {
        return None;
    }
    extract_answer(&last.thought)
}

/// Produces the final answer for a finished loop: taken from the terminal
/// step when it states one, otherwise from one extra model call over the
/// retained view.
pub fn summarize(
    traj: &Trajectory,
    backend: &dyn ModelBackend,
    config: &AgentConfig,
) -> Result<String, RunError> {
    let registry = ToolRegistry::new();
    let mut driver = Driver {
        backend,
        registry: &registry,
        config,
        namespace: &traj.task.task_id,
        prefix: prefix_messages(&traj.task, config, &registry),
        peak_request_tokens: 0,
    };
    let mut scratch = traj.clone();
    driver.summarize(&mut scratch).map(|(answer, _)| answer)
}

fn prefix_messages(task: &TaskInstruction, config: &AgentConfig, registry: &ToolRegistry) -> Vec<Message> {
    vec![
        Message::system(config.system_prompt.replace("{tools}", describe_tools(registry).trim_end())),
        Message::user(task.text.clone()),
    ]
}

/// Runs one task to completion. Sandboxes are created under the task id.
pub fn run(
    task: &TaskInstruction,
    backend: &dyn ModelBackend,
    registry: &ToolRegistry,
    config: &AgentConfig,
) -> Result<RunResult, RunError> {
    run_in(task, backend, registry, config, &task.task_id)
}

/// Like [`run`], with an explicit sandbox namespace. Concurrent runs must
/// use distinct namespaces.
pub fn run_in(
    task: &TaskInstruction,
    backend: &dyn ModelBackend,
    registry: &ToolRegistry,
    config: &AgentConfig,
    namespace: &str,
) -> Result<RunResult, RunError> {
    task.validate().map_err(|e| RunError::InvalidInput(e.to_string()))?;
    config.sampling.validate().map_err(RunError::InvalidInput)?;
    if config.limits.max_turns == 0 {
        return Err(RunError::InvalidInput("max_turns must be at least 1".into()));
    }
    if registry.is_empty() {
        return Err(RunError::InvalidInput("tool registry is empty".into()));
    }
    let budget = &config.limits.token_budget;
    if budget.max_output >= budget.max_context {
        return Err(RunError::InvalidInput("max_output must be below max_context".into()));
    }

    let mut driver = Driver {
        backend,
        registry,
        config,
        namespace,
        prefix: prefix_messages(task, config, registry),
        peak_request_tokens: 0,
    };
    let result = drive(&mut driver, Trajectory::new(task.clone()));
    registry.close_namespace(namespace);
    result
}

fn drive(driver: &mut Driver<'_>, mut traj: Trajectory) -> Result<RunResult, RunError> {
    let config = driver.config;
    let mut turns = 0usize;
    let mut correction: Vec<Message> = Vec::new();

    let termination = loop {
        if turns >= config.limits.max_turns {
            break Termination::TurnBudgetExhausted;
        }
        let outcome = driver.turn(&mut traj, &correction).map_err(|e| RunError::BackendFailure {
            message: e.message,
            trajectory: Box::new(abort(&traj)),
        })?;
        let Some(outcome) = outcome else {
            if traj.is_empty() && correction.is_empty() {
                let messages = driver.messages(&retain(&traj, RetentionBudget(0)), &[Message::user(config.summary_prompt.clone())]);
                if !driver.fits(&messages) {
                    return Err(RunError::ContextOverflow { trajectory: Box::new(abort(&traj)) });
                }
            }
            break Termination::ContextBudgetExhausted;
        };
        turns += 1;
        match outcome {
            Turn::Step { thought, action } => {
                correction.clear();
                let terminal = action.kind == ActionKind::Terminal;
                let observation = (!terminal)
                    .then(|| driver.registry.dispatch(&action, &config.dispatch, driver.namespace));
                traj.push_step(thought, action, observation)
                    .expect("loop only appends to an open trajectory");
                if terminal {
                    break Termination::ModelTerminated;
                }
            }
            Turn::Malformed { text, error } if correction.is_empty() => {
                correction = vec![
                    Message::assistant(text),
                    Message::user(CORRECTION_PROMPT_V1.trim_end().replace("{error}", &error)),
                ];
            }
            Turn::Malformed { text, .. } => {
                traj.annotations.format_violations += 1;
                let thought = text.split(TOOL_OPEN).next().unwrap_or_default().trim().to_string();
                traj.push_step(thought, Action::terminal(text), None)
                    .expect("loop only appends to an open trajectory");
                break Termination::ModelTerminated;
            }
        }
    };

    let (answer, summary_called) = driver.summarize(&mut traj)?;
    traj.finish(termination.status(), Some(answer.clone()))
        .expect("answer is always present for loop terminations");
    let tool_call_count = traj.tool_call_count();
    Ok(RunResult {
        answer,
        termination,
        turn_count: turns + usize::from(summary_called),
        tool_call_count,
        summary_called,
        peak_request_tokens: driver.peak_request_tokens,
        trajectory: traj,
    })
}
