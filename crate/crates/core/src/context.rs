//! Recency-based context retention, result truncation and token accounting.
//!
//! At step `t` only the tool responses of the `K` most recent steps are shown
//! to the model; older responses are replaced by [`OMITTED_PLACEHOLDER`].
//! Thoughts and actions are never masked.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::trajectory::{canonical_json, Action, ActionKind, Observation, Step, Trajectory};

/// Appended (after a newline) to tool output cut at the length limit.
pub const TRUNCATION_MARKER: &str = "[Result truncated]";
/// Rendered in place of a masked tool response.
pub const OMITTED_PLACEHOLDER: &str = "[omitted]";
/// Default character limit for truncatable tool output.
pub const DEFAULT_TRUNCATION_LIMIT: usize = 50_000;
pub const DEFAULT_RETENTION: usize = 5;
pub const DEFAULT_MAX_CONTEXT: usize = 262_144;
pub const DEFAULT_MAX_OUTPUT: usize = 16_384;

/// Tokens charged per rendered message for role framing.
pub const MESSAGE_OVERHEAD: usize = 4;
/// Tokens charged once per request for the reply primer.
pub const TEMPLATE_OVERHEAD: usize = 3;

/// Number of most recent tool responses kept verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RetentionBudget(pub usize);

impl Default for RetentionBudget {
    fn default() -> Self {
        Self(DEFAULT_RETENTION)
    }
}

impl RetentionBudget {
    /// Lowest kept index at step `t`, or `None` when nothing is kept.
    fn lowest_kept(self, t: usize) -> Option<usize> {
        if self.0 == 0 || t <= 1 {
            return None;
        }
        Some(t.saturating_sub(self.0).max(1))
    }

    /// Whether the response of step `i` is visible when producing step `t`.
    pub fn keeps(self, t: usize, i: usize) -> bool {
        i >= 1 && i < t && self.lowest_kept(t).is_some_and(|lo| i >= lo)
    }
}

/// Indices `i` in `1..t` with `i >= t - K`.
///
/// # Panics
/// If `t == 0`; step indices start at 1.
pub fn retention_set(t: usize, budget: RetentionBudget) -> BTreeSet<usize> {
    assert!(t >= 1, "step index starts at 1");
    match budget.lowest_kept(t) {
        Some(lo) => (lo..t).collect(),
        None => BTreeSet::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskedObservation<'a> {
    Kept(&'a Observation),
    Omitted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetainedStep<'a> {
    pub step: &'a Step,
    /// `None` for terminal steps, which have no observation.
    pub observation: Option<MaskedObservation<'a>>,
}

impl<'a> RetainedStep<'a> {
    pub fn thought(&self) -> &'a str {
        &self.step.thought
    }

    pub fn action(&self) -> &'a Action {
        &self.step.action
    }
}

/// The recency-filtered history the model actually sees.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedView<'a> {
    /// Index of the step about to be produced.
    pub next_index: usize,
    pub steps: Vec<RetainedStep<'a>>,
}

impl<'a> RetainedView<'a> {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn kept_indices(&self) -> BTreeSet<usize> {
        self.steps
            .iter()
            .filter(|s| matches!(s.observation, Some(MaskedObservation::Kept(_))))
            .map(|s| s.step.index)
            .collect()
    }

    /// Applies the masking rule again to an already retained view.
    pub fn retain(&self, budget: RetentionBudget) -> RetainedView<'a> {
        let t = self.next_index;
        let steps = self
            .steps
            .iter()
            .map(|s| RetainedStep {
                step: s.step,
                observation: s.observation.map(|o| match o {
                    MaskedObservation::Kept(obs) if budget.keeps(t, s.step.index) => {
                        MaskedObservation::Kept(obs)
                    }
                    _ => MaskedObservation::Omitted,
                }),
            })
            .collect();
        RetainedView { next_index: t, steps }
    }

    /// The first `n` steps, as seen from the same step index.
    pub fn prefix(&self, n: usize) -> RetainedView<'a> {
        RetainedView {
            next_index: self.next_index,
            steps: self.steps[..n.min(self.steps.len())].to_vec(),
        }
    }
}

/// Masks every observation outside the retention set of the next step.
pub fn retain(traj: &Trajectory, budget: RetentionBudget) -> RetainedView<'_> {
    let t = traj.len() + 1;
    let steps = traj
        .steps()
        .map(|step| RetainedStep {
            step,
            observation: step.observation.as_ref().map(|obs| {
                if budget.keeps(t, step.index) {
                    MaskedObservation::Kept(obs)
                } else {
                    MaskedObservation::Omitted
                }
            }),
        })
        .collect();
    RetainedView { next_index: t, steps }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truncated {
    pub text: String,
    pub truncated: bool,
}

/// Cuts `text` to `limit` characters and appends a newline and
/// [`TRUNCATION_MARKER`] when it was longer.
pub fn truncate_result(text: &str, limit: usize) -> Truncated {
    assert!(limit > 0, "truncation limit must be positive");
    match text.char_indices().nth(limit) {
        None => Truncated {
            text: text.to_string(),
            truncated: false,
        },
        Some((cut, _)) => {
            let mut out = String::with_capacity(cut + 1 + TRUNCATION_MARKER.len());
            out.push_str(&text[..cut]);
            out.push('\n');
            out.push_str(TRUNCATION_MARKER);
            Truncated {
                text: out,
                truncated: true,
            }
        }
    }
}

/// Token-counting function. Must be deterministic.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteQuarterCounter;

impl TokenCounter for ByteQuarterCounter {
    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

impl<F> TokenCounter for F
where
    F: Fn(&str) -> usize + Send + Sync,
{
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

#[derive(Clone)]
pub struct TokenBudget {
    pub max_context: usize,
    pub max_output: usize,
    pub counter: Arc<dyn TokenCounter>,
}

impl fmt::Debug for TokenBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenBudget")
            .field("max_context", &self.max_context)
            .field("max_output", &self.max_output)
            .finish_non_exhaustive()
    }
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            max_context: DEFAULT_MAX_CONTEXT,
            max_output: DEFAULT_MAX_OUTPUT,
            counter: Arc::new(ByteQuarterCounter),
        }
    }
}

impl TokenBudget {
    pub fn new(max_context: usize, max_output: usize) -> Result<Self, String> {
        if max_output >= max_context {
            return Err(format!(
                "max_output ({max_output}) must be below max_context ({max_context})"
            ));
        }
        Ok(Self {
            max_context,
            max_output,
            ..Self::default()
        })
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    /// Whether a prompt of `prompt_tokens` leaves room for a full reply.
    pub fn fits(&self, prompt_tokens: usize) -> bool {
        prompt_tokens + self.max_output <= self.max_context
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

pub fn render_tool_block(name: &str, arguments: &serde_json::Value) -> String {
    let body = serde_json::json!({ "name": name, "arguments": arguments });
    format!("<tool>{}</tool>", canonical_json(&body))
}

fn render_action(step: &Step) -> String {
    let action = &step.action;
    match action.kind {
        ActionKind::Terminal => {
            if action.raw_text.is_empty() {
                step.thought.clone()
            } else {
                action.raw_text.clone()
            }
        }
        ActionKind::ToolCall => {
            let block = if action.raw_text.is_empty() {
                render_tool_block(
                    action.tool_name.as_deref().unwrap_or_default(),
                    action.arguments.as_ref().unwrap_or(&serde_json::Value::Null),
                )
            } else {
                action.raw_text.clone()
            };
            if step.thought.is_empty() {
                block
            } else {
                format!("{}\n{}", step.thought, block)
            }
        }
    }
}

pub fn render_observation(obs: &Observation) -> String {
    let body = match &obs.error {
        None => obs.content.clone(),
        Some(err) if obs.content.is_empty() => format!("[{}] {}", err.class, err.message),
        Some(err) => format!("[{}] {}\n{}", err.class, err.message, obs.content),
    };
    format!("<result>\n{body}\n</result>")
}

/// Renders a view as alternating assistant turns and user turns carrying
/// tool results.
pub fn render_view(view: &RetainedView<'_>) -> Vec<Message> {
    let mut out = Vec::with_capacity(view.steps.len() * 2);
    for s in &view.steps {
        out.push(Message::assistant(render_action(s.step)));
        match s.observation {
            Some(MaskedObservation::Kept(obs)) => out.push(Message::user(render_observation(obs))),
            Some(MaskedObservation::Omitted) => out.push(Message::user(OMITTED_PLACEHOLDER)),
            None => {}
        }
    }
    out
}

pub fn count_message_tokens(messages: &[Message], counter: &dyn TokenCounter) -> usize {
    messages
        .iter()
        .map(|m| MESSAGE_OVERHEAD + counter.count(&m.content))
        .sum()
}

/// Tokens of the rendered view plus the fixed request overhead.
pub fn count_tokens(view: &RetainedView<'_>, budget: &TokenBudget) -> usize {
    TEMPLATE_OVERHEAD + count_message_tokens(&render_view(view), budget.counter.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TaskInstruction;
    use serde_json::json;

    fn traj(n: usize) -> Trajectory {
        let mut t = Trajectory::new(TaskInstruction::new("t", "q"));
        for i in 1..=n {
            t.push_step(
                format!("thought {i}"),
                Action::tool_call("run_command", json!({"command": format!("echo {i}")}), ""),
                Some(Observation::ok(format!("output {i}"))),
            )
            .unwrap();
        }
        t
    }

    #[test]
    fn retention_set_examples() {
        assert_eq!(retention_set(9, RetentionBudget(3)), BTreeSet::from([6, 7, 8]));
        assert!(retention_set(5, RetentionBudget(0)).is_empty());
        assert_eq!(retention_set(4, RetentionBudget(10)), BTreeSet::from([1, 2, 3]));
        assert!(retention_set(1, RetentionBudget(5)).is_empty());
    }

    #[test]
    fn seven_steps_keep_last_five() {
        let t = traj(7);
        let view = retain(&t, RetentionBudget(5));
        assert_eq!(view.kept_indices(), BTreeSet::from([3, 4, 5, 6, 7]));
        assert_eq!(view.steps[0].observation, Some(MaskedObservation::Omitted));
        assert_eq!(view.steps[1].observation, Some(MaskedObservation::Omitted));
    }

    #[test]
    fn zero_budget_masks_everything_but_keeps_thoughts() {
        let t = traj(4);
        let view = retain(&t, RetentionBudget(0));
        assert!(view.kept_indices().is_empty());
        for (s, orig) in view.steps.iter().zip(t.steps()) {
            assert_eq!(s.thought(), orig.thought);
            assert_eq!(s.action(), &orig.action);
        }
    }

    #[test]
    fn large_budget_is_identity() {
        let t = traj(2);
        let view = retain(&t, RetentionBudget(2));
        assert_eq!(view.kept_indices(), BTreeSet::from([1, 2]));
    }

    #[test]
    fn truncation_examples() {
        let r = truncate_result("abc", 10);
        assert_eq!(r, Truncated { text: "abc".into(), truncated: false });
        let r = truncate_result("abcdefghij", 4);
        assert_eq!(r.text, "abcd\n[Result truncated]");
        assert!(r.truncated);
        // exactly at the limit is untouched
        assert!(!truncate_result("abcd", 4).truncated);
    }

    #[test]
    fn truncation_counts_characters_not_bytes() {
        let r = truncate_result("ééééé", 2);
        assert_eq!(r.text, "éé\n[Result truncated]");
    }

    #[test]
    fn omitted_renders_placeholder() {
        let t = traj(3);
        let msgs = render_view(&retain(&t, RetentionBudget(1)));
        assert_eq!(msgs.len(), 6);
        assert_eq!(msgs[1].content, OMITTED_PLACEHOLDER);
        assert_eq!(msgs[3].content, OMITTED_PLACEHOLDER);
        assert_eq!(msgs[5].content, "<result>\noutput 3\n</result>");
        assert_eq!(msgs[0].role, Role::Assistant);
        assert!(msgs[0].content.starts_with("thought 1\n<tool>"));
    }

    #[test]
    fn empty_view_costs_only_overhead() {
        let t = traj(0);
        assert_eq!(count_tokens(&retain(&t, RetentionBudget(5)), &TokenBudget::default()), TEMPLATE_OVERHEAD);
    }

    #[test]
    fn token_budget_rejects_output_above_context() {
        assert!(TokenBudget::new(100, 100).is_err());
        assert!(TokenBudget::new(101, 100).is_ok());
        assert!(TokenBudget::default().fits(DEFAULT_MAX_CONTEXT - DEFAULT_MAX_OUTPUT));
        assert!(!TokenBudget::default().fits(DEFAULT_MAX_CONTEXT - DEFAULT_MAX_OUTPUT + 1));
    }
}
