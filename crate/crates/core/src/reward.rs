//! Scalar rewards and rule-based trajectory curation.
//!
//! `R = alpha_c * correct - alpha_f * violation` with binary components.

use std::collections::HashMap;
use std::io::BufRead;
use std::time::Duration;

use num_traits::Float;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::{NO_ANSWER, TOOL_OPEN};
use crate::error::RewardError;
use crate::record::RewardRecord;
use crate::tools::http::post_json;
use crate::trajectory::{ActionKind, ErrorClass, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig<F> {
    pub alpha_c: F,
    pub alpha_f: F,
}

impl<F: Float> Default for RewardConfig<F> {
    fn default() -> Self {
        Self {
            alpha_c: F::one(),
            alpha_f: F::from(0.5).expect("0.5 is representable"),
        }
    }
}

impl<F: Float> RewardConfig<F> {
    pub fn new(alpha_c: F, alpha_f: F) -> Result<Self, RewardError> {
        for (name, v) in [("alpha_c", alpha_c), ("alpha_f", alpha_f)] {
            if !v.is_finite() || v < F::zero() {
                return Err(RewardError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(Self { alpha_c, alpha_f })
    }

    pub fn combine(&self, correct: bool, violation: bool) -> F {
        let c = if correct { F::one() } else { F::zero() };
        let f = if violation { F::one() } else { F::zero() };
        self.alpha_c * c - self.alpha_f * f
    }
}

/// Lowercase, drop punctuation, strip leading articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let keep = |c: &char| c.is_alphanumeric() || c.is_whitespace();
    let lowered: String = text
        .chars()
        .filter(keep)
        .flat_map(char::to_lowercase)
        .filter(keep)
        .collect();
    let mut words: &[&str] = &lowered.split_whitespace().collect::<Vec<_>>();
    while let [first, rest @ ..] = words {
        if matches!(*first, "a" | "an" | "the") {
            words = rest;
        } else {
            break;
        }
    }
    words.join(" ")
}

pub trait Grader: Send + Sync {
    fn grade(&self, question: &str, prediction: &str, ground_truth: &str) -> Result<bool, RewardError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NormalizedExactMatch;

impl Grader for NormalizedExactMatch {
    fn grade(&self, _question: &str, prediction: &str, ground_truth: &str) -> Result<bool, RewardError> {
        Ok(normalize_answer(prediction) == normalize_answer(ground_truth))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub question: String,
    pub prediction: String,
    pub ground_truth: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub correct: bool,
    #[serde(default)]
    pub rationale: String,
}

/// Client for an external judging service: `POST {endpoint}` with a
/// [`JudgeRequest`], answered by a [`JudgeVerdict`].
#[derive(Debug, Clone)]
pub struct HttpJudge {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpJudge {
    pub fn judge(&self, request: &JudgeRequest) -> Result<JudgeVerdict, RewardError> {
        let reply = post_json(&self.endpoint, request, self.api_key.as_deref(), self.timeout)
            .map_err(|e| RewardError::Grader(e.to_string()))?;
        serde_json::from_value(reply).map_err(|e| RewardError::Grader(format!("bad judge reply: {e}")))
    }
}

impl Grader for HttpJudge {
    fn grade(&self, question: &str, prediction: &str, ground_truth: &str) -> Result<bool, RewardError> {
        let req = JudgeRequest {
            question: question.into(),
            prediction: prediction.into(),
            ground_truth: ground_truth.into(),
        };
        self.judge(&req).map(|v| v.correct)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JudgeFixture {
    #[serde(flatten)]
    request: JudgeRequest,
    #[serde(flatten)]
    verdict: JudgeVerdict,
}

/// Replays recorded judge verdicts. Lookups ignore the question and
/// compare prediction and truth after normalization.
#[derive(Debug, Clone, Default)]
pub struct FixtureJudge {
    verdicts: HashMap<(String, String), JudgeVerdict>,
}

impl FixtureJudge {
    pub fn insert(&mut self, prediction: &str, ground_truth: &str, verdict: JudgeVerdict) {
        self.verdicts
            .insert((normalize_answer(prediction), normalize_answer(ground_truth)), verdict);
    }

    /// Reads JSONL lines of `{question, prediction, ground_truth, correct, rationale}`.
    pub fn read<R: BufRead>(input: R) -> Result<Self, RewardError> {
        let mut judge = Self::default();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| RewardError::Grader(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: JudgeFixture = serde_json::from_str(&line)
                .map_err(|e| RewardError::Grader(format!("judge fixture line {}: {e}", n + 1)))?;
            judge.insert(&f.request.prediction, &f.request.ground_truth, f.verdict);
        }
        Ok(judge)
    }
}

impl Grader for FixtureJudge {
    fn grade(&self, _question: &str, prediction: &str, ground_truth: &str) -> Result<bool, RewardError> {
        self.verdicts
            .get(&(normalize_answer(prediction), normalize_answer(ground_truth)))
            .map(|v| v.correct)
            .ok_or_else(|| RewardError::Grader(format!("no recorded verdict for `{prediction}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FormatRule {
    MissingAnswer,
    PatternMismatch,
    UnparsedToolBlock,
}

impl FormatRule {
    /// Violations that concern only the answer itself.
    pub fn is_answer_rule(self) -> bool {
        matches!(self, Self::MissingAnswer | Self::PatternMismatch)
    }
}

/// Checks answer presence, an optional answer pattern and leftover tool blocks.
#[derive(Debug, Clone, Default)]
pub struct FormatChecker {
    pub answer_pattern: Option<Regex>,
}

impl FormatChecker {
    pub fn with_pattern(pattern: &str) -> Result<Self, RewardError> {
        let re = Regex::new(pattern).map_err(|e| RewardError::Config(e.to_string()))?;
        Ok(Self { answer_pattern: Some(re) })
    }

    /// The first rule the trajectory breaks.
    pub fn violation(&self, traj: &Trajectory) -> Option<FormatRule> {
        let answer = traj.final_answer.as_deref().map(str::trim).unwrap_or_default();
        if answer.is_empty() || answer == NO_ANSWER {
            return Some(FormatRule::MissingAnswer);
        }
        if let Some(re) = &self.answer_pattern {
            if !re.is_match(answer) {
                return Some(FormatRule::PatternMismatch);
            }
        }
        let unparsed = traj.annotations.format_violations > 0
            || traj
                .steps()
                .any(|s| s.action.kind == ActionKind::Terminal && s.action.raw_text.contains(TOOL_OPEN));
        unparsed.then_some(FormatRule::UnparsedToolBlock)
    }

    pub fn check(&self, traj: &Trajectory) -> bool {
        self.violation(traj).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown<F> {
    pub correct: bool,
    pub violation: Option<FormatRule>,
    pub reward: F,
}

impl RewardBreakdown<f64> {
    pub fn record(&self, config: &RewardConfig<f64>) -> RewardRecord {
        RewardRecord {
            correct: self.correct,
            format_violation: self.violation.is_some(),
            alpha_c: config.alpha_c,
            alpha_f: config.alpha_f,
            reward: self.reward,
        }
    }
}

/// Grades the final answer and applies the format penalty. A trajectory
/// without an answer is graded incorrect without consulting the grader.
pub fn compute_reward<F: Float>(
    traj: &Trajectory,
    config: &RewardConfig<F>,
    grader: &dyn Grader,
    checker: &FormatChecker,
) -> Result<RewardBreakdown<F>, RewardError> {
    let truth = traj
        .task
        .ground_truth
        .as_deref()
        .ok_or_else(|| RewardError::MissingGroundTruth(traj.task.task_id.clone()))?;
    let violation = checker.violation(traj);
    let correct = match traj.final_answer.as_deref() {
        Some(answer) if violation != Some(FormatRule::MissingAnswer) => {
            grader.grade(&traj.task.text, answer, truth)?
        }
        _ => false,
    };
    Ok(RewardBreakdown {
        correct,
        violation,
        reward: config.combine(correct, violation.is_some()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CurationReason {
    ConsecutiveNetworkFailures,
    RedundantIdenticalRetries,
    ExcessiveTimeouts,
    TrivialFormatFailure,
    ActionRepetitionLoop,
    PrematureTermination,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationVerdict {
    pub keep: bool,
    pub reasons: Vec<CurationReason>,
}

impl CurationVerdict {
    pub fn from_reasons(reasons: Vec<CurationReason>) -> Self {
        Self {
            keep: reasons.is_empty(),
            reasons,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationThresholds {
    /// Drop when more than this many consecutive network exceptions occur.
    pub max_network_run: usize,
    pub retry_threshold: usize,
    /// Drop when more than this many timeouts occur.
    pub timeout_threshold: usize,
    pub loop_max_period: usize,
    pub loop_min_repeats: usize,
    pub min_calls: usize,
}

impl Default for CurationThresholds {
    fn default() -> Self {
        Self {
            max_network_run: 5,
            retry_threshold: 3,
            timeout_threshold: 5,
            loop_max_period: 4,
            loop_min_repeats: 3,
            min_calls: 2,
        }
    }
}

/// Longest run of consecutive tool observations with the given error class.
pub fn longest_error_run(traj: &Trajectory, class: ErrorClass) -> usize {
    let mut best = 0;
    let mut run = 0;
    for obs in traj.steps().filter_map(|s| s.observation.as_ref()) {
        if obs.error_class() == Some(class) {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

fn action_keys(traj: &Trajectory) -> Vec<String> {
    traj.steps().filter_map(|s| s.action.canonical_key()).collect()
}

/// Longest run of consecutive identical tool calls.
pub fn longest_identical_run(traj: &Trajectory) -> usize {
    let keys = action_keys(traj);
    let mut best = usize::from(!keys.is_empty());
    let mut run = 1;
    for w in keys.windows(2) {
        run = if w[0] == w[1] { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

/// Whether some contiguous stretch of tool calls repeats a block of length
/// at most `max_period` at least `min_repeats` times in a row.
pub fn has_repetition_loop(traj: &Trajectory, max_period: usize, min_repeats: usize) -> bool {
    if min_repeats == 0 {
        return true;
    }
    let keys = action_keys(traj);
    (1..=max_period).any(|p| {
        let need = p * (min_repeats - 1);
        if need == 0 {
            return !keys.is_empty();
        }
        let mut run = 0;
        for i in p..keys.len() {
            run = if keys[i] == keys[i - p] { run + 1 } else { 0 };
            if run >= need {
                return true;
            }
        }
        false
    })
}

/// Curation rules for trajectories graded correct.
pub fn filter_correct(traj: &Trajectory, t: &CurationThresholds) -> CurationVerdict {
    let mut reasons = Vec::new();
    if longest_error_run(traj, ErrorClass::NetworkException) > t.max_network_run {
        reasons.push(CurationReason::ConsecutiveNetworkFailures);
    }
    if longest_identical_run(traj) >= t.retry_threshold {
        reasons.push(CurationReason::RedundantIdenticalRetries);
    }
    let timeouts = traj
        .steps()
        .filter(|s| s.observation.as_ref().and_then(|o| o.error_class()) == Some(ErrorClass::Timeout))
        .count();
    if timeouts > t.timeout_threshold {
        reasons.push(CurationReason::ExcessiveTimeouts);
    }
    CurationVerdict::from_reasons(reasons)
}

/// Curation rules for trajectories graded incorrect.
pub fn filter_incorrect(traj: &Trajectory, t: &CurationThresholds, checker: &FormatChecker) -> CurationVerdict {
    let mut reasons = Vec::new();
    if checker.violation(traj).is_some_and(FormatRule::is_answer_rule) {
        reasons.push(CurationReason::TrivialFormatFailure);
    }
    if has_repetition_loop(traj, t.loop_max_period, t.loop_min_repeats) {
        reasons.push(CurationReason::ActionRepetitionLoop);
    }
    let stopped_by_model = traj.last_step().is_some_and(|s| s.action.kind == ActionKind::Terminal);
    if stopped_by_model && traj.tool_call_count() < t.min_calls {
        reasons.push(CurationReason::PrematureTermination);
    }
    CurationVerdict::from_reasons(reasons)
}

/// Applies the rule set matching the grade.
pub fn curate(traj: &Trajectory, correct: bool, t: &CurationThresholds, checker: &FormatChecker) -> CurationVerdict {
    if correct {
        filter_correct(traj, t)
    } else {
        filter_incorrect(traj, t, checker)
    }
}

/// Report line for one scored trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub id: String,
    pub keep: bool,
    pub reasons: Vec<CurationReason>,
    pub reward: f64,
    pub components: Value,
}

impl CurationRecord {
    pub fn new(id: String, verdict: CurationVerdict, reward: &RewardBreakdown<f64>) -> Self {
        Self {
            id,
            keep: verdict.keep,
            reasons: verdict.reasons,
            reward: reward.reward,
            components: json!({
                "correct": reward.correct,
                "format_violation": reward.violation,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Action, Observation, TaskInstruction};

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The  Eiffel Tower."), "eiffel tower");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("A the an  x"), "x");
        assert_eq!(normalize_answer("Theater"), "theater");
    }

    #[test]
    fn reward_table() {
        let cfg = RewardConfig::<f64>::default();
        assert_eq!(cfg.combine(true, false), 1.0);
        assert_eq!(cfg.combine(true, true), 0.5);
        assert_eq!(cfg.combine(false, false), 0.0);
        assert_eq!(cfg.combine(false, true), -0.5);
        let cfg32 = RewardConfig::<f32>::default();
        assert_eq!(cfg32.combine(false, true), -0.5f32);
    }

    #[test]
    fn negative_alpha_rejected() {
        assert!(RewardConfig::new(-1.0, 0.5).is_err());
        assert!(RewardConfig::new(1.0, f64::NAN).is_err());
    }

    fn finished(steps: Vec<(Action, Option<Observation>)>, answer: &str) -> Trajectory {
        let mut t = Trajectory::new(TaskInstruction::new("t", "q").with_ground_truth("Paris"));
        for (a, o) in steps {
            t.push_step("", a, o).unwrap();
        }
        t.finish(crate::trajectory::TrajectoryStatus::Completed, Some(answer.into()))
            .unwrap();
        t
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let mut t = Trajectory::new(TaskInstruction::new("t", "q"));
        t.push_step("", Action::terminal("x"), None).unwrap();
        t.finish(crate::trajectory::TrajectoryStatus::Completed, Some("x".into()))
            .unwrap();
        let err = compute_reward(&t, &RewardConfig::<f64>::default(), &NormalizedExactMatch, &FormatChecker::default());
        assert!(matches!(err, Err(RewardError::MissingGroundTruth(_))));
    }

    #[test]
    fn exact_match_reward() {
        let t = finished(vec![(Action::terminal("Final answer: the paris"), None)], "the Paris!");
        let r = compute_reward(&t, &RewardConfig::<f64>::default(), &NormalizedExactMatch, &FormatChecker::default()).unwrap();
        assert!(r.correct);
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn fixture_judge_lookup() {
        let text = r#"{"question":"q","prediction":"Paris, France","ground_truth":"Paris","correct":true,"rationale":"same city"}"#;
        let judge = FixtureJudge::read(text.as_bytes()).unwrap();
        assert!(judge.grade("q", "paris france", "paris").unwrap());
        assert!(judge.grade("q", "Lyon", "Paris").is_err());
    }

    #[test]
    fn loop_detection() {
        let call = |q: &str| Action::tool_call("google_search", serde_json::json!({"q": q}), "");
        let seq = |qs: &[&str]| finished(qs.iter().map(|q| (call(q), Some(Observation::ok("r")))).collect(), "x");
        assert!(has_repetition_loop(&seq(&["a", "b", "a", "b", "a", "b"]), 4, 3));
        assert!(!has_repetition_loop(&seq(&["a", "b", "a", "b", "a"]), 4, 3));
        assert!(!has_repetition_loop(&seq(&["a", "b", "c", "d", "e"]), 4, 3));
        assert!(has_repetition_loop(&seq(&["x", "a", "a", "a"]), 4, 3));
        assert_eq!(longest_identical_run(&seq(&["a", "a", "b", "b", "b"])), 3);
    }
}
