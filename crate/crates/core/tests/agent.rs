mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use agentrt::agent::{run, AgentConfig, RetryPolicy, ScriptedBackend, Termination};
use agentrt::context::{RetentionBudget, TokenBudget};
use agentrt::tools::mock::MockBackend;
use agentrt::tools::{builtin_suite, Blocklist, ToolRegistry};
use agentrt::{TaskInstruction, TrajectoryStatus};

fn registry() -> ToolRegistry {
    builtin_suite(&Arc::new(MockBackend::default()).backend_set(), Blocklist::default()).unwrap()
}

fn search_turn(i: usize) -> String {
    format!("Looking up item {i}.\n<tool>{{\"name\": \"google_search\", \"arguments\": {{\"q\": \"item {i}\"}}}}</tool>")
}

fn config(max_turns: usize, max_context: usize) -> AgentConfig {
    let mut cfg = AgentConfig { retry: RetryPolicy::immediate(3), ..AgentConfig::default() };
    cfg.limits.max_turns = max_turns;
    cfg.limits.retention = RetentionBudget(5);
    cfg.limits.token_budget = TokenBudget::new(max_context, 1024).unwrap();
    cfg
}

#[test]
fn six_hundred_calls_fit_the_window() {
    let mut turns: Vec<String> = (0..600).map(search_turn).collect();
    turns.push("Final answer: done".into());
    let backend = ScriptedBackend::new(turns);
    let started = Instant::now();
    let r = run(&TaskInstruction::new("long", "Count."), &backend, &registry(), &config(601, 262_144)).unwrap();
    assert!(started.elapsed() < Duration::from_secs(60));
    assert_eq!(r.tool_call_count, 600);
    assert_eq!(r.termination, Termination::ModelTerminated);
    assert!(r.peak_request_tokens <= 262_144 - 1024);
    assert_eq!(r.trajectory.status, TrajectoryStatus::Completed);
}

#[test]
fn turn_limit_hands_over_to_summary() {
    let backend = ScriptedBackend::new((0..50).map(search_turn)).with_summary("Final answer: 12");
    let r = run(&TaskInstruction::new("t", "q"), &backend, &registry(), &config(10, 262_144)).unwrap();
    assert_eq!(r.termination, Termination::TurnBudgetExhausted);
    assert_eq!(r.tool_call_count, 10);
    assert_eq!(r.answer, "12");
    assert!(r.summary_called);
}

#[test]
fn small_window_stops_before_overflow() {
    let backend = ScriptedBackend::new((0..200).map(search_turn)).with_summary("Final answer: x");
    let r = run(&TaskInstruction::new("t", "q"), &backend, &registry(), &config(200, 6_000)).unwrap();
    assert_eq!(r.termination, Termination::ContextBudgetExhausted);
    assert!(r.peak_request_tokens <= 6_000 - 1024);
    assert!(r.tool_call_count < 200);
}

#[test]
fn retention_keeps_prompt_flat() {
    // With K fixed, each turn adds only the assistant text and a placeholder.
    let measure = |n: usize| {
        let mut turns: Vec<String> = (0..n).map(search_turn).collect();
        turns.push("Final answer: x".into());
        let backend = ScriptedBackend::new(turns);
        run(&TaskInstruction::new("t", "q"), &backend, &registry(), &config(1000, 262_144)).unwrap().peak_request_tokens
    };
    let (a, b) = (measure(20), measure(40));
    let per_turn = (b - a) as f64 / 20.0;
    assert!(per_turn < 40.0, "{per_turn} tokens per turn");
}
