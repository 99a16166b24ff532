mod common;

use agentrt::reward::{
    compute_reward, curate, normalize_answer, CurationReason, CurationThresholds, FormatChecker, NormalizedExactMatch,
    RewardConfig,
};
use agentrt::trajectory::{Action, ErrorClass};
use common::{distinct, failed, finished, ok, search};
use proptest::prelude::*;

fn reasons(t: &agentrt::Trajectory, correct: bool) -> Vec<CurationReason> {
    curate(t, correct, &CurationThresholds::default(), &FormatChecker::default()).reasons
}

#[test]
fn network_run_boundary() {
    let run = |n: usize| {
        let mut obs = vec![failed(ErrorClass::NetworkException); n];
        obs.push(ok());
        finished(distinct(obs), "Paris")
    };
    assert!(reasons(&run(5), true).is_empty());
    assert_eq!(reasons(&run(6), true), vec![CurationReason::ConsecutiveNetworkFailures]);
}

#[test]
fn interrupted_network_runs_are_not_consecutive() {
    let mut obs = vec![failed(ErrorClass::NetworkException); 4];
    obs.push(ok());
    obs.extend(vec![failed(ErrorClass::NetworkException); 4]);
    assert!(reasons(&finished(distinct(obs), "Paris"), true).is_empty());
}

#[test]
fn incorrect_rules_ignore_network_failures() {
    let obs = vec![failed(ErrorClass::NetworkException); 8];
    assert!(reasons(&finished(distinct(obs), "Lyon"), false).is_empty());
}

#[test]
fn answer_placeholder_is_a_format_failure() {
    let t = finished(distinct(vec![ok(), ok()]), "No answer.");
    assert_eq!(reasons(&t, false), vec![CurationReason::TrivialFormatFailure]);
    let r = compute_reward(&t, &RewardConfig::<f64>::default(), &NormalizedExactMatch, &FormatChecker::default()).unwrap();
    assert_eq!(r.reward, -0.5);
}

#[test]
fn identical_retries_threshold() {
    let t = |n| finished(vec![(search("same"), ok()); n], "Paris");
    assert!(reasons(&t(2), true).is_empty());
    assert_eq!(reasons(&t(3), true), vec![CurationReason::RedundantIdenticalRetries]);
}

#[test]
fn unparsed_tool_block_in_answer() {
    let mut t = agentrt::Trajectory::new(agentrt::TaskInstruction::new("t", "q").with_ground_truth("Paris"));
    t.push_step("", Action::terminal("Final answer: Paris <tool>{\"name\":"), None).unwrap();
    t.finish(agentrt::TrajectoryStatus::Completed, Some("Paris".into())).unwrap();
    let r = compute_reward(&t, &RewardConfig::<f64>::default(), &NormalizedExactMatch, &FormatChecker::default()).unwrap();
    assert!(r.correct);
    assert_eq!(r.reward, 0.5);
}

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,80}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once.clone());
    }

    #[test]
    fn normalization_ignores_case_and_punctuation(s in "[A-Za-z ]{0,40}") {
        prop_assert_eq!(normalize_answer(&s.to_uppercase()), normalize_answer(&format!("{}!?", s.to_lowercase())));
    }

    #[test]
    fn reward_is_bounded_by_coefficients(ac in 0.0f64..10.0, af in 0.0f64..10.0, c: bool, v: bool) {
        let cfg = RewardConfig::new(ac, af).unwrap();
        let r = cfg.combine(c, v);
        prop_assert!(r <= ac && r >= -af);
        prop_assert_eq!(r, if c { ac } else { 0.0 } - if v { af } else { 0.0 });
    }
}
