mod common;

use agentrt::context::{
    count_message_tokens, retain, retention_set, truncate_result, ByteQuarterCounter, Message, RetentionBudget,
    OMITTED_PLACEHOLDER, TRUNCATION_MARKER,
};
use agentrt::context::render_view;
use agentrt::trajectory::{Observation, TaskInstruction, Trajectory};
use proptest::prelude::*;

fn with_results(n: usize) -> Trajectory {
    let mut t = Trajectory::new(TaskInstruction::new("t", "q"));
    for i in 1..=n {
        t.push_step(format!("step {i}"), common::search(&format!("q{i}")), Some(Observation::ok(format!("body {i}"))))
            .unwrap();
    }
    t
}

#[test]
fn retention_examples() {
    assert_eq!(retention_set(10, RetentionBudget(5)).into_iter().collect::<Vec<_>>(), vec![5, 6, 7, 8, 9]);
    assert!(retention_set(1, RetentionBudget(5)).is_empty());
    assert!(retention_set(7, RetentionBudget(0)).is_empty());
    assert_eq!(retention_set(3, RetentionBudget(10)).len(), 2);
}

#[test]
fn masked_results_render_as_placeholder() {
    let t = with_results(8);
    let msgs = render_view(&retain(&t, RetentionBudget(2)));
    let omitted = msgs.iter().filter(|m| m.content.contains(OMITTED_PLACEHOLDER)).count();
    assert_eq!(omitted, 6);
    assert!(msgs.iter().any(|m| m.content.contains("body 8")));
    assert!(!msgs.iter().any(|m| m.content.contains("body 6")));
}

#[test]
fn truncation_examples() {
    let short = truncate_result("abc", 10);
    assert_eq!((short.text.as_str(), short.truncated), ("abc", false));
    let cut = truncate_result("abcdefghij", 4);
    assert_eq!(cut.text, "abcd\n[Result truncated]");
    assert!(cut.truncated);
    let big = "x".repeat(1_000_000);
    let r = truncate_result(&big, 50_000);
    assert_eq!(r.text.chars().count(), 50_000 + "\n[Result truncated]".chars().count());
}

#[test]
fn token_count_of_known_messages() {
    // 8 bytes -> 2 tokens, 9 bytes -> 3 tokens, plus 4 per message.
    let msgs = [Message::user("12345678"), Message::assistant("123456789")];
    assert_eq!(count_message_tokens(&msgs, &ByteQuarterCounter), 2 + 3 + 2 * 4);
}

proptest! {
    #[test]
    fn retention_matches_definition(t in 1usize..200, k in 0usize..50) {
        let brute: Vec<usize> = (1..t).filter(|&i| i + k >= t).collect();
        prop_assert_eq!(retention_set(t, RetentionBudget(k)).into_iter().collect::<Vec<_>>(), brute);
    }

    #[test]
    fn retained_view_keeps_exactly_the_window(n in 0usize..30, k in 0usize..10) {
        let t = with_results(n);
        let view = retain(&t, RetentionBudget(k));
        prop_assert_eq!(view.kept_indices(), retention_set(n + 1, RetentionBudget(k)));
    }

    #[test]
    fn truncation_contract(text in "\\PC{0,300}", limit in 1usize..200) {
        let r = truncate_result(&text, limit);
        let suffix = format!("\n{TRUNCATION_MARKER}");
        prop_assert!(r.text.chars().count() <= limit + suffix.chars().count());
        if r.truncated {
            prop_assert!(r.text.ends_with(&suffix));
            let head = &r.text[..r.text.len() - suffix.len()];
            prop_assert!(text.starts_with(head));
            prop_assert_eq!(head.chars().count(), limit);
        } else {
            prop_assert_eq!(&r.text, &text);
        }
    }

    #[test]
    fn token_count_grows_with_content(a in "[a-z]{0,64}", extra in "[a-z]{1,64}") {
        let base = count_message_tokens(&[Message::user(a.clone())], &ByteQuarterCounter);
        let more = count_message_tokens(&[Message::user(format!("{a}{extra}"))], &ByteQuarterCounter);
        prop_assert!(more >= base);
    }
}
