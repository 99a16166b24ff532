#![allow(dead_code)]

use std::path::PathBuf;

use agentrt::objectives::{Objective, PreferencePair, ScoredGroup, ScoredPair, ScoredSequence};
use agentrt::trajectory::{Action, ErrorClass, Observation, TaskInstruction, Trajectory, TrajectoryStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn suite_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/suite")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn search(q: &str) -> Action {
    Action::tool_call("google_search", json!({ "q": q }), "")
}

pub fn failed(class: ErrorClass) -> Option<Observation> {
    Some(Observation::failed(class, "injected"))
}

pub fn ok() -> Option<Observation> {
    Some(Observation::ok("result"))
}

/// A finished trajectory from tool steps followed by a terminal answer.
pub fn finished(steps: Vec<(Action, Option<Observation>)>, answer: &str) -> Trajectory {
    let mut t = Trajectory::new(TaskInstruction::new("fixture", "question?").with_ground_truth("Paris"));
    for (a, o) in steps {
        t.push_step("", a, o).unwrap();
    }
    t.push_step(answer, Action::terminal(format!("Final answer: {answer}")), None).unwrap();
    t.finish(TrajectoryStatus::Completed, Some(answer.to_string())).unwrap();
    t
}

/// Distinct queries `q0, q1, ...` with the given observations.
pub fn distinct(obs: Vec<Option<Observation>>) -> Vec<(Action, Option<Observation>)> {
    obs.into_iter().enumerate().map(|(i, o)| (search(&format!("q{i}")), o)).collect()
}

pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize) -> ScoredSequence<f64> {
    let lps: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..-0.05)).collect();
    let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
    let forced = rng.random_range(0..len);
    mask[forced] = true;
    ScoredSequence::new(lps, mask).unwrap()
}

fn reference_like(rng: &mut ChaCha8Rng, policy: &ScoredSequence<f64>) -> ScoredSequence<f64> {
    let lps = (0..policy.len()).map(|_| rng.random_range(-5.0..-0.05)).collect();
    ScoredSequence::new(lps, policy.loss_mask.clone()).unwrap()
}

fn random_pair(rng: &mut ChaCha8Rng) -> PreferencePair<f64> {
    let (a, b) = (rng.random_range(1..16), rng.random_range(1..16));
    let pos = random_sequence(rng, a);
    let neg = random_sequence(rng, b);
    PreferencePair {
        ref_pos: reference_like(rng, &pos),
        ref_neg: reference_like(rng, &neg),
        policy_pos: pos,
        policy_neg: neg,
    }
}

pub fn random_objective(rng: &mut ChaCha8Rng, kind: &str) -> Objective<f64> {
    match kind {
        "sft" => Objective::Sft {
            batch: (0..rng.random_range(1..5)).map(|_| {
                let n = rng.random_range(1..16);
                random_sequence(rng, n)
            }).collect(),
        },
        "dpo" => Objective::Dpo { pair: random_pair(rng), beta: rng.random_range(0.01..2.0) },
        "po" => Objective::Po {
            pair: random_pair(rng),
            beta: rng.random_range(0.01..2.0),
            lambda: rng.random_range(0.0..2.0),
        },
        "grpo" => Objective::Grpo {
            groups: (0..rng.random_range(1..4))
                .map(|_| {
                    let g = rng.random_range(2..6);
                    let sequences = (0..g)
                        .map(|_| {
                            let n = rng.random_range(1..12);
                            let policy = random_sequence(rng, n);
                            ScoredPair { reference: reference_like(rng, &policy), policy }
                        })
                        .collect();
                    ScoredGroup { rewards: (0..g).map(|_| rng.random_range(-1.0..1.0)).collect(), sequences }
                })
                .collect(),
            beta_kl: rng.random_range(0.0..0.5),
            normalize_std: rng.random_bool(0.5),
        },
        other => panic!("unknown loss {other}"),
    }
}

/// Largest relative error between analytic gradients and central
/// differences with step `h`. The denominator is floored at 1e-4: below
/// that, differencing round-off (about `eps * loss / h`) dominates.
pub fn max_fd_error(objective: &Objective<f64>, h: f64) -> f64 {
    let analytic = objective.gradients().unwrap();
    let mut worst: f64 = 0.0;
    for (s, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let eval = |delta: f64| {
                let mut o = objective.clone();
                o.policy_sequences_mut()[s].token_logprobs[j] += delta;
                o.loss().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}
