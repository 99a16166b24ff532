mod common;

use std::collections::HashSet;

use agentrt::rollout::{
    continue_batch, group_by_prompt, run_batch, simulate_long_tail, stable_hash, BatchResult, BatchSpec, CarriedTask,
    DurationDistribution, RolloutTask, TaskOutcome,
};
use agentrt::{SchedulerError, TaskInstruction, Trajectory};
use proptest::prelude::*;

fn executor(fail_pct: u64, seed: u64) -> impl Fn(&RolloutTask) -> TaskOutcome + Sync {
    move |t: &RolloutTask| {
        let h = stable_hash(&[&seed.to_le_bytes(), t.id().as_bytes(), &t.attempt.to_le_bytes()]);
        if h % 100 < fail_pct {
            TaskOutcome::Unfinished("injected".into())
        } else {
            TaskOutcome::Completed(Trajectory::new(TaskInstruction::new(t.id(), "q")))
        }
    }
}

/// Feeds `prompts` in chunks and runs batches until the work runs dry.
fn drain(prompts: &[String], spec: &BatchSpec, fail_pct: u64) -> Vec<BatchResult> {
    let exec = executor(fail_pct, spec.seed);
    let chunk = spec.groups_needed() + 2;
    let mut fresh = prompts.chunks(chunk);
    let mut carried: Vec<CarriedTask> = Vec::new();
    let mut batches = Vec::new();
    loop {
        let mut pending = std::mem::take(&mut carried);
        if let Some(next) = fresh.next() {
            pending.extend(next.iter().flat_map(|p| spec.tasks_for(p)).map(|task| CarriedTask { task, completed: None }));
        }
        if pending.is_empty() {
            break;
        }
        match continue_batch(pending, spec, &exec) {
            Ok(b) => {
                carried = b.carried_over.clone();
                batches.push(b);
            }
            Err(SchedulerError::Starvation { .. }) if fresh.len() == 0 => break,
            Err(SchedulerError::Starvation { .. }) => panic!("starved with prompts left"),
            Err(e) => panic!("{e}"),
        }
    }
    batches
}

fn check_batches(batches: &[BatchResult], spec: &BatchSpec) {
    let mut seen = HashSet::new();
    for b in batches {
        assert!(b.is_conserved());
        assert_eq!(b.trajectories.len(), spec.batch_size);
        let groups = group_by_prompt(b).unwrap();
        assert_eq!(groups.len() * spec.group_size, spec.batch_size);
        for e in &b.executions {
            assert!(seen.insert(e.clone()), "duplicate execution {e:?}");
        }
    }
}

#[test]
fn conservation_under_failures() {
    let prompts: Vec<String> = (0..250).map(|i| format!("p{i}")).collect();
    for w in [1, 4, 16] {
        let spec = BatchSpec::new(4, 32, w).with_seed(42);
        let batches = drain(&prompts, &spec, 20);
        assert!(batches.len() >= 20, "only {} batches", batches.len());
        check_batches(&batches, &spec);
    }
}

#[test]
fn panicking_executor_is_retried_then_dropped() {
    let spec = BatchSpec::new(2, 2, 2).with_max_attempts(2);
    let exec = |t: &RolloutTask| -> TaskOutcome {
        if t.prompt_id == "bad" {
            panic!("boom");
        }
        TaskOutcome::Completed(Trajectory::new(TaskInstruction::new(t.id(), "q")))
    };
    let b = run_batch(&["bad".to_string(), "good".to_string()], &spec, &exec).unwrap();
    assert_eq!(group_by_prompt(&b).unwrap()[0].prompt_id, "good");
    assert!(b.is_conserved());
}

#[test]
fn invalid_specs() {
    assert!(BatchSpec::new(3, 8, 2).validate().is_err());
    assert!(BatchSpec::new(2, 8, 0).validate().is_err());
    let exec = executor(0, 0);
    assert!(run_batch(&["a".to_string()], &BatchSpec::new(2, 4, 1), &exec).is_err());
}

#[test]
fn streaming_beats_gang_on_long_tails() {
    let spec = BatchSpec::new(1, 64, 8);
    let pareto = DurationDistribution::Pareto { scale: 1.0, shape: 1.5 };
    for seed in 0..20 {
        let r = simulate_long_tail(&spec, 64, pareto, seed).unwrap();
        assert!(r.streaming.makespan <= r.gang.makespan);
        assert!(r.streaming.total_idle() <= r.gang.total_idle() + 1e-9);
    }
    let c = simulate_long_tail(&spec, 64, DurationDistribution::Constant(1.0), 0).unwrap();
    assert_eq!(c.streaming.makespan, c.gang.makespan);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_batch_is_conserved(
        prompts in 4usize..30,
        g in 1usize..5,
        groups in 1usize..4,
        w in 1usize..6,
        fail in 0u64..40,
        seed: u64,
    ) {
        let names: Vec<String> = (0..prompts).map(|i| format!("p{i}")).collect();
        let spec = BatchSpec::new(g, g * groups, w).with_seed(seed);
        check_batches(&drain(&names, &spec, fail), &spec);
    }

    #[test]
    fn stable_hash_is_order_sensitive(a in "[a-z]{1,8}", b in "[a-z]{1,8}") {
        prop_assume!(a != b);
        prop_assert_ne!(
            stable_hash(&[a.as_bytes(), b.as_bytes()]),
            stable_hash(&[b.as_bytes(), a.as_bytes()])
        );
    }
}
