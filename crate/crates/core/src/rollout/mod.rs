//! Streaming rollouts: `W` workers pull tasks from a shared FIFO queue, run
//! them to completion and push results to a sink. Unfinished tasks go back
//! to the tail of the queue. A batch is cut as soon as `B / G` prompt groups
//! are complete; whatever is still in flight finishes and is carried over.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::SchedulerError;
use crate::trajectory::Trajectory;

mod sim;

pub use sim::{simulate_long_tail, DurationDistribution, LongTailReport, ScheduleStats};

/// FNV-1a over the parts, finished with a splitmix64 round. Stable across
/// platforms and releases, unlike `std`'s hasher.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.iter().chain(&[0xff]) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RolloutTask {
    pub prompt_id: String,
    /// 1-based member index within the prompt's group.
    pub group_index: usize,
    pub attempt: u32,
    pub seed: u64,
}

impl RolloutTask {
    pub fn id(&self) -> String {
        format!("{}#{}", self.prompt_id, self.group_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub group_size: usize,
    pub batch_size: usize,
    pub workers: usize,
    pub max_attempts: u32,
    pub seed: u64,
}

impl BatchSpec {
    pub fn new(group_size: usize, batch_size: usize, workers: usize) -> Self {
        Self {
            group_size,
            batch_size,
            workers,
            max_attempts: 3,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_attempts(mut self, max_attempts: u32) -> Self {
        self.max_attempts = max_attempts;
        self
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: &str| Err(SchedulerError::InvalidSpec(m.to_string()));
        if self.group_size == 0 {
            return bad("group size must be at least 1");
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.group_size) {
            return bad("batch size must be a positive multiple of the group size");
        }
        if self.workers == 0 {
            return bad("at least one worker is required");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        Ok(())
    }

    pub fn groups_needed(&self) -> usize {
        self.batch_size / self.group_size
    }

    /// The `G` fresh tasks of one prompt.
    pub fn tasks_for(&self, prompt_id: &str) -> Vec<RolloutTask> {
        (1..=self.group_size)
            .map(|g| RolloutTask {
                prompt_id: prompt_id.to_string(),
                group_index: g,
                attempt: 0,
                seed: stable_hash(&[&self.seed.to_le_bytes(), prompt_id.as_bytes(), &g.to_le_bytes()]),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutcome {
    Completed(Trajectory),
    /// Timed out, aborted or otherwise unfinished; the task is requeued.
    Unfinished(String),
}

pub trait Executor: Sync {
    fn execute(&self, task: &RolloutTask) -> TaskOutcome;
}

impl<F> Executor for F
where
    F: Fn(&RolloutTask) -> TaskOutcome + Sync,
{
    fn execute(&self, task: &RolloutTask) -> TaskOutcome {
        self(task)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletedTask {
    pub task: RolloutTask,
    pub trajectory: Trajectory,
}

/// Work handed to the next batch: either still to run, or already finished
/// but not part of a complete group when the batch was cut.
#[derive(Debug, Clone, PartialEq)]
pub struct CarriedTask {
    pub task: RolloutTask,
    pub completed: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedTask {
    pub task: RolloutTask,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Execution {
    pub prompt_id: String,
    pub group_index: usize,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub group_size: usize,
    /// Exactly `B` trajectories, in whole groups, in group completion order.
    pub trajectories: Vec<CompletedTask>,
    pub carried_over: Vec<CarriedTask>,
    pub dropped: Vec<DroppedTask>,
    /// Distinct tasks that entered this batch.
    pub submitted: usize,
    /// Every executor invocation, in start order.
    pub executions: Vec<Execution>,
}

impl BatchResult {
    pub fn is_conserved(&self) -> bool {
        self.submitted == self.trajectories.len() + self.carried_over.len() + self.dropped.len()
    }

    pub fn manifest(&self, spec: &BatchSpec, prompts: &[String]) -> BatchManifest {
        let mut attempts = BTreeMap::new();
        for e in &self.executions {
            let slot = attempts.entry(format!("{}#{}", e.prompt_id, e.group_index)).or_insert(0);
            *slot = (*slot).max(e.attempt + 1);
        }
        BatchManifest {
            prompts: prompts.to_vec(),
            group_size: spec.group_size,
            batch_size: spec.batch_size,
            workers: spec.workers,
            seed: spec.seed,
            completed: self.trajectories.iter().map(|c| c.task.id()).collect(),
            carried: self.carried_over.iter().map(|c| c.task.id()).collect(),
            dropped: self.dropped.iter().map(|d| d.task.id()).collect(),
            attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub prompts: Vec<String>,
    #[serde(rename = "G")]
    pub group_size: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    #[serde(rename = "W")]
    pub workers: usize,
    pub seed: u64,
    pub completed: Vec<String>,
    pub carried: Vec<String>,
    pub dropped: Vec<String>,
    /// Executions per task id.
    pub attempts: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_id: String,
    pub members: Vec<CompletedTask>,
}

/// Splits a batch into per-prompt groups ordered by `group_index`.
pub fn group_by_prompt(batch: &BatchResult) -> Result<Vec<Group>, SchedulerError> {
    let mut order = Vec::new();
    let mut by_prompt: BTreeMap<&str, Vec<CompletedTask>> = BTreeMap::new();
    for c in &batch.trajectories {
        let slot = by_prompt.entry(&c.task.prompt_id).or_default();
        if slot.is_empty() {
            order.push(c.task.prompt_id.clone());
        }
        slot.push(c.clone());
    }
    order
        .into_iter()
        .map(|prompt_id| {
            let mut members = by_prompt.remove(prompt_id.as_str()).unwrap_or_default();
            members.sort_by_key(|c| c.task.group_index);
            let indices: Vec<usize> = members.iter().map(|c| c.task.group_index).collect();
            let expected: Vec<usize> = (1..=batch.group_size).collect();
            if indices != expected {
                return Err(SchedulerError::IncompleteGroup {
                    prompt_id,
                    expected: batch.group_size,
                    found: members.len(),
                });
            }
            Ok(Group { prompt_id, members })
        })
        .collect()
}

#[derive(Default)]
struct State {
    queue: VecDeque<RolloutTask>,
    in_flight: usize,
    cut: bool,
    groups: BTreeMap<String, Vec<CompletedTask>>,
    batch_groups: Vec<String>,
    carried_in_flight: Vec<CarriedTask>,
    dropped: Vec<DroppedTask>,
    executions: Vec<Execution>,
}

/// Runs one batch over fresh tasks for `prompts`.
pub fn run_batch(prompts: &[String], spec: &BatchSpec, executor: &dyn Executor) -> Result<BatchResult, SchedulerError> {
    spec.validate()?;
    let unique: HashSet<&String> = prompts.iter().collect();
    if unique.len() != prompts.len() {
        return Err(SchedulerError::InvalidSpec("prompt ids must be unique".into()));
    }
    if prompts.len() * spec.group_size < spec.batch_size {
        return Err(SchedulerError::InvalidSpec(format!(
            "{} prompts x G={} cannot fill B={}",
            prompts.len(),
            spec.group_size,
            spec.batch_size
        )));
    }
    let pending = prompts
        .iter()
        .flat_map(|p| spec.tasks_for(p))
        .map(|task| CarriedTask { task, completed: None })
        .collect();
    continue_batch(pending, spec, executor)
}

/// Runs one batch over work carried from a previous batch. Already
/// completed trajectories count toward their groups without re-running.
pub fn continue_batch(
    pending: Vec<CarriedTask>,
    spec: &BatchSpec,
    executor: &dyn Executor,
) -> Result<BatchResult, SchedulerError> {
    spec.validate()?;
    let submitted = pending.len();
    let needed = spec.groups_needed();
    let mut state = State::default();
    for c in pending {
        match c.completed {
            Some(trajectory) => record_completion(&mut state, spec, CompletedTask { task: c.task, trajectory }),
            None => state.queue.push_back(c.task),
        }
    }
    if state.batch_groups.len() >= needed {
        state.cut = true;
    }

    let shared = (Mutex::new(state), Condvar::new());
    std::thread::scope(|scope| {
        for _ in 0..spec.workers {
            scope.spawn(|| worker(&shared, spec, executor));
        }
    });
    let mut state = shared.0.into_inner().expect("worker panicked while holding the queue lock");

    if state.batch_groups.len() < needed {
        let carried = state.groups.values().map(Vec::len).sum::<usize>() + state.queue.len();
        return Err(SchedulerError::Starvation {
            submitted,
            completed_groups: state.batch_groups.len(),
            needed_groups: needed,
            carried,
            dropped: state.dropped.len(),
        });
    }

    let mut trajectories = Vec::with_capacity(spec.batch_size);
    for prompt in state.batch_groups.drain(..needed) {
        let mut members = state.groups.remove(&prompt).expect("batch group exists");
        members.sort_by_key(|c| c.task.group_index);
        trajectories.extend(members);
    }
    let mut carried_over: Vec<CarriedTask> = state
        .groups
        .into_values()
        .flatten()
        .map(|c| CarriedTask { task: c.task, completed: Some(c.trajectory) })
        .collect();
    carried_over.extend(state.carried_in_flight);
    carried_over.extend(state.queue.into_iter().map(|task| CarriedTask { task, completed: None }));

    let result = BatchResult {
        group_size: spec.group_size,
        trajectories,
        carried_over,
        dropped: state.dropped,
        submitted,
        executions: state.executions,
    };
    debug_assert!(result.is_conserved());
    Ok(result)
}

fn record_completion(state: &mut State, spec: &BatchSpec, done: CompletedTask) {
    let prompt = done.task.prompt_id.clone();
    let members = state.groups.entry(prompt.clone()).or_default();
    members.push(done);
    if members.len() == spec.group_size && state.batch_groups.len() < spec.groups_needed() {
        state.batch_groups.push(prompt);
        if state.batch_groups.len() == spec.groups_needed() {
            state.cut = true;
        }
    }
}

fn worker(shared: &(Mutex<State>, Condvar), spec: &BatchSpec, executor: &dyn Executor) {
    let (lock, cvar) = shared;
    loop {
        let task = {
            let mut st = lock.lock().expect("queue lock poisoned");
            loop {
                if st.cut {
                    return;
                }
                if let Some(task) = st.queue.pop_front() {
                    st.in_flight += 1;
                    st.executions.push(Execution {
                        prompt_id: task.prompt_id.clone(),
                        group_index: task.group_index,
                        attempt: task.attempt,
                    });
                    break task;
                }
                if st.in_flight == 0 {
                    return;
                }
                st = cvar.wait(st).expect("queue lock poisoned");
            }
        };

        let outcome = catch_unwind(AssertUnwindSafe(|| executor.execute(&task)))
            .unwrap_or_else(|_| TaskOutcome::Unfinished("executor panicked".into()));

        let mut st = lock.lock().expect("queue lock poisoned");
        st.in_flight -= 1;
        match outcome {
            TaskOutcome::Completed(trajectory) if st.cut => {
                st.carried_in_flight.push(CarriedTask { task, completed: Some(trajectory) });
            }
            TaskOutcome::Completed(trajectory) => record_completion(&mut st, spec, CompletedTask { task, trajectory }),
            TaskOutcome::Unfinished(reason) => {
                let next = RolloutTask { attempt: task.attempt + 1, ..task };
                if next.attempt >= spec.max_attempts {
                    tracing::debug!(task = %next.id(), %reason, "dropping task");
                    st.dropped.push(DroppedTask { task: next, reason });
                } else if st.cut {
                    st.carried_in_flight.push(CarriedTask { task: next, completed: None });
                } else {
                    st.queue.push_back(next);
                }
            }
        }
        cvar.notify_all();
    }
}
