//! Line-delimited trajectory records.
//!
//! Each step is one JSON line:
//!
//! ```text
//! {"task_id":..,"index":..,"thought":..,"action":{"kind":..,"tool_name":..,"arguments":..,"raw_text":..},
//!  "observation":{"content":..,"truncated":..,"error":..,"latency_ms":..}}
//! ```
//!
//! followed by one manifest line carrying `status` and `final_answer` (plus
//! the task itself and run annotations). A file may hold any number of
//! trajectories back to back.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::RecordError;
use crate::trajectory::{
    Action, Observation, RunAnnotations, TaskInstruction, Trajectory, TrajectoryStatus,
};

/// Reward components stored alongside a trajectory so that replays can
/// recompute the scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub correct: bool,
    pub format_violation: bool,
    pub alpha_c: f64,
    pub alpha_f: f64,
    pub reward: f64,
}

/// A trajectory as stored on disk, with optional sampling and reward tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Recorded {
    pub trajectory: Trajectory,
    /// Group member index when the trajectory came from a rollout group.
    pub sample: Option<usize>,
    pub reward: Option<RewardRecord>,
}

impl Recorded {
    pub fn plain(trajectory: Trajectory) -> Self {
        Self {
            trajectory,
            sample: None,
            reward: None,
        }
    }

    /// Identifier used to join trajectories with log-prob and report records.
    pub fn id(&self) -> String {
        match self.sample {
            Some(s) => format!("{}#{}", self.trajectory.task.task_id, s),
            None => self.trajectory.task.task_id.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    task_id: String,
    index: usize,
    thought: String,
    action: Action,
    observation: Option<Observation>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    task_id: String,
    status: TrajectoryStatus,
    final_answer: Option<String>,
    task: TaskInstruction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sample: Option<usize>,
    #[serde(default)]
    format_violations: u32,
    #[serde(default)]
    backend_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reward: Option<RewardRecord>,
}

pub fn write_recorded<W: Write>(out: &mut W, rec: &Recorded) -> std::io::Result<()> {
    let traj = &rec.trajectory;
    for step in traj.steps() {
        let line = StepRecord {
            task_id: traj.task.task_id.clone(),
            index: step.index,
            thought: step.thought.clone(),
            action: step.action.clone(),
            observation: step.observation.clone(),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    let manifest = ManifestRecord {
        task_id: traj.task.task_id.clone(),
        status: traj.status,
        final_answer: traj.final_answer.clone(),
        task: traj.task.clone(),
        sample: rec.sample,
        format_violations: traj.annotations.format_violations,
        backend_retries: traj.annotations.backend_retries,
        reward: rec.reward.clone(),
    };
    serde_json::to_writer(&mut *out, &manifest)?;
    out.write_all(b"\n")
}

pub fn write_trajectory<W: Write>(out: &mut W, traj: &Trajectory) -> std::io::Result<()> {
    write_recorded(out, &Recorded::plain(traj.clone()))
}

pub fn to_string(traj: &Trajectory) -> String {
    let mut buf = Vec::new();
    write_trajectory(&mut buf, traj).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("JSON output is UTF-8")
}

/// Reads every trajectory in a record stream. An input with no records is
/// malformed.
pub fn read_recorded<R: BufRead>(input: R) -> Result<Vec<Recorded>, RecordError> {
    let mut out = Vec::new();
    let mut pending: Vec<(usize, StepRecord)> = Vec::new();
    let mut saw_any = false;

    for (n, line) in input.lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        saw_any = true;
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| RecordError::malformed(lineno, e.to_string()))?;
        if value.get("status").is_some() {
            let manifest: ManifestRecord = serde_json::from_value(value)
                .map_err(|e| RecordError::malformed(lineno, e.to_string()))?;
            let steps = std::mem::take(&mut pending);
            out.push(assemble(lineno, manifest, steps)?);
        } else {
            let step: StepRecord = serde_json::from_value(value)
                .map_err(|e| RecordError::malformed(lineno, e.to_string()))?;
            pending.push((lineno, step));
        }
    }

    if let Some((lineno, _)) = pending.first() {
        return Err(RecordError::malformed(*lineno, "step records without a manifest"));
    }
    if !saw_any {
        return Err(RecordError::malformed(0, "no records"));
    }
    Ok(out)
}

pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Trajectory>, RecordError> {
    Ok(read_recorded(input)?.into_iter().map(|r| r.trajectory).collect())
}

pub fn from_str(text: &str) -> Result<Trajectory, RecordError> {
    let mut all = read_trajectories(text.as_bytes())?;
    if all.len() != 1 {
        return Err(RecordError::malformed(0, format!("expected 1 trajectory, found {}", all.len())));
    }
    Ok(all.remove(0))
}

/// Serializes then deserializes a trajectory.
pub fn roundtrip(traj: &Trajectory) -> Result<Trajectory, RecordError> {
    from_str(&to_string(traj))
}

fn assemble(
    lineno: usize,
    manifest: ManifestRecord,
    steps: Vec<(usize, StepRecord)>,
) -> Result<Recorded, RecordError> {
    if manifest.task.task_id != manifest.task_id {
        return Err(RecordError::malformed(lineno, "manifest task_id disagrees with its task"));
    }
    let mut traj = Trajectory::new(manifest.task);
    for (step_line, step) in steps {
        if step.task_id != manifest.task_id {
            return Err(RecordError::malformed(
                step_line,
                format!("step for task `{}` inside `{}`", step.task_id, manifest.task_id),
            ));
        }
        if step.index != traj.len() + 1 {
            return Err(RecordError::malformed(
                step_line,
                format!("expected index {}, found {}", traj.len() + 1, step.index),
            ));
        }
        traj.push_step(step.thought, step.action, step.observation)
            .map_err(|e| RecordError::malformed(step_line, e.to_string()))?;
    }
    if manifest.status != TrajectoryStatus::InProgress {
        traj.finish(manifest.status, manifest.final_answer)
            .map_err(|e| RecordError::malformed(lineno, e.to_string()))?;
    } else if manifest.final_answer.is_some() {
        return Err(RecordError::malformed(lineno, "in-progress trajectory with an answer"));
    }
    traj.annotations = RunAnnotations {
        format_violations: manifest.format_violations,
        backend_retries: manifest.backend_retries,
    };
    Ok(Recorded {
        trajectory: traj,
        sample: manifest.sample,
        reward: manifest.reward,
    })
}
