use std::collections::BTreeSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::context::{retain, retention_set, RetentionBudget, TRUNCATION_MARKER};
use crate::error::RecordError;
use crate::record::{read_recorded, Recorded};
use crate::reward::{FormatChecker, RewardConfig};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MismatchKind {
    Invariant,
    RetentionMask,
    TruncationFlag,
    Reward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub id: String,
    pub step: Option<usize>,
    pub kind: MismatchKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub trajectories: usize,
    pub steps: usize,
    pub mismatches: Vec<Mismatch>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-checks a trajectory file: structural invariants, retention masks
/// at every step, truncation flags and stored rewards.
pub fn replay<R: BufRead>(input: R, retention: RetentionBudget) -> Result<ReplayReport, RecordError> {
    let records = read_recorded(input)?;
    let mut report = ReplayReport {
        trajectories: records.len(),
        steps: 0,
        mismatches: Vec::new(),
    };
    for rec in &records {
        report.steps += rec.trajectory.len();
        check(rec, retention, &mut report.mismatches);
    }
    Ok(report)
}

fn check(rec: &Recorded, retention: RetentionBudget, out: &mut Vec<Mismatch>) {
    let id = rec.id();
    let traj = &rec.trajectory;
    let mut push = |step: Option<usize>, kind, detail: String| {
        out.push(Mismatch { id: id.clone(), step, kind, detail });
    };

    if let Err(e) = traj.validate() {
        push(None, MismatchKind::Invariant, e.to_string());
    }

    for step in traj.steps() {
        if let Some(obs) = &step.observation {
            let marked = obs.content.ends_with(&format!("\n{TRUNCATION_MARKER}"));
            if marked != obs.truncated {
                push(
                    Some(step.index),
                    MismatchKind::TruncationFlag,
                    format!("truncated = {} but marker present = {marked}", obs.truncated),
                );
            }
        }
    }

    let mut prefix = Trajectory::new(traj.task.clone());
    for step in traj.steps() {
        if !check_mask(&prefix, retention) {
            push(Some(prefix.len() + 1), MismatchKind::RetentionMask, "kept set differs from the rule".into());
        }
        if prefix
            .push_step(step.thought.clone(), step.action.clone(), step.observation.clone())
            .is_err()
        {
            return;
        }
    }
    if !check_mask(&prefix, retention) {
        push(Some(prefix.len() + 1), MismatchKind::RetentionMask, "kept set differs from the rule".into());
    }

    if let Some(stored) = &rec.reward {
        let cfg = RewardConfig { alpha_c: stored.alpha_c, alpha_f: stored.alpha_f };
        let recomputed = cfg.combine(stored.correct, stored.format_violation);
        if recomputed != stored.reward {
            push(None, MismatchKind::Reward, format!("stored {} but components give {recomputed}", stored.reward));
        }
        let violation = FormatChecker::default().check(traj);
        if violation != stored.format_violation {
            push(None, MismatchKind::Reward, format!("stored format_violation = {} but checker says {violation}", stored.format_violation));
        }
    }
}

fn check_mask(prefix: &Trajectory, retention: RetentionBudget) -> bool {
    let t = prefix.len() + 1;
    let with_obs: BTreeSet<usize> = prefix
        .steps()
        .filter(|s| s.observation.is_some())
        .map(|s| s.index)
        .collect();
    let expected: BTreeSet<usize> = retention_set(t, retention)
        .intersection(&with_obs)
        .copied()
        .collect();
    retain(prefix, retention).kept_indices() == expected
}
