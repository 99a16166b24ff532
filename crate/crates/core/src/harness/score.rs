use std::collections::BTreeMap;
use std::io::BufRead;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::{render_view, retain, RetentionBudget};
use crate::error::{HarnessError, ObjectiveError, RewardError};
use crate::objectives::{LossKind, Objective, PreferencePair, ScoredGroup, ScoredPair, ScoredSequence};
use crate::record::Recorded;
use crate::reward::{compute_reward, curate, CurationRecord, CurationThresholds, FormatChecker, Grader, RewardConfig};
use crate::tools::http::post_json;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgAtK {
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation; zero when `k = 1`.
    pub std: f64,
}

/// Mean and sample standard deviation of per-run accuracies.
pub fn avg_at_k(run_accuracies: &[f64]) -> Result<AvgAtK, HarnessError> {
    let k = run_accuracies.len();
    if k == 0 {
        return Err(HarnessError::EmptyRuns);
    }
    let mean = run_accuracies.iter().sum::<f64>() / k as f64;
    let std = if k > 1 {
        let ss: f64 = run_accuracies.iter().map(|a| (a - mean) * (a - mean)).sum();
        (ss / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(AvgAtK { k, mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScore {
    pub benchmark: String,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub per_run: Vec<f64>,
    pub avg: f64,
    pub std: f64,
}

impl BenchmarkScore {
    pub fn new(benchmark: impl Into<String>, seeds: Vec<u64>, per_run: Vec<f64>) -> Result<Self, HarnessError> {
        let a = avg_at_k(&per_run)?;
        Ok(Self {
            benchmark: benchmark.into(),
            k: a.k,
            seeds,
            per_run,
            avg: a.mean,
            std: a.std,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub id: String,
    pub correct: bool,
    pub format_violation: bool,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub accuracy: f64,
    pub mean_reward: f64,
    pub lines: Vec<ScoreLine>,
}

/// Grades every finished trajectory. Aborted runs are skipped.
pub fn score_records(
    records: &mut [Recorded],
    config: &RewardConfig<f64>,
    grader: &dyn Grader,
) -> Result<ScoreReport, HarnessError> {
    let checker = FormatChecker::default();
    let mut lines = Vec::new();
    for rec in records.iter_mut().filter(|r| r.trajectory.status.requires_answer()) {
        let b = compute_reward(&rec.trajectory, config, grader, &checker)?;
        rec.reward = Some(b.record(config));
        lines.push(ScoreLine {
            id: rec.id(),
            correct: b.correct,
            format_violation: b.violation.is_some(),
            reward: b.reward,
        });
    }
    if lines.is_empty() {
        return Err(HarnessError::EmptyRuns);
    }
    let n = lines.len() as f64;
    Ok(ScoreReport {
        accuracy: lines.iter().filter(|l| l.correct).count() as f64 / n,
        mean_reward: lines.iter().map(|l| l.reward).sum::<f64>() / n,
        lines,
    })
}

/// Curation verdicts, using the stored grade when present and grading
/// otherwise.
pub fn curation_report(
    records: &[Recorded],
    config: &RewardConfig<f64>,
    grader: &dyn Grader,
    thresholds: &CurationThresholds,
) -> Result<Vec<CurationRecord>, HarnessError> {
    let checker = FormatChecker::default();
    records
        .iter()
        .filter(|r| r.trajectory.status.requires_answer())
        .map(|rec| {
            let b = compute_reward(&rec.trajectory, config, grader, &checker)?;
            let verdict = curate(&rec.trajectory, b.correct, thresholds, &checker);
            Ok(CurationRecord::new(rec.id(), verdict, &b))
        })
        .collect()
}

/// Supplies token log-probs for a rendered trajectory under a model.
pub trait Scorer: Send + Sync {
    fn score(&self, id: &str, trajectory: &Trajectory, model: &str) -> Result<ScoredSequence<f64>, HarnessError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScoreFixture {
    id: String,
    model: String,
    token_logprobs: Vec<f64>,
    loss_mask: Vec<bool>,
}

/// Replays recorded log-probs keyed by `(trajectory id, model)`.
#[derive(Debug, Clone, Default)]
pub struct FixtureScorer {
    entries: BTreeMap<(String, String), ScoredSequence<f64>>,
}

impl FixtureScorer {
    pub fn insert(&mut self, id: &str, model: &str, seq: ScoredSequence<f64>) {
        self.entries.insert((id.to_string(), model.to_string()), seq);
    }

    /// Reads `{id, model, token_logprobs, loss_mask}` lines.
    pub fn read<R: BufRead>(input: R) -> Result<Self, HarnessError> {
        let mut s = Self::default();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: ScoreFixture = serde_json::from_str(&line)
                .map_err(|e| HarnessError::Config(format!("log-prob fixture line {}: {e}", n + 1)))?;
            let seq = ScoredSequence::new(f.token_logprobs, f.loss_mask)?;
            s.insert(&f.id, &f.model, seq);
        }
        Ok(s)
    }
}

impl Scorer for FixtureScorer {
    fn score(&self, id: &str, _trajectory: &Trajectory, model: &str) -> Result<ScoredSequence<f64>, HarnessError> {
        self.entries
            .get(&(id.to_string(), model.to_string()))
            .cloned()
            .ok_or_else(|| HarnessError::Config(format!("no log-probs for `{id}` under `{model}`")))
    }
}

/// Log-prob service: `POST {endpoint}` with `{model, messages}`, answered by
/// `{token_logprobs, loss_mask}` over the rendered conversation.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl Scorer for HttpScorer {
    fn score(&self, _id: &str, trajectory: &Trajectory, model: &str) -> Result<ScoredSequence<f64>, HarnessError> {
        let mut messages = vec![crate::context::Message::user(trajectory.task.text.clone())];
        messages.extend(render_view(&retain(trajectory, RetentionBudget(usize::MAX))));
        let reply = post_json(
            &self.endpoint,
            &json!({ "model": model, "messages": messages }),
            self.api_key.as_deref(),
            self.timeout,
        )
        .map_err(|e| HarnessError::BackendUnreachable(e.to_string()))?;
        let seq: ScoredSequence<f64> = serde_json::from_value(reply)
            .map_err(|e| HarnessError::BackendUnreachable(format!("bad scorer reply: {e}")))?;
        seq.validate()?;
        Ok(seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub beta: f64,
    pub lambda: f64,
    pub beta_kl: f64,
    pub normalize_std: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda: 1.0,
            beta_kl: 0.01,
            normalize_std: false,
        }
    }
}

fn reward_of(rec: &Recorded) -> Result<f64, HarnessError> {
    rec.reward
        .as_ref()
        .map(|r| r.reward)
        .ok_or_else(|| HarnessError::Config(format!("`{}` has no reward; run `score` first", rec.id())))
}

/// Assembles the inputs of a loss from scored records.
///
/// SFT uses every record. DPO and PO pair, per task, the highest- and
/// lowest-reward samples when their rewards differ. GRPO groups samples by
/// task.
pub fn build_objective(
    kind: LossKind,
    records: &[Recorded],
    scorer: &dyn Scorer,
    policy_model: &str,
    reference_model: &str,
    settings: &LossSettings,
) -> Result<Objective<f64>, HarnessError> {
    if records.is_empty() {
        return Err(ObjectiveError::EmptyBatch.into());
    }
    let score = |rec: &Recorded, model: &str| scorer.score(&rec.id(), &rec.trajectory, model);
    if kind == LossKind::Sft {
        let batch = records
            .iter()
            .map(|r| score(r, policy_model))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(Objective::Sft { batch });
    }

    let mut by_task: BTreeMap<&str, Vec<&Recorded>> = BTreeMap::new();
    for r in records {
        by_task.entry(&r.trajectory.task.task_id).or_default().push(r);
    }
    match kind {
        LossKind::Sft => unreachable!("handled above"),
        LossKind::Dpo | LossKind::Po => {
            let mut pair = None;
            for members in by_task.values() {
                let mut ranked: Vec<(f64, &Recorded)> =
                    members.iter().map(|r| Ok((reward_of(r)?, *r))).collect::<Result<_, HarnessError>>()?;
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
                let (best, worst) = (ranked[0], ranked[ranked.len() - 1]);
                if best.0 > worst.0 {
                    pair = Some(PreferencePair {
                        policy_pos: score(best.1, policy_model)?,
                        policy_neg: score(worst.1, policy_model)?,
                        ref_pos: score(best.1, reference_model)?,
                        ref_neg: score(worst.1, reference_model)?,
                    });
                    break;
                }
            }
            let pair = pair.ok_or_else(|| HarnessError::Config("no task has samples with different rewards".into()))?;
            Ok(if kind == LossKind::Dpo {
                Objective::Dpo { pair, beta: settings.beta }
            } else {
                Objective::Po { pair, beta: settings.beta, lambda: settings.lambda }
            })
        }
        LossKind::Grpo => {
            let groups = by_task
                .values()
                .map(|members| {
                    let mut rewards = Vec::new();
                    let mut sequences = Vec::new();
                    for r in members {
                        rewards.push(reward_of(r)?);
                        sequences.push(ScoredPair {
                            policy: score(r, policy_model)?,
                            reference: score(r, reference_model)?,
                        });
                    }
                    Ok(ScoredGroup { rewards, sequences })
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            Ok(Objective::Grpo { groups, beta_kl: settings.beta_kl, normalize_std: settings.normalize_std })
        }
    }
}

impl From<RewardError> for HarnessError {
    fn from(e: RewardError) -> Self {
        HarnessError::Reward(e.to_string())
    }
}

impl From<ObjectiveError> for HarnessError {
    fn from(e: ObjectiveError) -> Self {
        HarnessError::Objective(e.to_string())
    }
}
