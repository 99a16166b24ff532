use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::config::{GraderKind, RunConfig};
use crate::agent::{self, HttpChatBackend, ModelBackend, ScriptedBackend, Termination};
use crate::error::{HarnessError, RecordError};
use crate::record::{self, Recorded};
use crate::reward::{compute_reward, FixtureJudge, FormatChecker, Grader, HttpJudge, NormalizedExactMatch};
use crate::rollout::{self, stable_hash, BatchSpec, RolloutTask, TaskOutcome};
use crate::tools::http::{probe, HttpScrape, HttpSearch};
use crate::tools::local::LocalSandbox;
use crate::tools::mock::{FixtureStore, MockBackend};
use crate::tools::{builtin_suite, BackendSet, ToolRegistry};
use crate::trajectory::{TaskInstruction, Trajectory, TrajectoryStatus};

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Builds a fresh model backend for each run.
pub trait ModelFactory: Send + Sync {
    fn model(&self, task: &TaskInstruction, seed: u64) -> Box<dyn ModelBackend>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedTask {
    /// Alternative scripts; one is picked per run from the seed.
    pub variants: Vec<Vec<String>>,
    #[serde(default)]
    pub summary: Option<String>,
}

/// Replays per-task scripts from a `model.json` fixture.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedModels {
    pub tasks: BTreeMap<String, ScriptedTask>,
    /// Script for tasks without an entry.
    #[serde(default)]
    pub fallback: Vec<String>,
}

impl ScriptedModels {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn variant(&self, task_id: &str, seed: u64) -> (Vec<String>, Option<String>) {
        match self.tasks.get(task_id) {
            Some(t) if !t.variants.is_empty() => {
                let k = stable_hash(&[&seed.to_le_bytes(), task_id.as_bytes()]) as usize % t.variants.len();
                (t.variants[k].clone(), t.summary.clone())
            }
            _ => (self.fallback.clone(), None),
        }
    }
}

impl ModelFactory for ScriptedModels {
    fn model(&self, task: &TaskInstruction, seed: u64) -> Box<dyn ModelBackend> {
        let (turns, summary) = self.variant(&task.task_id, seed);
        let backend = ScriptedBackend::new(turns);
        Box::new(match summary {
            Some(s) => backend.with_summary(s),
            None => backend,
        })
    }
}

impl ModelFactory for HttpChatBackend {
    fn model(&self, _task: &TaskInstruction, _seed: u64) -> Box<dyn ModelBackend> {
        Box::new(self.clone())
    }
}

/// Everything a suite run talks to.
#[derive(Clone)]
pub struct Environment {
    pub registry: Arc<ToolRegistry>,
    pub models: Arc<dyn ModelFactory>,
    pub grader: Arc<dyn Grader>,
}

impl Environment {
    /// Offline environment from a fixture directory holding `model.json`,
    /// optional `tools.jsonl` and optional `judge.jsonl`.
    pub fn mock(fixtures: &Path, config: &RunConfig) -> Result<Self, HarnessError> {
        let models = ScriptedModels::load(&fixtures.join("model.json"))?;
        let tools_path = fixtures.join("tools.jsonl");
        let store = if tools_path.exists() {
            FixtureStore::load(&tools_path)?
        } else {
            FixtureStore::new()
        };
        let mock = Arc::new(MockBackend::new(store));
        let registry = builtin_suite(&mock.backend_set(), config.blocklist())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let grader: Arc<dyn Grader> = match config.reward.grader {
            GraderKind::Exact => Arc::new(NormalizedExactMatch),
            GraderKind::Judge => {
                let path = fixtures.join("judge.jsonl");
                let file = std::fs::File::open(&path)
                    .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
                Arc::new(FixtureJudge::read(BufReader::new(file)).map_err(|e| HarnessError::Config(e.to_string()))?)
            }
        };
        Ok(Self {
            registry: Arc::new(registry),
            models: Arc::new(models),
            grader,
        })
    }

    /// Live environment. Every configured endpoint is probed first.
    pub fn live(config: &RunConfig) -> Result<Self, HarnessError> {
        let b = &config.backends;
        if !b.model.is_set() {
            return Err(HarnessError::Config("backends.model.url is required outside mock mode".into()));
        }
        let timeout = Duration::from_secs(10);
        for (name, ep) in [("model", &b.model), ("judge", &b.judge), ("search", &b.search), ("scrape", &b.scrape)] {
            if ep.is_set() {
                probe(&ep.url, timeout).map_err(|e| HarnessError::BackendUnreachable(format!("{name} at {}: {e}", ep.url)))?;
            }
        }
        let root = if b.sandbox_root.is_empty() {
            std::env::temp_dir().join("agentrt-sandboxes")
        } else {
            PathBuf::from(&b.sandbox_root)
        };
        let local = Arc::new(LocalSandbox::new(root.join("boxes"), root.join("files")));
        let mut set = BackendSet {
            sandbox: Some(local.clone()),
            files: Some(local),
            search: None,
            scrape: None,
        };
        if b.search.is_set() {
            set.search = Some(Arc::new(HttpSearch { endpoint: b.search.url.clone(), api_key: b.search.api_key() }));
        }
        if b.scrape.is_set() {
            set.scrape = Some(Arc::new(HttpScrape { endpoint: b.scrape.url.clone(), api_key: b.scrape.api_key() }));
        }
        let registry = builtin_suite(&set, config.blocklist()).map_err(|e| HarnessError::Config(e.to_string()))?;
        let grader: Arc<dyn Grader> = match config.reward.grader {
            GraderKind::Exact => Arc::new(NormalizedExactMatch),
            GraderKind::Judge if b.judge.is_set() => Arc::new(HttpJudge {
                endpoint: b.judge.url.clone(),
                api_key: b.judge.api_key(),
                timeout: Duration::from_secs(60),
            }),
            GraderKind::Judge => return Err(HarnessError::Config("grader = judge needs backends.judge.url".into())),
        };
        let chat = HttpChatBackend {
            endpoint: b.model.url.clone(),
            model: b.model.model.clone(),
            api_key: b.model.api_key(),
            timeout: Duration::from_secs(600),
        };
        Ok(Self {
            registry: Arc::new(registry),
            models: Arc::new(chat),
            grader,
        })
    }
}

/// Reads line-delimited `{task_id, text, ground_truth, metadata}` records.
pub fn read_tasks(path: &Path) -> Result<Vec<TaskInstruction>, HarnessError> {
    let file = std::fs::File::open(path)
        .map_err(|e| HarnessError::Config(format!("cannot read tasks file {}: {e}", path.display())))?;
    let mut tasks = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskInstruction = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Config(format!("{} line {}: {e}", path.display(), n + 1)))?;
        task.validate()
            .map_err(|e| HarnessError::Config(format!("{} line {}: {e}", path.display(), n + 1)))?;
        if !seen.insert(task.task_id.clone()) {
            return Err(HarnessError::Config(format!("duplicate task id `{}`", task.task_id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Per-task line of a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub status: TrajectoryStatus,
    pub termination: Option<Termination>,
    pub answer: Option<String>,
    pub steps: usize,
    pub turn_count: usize,
    pub tool_call_count: usize,
    pub summary_called: bool,
    pub peak_request_tokens: usize,
    pub attempts: u32,
    pub correct: Option<bool>,
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub task_ids: Vec<String>,
    pub results: Vec<TaskSummary>,
    /// Fraction of graded tasks answered correctly.
    pub accuracy: Option<f64>,
    /// Wall-clock duration; null in mock mode so reruns are byte-identical.
    pub wall_clock_ms: Option<u64>,
    /// Artifact files, relative to the manifest.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub manifest: RunManifest,
    pub records: Vec<Recorded>,
}

struct Finished {
    result: Result<agent::RunResult, Trajectory>,
    attempts: u32,
}

/// Runs every task once through the worker pool, then grades the answers.
pub fn run_suite(tasks: &[TaskInstruction], config: &RunConfig, env: &Environment) -> Result<SuiteOutcome, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let by_id: BTreeMap<&str, &TaskInstruction> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    if by_id.len() != tasks.len() {
        return Err(HarnessError::Config("task ids must be unique".into()));
    }
    let results = std::sync::Mutex::new(BTreeMap::<String, Finished>::new());

    if !tasks.is_empty() {
        let spec = BatchSpec {
            group_size: 1,
            batch_size: tasks.len(),
            workers: config.workers.min(tasks.len()),
            max_attempts: config.max_attempts,
            seed: config.seed,
        };
        let executor = |rt: &RolloutTask| {
            let task = by_id[rt.prompt_id.as_str()];
            let cfg = match config.agent_config(Some(rt.seed)) {
                Ok(c) => c,
                Err(e) => return TaskOutcome::Unfinished(e.to_string()),
            };
            let model = env.models.model(task, rt.seed);
            let outcome = agent::run(task, model.as_ref(), &env.registry, &cfg);
            let last_attempt = rt.attempt + 1 >= config.max_attempts;
            let finished = match outcome {
                Ok(r) => Ok(r),
                Err(e) if last_attempt => Err(e
                    .trajectory()
                    .cloned()
                    .unwrap_or_else(|| aborted(task))),
                Err(e) => return TaskOutcome::Unfinished(e.to_string()),
            };
            let traj = match &finished {
                Ok(r) => r.trajectory.clone(),
                Err(t) => t.clone(),
            };
            results.lock().unwrap().insert(
                task.task_id.clone(),
                Finished { result: finished, attempts: rt.attempt + 1 },
            );
            TaskOutcome::Completed(traj)
        };
        let prompts: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
        rollout::run_batch(&prompts, &spec, &executor)?;
    }

    let mut results = results.into_inner().unwrap();
    let checker = FormatChecker::default();
    let reward_cfg = config.reward_config();
    let mut records = Vec::with_capacity(tasks.len());
    let mut summaries = Vec::with_capacity(tasks.len());
    for task in tasks {
        let fin = results.remove(&task.task_id).expect("every task completes exactly once");
        let (traj, run) = match fin.result {
            Ok(r) => (r.trajectory.clone(), Some(r)),
            Err(t) => (t, None),
        };
        let reward = if task.ground_truth.is_some() && traj.status != TrajectoryStatus::Aborted {
            let b = compute_reward(&traj, &reward_cfg, env.grader.as_ref(), &checker)?;
            Some(b.record(&reward_cfg))
        } else {
            None
        };
        summaries.push(TaskSummary {
            task_id: task.task_id.clone(),
            status: traj.status,
            termination: run.as_ref().map(|r| r.termination),
            answer: traj.final_answer.clone(),
            steps: traj.len(),
            turn_count: run.as_ref().map_or(0, |r| r.turn_count),
            tool_call_count: traj.tool_call_count(),
            summary_called: run.as_ref().is_some_and(|r| r.summary_called),
            peak_request_tokens: run.as_ref().map_or(0, |r| r.peak_request_tokens),
            attempts: fin.attempts,
            correct: reward.as_ref().map(|r| r.correct),
            reward: reward.as_ref().map(|r| r.reward),
        });
        records.push(Recorded { trajectory: traj, sample: None, reward });
    }

    let graded: Vec<bool> = summaries.iter().filter_map(|s| s.correct).collect();
    let accuracy = (!graded.is_empty())
        .then(|| graded.iter().filter(|c| **c).count() as f64 / graded.len() as f64);
    let manifest = RunManifest {
        config: config.clone(),
        task_ids: tasks.iter().map(|t| t.task_id.clone()).collect(),
        results: summaries,
        accuracy,
        wall_clock_ms: (!config.mock).then(|| started.elapsed().as_millis() as u64),
        artifacts: BTreeMap::from([("trajectories".to_string(), TRAJECTORIES_FILE.to_string())]),
    };
    Ok(SuiteOutcome { manifest, records })
}

fn aborted(task: &TaskInstruction) -> Trajectory {
    let mut t = Trajectory::new(task.clone());
    t.finish(TrajectoryStatus::Aborted, None).expect("empty trajectory can abort");
    t
}

/// Writes `trajectories.jsonl` and `manifest.json` into `dir`.
pub fn write_outcome(dir: &Path, outcome: &SuiteOutcome) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_records(&dir.join(TRAJECTORIES_FILE), &outcome.records)?;
    let mut manifest = serde_json::to_string_pretty(&outcome.manifest).expect("manifest serializes");
    manifest.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn write_records(path: &Path, records: &[Recorded]) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        record::write_recorded(&mut out, rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Recorded>, HarnessError> {
    let file = std::fs::File::open(path).map_err(RecordError::Io)?;
    Ok(record::read_recorded(BufReader::new(file))?)
}

/// Convenience for the common CLI flow: load tasks, build the environment,
/// run, write artifacts.
pub fn run_suite_to_dir(
    tasks_path: &Path,
    config: &RunConfig,
    fixtures: Option<&Path>,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    let tasks = read_tasks(tasks_path)?;
    let env = match (config.mock, fixtures) {
        (true, Some(dir)) => Environment::mock(dir, config)?,
        (true, None) => {
            let dir = tasks_path.parent().unwrap_or(Path::new("."));
            Environment::mock(dir, config)?
        }
        (false, _) => Environment::live(config)?,
    };
    let outcome = run_suite(&tasks, config, &env)?;
    write_outcome(out_dir, &outcome)?;
    Ok(outcome.manifest)
}
