use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Duration;

use agentrt::agent;
use agentrt::context::RetentionBudget;
use agentrt::harness::{
    self, build_objective, curation_report, read_records, read_tasks, score_records, write_records,
    BenchmarkScore, Environment, FixtureScorer, GraderKind, LossSettings, RunConfig, RunManifest,
};
use agentrt::objectives::LossKind;
use agentrt::record::Recorded;
use agentrt::reward::{FixtureJudge, Grader, HttpJudge, NormalizedExactMatch};
use agentrt::rollout::{self, BatchSpec, RolloutTask, TaskOutcome};
use agentrt::{HarnessError, TaskInstruction};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(name = "agentrt", version, about = "Run, score and train on tool-using agent trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every task once and write trajectories plus a manifest.
    Run(RunArgs),
    /// Collect one batch of G samples per prompt through the worker pool.
    Rollout(RolloutArgs),
    /// Grade trajectories and attach rewards.
    Score(ScoreArgs),
    /// Apply curation filters and write a keep/drop report.
    Filter(FilterArgs),
    /// Evaluate a training loss and its gradients.
    Losses(LossArgs),
    /// Re-check a trajectory file offline.
    Replay(ReplayArgs),
    /// Mean and sample std of accuracy over several run manifests.
    Avg(AvgArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use recorded fixtures instead of live backends.
    #[arg(long)]
    mock: bool,
    /// Fixture directory (model.json, tools.jsonl, judge.jsonl).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = RunConfig::load(self.config.as_deref(), std::env::vars())?;
        cfg.mock |= self.mock;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn environment(&self, cfg: &RunConfig, tasks_path: &Path) -> Result<Environment, HarnessError> {
        if cfg.mock {
            let dir = self
                .fixtures
                .clone()
                .unwrap_or_else(|| tasks_path.parent().unwrap_or(Path::new(".")).to_path_buf());
            Environment::mock(&dir, cfg)
        } else {
            Environment::live(cfg)
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    /// Trajectories per batch; defaults to every prompt's full group.
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraderArg {
    Exact,
    Judge,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    trajectories: PathBuf,
    /// Where to write scored trajectories; defaults to rewriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    grader: Option<GraderArg>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Also write the kept trajectories here.
    #[arg(long)]
    kept: Option<PathBuf>,
    #[arg(long, value_enum)]
    grader: Option<GraderArg>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    trajectories: PathBuf,
    /// JSONL of {id, model, token_logprobs, loss_mask}.
    #[arg(long)]
    logprobs: PathBuf,
    /// sft, dpo, po or grpo.
    #[arg(long)]
    loss: String,
    #[arg(long, default_value = "policy")]
    policy: String,
    #[arg(long, default_value = "reference")]
    reference: String,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    beta_kl: f64,
    #[arg(long)]
    normalize_std: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long, default_value_t = 5)]
    retention: usize,
}

#[derive(Args)]
struct AvgArgs {
    /// Run manifests, one per seed.
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
    #[arg(long, default_value = "suite")]
    benchmark: String,
}

enum Failure {
    Harness(HarnessError),
    Mismatch(usize),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Harness(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Score(a) => score(a),
        Command::Filter(a) => filter(a),
        Command::Losses(a) => losses(a),
        Command::Replay(a) => replay(a),
        Command::Avg(a) => avg(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch(n)) => {
            eprintln!("replay: {n} mismatches");
            ExitCode::from(EXIT_MISMATCH)
        }
        Err(Failure::Harness(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                HarnessError::Config(_) => EXIT_CONFIG,
                HarnessError::BackendUnreachable(_) => EXIT_BACKEND,
                _ => EXIT_FAILURE,
            })
        }
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let cfg = a.cfg.load()?;
    let tasks = read_tasks(&a.tasks)?;
    let env = a.cfg.environment(&cfg, &a.tasks)?;
    let outcome = harness::run_suite(&tasks, &cfg, &env)?;
    harness::write_outcome(&a.out, &outcome)?;
    let m = &outcome.manifest;
    println!(
        "{} tasks, accuracy {}, written to {}",
        m.task_ids.len(),
        m.accuracy.map_or("n/a".to_string(), |x| format!("{x:.4}")),
        a.out.display()
    );
    Ok(())
}

fn rollout_cmd(a: RolloutArgs) -> Result<(), Failure> {
    let cfg = a.cfg.load()?;
    let tasks = read_tasks(&a.tasks)?;
    let env = a.cfg.environment(&cfg, &a.tasks)?;
    let by_id: std::collections::BTreeMap<String, TaskInstruction> =
        tasks.iter().map(|t| (t.task_id.clone(), t.clone())).collect();
    let prompts: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
    let spec = BatchSpec::new(a.group_size, a.batch_size.unwrap_or(a.group_size * prompts.len()), cfg.workers)
        .with_seed(cfg.seed)
        .with_max_attempts(cfg.max_attempts);
    let log = Mutex::new(Vec::new());
    let executor = |rt: &RolloutTask| {
        let task = &by_id[&rt.prompt_id];
        let agent_cfg = match cfg.agent_config(Some(rt.seed)) {
            Ok(c) => c,
            Err(e) => return TaskOutcome::Unfinished(e.to_string()),
        };
        let model = env.models.model(task, rt.seed);
        match agent::run_in(task, model.as_ref(), &env.registry, &agent_cfg, &rt.id()) {
            Ok(r) => TaskOutcome::Completed(r.trajectory),
            Err(e) => {
                log.lock().unwrap().push(format!("{}: {e}", rt.id()));
                TaskOutcome::Unfinished(e.to_string())
            }
        }
    };
    let batch = rollout::run_batch(&prompts, &spec, &executor).map_err(HarnessError::from)?;
    for line in log.into_inner().unwrap() {
        eprintln!("retry {line}");
    }
    let records: Vec<Recorded> = batch
        .trajectories
        .iter()
        .map(|c| Recorded { trajectory: c.trajectory.clone(), sample: Some(c.task.group_index), reward: None })
        .collect();
    std::fs::create_dir_all(&a.out).map_err(HarnessError::from)?;
    write_records(&a.out.join(harness::TRAJECTORIES_FILE), &records)?;
    let manifest = batch.manifest(&spec, &prompts);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(a.out.join("batch.json"), text).map_err(HarnessError::from)?;
    println!(
        "{} trajectories, {} carried, {} dropped",
        batch.trajectories.len(),
        batch.carried_over.len(),
        batch.dropped.len()
    );
    Ok(())
}

fn grader_for(cfg: &RunConfig, choice: Option<GraderArg>, fixtures: Option<&Path>) -> Result<Box<dyn Grader>, HarnessError> {
    let kind = match choice {
        Some(GraderArg::Exact) => GraderKind::Exact,
        Some(GraderArg::Judge) => GraderKind::Judge,
        None => cfg.reward.grader,
    };
    Ok(match kind {
        GraderKind::Exact => Box::new(NormalizedExactMatch),
        GraderKind::Judge if cfg.mock => {
            let dir = fixtures.ok_or_else(|| HarnessError::Config("--fixtures is required for a mock judge".into()))?;
            let path = dir.join("judge.jsonl");
            let file = std::fs::File::open(&path)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
            Box::new(FixtureJudge::read(BufReader::new(file))?)
        }
        GraderKind::Judge => {
            let ep = &cfg.backends.judge;
            if !ep.is_set() {
                return Err(HarnessError::Config("grader = judge needs backends.judge.url".into()));
            }
            Box::new(HttpJudge { endpoint: ep.url.clone(), api_key: ep.api_key(), timeout: Duration::from_secs(60) })
        }
    })
}

fn score(a: ScoreArgs) -> Result<(), Failure> {
    let cfg = a.cfg.load()?;
    let grader = grader_for(&cfg, a.grader, a.cfg.fixtures.as_deref())?;
    let mut records = read_records(&a.trajectories)?;
    let report = score_records(&mut records, &cfg.reward_config(), grader.as_ref())?;
    write_records(a.out.as_deref().unwrap_or(&a.trajectories), &records)?;
    print_json(&report);
    Ok(())
}

fn filter(a: FilterArgs) -> Result<(), Failure> {
    let cfg = a.cfg.load()?;
    let grader = grader_for(&cfg, a.grader, a.cfg.fixtures.as_deref())?;
    let records = read_records(&a.trajectories)?;
    let report = curation_report(&records, &cfg.reward_config(), grader.as_ref(), &cfg.curation)?;
    let mut text = String::new();
    for line in &report {
        text.push_str(&serde_json::to_string(line).expect("report serializes"));
        text.push('\n');
    }
    std::fs::write(&a.report, text).map_err(HarnessError::from)?;
    if let Some(path) = &a.kept {
        let keep: std::collections::BTreeSet<&str> = report.iter().filter(|r| r.keep).map(|r| r.id.as_str()).collect();
        let kept: Vec<Recorded> = records.into_iter().filter(|r| keep.contains(r.id().as_str())).collect();
        write_records(path, &kept)?;
    }
    let kept = report.iter().filter(|r| r.keep).count();
    println!("kept {kept} of {}", report.len());
    Ok(())
}

fn losses(a: LossArgs) -> Result<(), Failure> {
    let kind: LossKind = a.loss.parse().map_err(|e: agentrt::ObjectiveError| HarnessError::Config(e.to_string()))?;
    let records = read_records(&a.trajectories)?;
    let file = std::fs::File::open(&a.logprobs)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", a.logprobs.display())))?;
    let scorer = FixtureScorer::read(BufReader::new(file))?;
    let settings = LossSettings { beta: a.beta, lambda: a.lambda, beta_kl: a.beta_kl, normalize_std: a.normalize_std };
    let objective = build_objective(kind, &records, &scorer, &a.policy, &a.reference, &settings)?;
    let loss = objective.loss().map_err(HarnessError::from)?;
    let grads = agentrt::objectives::loss_gradients(&a.loss, &objective).map_err(HarnessError::from)?;
    let norms: Vec<f64> = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    print_json(&serde_json::json!({ "loss": a.loss, "value": loss, "gradient_norms": norms, "gradients": grads }));
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<(), Failure> {
    let file = std::fs::File::open(&a.trajectories).map_err(HarnessError::from)?;
    let report = harness::replay(BufReader::new(file), RetentionBudget(a.retention)).map_err(HarnessError::from)?;
    print_json(&report);
    if report.is_clean() {
        Ok(())
    } else {
        Err(Failure::Mismatch(report.mismatches.len()))
    }
}

fn avg(a: AvgArgs) -> Result<(), Failure> {
    let mut seeds = Vec::new();
    let mut per_run = Vec::new();
    for path in &a.manifests {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let acc = m
            .accuracy
            .ok_or_else(|| HarnessError::Config(format!("{} has no graded tasks", path.display())))?;
        seeds.push(m.config.seed);
        per_run.push(acc);
    }
    print_json(&BenchmarkScore::new(a.benchmark, seeds, per_run)?);
    Ok(())
}
