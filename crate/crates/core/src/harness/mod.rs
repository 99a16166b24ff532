//! Config, suite runs, scoring and replay: the pieces the command-line tool
//! is built from.

mod config;
mod replay;
mod score;
mod suite;

pub use config::{
    apply_env, BackendsSection, Endpoint, GraderKind, LimitsSection, RewardSection, RunConfig, SamplingSection,
    ENV_PREFIX,
};
pub use replay::{replay, Mismatch, MismatchKind, ReplayReport};
pub use score::{
    avg_at_k, build_objective, curation_report, score_records, AvgAtK, BenchmarkScore, FixtureScorer, HttpScorer,
    LossSettings, ScoreLine, ScoreReport, Scorer,
};
pub use suite::{
    read_records, read_tasks, run_suite, run_suite_to_dir, write_outcome, write_records, Environment, ModelFactory,
    RunManifest, ScriptedModels, ScriptedTask, SuiteOutcome, TaskSummary, MANIFEST_FILE, TRAJECTORIES_FILE,
};
