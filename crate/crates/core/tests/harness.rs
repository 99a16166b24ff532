mod common;

use agentrt::harness::{
    avg_at_k, read_records, replay, run_suite_to_dir, write_records, RunConfig, RunManifest, MANIFEST_FILE,
    TRAJECTORIES_FILE,
};
use agentrt::context::RetentionBudget;
use agentrt::record::{read_recorded, write_recorded, Recorded, RewardRecord};
use agentrt::trajectory::ErrorClass;
use proptest::prelude::*;

fn suite_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::load(Some(&common::suite_dir().join("run.toml")), Vec::new()).unwrap();
    cfg.seed = seed;
    cfg
}

fn run_into(dir: &std::path::Path, seed: u64) -> RunManifest {
    let d = common::suite_dir();
    run_suite_to_dir(&d.join("tasks.jsonl"), &suite_config(seed), Some(&d), dir).unwrap()
}

#[test]
fn mock_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = run_into(a.path(), 7);
    run_into(b.path(), 7);
    for f in [TRAJECTORIES_FILE, MANIFEST_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(m.results.len(), 5);
    assert!(m.wall_clock_ms.is_none());
    let file = std::fs::File::open(a.path().join(TRAJECTORIES_FILE)).unwrap();
    let report = replay(std::io::BufReader::new(file), RetentionBudget(5)).unwrap();
    assert!(report.is_clean(), "{:?}", report.mismatches);
}

#[test]
fn suite_exercises_blocking_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let mut blocked = false;
    let mut truncated = false;
    for seed in 0..8 {
        run_into(dir.path(), seed);
        for rec in read_records(&dir.path().join(TRAJECTORIES_FILE)).unwrap() {
            for s in rec.trajectory.steps() {
                if let Some(o) = &s.observation {
                    blocked |= o.error_class() == Some(ErrorClass::BlockedDomain);
                    truncated |= o.truncated;
                }
            }
        }
    }
    assert!(blocked && truncated);
}

#[test]
fn replay_flags_a_tampered_reward() {
    let dir = tempfile::tempdir().unwrap();
    run_into(dir.path(), 3);
    let path = dir.path().join(TRAJECTORIES_FILE);
    let mut records = read_records(&path).unwrap();
    let rec = records.iter_mut().find(|r| r.reward.is_some()).unwrap();
    rec.reward.as_mut().unwrap().reward += 1.0;
    write_records(&path, &records).unwrap();
    let report = replay(std::io::BufReader::new(std::fs::File::open(&path).unwrap()), RetentionBudget(5)).unwrap();
    assert_eq!(report.mismatches.len(), 1);
}

fn config_strategy() -> impl Strategy<Value = RunConfig> {
    (any::<u64>(), any::<bool>(), 1usize..64, 1usize..1000, 0usize..20, 1usize..100_000, 0.0f64..2.0, 0.01f64..1.0, 0.0f64..5.0)
        .prop_map(|(seed, mock, workers, turns, k, trunc, temp, top_p, ac)| {
            let mut c = RunConfig { seed, mock, workers, ..RunConfig::default() };
            c.limits.max_turns = turns;
            c.limits.retention = k;
            c.limits.truncation_limit = trunc;
            c.sampling.temperature = temp;
            c.sampling.top_p = top_p;
            c.reward.alpha_c = ac;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in config_strategy()) {
        prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn env_overrides_win(turns in 1usize..5000, seed: u32) {
        let env = vec![
            ("MIRO_LIMITS__MAX_TURNS".to_string(), turns.to_string()),
            ("MIRO_SEED".to_string(), seed.to_string()),
        ];
        let cfg = RunConfig::load(Some(&common::suite_dir().join("run.toml")), env).unwrap();
        prop_assert_eq!(cfg.limits.max_turns, turns);
        prop_assert_eq!(cfg.seed, u64::from(seed));
        prop_assert!(cfg.mock);
    }

    #[test]
    fn avg_is_permutation_invariant(mut xs in prop::collection::vec(0.0f64..1.0, 1..16), rot in 0usize..16) {
        let a = avg_at_k(&xs).unwrap();
        let n = xs.len();
        xs.rotate_left(rot % n);
        xs.reverse();
        let b = avg_at_k(&xs).unwrap();
        prop_assert!((a.mean - b.mean).abs() <= 1e-12);
        prop_assert!((a.std - b.std).abs() <= 1e-12);
        prop_assert!(a.std >= 0.0);
    }

    #[test]
    fn records_round_trip(
        n_ok in 0usize..6,
        n_err in 0usize..6,
        answer in "[A-Za-z ]{1,20}",
        sample in prop::option::of(1usize..9),
        correct: bool,
    ) {
        let mut obs = vec![common::ok(); n_ok];
        obs.extend(vec![common::failed(ErrorClass::Timeout); n_err]);
        let t = common::finished(common::distinct(obs), &answer);
        let rec = Recorded {
            trajectory: t,
            sample,
            reward: Some(RewardRecord { correct, format_violation: false, alpha_c: 1.0, alpha_f: 0.5, reward: if correct { 1.0 } else { 0.0 } }),
        };
        let mut buf = Vec::new();
        write_recorded(&mut buf, &rec).unwrap();
        write_recorded(&mut buf, &rec).unwrap();
        let back = read_recorded(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 2);
        prop_assert_eq!(&back[0], &rec);
    }
}
