//! Virtual-time comparison of streaming rollouts against gang-scheduled
//! waves. Durations are drawn once, in task order, so the sample does not
//! depend on the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use serde::{Deserialize, Serialize};

use super::BatchSpec;
use crate::error::SchedulerError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DurationDistribution {
    Constant(f64),
    Pareto { scale: f64, shape: f64 },
}

impl DurationDistribution {
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>, SchedulerError> {
        match *self {
            Self::Constant(d) if d.is_finite() && d > 0.0 => Ok(vec![d; n]),
            Self::Constant(d) => Err(SchedulerError::InvalidSpec(format!("duration {d} must be positive"))),
            Self::Pareto { scale, shape } => {
                let dist = Pareto::new(scale, shape)
                    .map_err(|e| SchedulerError::InvalidSpec(format!("pareto({scale}, {shape}): {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStats {
    /// Time at which the batch is available.
    pub makespan: f64,
    /// Idle time of each worker within `[0, makespan]`.
    pub worker_idle: Vec<f64>,
    /// Tasks still running at the cut, returned to the queue.
    pub requeued: usize,
}

impl ScheduleStats {
    pub fn total_idle(&self) -> f64 {
        self.worker_idle.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailReport {
    pub tasks: usize,
    pub workers: usize,
    pub batch_size: usize,
    pub durations: Vec<f64>,
    pub streaming: ScheduleStats,
    pub gang: ScheduleStats,
}

/// Simulates collecting `spec.batch_size` completions out of `tasks`.
///
/// Streaming: each worker takes the next queued task the moment it frees
/// up; the batch is ready at the B-th completion. Gang: tasks run in
/// synchronized waves of `W`; the batch is ready when the wave holding the
/// B-th completion ends.
pub fn simulate_long_tail(
    spec: &BatchSpec,
    tasks: usize,
    distribution: DurationDistribution,
    seed: u64,
) -> Result<LongTailReport, SchedulerError> {
    if spec.workers == 0 || spec.batch_size == 0 {
        return Err(SchedulerError::InvalidSpec("need at least one worker and a positive batch size".into()));
    }
    if tasks < spec.batch_size {
        return Err(SchedulerError::InvalidSpec(format!(
            "{tasks} tasks cannot fill a batch of {}",
            spec.batch_size
        )));
    }
    let durations = distribution.sample(tasks, seed)?;
    Ok(LongTailReport {
        tasks,
        workers: spec.workers,
        batch_size: spec.batch_size,
        streaming: streaming(&durations, spec.workers, spec.batch_size),
        gang: gang(&durations, spec.workers, spec.batch_size),
        durations,
    })
}

fn streaming(durations: &[f64], workers: usize, batch: usize) -> ScheduleStats {
    let mut free_at = vec![0.0f64; workers];
    let mut runs: Vec<(usize, f64, f64)> = Vec::with_capacity(durations.len());
    for &d in durations {
        // Earliest-free worker, lowest index on ties.
        let (w, start) = free_at
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, t)| if t < best.1 { (i, t) } else { best });
        free_at[w] = start + d;
        runs.push((w, start, start + d));
    }
    let mut ends: Vec<f64> = runs.iter().map(|r| r.2).collect();
    ends.sort_by(f64::total_cmp);
    let makespan = ends[batch - 1];

    let mut busy = vec![0.0f64; workers];
    let mut requeued = 0;
    for &(w, start, end) in &runs {
        if start < makespan {
            busy[w] += end.min(makespan) - start;
            if end > makespan {
                requeued += 1;
            }
        }
    }
    ScheduleStats {
        makespan,
        worker_idle: busy.iter().map(|b| (makespan - b).max(0.0)).collect(),
        requeued,
    }
}

fn gang(durations: &[f64], workers: usize, batch: usize) -> ScheduleStats {
    let waves = batch.div_ceil(workers);
    let mut clock = 0.0;
    let mut idle = vec![0.0f64; workers];
    for wave in durations.chunks(workers).take(waves) {
        let length = wave.iter().copied().fold(0.0, f64::max);
        for (w, slot) in idle.iter_mut().enumerate() {
            *slot += length - wave.get(w).copied().unwrap_or(0.0);
        }
        clock += length;
    }
    ScheduleStats {
        makespan: clock,
        worker_idle: idle,
        requeued: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(w: usize, b: usize) -> BatchSpec {
        BatchSpec::new(1, b, w)
    }

    #[test]
    fn constant_durations_tie() {
        let r = simulate_long_tail(&spec(8, 64), 64, DurationDistribution::Constant(2.0), 1).unwrap();
        assert_eq!(r.streaming.makespan, r.gang.makespan);
        assert_eq!(r.streaming.makespan, 16.0);
        assert_eq!(r.streaming.total_idle(), 0.0);
    }

    #[test]
    fn single_worker_serializes() {
        let pareto = DurationDistribution::Pareto { scale: 1.0, shape: 1.5 };
        let r = simulate_long_tail(&spec(1, 20), 20, pareto, 9).unwrap();
        let total: f64 = r.durations.iter().sum();
        assert_eq!(r.streaming.makespan, r.gang.makespan);
        assert!((r.streaming.makespan - total).abs() < 1e-9);
    }

    #[test]
    fn hand_checked_small_case() {
        // Durations [3, 1, 1, 1] on two workers: streaming packs the short
        // tasks beside the long one; waves wait for it.
        let d = [3.0, 1.0, 1.0, 1.0];
        let s = streaming(&d, 2, 4);
        let g = gang(&d, 2, 4);
        assert_eq!(s.makespan, 3.0);
        assert_eq!(g.makespan, 4.0);
        assert_eq!(g.worker_idle, vec![0.0, 2.0]);
        let s = streaming(&d, 2, 2);
        assert_eq!(s.makespan, 2.0);
        assert_eq!(s.requeued, 1);
    }

    #[test]
    fn sample_ignores_worker_count() {
        let pareto = DurationDistribution::Pareto { scale: 1.0, shape: 1.5 };
        let a = simulate_long_tail(&spec(2, 10), 10, pareto, 5).unwrap();
        let b = simulate_long_tail(&spec(7, 10), 10, pareto, 5).unwrap();
        assert_eq!(a.durations, b.durations);
    }

    #[test]
    fn bad_parameters() {
        assert!(DurationDistribution::Pareto { scale: 1.0, shape: -1.0 }.sample(3, 0).is_err());
        assert!(DurationDistribution::Constant(0.0).sample(3, 0).is_err());
        assert!(simulate_long_tail(&spec(2, 10), 5, DurationDistribution::Constant(1.0), 0).is_err());
    }
}
