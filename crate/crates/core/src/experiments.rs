//! Instrumented experiments: the single-record-edit scaling sweep and the
//! memoization overhead comparison.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{DeltaOp, Engine, EngineConfig, EngineError, Job, RunResult, UpdateDelta};
use crate::model::{Chunk, ChunkId, RunStats};
use crate::oracle::{self, DirectResult};
use crate::tree::TreeMode;
use crate::workloads::BuiltinWorkload;

/// One initial run plus one single-record deletion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditTrial {
    pub target_n_m: u64,
    pub k: usize,
    pub seed: u64,
    pub initial: RunStats,
    pub update: RunStats,
}

impl EditTrial {
    /// Largest `N_M + N_C + N_R` over `n_i + n_m` across both runs.
    pub fn task_ratio(&self) -> f64 {
        [&self.initial, &self.update]
            .iter()
            .map(|s| s.total_tasks() as f64 / (s.n_i + s.n_m).max(1) as f64)
            .fold(0.0, f64::max)
    }
}

fn trial_rng(seed: u64, n_m: u64, k: usize) -> ChaCha8Rng {
    let mix = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
        ^ n_m.wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (k as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(mix)
}

/// Generates `n_m / k` one-record chunks of `k` distinct words each, runs them
/// in variable-width mode with tree seed `seed`, then deletes one random
/// record (which removes exactly `k` pairs).
///
/// With `verify`, both outputs are checked against the oracle.
pub fn edit_one_record_trial(
    n_m: u64,
    k: usize,
    seed: u64,
    alphabet: usize,
    workers: usize,
    verify: bool,
) -> Result<EditTrial, TrialError> {
    assert!(k >= 1 && k <= alphabet, "need 1 <= k <= alphabet");
    let mut rng = trial_rng(seed, n_m, k);
    let records = (n_m as usize / k).max(1);
    let input: Vec<Chunk> = BuiltinWorkload::WordCount
        .generate(&mut rng, records, alphabet, k)
        .into_iter()
        .enumerate()
        .map(|(i, r)| Chunk::new(i as u64, vec![r]))
        .collect();
    let job = Job::new(
        BuiltinWorkload::WordCount.workload(),
        TreeMode::VariableWidth,
    )
    .with_tree_seed(seed);
    let mut engine = Engine::new(
        job.clone(),
        EngineConfig {
            workers,
            ..EngineConfig::default()
        },
    )?;
    let victim = ChunkId(rng.random_range(0..records as u64));
    let initial = engine.initial_run(input.clone())?;
    let delta = UpdateDelta::new(vec![DeltaOp::DeleteChunk(victim)]);
    let update = engine.dynamic_update(&delta)?;
    if verify {
        let after: Vec<Chunk> = input.iter().filter(|c| c.id != victim).cloned().collect();
        for (result, chunks) in [(&initial, &input), (&update, &after)] {
            if result.output != oracle::scratch_run(&job, chunks)?.output {
                return Err(TrialError::Mismatch(format!("n_m={n_m} k={k} seed={seed}")));
            }
        }
    }
    Ok(EditTrial {
        target_n_m: n_m,
        k,
        seed,
        initial: initial.stats,
        update: update.stats,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum TrialError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Udf(#[from] crate::udf::UdfError),
    #[error("oracle mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Target map-output sizes.
    pub sizes: Vec<u64>,
    /// Pairs per edited record.
    pub ks: Vec<usize>,
    pub trials: usize,
    pub base_seed: u64,
    pub alphabet: usize,
    pub verify: bool,
}

/// Runs every (size, k, seed) trial. Trials run on `threads` plain threads
/// (0 picks the available parallelism) with a one-worker engine each; results
/// come back in (k, size, seed) order.
pub fn run_sweep(config: &SweepConfig, threads: usize) -> Result<Vec<EditTrial>, TrialError> {
    let mut jobs = Vec::new();
    for &k in &config.ks {
        for &n_m in &config.sizes {
            for t in 0..config.trials {
                jobs.push((n_m, k, config.base_seed + t as u64));
            }
        }
    }
    let threads = match threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    // Engines own their worker pools; calling into one from a rayon worker
    // would let that worker pick up more trials while it waits, so trials run
    // on ordinary threads.
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<EditTrial, TrialError>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(n_m, k, seed)) = jobs.get(i) else {
                    break;
                };
                let r = edit_one_record_trial(n_m, k, seed, config.alphabet, 1, config.verify);
                let failed = r.is_err();
                *slots[i].lock().unwrap() = Some(r);
                if failed {
                    next.store(jobs.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(jobs.len());
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(r) => out.push(r?),
            None => break,
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub n_m: u64,
    pub k: usize,
    pub trials: usize,
    pub median_fresh_combines: f64,
    pub median_fresh_reduces: f64,
    pub max_fresh_reduces: u64,
    pub max_task_ratio: f64,
}

impl SweepPoint {
    /// `2k(log2 n_m + 1)`.
    pub fn combine_bound(&self) -> f64 {
        2.0 * self.k as f64 * ((self.n_m as f64).log2() + 1.0)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Groups trials by (k, size) in first-seen order.
pub fn summarize(trials: &[EditTrial]) -> Vec<SweepPoint> {
    let mut groups: Vec<((usize, u64), Vec<&EditTrial>)> = Vec::new();
    for t in trials {
        let key = (t.k, t.target_n_m);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(t),
            None => groups.push((key, vec![t])),
        }
    }
    groups
        .into_iter()
        .map(|((k, n_m), ts)| {
            let mut combines: Vec<f64> = ts.iter().map(|t| t.update.combine_run as f64).collect();
            let mut reduces: Vec<f64> = ts.iter().map(|t| t.update.reduce_run as f64).collect();
            SweepPoint {
                n_m,
                k,
                trials: ts.len(),
                median_fresh_combines: median(&mut combines),
                median_fresh_reduces: median(&mut reduces),
                max_fresh_reduces: ts.iter().map(|t| t.update.reduce_run).max().unwrap_or(0),
                max_task_ratio: ts.iter().map(|t| t.task_ratio()).fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    // A flat or degenerate series has no trend to explain.
    if syy == 0.0 || sxx == 0.0 {
        return 0.0;
    }
    (sxy * sxy) / (sxx * syy)
}

/// R² of median fresh combines against log2 n_m, for the points with `k`.
pub fn log_fit(points: &[SweepPoint], k: usize) -> f64 {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.k == k)
        .map(|p| ((p.n_m as f64).log2(), p.median_fresh_combines))
        .collect();
    r_squared(&xy)
}

/// Same initial computation with and without memoization and trees.
#[derive(Clone, Debug)]
pub struct OverheadReport {
    pub engine: RunResult,
    pub direct: DirectResult,
}

impl OverheadReport {
    pub fn wall_ratio(&self) -> f64 {
        self.engine.wall.as_secs_f64() / self.direct.wall.max(Duration::from_nanos(1)).as_secs_f64()
    }

    /// Extra tasks the engine ran; equals `N_C`.
    pub fn task_delta(&self) -> i64 {
        self.engine.stats.total_tasks() as i64
            - (self.direct.map_tasks + self.direct.reduce_tasks) as i64
    }
}

pub fn overhead_experiment(
    job: &Job,
    config: EngineConfig,
    input: Vec<Chunk>,
) -> Result<OverheadReport, TrialError> {
    let direct = oracle::direct_run(job, &input)?;
    let mut engine = Engine::new(job.clone(), config)?;
    let engine = engine.initial_run(input)?;
    if engine.output != direct.output {
        return Err(TrialError::Mismatch(
            "engine and direct pipeline disagree".into(),
        ));
    }
    Ok(OverheadReport { engine, direct })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineConfig;
    use crate::workloads;

    #[test]
    fn r_squared_of_a_line_is_one() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 * i as f64 + 1.0)).collect();
        assert!((r_squared(&pts) - 1.0).abs() < 1e-12);
        let noisy = [(0.0, 1.0), (1.0, 0.0), (2.0, 1.0), (3.0, 0.0)];
        assert!(r_squared(&noisy) < 0.5);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn trial_deletes_k_pairs() {
        for k in [1, 4] {
            let t = edit_one_record_trial(256, k, 3, 16, 1, true).unwrap();
            assert_eq!(t.initial.n_m, 256);
            assert_eq!(t.update.n_m, 256 - k as u64);
            assert_eq!(t.update.reduce_run, k as u64);
            assert_eq!(t.update.map_run, 0);
            assert!(t.task_ratio() <= 3.0);
        }
        assert_eq!(
            edit_one_record_trial(512, 4, 9, 16, 1, false).unwrap(),
            edit_one_record_trial(512, 4, 9, 16, 2, false).unwrap()
        );
    }

    #[test]
    fn overhead_delta_is_combine_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input: Vec<Chunk> = (0..300)
            .map(|i| Chunk::new(i, BuiltinWorkload::WordCount.generate(&mut rng, 1, 8, 3)))
            .collect();
        let job = Job::new(workloads::wordcount(), TreeMode::VariableWidth);
        let report = overhead_experiment(&job, EngineConfig::default(), input).unwrap();
        assert_eq!(
            report.task_delta(),
            report.engine.stats.combine_stages as i64
        );
        assert!(report.engine.stats.combine_stages <= report.engine.stats.n_m);
        assert!(report.wall_ratio() > 0.0);
    }
}
