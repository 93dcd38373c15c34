//! The `contract-slide` command line.
//!
//! Exit codes: 0 on success, 1 on a verification mismatch, UDF failure or
//! unusable memo file, 2 on bad flags, bad scripts or deltas the window mode
//! does not allow.

pub mod report;
pub mod script;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{Engine, EngineConfig, EngineError, Job, RunResult, UpdateDelta};
use crate::experiments::{self, OverheadReport, SweepConfig, TrialError};
use crate::model::{Chunk, Record, RunStats};
use crate::oracle::{self, DirectResult, ReferenceInput};
use crate::tree::TreeMode;
use crate::udf::UdfError;
use crate::workloads::{self, BuiltinWorkload};

use report::{output_fingerprint, RunRow};
use script::{DeltaScript, GenDefaults, ResolveError, ScriptError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Append,
    Fixed,
    Variable,
}

/// Incremental MapReduce over sliding windows.
#[derive(Debug, Parser)]
#[command(name = "contract-slide", version)]
pub struct Args {
    /// wordcount, windowed_sum or histogram.
    #[arg(long, default_value = "wordcount")]
    pub workload: BuiltinWorkload,
    #[arg(long, value_enum, default_value_t = ModeArg::Variable)]
    pub mode: ModeArg,
    /// Window size B for fixed mode.
    #[arg(long, default_value_t = 8)]
    pub buckets: usize,
    /// Records per Map split.
    #[arg(long, default_value_t = 1)]
    pub split_size: usize,
    #[arg(long, default_value_t = 0)]
    pub tree_seed: u64,
    /// Resume from this file if it exists; write it back after the last run.
    #[arg(long)]
    pub memo_path: Option<PathBuf>,
    /// Delta script, one update per line.
    #[arg(long)]
    pub deltas: Option<PathBuf>,
    /// Generate this many initial records.
    #[arg(long, conflicts_with = "input")]
    pub gen_records: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Distinct tokens (or histogram buckets) in generated records.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub alphabet: u64,
    /// Words per generated word-count record.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub record_words: u64,
    /// Records per input chunk. In fixed mode the default spreads the
    /// input over the B buckets.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub records_per_chunk: Option<u64>,
    /// Initial records, one per non-empty line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Check every run against a from-scratch evaluation.
    #[arg(long)]
    pub verify: bool,
    /// Write per-run statistics as CSV.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    /// Scaling sweep, e.g. `n_m=2^8..2^14` or `n_m=2^8..2^16,step=2`.
    #[arg(long, requires = "edit_one_record", conflicts_with_all = ["deltas", "memo_path", "no_memo", "overhead"])]
    pub sweep: Option<String>,
    /// Sweep experiment: delete one record emitting k pairs.
    #[arg(long, requires = "sweep")]
    pub edit_one_record: bool,
    /// Seeds per sweep point.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    /// Pairs per edited record, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    pub sweep_k: Vec<usize>,
    /// Worker threads; 0 uses the available parallelism.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Plain map, group, reduce pipeline without trees or memo.
    #[arg(long, conflicts_with_all = ["memo_path", "overhead"])]
    pub no_memo: bool,
    /// Run the initial input with and without memoization and compare.
    #[arg(long, conflicts_with_all = ["deltas", "memo_path"])]
    pub overhead: bool,
    /// Print the final output pairs.
    #[arg(long)]
    pub print_output: bool,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(i64).range(1..))]
    pub histogram_width: i64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    Input { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("delta script {0}")]
    Resolve(#[from] ResolveError),
    #[error("run {run}: {source}")]
    Engine { run: usize, source: EngineError },
    #[error("run {run}: output differs from the from-scratch evaluation ({detail})")]
    Mismatch { run: usize, detail: String },
    #[error(transparent)]
    Udf(#[from] UdfError),
    #[error(transparent)]
    Trial(#[from] TrialError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Input { .. }
            | CliError::Script(_)
            | CliError::Resolve(_) => 2,
            CliError::Engine { source, .. } if source.is_invalid_input() => 2,
            CliError::Trial(TrialError::Engine(e)) if e.is_invalid_input() => 2,
            _ => 1,
        }
    }
}

/// Parses `argv` (program name first), runs, and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    match run(&args, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("contract-slide: {e}");
            e.exit_code()
        }
    }
}

pub fn run<W: Write>(args: &Args, out: &mut W) -> Result<(), CliError> {
    if let Some(spec) = &args.sweep {
        return run_sweep(args, spec, out);
    }
    let job = build_job(args)?;
    let config = EngineConfig {
        workers: args.workers,
        recompute_on_miss: false,
    };
    let script = match &args.deltas {
        Some(p) => DeltaScript::parse(&read_input(p)?)?,
        None => DeltaScript::default(),
    };
    if args.overhead {
        return run_overhead(args, &job, config, out);
    }
    let mut rows = Vec::new();
    let mut final_output = Vec::new();
    let result = if args.no_memo {
        run_direct(args, &job, &script, &mut rows, &mut final_output)
    } else {
        run_engine(args, &job, config, &script, &mut rows, &mut final_output)
    };
    // Completed runs are reported even when a later one fails.
    emit_runs(args, &rows, out)?;
    result?;
    if args.verify {
        writeln!(
            out,
            "verified {} run(s) against the from-scratch evaluation",
            rows.len()
        )?;
    }
    if args.print_output {
        for pair in &final_output {
            writeln!(
                out,
                "{}\t{}",
                String::from_utf8_lossy(pair.key()),
                String::from_utf8_lossy(pair.value())
            )?;
        }
    }
    Ok(())
}

fn to_usize(v: u64) -> usize {
    usize::try_from(v).unwrap_or(usize::MAX)
}

pub fn build_job(args: &Args) -> Result<Job, CliError> {
    let mode = match args.mode {
        ModeArg::Append => TreeMode::AppendOnly,
        ModeArg::Variable => TreeMode::VariableWidth,
        ModeArg::Fixed => {
            TreeMode::fixed(args.buckets).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    if args.split_size == 0 {
        return Err(CliError::Usage("--split-size must be positive".into()));
    }
    let workload = match args.workload {
        BuiltinWorkload::Histogram => workloads::histogram(args.histogram_width),
        w => w.workload(),
    };
    Ok(Job::new(workload, mode)
        .with_split_size(args.split_size)
        .with_tree_seed(args.tree_seed))
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

/// Initial chunks from `--gen-records` or `--input`, with sequential ids.
pub fn initial_input(args: &Args) -> Result<Vec<Chunk>, CliError> {
    let records: Vec<Record> = if let Some(n) = args.gen_records {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        args.workload.generate(
            &mut rng,
            n,
            to_usize(args.alphabet),
            to_usize(args.record_words),
        )
    } else if let Some(path) = &args.input {
        read_input(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Record::new(l.as_bytes().to_vec()).expect("non-empty line"))
            .collect()
    } else {
        Vec::new()
    };
    let per_chunk = match (args.records_per_chunk, args.mode) {
        (Some(n), _) => to_usize(n),
        (None, ModeArg::Fixed) => records.len().div_ceil(args.buckets.max(1)).max(1),
        (None, _) => 1,
    };
    Ok(records
        .chunks(per_chunk)
        .enumerate()
        .map(|(i, r)| Chunk::new(i as u64, r.to_vec()))
        .collect())
}

fn gen_defaults(args: &Args) -> GenDefaults {
    GenDefaults {
        workload: args.workload,
        seed: args.seed,
        alphabet: to_usize(args.alphabet),
        words: to_usize(args.record_words),
    }
}

fn engine_row(run: usize, label: &'static str, job: &Job, r: &RunResult) -> RunRow {
    RunRow {
        run,
        label,
        mode: job.mode.to_string(),
        stats: r.stats.clone(),
        output_fp: output_fingerprint(&r.output),
        wall: r.wall,
        fresh_time: r.fresh.task_time(),
    }
}

fn direct_row(run: usize, label: &'static str, job: &Job, d: &DirectResult) -> RunRow {
    let stats = RunStats {
        n_i: d.n_i,
        n_m: d.n_m,
        n_mk: d.reduce_tasks,
        n_o: d.output.len() as u64,
        map_run: d.map_tasks,
        reduce_run: d.reduce_tasks,
        ..RunStats::default()
    };
    RunRow {
        run,
        label,
        mode: job.mode.to_string(),
        stats,
        output_fp: output_fingerprint(&d.output),
        wall: d.wall,
        fresh_time: d.wall,
    }
}

fn check(
    job: &Job,
    reference: &ReferenceInput,
    run: usize,
    output: &[crate::model::KVPair],
) -> Result<(), CliError> {
    let expected = oracle::scratch_run(job, reference.chunks())?;
    if expected.output != output {
        return Err(CliError::Mismatch {
            run,
            detail: format!(
                "{} pairs expected, {} produced, first difference at pair {}",
                expected.output.len(),
                output.len(),
                expected
                    .output
                    .iter()
                    .zip(output)
                    .position(|(a, b)| a != b)
                    .unwrap_or(expected.output.len().min(output.len()))
            ),
        });
    }
    Ok(())
}

fn run_engine(
    args: &Args,
    job: &Job,
    config: EngineConfig,
    script: &DeltaScript,
    rows: &mut Vec<RunRow>,
    final_output: &mut Vec<crate::model::KVPair>,
) -> Result<(), CliError> {
    let at = |run: usize| move |source: EngineError| CliError::Engine { run, source };
    let resume_from = args.memo_path.as_deref().filter(|p| p.exists());
    let (mut engine, first, label) = match resume_from {
        Some(path) => {
            if args.gen_records.is_some() || args.input.is_some() {
                eprintln!(
                    "contract-slide: resuming from {}; initial input flags ignored",
                    path.display()
                );
            }
            let mut engine = Engine::resume(job.clone(), config, path).map_err(at(0))?;
            let r = engine.dynamic_update(&UpdateDelta::noop()).map_err(at(0))?;
            (engine, r, "resume")
        }
        None => {
            let input = initial_input(args)?;
            let mut engine = Engine::new(job.clone(), config).map_err(at(0))?;
            let r = engine.initial_run(input).map_err(at(0))?;
            (engine, r, "initial")
        }
    };
    let mut reference = args
        .verify
        .then(|| ReferenceInput::new(job.mode, engine.chunks()));
    if let Some(reference) = &reference {
        check(job, reference, 0, &first.output)?;
    }
    rows.push(engine_row(0, label, job, &first));
    *final_output = first.output;

    let defaults = gen_defaults(args);
    for (i, line) in script.deltas.iter().enumerate() {
        let run = i + 1;
        let ids: Vec<_> = engine.chunks().iter().map(|c| c.id).collect();
        let delta = line.resolve(i, &defaults, &ids)?;
        let r = engine.dynamic_update(&delta).map_err(at(run))?;
        if let Some(reference) = &mut reference {
            let added = reference
                .apply(&delta)
                .map_err(|id| at(run)(EngineError::UnknownChunk(id)))?;
            if added != r.new_chunks {
                return Err(CliError::Mismatch {
                    run,
                    detail: format!("new chunk ids {:?}, expected {:?}", r.new_chunks, added),
                });
            }
            check(job, reference, run, &r.output)?;
        }
        rows.push(engine_row(run, "delta", job, &r));
        *final_output = r.output;
    }
    if let Some(path) = &args.memo_path {
        engine
            .persist(path)
            .map_err(at(rows.len().saturating_sub(1)))?;
    }
    Ok(())
}

fn run_direct(
    args: &Args,
    job: &Job,
    script: &DeltaScript,
    rows: &mut Vec<RunRow>,
    final_output: &mut Vec<crate::model::KVPair>,
) -> Result<(), CliError> {
    let input = initial_input(args)?;
    if let TreeMode::FixedWidth { bucket_count } = job.mode {
        if input.len() > bucket_count {
            return Err(CliError::Engine {
                run: 0,
                source: EngineError::TooManyBuckets {
                    chunks: input.len(),
                    buckets: bucket_count,
                },
            });
        }
    }
    let mut reference = ReferenceInput::new(job.mode, input);
    let defaults = gen_defaults(args);
    for run in 0..=script.len() {
        if run > 0 {
            let line = &script.deltas[run - 1];
            let delta = line.resolve(run - 1, &defaults, &reference.ids())?;
            let err = |source| CliError::Engine { run, source };
            delta.validate(job.mode).map_err(err)?;
            reference
                .apply(&delta)
                .map_err(|id| err(EngineError::UnknownChunk(id)))?;
        }
        let d = oracle::direct_run(job, reference.chunks())?;
        if args.verify {
            check(job, &reference, run, &d.output)?;
        }
        rows.push(direct_row(
            run,
            if run == 0 { "initial" } else { "delta" },
            job,
            &d,
        ));
        *final_output = d.output;
    }
    Ok(())
}

fn run_overhead<W: Write>(
    args: &Args,
    job: &Job,
    config: EngineConfig,
    out: &mut W,
) -> Result<(), CliError> {
    let input = initial_input(args)?;
    let reference = ReferenceInput::new(job.mode, input.clone());
    let report: OverheadReport = experiments::overhead_experiment(job, config, input)?;
    if args.verify {
        check(job, &reference, 0, &report.engine.output)?;
    }
    let rows = [
        engine_row(0, "memo", job, &report.engine),
        direct_row(0, "direct", job, &report.direct),
    ];
    emit_runs(args, &rows, out)?;
    writeln!(
        out,
        "task delta {} (N_C = {}), wall ratio {:.3}",
        report.task_delta(),
        report.engine.stats.combine_tasks(),
        report.wall_ratio()
    )?;
    if args.print_output {
        for pair in &report.engine.output {
            writeln!(
                out,
                "{}\t{}",
                String::from_utf8_lossy(pair.key()),
                String::from_utf8_lossy(pair.value())
            )?;
        }
    }
    Ok(())
}

fn emit_runs<W: Write>(args: &Args, rows: &[RunRow], out: &mut W) -> Result<(), CliError> {
    if rows.is_empty() {
        return Ok(());
    }
    report::write_runs_table(&mut *out, rows)?;
    if let Some(path) = &args.stats_out {
        let file = fs::File::create(path).map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })?;
        report::write_runs_csv(io::BufWriter::new(file), rows).map_err(|source| {
            CliError::Output {
                path: path.clone(),
                source,
            }
        })?;
    }
    Ok(())
}

/// Parses `n_m=2^A..2^B[,step=S]` into sizes `2^A, 2^(A+S), ...`.
pub fn parse_sweep(spec: &str) -> Result<Vec<u64>, String> {
    let mut range = None;
    let mut step = 1u32;
    for part in spec.split(',').map(str::trim) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| format!("expected name=value in sweep, got {part:?}"))?;
        match name.trim() {
            "n_m" => {
                let (lo, hi) = value
                    .split_once("..")
                    .ok_or_else(|| format!("expected 2^A..2^B, got {value:?}"))?;
                range = Some((power_of_two(lo)?, power_of_two(hi)?));
            }
            "step" => {
                step = value
                    .trim()
                    .parse()
                    .ok()
                    .filter(|s| *s > 0)
                    .ok_or_else(|| format!("bad sweep step {value:?}"))?;
            }
            other => return Err(format!("unknown sweep parameter {other:?}")),
        }
    }
    let (lo, hi) = range.ok_or("sweep needs n_m=2^A..2^B")?;
    if lo > hi {
        return Err(format!("empty sweep range 2^{lo}..2^{hi}"));
    }
    Ok((lo..=hi)
        .step_by(step as usize)
        .map(|e| 1u64 << e)
        .collect())
}

fn power_of_two(s: &str) -> Result<u32, String> {
    let s = s.trim();
    let exp = match s.strip_prefix("2^") {
        Some(e) => e
            .parse::<u32>()
            .map_err(|_| format!("bad exponent in {s:?}"))?,
        None => {
            let n: u64 = s.parse().map_err(|_| format!("bad sweep size {s:?}"))?;
            if !n.is_power_of_two() {
                return Err(format!("sweep size {n} is not a power of two"));
            }
            n.trailing_zeros()
        }
    };
    if exp > 30 {
        return Err(format!("sweep size 2^{exp} is too large"));
    }
    Ok(exp)
}

fn run_sweep<W: Write>(args: &Args, spec: &str, out: &mut W) -> Result<(), CliError> {
    let sizes = parse_sweep(spec).map_err(CliError::Usage)?;
    let alphabet = to_usize(args.alphabet);
    if args.sweep_k.is_empty() || args.sweep_k.iter().any(|&k| k == 0 || k > alphabet) {
        return Err(CliError::Usage(format!(
            "--sweep-k values must be in 1..={alphabet}"
        )));
    }
    let config = SweepConfig {
        sizes,
        ks: args.sweep_k.clone(),
        trials: to_usize(args.trials),
        base_seed: args.seed,
        alphabet,
        verify: args.verify,
    };
    let trials = experiments::run_sweep(&config, args.workers)?;
    let points = experiments::summarize(&trials);
    report::write_sweep_table(&mut *out, &points)?;
    for &k in &config.ks {
        writeln!(
            out,
            "k={k}: R^2 of median fresh combines vs log2 n_m = {:.4}",
            experiments::log_fit(&points, k)
        )?;
    }
    if let Some(path) = &args.stats_out {
        let file = fs::File::create(path).map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })?;
        report::write_sweep_csv(io::BufWriter::new(file), &points).map_err(|source| {
            CliError::Output {
                path: path.clone(),
                source,
            }
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_spec() {
        assert_eq!(parse_sweep("n_m=2^8..2^10").unwrap(), vec![256, 512, 1024]);
        assert_eq!(
            parse_sweep("n_m=2^8..2^14, step=2").unwrap(),
            vec![256, 1024, 4096, 16384]
        );
        assert_eq!(parse_sweep("n_m=16..64").unwrap(), vec![16, 32, 64]);
        for bad in [
            "",
            "n_m=2^9..2^8",
            "n_m=12..16",
            "n_m=2^8",
            "size=2^8..2^9",
            "n_m=2^8..2^9,step=0",
        ] {
            assert!(parse_sweep(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn fixed_input_spreads_over_buckets() {
        let args = Args::try_parse_from([
            "cs",
            "--mode",
            "fixed",
            "--buckets",
            "4",
            "--gen-records",
            "10",
        ])
        .unwrap();
        let chunks = initial_input(&args).unwrap();
        assert_eq!(chunks.len(), 4);
        assert_eq!(chunks.iter().map(|c| c.records.len()).sum::<usize>(), 10);
    }

    #[test]
    fn exit_codes() {
        let invalid = CliError::Engine {
            run: 1,
            source: EngineError::UnknownChunk(crate::model::ChunkId(9)),
        };
        assert_eq!(invalid.exit_code(), 2);
        let memo = CliError::Engine {
            run: 0,
            source: EngineError::JobMismatch,
        };
        assert_eq!(memo.exit_code(), 1);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::Mismatch {
                run: 0,
                detail: String::new()
            }
            .exit_code(),
            1
        );
    }
}
