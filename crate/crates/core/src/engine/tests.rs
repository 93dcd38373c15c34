use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::oracle::{scratch_run, ReferenceInput};
use crate::workloads::{self, BuiltinWorkload};

fn recs(xs: &[&str]) -> Vec<Record> {
    xs.iter().map(|s| Record::try_from(*s).unwrap()).collect()
}

fn engine(workload: Workload, mode: TreeMode) -> Engine {
    Engine::new(Job::new(workload, mode), EngineConfig::default()).unwrap()
}

fn kv(out: &[KVPair]) -> Vec<(String, String)> {
    out.iter()
        .map(|p| {
            (
                String::from_utf8_lossy(p.key()).into_owned(),
                String::from_utf8_lossy(p.value()).into_owned(),
            )
        })
        .collect()
}

fn fresh_keys(r: &RunResult, kind: TaskKind) -> Vec<String> {
    let mut keys: Vec<String> = r
        .fresh
        .tasks
        .iter()
        .filter(|t| t.kind == kind)
        .map(|t| String::from_utf8_lossy(t.key.as_ref().unwrap()).into_owned())
        .collect();
    keys.sort();
    keys
}

#[test]
fn empty_input_gives_empty_output() {
    let mut e = engine(workloads::wordcount(), TreeMode::VariableWidth);
    let r = e.initial_run(Vec::new()).unwrap();
    assert!(r.output.is_empty());
    assert_eq!(r.stats, RunStats::default());
}

#[test]
fn wordcount_example() {
    for mode in [
        TreeMode::VariableWidth,
        TreeMode::AppendOnly,
        TreeMode::fixed(4).unwrap(),
    ] {
        let mut e = engine(workloads::wordcount(), mode);
        let r = e
            .initial_run(vec![
                Chunk::from_strs(0, &["a b"]),
                Chunk::from_strs(1, &["b c"]),
            ])
            .unwrap();
        assert_eq!(
            kv(&r.output),
            vec![
                ("a".into(), "1".into()),
                ("b".into(), "2".into()),
                ("c".into(), "1".into())
            ],
            "{mode}"
        );
        assert_eq!(r.stats.n_i, 2);
        assert_eq!(r.stats.n_m, 4);
        assert_eq!(r.stats.n_mk, 3);
        assert_eq!(r.stats.reduce_tasks(), 3);
        assert_eq!(r.stats.n_o, 3);
    }
}

#[test]
fn map_task_count_follows_split_size() {
    for (chunks, per_chunk, split_size) in
        [(10u64, 2usize, 1usize), (10, 2, 4), (9, 3, 5), (7, 1, 7)]
    {
        let input: Vec<Chunk> = (0..chunks)
            .map(|i| {
                Chunk::new(
                    i,
                    (0..per_chunk)
                        .map(|j| Record::try_from(format!("w{j}").as_str()).unwrap())
                        .collect(),
                )
            })
            .collect();
        let job =
            Job::new(workloads::wordcount(), TreeMode::VariableWidth).with_split_size(split_size);
        let mut e = Engine::new(job, EngineConfig::default()).unwrap();
        let r = e.initial_run(input).unwrap();
        let per_split = split_size.div_ceil(per_chunk) as u64;
        assert_eq!(r.stats.map_tasks(), chunks.div_ceil(per_split));
        assert!(r.stats.total_tasks() <= 3 * (r.stats.n_i + r.stats.n_m));
    }
}

#[test]
fn identical_replace_fires_nothing() {
    let mut e = engine(workloads::wordcount(), TreeMode::VariableWidth);
    let input: Vec<Chunk> = (0..20)
        .map(|i| Chunk::from_strs(i, &["x y", "z"]))
        .collect();
    let first = e.initial_run(input).unwrap();
    let r = e
        .dynamic_update(&UpdateDelta::new(vec![DeltaOp::ReplaceChunk(
            ChunkId(3),
            recs(&["x y", "z"]),
        )]))
        .unwrap();
    assert_eq!(r.stats.fresh_tasks(), 0);
    assert_eq!(r.output, first.output);
    assert_eq!(r.stats.evicted, 0);
}

#[test]
fn noop_series_repeats_initial_result() {
    let mut e = engine(workloads::wordcount(), TreeMode::VariableWidth);
    let input: Vec<Chunk> = (0..30)
        .map(|i| Chunk::from_strs(i, &[&format!("a{} b", i % 4)]))
        .collect();
    let results = e.run_series(input, &vec![UpdateDelta::noop(); 3]).unwrap();
    for r in &results[1..] {
        assert_eq!(r.output, results[0].output);
        assert_eq!(r.stats.fresh_tasks(), 0);
        assert_eq!(r.stats.total_tasks(), results[0].stats.total_tasks());
        assert_eq!(r.stats.memo_entries, results[0].stats.memo_entries);
    }
}

#[test]
fn append_touches_one_combine_per_existing_key() {
    let mut e = engine(workloads::wordcount(), TreeMode::AppendOnly);
    e.initial_run(vec![Chunk::from_strs(0, &["a b c"])])
        .unwrap();
    let r = e
        .dynamic_update(&UpdateDelta::new(vec![DeltaOp::AppendChunk(recs(&[
            "a b d",
        ]))]))
        .unwrap();
    assert_eq!(fresh_keys(&r, TaskKind::Combine), vec!["a", "b"]);
    assert_eq!(fresh_keys(&r, TaskKind::Reduce), vec!["a", "b", "d"]);
    assert_eq!(r.stats.map_run, 1);
    assert_eq!(r.new_chunks, vec![ChunkId(1)]);
    assert_eq!(
        kv(&r.output),
        vec![
            ("a".into(), "2".into()),
            ("b".into(), "2".into()),
            ("c".into(), "1".into()),
            ("d".into(), "1".into())
        ]
    );
    assert_eq!(r.stats.memo_entries, r.stats.distinct_tasks);
}

#[test]
fn invalid_delta_leaves_state_alone() {
    let mut e = engine(workloads::wordcount(), TreeMode::AppendOnly);
    let first = e.initial_run(vec![Chunk::from_strs(0, &["a"])]).unwrap();
    let entries = e.memo().len();
    for op in [
        DeltaOp::ReplaceChunk(ChunkId(0), recs(&["b"])),
        DeltaOp::DeleteChunk(ChunkId(0)),
        DeltaOp::SlideBucket(recs(&["b"])),
    ] {
        let err = e.dynamic_update(&UpdateDelta::new(vec![op])).unwrap_err();
        assert!(err.is_invalid_input(), "{err}");
    }
    assert_eq!(e.memo().len(), entries);
    let again = e.dynamic_update(&UpdateDelta::noop()).unwrap();
    assert_eq!(again.output, first.output);
    assert_eq!(again.stats.fresh_tasks(), 0);

    let mut v = engine(workloads::wordcount(), TreeMode::VariableWidth);
    v.initial_run(vec![Chunk::from_strs(0, &["a"])]).unwrap();
    assert!(matches!(
        v.dynamic_update(&UpdateDelta::new(vec![DeltaOp::DeleteChunk(ChunkId(9))])),
        Err(EngineError::UnknownChunk(ChunkId(9)))
    ));
    assert!(matches!(
        v.initial_run(Vec::new()),
        Err(EngineError::AlreadyInitialized)
    ));
}

#[test]
fn udf_failure_aborts_the_run() {
    let mut e = engine(workloads::windowed_sum(), TreeMode::VariableWidth);
    let first = e
        .initial_run(vec![
            Chunk::from_strs(0, &["1"]),
            Chunk::from_strs(1, &["2"]),
        ])
        .unwrap();
    let entries = e.memo().len();
    let err = e
        .dynamic_update(&UpdateDelta::new(vec![DeltaOp::AppendChunk(recs(&[
            "oops",
        ]))]))
        .unwrap_err();
    assert!(err.is_udf_failure());
    assert_eq!(e.chunks().len(), 2);
    let r = e.dynamic_update(&UpdateDelta::noop()).unwrap();
    assert_eq!(r.output, first.output);
    assert_eq!(r.stats.fresh_tasks(), 0);
    assert_eq!(e.memo().len(), entries);
}

#[test]
fn fixed_slide_fires_one_path_per_key() {
    let b = 8;
    let mode = TreeMode::fixed(b).unwrap();
    let mut e = engine(workloads::wordcount(), mode);
    // Every key in every bucket, with per-bucket counts that differ.
    let bucket = |n: usize| recs(&[&vec!["p q r"; n].join(" ")]);
    let input: Vec<Chunk> = (0..b)
        .map(|i| Chunk::new(i as u64, bucket(i + 1)))
        .collect();
    let first = e.initial_run(input).unwrap();
    assert_eq!(first.stats.combine_run, 3 * 7);
    let r = e
        .dynamic_update(&UpdateDelta::new(vec![DeltaOp::SlideBucket(bucket(20))]))
        .unwrap();
    for key in ["p", "q", "r"] {
        let n = r
            .fresh
            .tasks
            .iter()
            .filter(|t| t.kind == TaskKind::Combine && t.key.as_deref() == Some(key.as_bytes()))
            .count();
        assert_eq!(n, 3, "key {key}");
    }
    assert_eq!(r.stats.reduce_run, 3);
    assert_eq!(r.stats.map_run, 1);
    let total: usize = (2..=8).sum::<usize>() + 20;
    assert_eq!(kv(&r.output)[0], ("p".into(), total.to_string()));
}

#[test]
fn persist_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [
        TreeMode::VariableWidth,
        TreeMode::AppendOnly,
        TreeMode::fixed(8).unwrap(),
    ] {
        let path = dir.path().join(format!("{}.memo", mode.name()));
        let job = || Job::new(workloads::wordcount(), mode).with_tree_seed(3);
        let mut e = Engine::new(job(), EngineConfig::default()).unwrap();
        let input: Vec<Chunk> = (0..6)
            .map(|i| Chunk::from_strs(i, &[&format!("k{} k", i % 3)]))
            .collect();
        e.initial_run(input).unwrap();
        let delta = match mode {
            TreeMode::FixedWidth { .. } => DeltaOp::SlideBucket(recs(&["k0 z"])),
            _ => DeltaOp::AppendChunk(recs(&["k0 z"])),
        };
        let before = e.dynamic_update(&UpdateDelta::new(vec![delta])).unwrap();
        e.persist(&path).unwrap();

        let mut resumed = Engine::resume(job(), EngineConfig::default(), &path).unwrap();
        assert_eq!(resumed.chunks(), e.chunks());
        let r = resumed.dynamic_update(&UpdateDelta::noop()).unwrap();
        assert_eq!(r.stats.fresh_tasks(), 0, "{mode}");
        assert_eq!(r.output, before.output);
        assert_eq!(r.stats.evicted, 0);

        let other = Job::new(workloads::wordcount(), mode).with_tree_seed(4);
        assert!(matches!(
            Engine::resume(other, EngineConfig::default(), &path),
            Err(EngineError::JobMismatch)
        ));
    }
}

#[test]
fn resume_rejects_ledgerless_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bare.memo");
    MemoStore::new().persist(&path).unwrap();
    let job = Job::new(workloads::wordcount(), TreeMode::VariableWidth);
    assert!(matches!(
        Engine::resume(job, EngineConfig::default(), &path),
        Err(EngineError::MissingLedger)
    ));
}

fn random_delta(
    rng: &mut ChaCha8Rng,
    mode: TreeMode,
    ids: &[ChunkId],
    w: BuiltinWorkload,
) -> UpdateDelta {
    let mut ops = Vec::new();
    for _ in 0..rng.random_range(1..4) {
        let n = rng.random_range(1..4);
        let records = w.generate(rng, n, 6, 2);
        let pick = (!ids.is_empty()).then(|| ids[rng.random_range(0..ids.len())]);
        let op = match (mode, rng.random_range(0..3), pick) {
            (TreeMode::AppendOnly, _, _) => DeltaOp::AppendChunk(records),
            (TreeMode::FixedWidth { .. }, 0, Some(id)) => DeltaOp::ReplaceChunk(id, records),
            (TreeMode::FixedWidth { .. }, 1, Some(id)) => DeltaOp::DeleteChunk(id),
            (TreeMode::FixedWidth { .. }, _, _) => DeltaOp::SlideBucket(records),
            (_, 0, Some(id)) => DeltaOp::ReplaceChunk(id, records),
            (_, 1, Some(id)) => DeltaOp::DeleteChunk(id),
            _ => DeltaOp::AppendChunk(records),
        };
        // One delete or replace per delta keeps picked ids valid.
        let touches_existing = matches!(op, DeltaOp::ReplaceChunk(..) | DeltaOp::DeleteChunk(_));
        ops.push(op);
        if touches_existing {
            break;
        }
    }
    UpdateDelta::new(ops)
}

#[test]
fn small_random_series_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for w in BuiltinWorkload::ALL {
        for mode in [
            TreeMode::VariableWidth,
            TreeMode::AppendOnly,
            TreeMode::fixed(5).unwrap(),
        ] {
            for split_size in [1, 3] {
                let job = Job::new(w.workload(), mode)
                    .with_split_size(split_size)
                    .with_tree_seed(rng.random());
                let mut e = Engine::new(job.clone(), EngineConfig::default()).unwrap();
                let n = if matches!(mode, TreeMode::FixedWidth { .. }) {
                    5
                } else {
                    12
                };
                let input: Vec<Chunk> = (0..n)
                    .map(|i| Chunk::new(i, w.generate(&mut rng, 2, 6, 2)))
                    .collect();
                let mut reference = ReferenceInput::new(mode, input.clone());
                let r = e.initial_run(input).unwrap();
                assert_eq!(
                    r.output,
                    scratch_run(&job, reference.chunks()).unwrap().output
                );
                for step in 0..30 {
                    let delta = random_delta(&mut rng, mode, &reference.ids(), w);
                    let r = e.dynamic_update(&delta).unwrap();
                    let added = reference.apply(&delta).unwrap();
                    assert_eq!(r.new_chunks, added);
                    assert_eq!(e.chunks(), reference.chunks(), "{w} {mode} step {step}");
                    let expected = scratch_run(&job, reference.chunks()).unwrap().output;
                    assert_eq!(r.output, expected, "{w} {mode} step {step}");
                    assert_eq!(
                        r.stats.memo_entries, r.stats.distinct_tasks,
                        "{w} {mode} step {step}"
                    );
                    assert_eq!(r.stats.n_mk, r.stats.reduce_tasks());
                }
            }
        }
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let run = |workers: usize| {
        let job = Job::new(workloads::wordcount(), TreeMode::VariableWidth).with_tree_seed(5);
        let mut e = Engine::new(
            job,
            EngineConfig {
                workers,
                ..EngineConfig::default()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input: Vec<Chunk> = (0..3000)
            .map(|i| Chunk::new(i, BuiltinWorkload::WordCount.generate(&mut rng, 1, 4, 2)))
            .collect();
        let mut out = vec![e.initial_run(input).unwrap()];
        out.push(
            e.dynamic_update(&UpdateDelta::new(vec![DeltaOp::DeleteChunk(ChunkId(17))]))
                .unwrap(),
        );
        out.into_iter()
            .map(|r| {
                let kinds: Vec<(TaskKind, Option<u64>, Option<Vec<u8>>)> = r
                    .fresh
                    .tasks
                    .into_iter()
                    .map(|t| (t.kind, t.split, t.key))
                    .collect();
                (r.output, r.stats, kinds)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn entries_match_distinct_tasks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input: Vec<Chunk> = (0..2000)
        .map(|i| Chunk::new(i, BuiltinWorkload::WordCount.generate(&mut rng, 1, 16, 4)))
        .collect();
    let mut e = engine(workloads::wordcount(), TreeMode::VariableWidth);
    let r = e.initial_run(input).unwrap();
    assert_eq!(r.stats.memo_entries, r.stats.distinct_tasks);
    assert!(r.stats.memo_entries <= 3 * r.stats.n_m);
    assert!(r.stats.combine_stages <= r.stats.n_m);
}
