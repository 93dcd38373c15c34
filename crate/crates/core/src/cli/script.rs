//! Delta scripts: one update per line.
//!
//! ```text
//! # comment
//! append ["w1 w2", "w3"]
//! replace 4 gen(count=2, seed=9)
//! delete @0 ; delete @-1
//! slide gen(count=1)
//! noop
//! ```
//!
//! Ops on one line are separated by `;` and form a single delta. Chunks are
//! named by id (`4`) or by position in the window before the delta (`@0` is
//! the oldest, `@-1` the newest). Payloads are a JSON array of record
//! strings or a seeded generator call. Blank lines and text after `#` are
//! ignored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{DeltaOp, UpdateDelta};
use crate::model::{ChunkId, Record};
use crate::workloads::BuiltinWorkload;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("delta script line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkRef {
    Id(u64),
    Pos(i64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Records(Vec<Record>),
    Gen {
        count: usize,
        seed: Option<u64>,
        alphabet: Option<usize>,
        words: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScriptOp {
    Append(Payload),
    Replace(ChunkRef, Payload),
    Delete(ChunkRef),
    Slide(Payload),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptLine {
    /// 1-based line in the source text.
    pub line: usize,
    pub ops: Vec<ScriptOp>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeltaScript {
    pub deltas: Vec<ScriptLine>,
}

/// Generator settings for `gen(...)` arguments left out.
#[derive(Clone, Copy, Debug)]
pub struct GenDefaults {
    pub workload: BuiltinWorkload,
    pub seed: u64,
    pub alphabet: usize,
    pub words: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("line {line}: no chunk at position {pos} (window holds {len})")]
    NoSuchPosition { line: usize, pos: i64, len: usize },
    #[error("line {line}: generator produced no records")]
    EmptyPayload { line: usize },
}

impl DeltaScript {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut deltas = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| ScriptError { line, msg };
            let body = strip_comment(raw);
            if body.trim().is_empty() {
                continue;
            }
            let mut ops = Vec::new();
            let parts = split_ops(body);
            for part in &parts {
                let part = part.trim();
                if part.is_empty() {
                    return Err(err("empty op".into()));
                }
                if part == "noop" {
                    if parts.len() > 1 {
                        return Err(err("noop cannot be combined with other ops".into()));
                    }
                    continue;
                }
                ops.push(parse_op(part).map_err(err)?);
            }
            deltas.push(ScriptLine { line, ops });
        }
        Ok(DeltaScript { deltas })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

impl ScriptLine {
    /// Turns the line into a delta against the window `current` (oldest
    /// first). `index` is the delta's position in the script and seeds
    /// generators that have no explicit seed.
    pub fn resolve(
        &self,
        index: usize,
        defaults: &GenDefaults,
        current: &[ChunkId],
    ) -> Result<UpdateDelta, ResolveError> {
        let mut ops = Vec::with_capacity(self.ops.len());
        for (j, op) in self.ops.iter().enumerate() {
            let salt = (index as u64) << 16 | j as u64;
            let records = |p: &Payload| self.records(p, defaults, salt);
            let chunk = |r: &ChunkRef| self.chunk(*r, current);
            ops.push(match op {
                ScriptOp::Append(p) => DeltaOp::AppendChunk(records(p)?),
                ScriptOp::Slide(p) => DeltaOp::SlideBucket(records(p)?),
                ScriptOp::Replace(r, p) => DeltaOp::ReplaceChunk(chunk(r)?, records(p)?),
                ScriptOp::Delete(r) => DeltaOp::DeleteChunk(chunk(r)?),
            });
        }
        Ok(UpdateDelta::new(ops))
    }

    fn chunk(&self, r: ChunkRef, current: &[ChunkId]) -> Result<ChunkId, ResolveError> {
        match r {
            ChunkRef::Id(id) => Ok(ChunkId(id)),
            ChunkRef::Pos(pos) => {
                let len = current.len();
                let idx = if pos < 0 { len as i64 + pos } else { pos };
                usize::try_from(idx)
                    .ok()
                    .and_then(|i| current.get(i).copied())
                    .ok_or(ResolveError::NoSuchPosition {
                        line: self.line,
                        pos,
                        len,
                    })
            }
        }
    }

    fn records(
        &self,
        p: &Payload,
        defaults: &GenDefaults,
        salt: u64,
    ) -> Result<Vec<Record>, ResolveError> {
        match p {
            Payload::Records(r) => Ok(r.clone()),
            Payload::Gen {
                count,
                seed,
                alphabet,
                words,
            } => {
                let seed = seed.unwrap_or_else(|| mix(defaults.seed, salt));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let out = defaults.workload.generate(
                    &mut rng,
                    *count,
                    alphabet.unwrap_or(defaults.alphabet),
                    words.unwrap_or(defaults.words),
                );
                if out.is_empty() {
                    return Err(ResolveError::EmptyPayload { line: self.line });
                }
                Ok(out)
            }
        }
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        ^ salt
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Walks `s` outside JSON strings, calling `f(index, byte)`; stops when `f`
/// returns false.
fn scan_unquoted(s: &str, mut f: impl FnMut(usize, u8) -> bool) {
    let mut in_str = false;
    let mut escaped = false;
    for (i, b) in s.bytes().enumerate() {
        if in_str {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_str = false,
                _ => {}
            }
        } else if b == b'"' {
            in_str = true;
        } else if !f(i, b) {
            return;
        }
    }
}

fn strip_comment(s: &str) -> &str {
    let mut end = s.len();
    scan_unquoted(s, |i, b| {
        if b == b'#' {
            end = i;
            false
        } else {
            true
        }
    });
    &s[..end]
}

fn split_ops(s: &str) -> Vec<&str> {
    let mut cuts = Vec::new();
    scan_unquoted(s, |i, b| {
        if b == b';' {
            cuts.push(i);
        }
        true
    });
    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for c in cuts {
        out.push(&s[start..c]);
        start = c + 1;
    }
    out.push(&s[start..]);
    out
}

fn split_word(s: &str) -> (&str, &str) {
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim_start()),
        None => (s, ""),
    }
}

fn parse_op(s: &str) -> Result<ScriptOp, String> {
    let (verb, rest) = split_word(s);
    match verb {
        "append" => Ok(ScriptOp::Append(parse_payload(rest)?)),
        "slide" => Ok(ScriptOp::Slide(parse_payload(rest)?)),
        "replace" => {
            let (target, rest) = split_word(rest);
            Ok(ScriptOp::Replace(parse_ref(target)?, parse_payload(rest)?))
        }
        "delete" => {
            let (target, rest) = split_word(rest);
            if !rest.is_empty() {
                return Err(format!("unexpected text after delete target: {rest:?}"));
            }
            Ok(ScriptOp::Delete(parse_ref(target)?))
        }
        other => Err(format!(
            "unknown op {other:?} (expected append, replace, delete, slide or noop)"
        )),
    }
}

fn parse_ref(s: &str) -> Result<ChunkRef, String> {
    if s.is_empty() {
        return Err("missing chunk id".into());
    }
    match s.strip_prefix('@') {
        Some(p) => p
            .parse()
            .map(ChunkRef::Pos)
            .map_err(|_| format!("bad chunk position {s:?}")),
        None => s
            .parse()
            .map(ChunkRef::Id)
            .map_err(|_| format!("bad chunk id {s:?}")),
    }
}

fn parse_payload(s: &str) -> Result<Payload, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("missing payload".into());
    }
    if s.starts_with('[') {
        let strings: Vec<String> =
            serde_json::from_str(s).map_err(|e| format!("bad record list: {e}"))?;
        if strings.is_empty() {
            return Err("record list is empty".into());
        }
        let records = strings
            .into_iter()
            .map(|r| Record::new(r.into_bytes()).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        return Ok(Payload::Records(records));
    }
    let args = s
        .strip_prefix("gen(")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| format!("expected a JSON record list or gen(...), got {s:?}"))?;
    let mut count = None;
    let mut seed = None;
    let mut alphabet = None;
    let mut words = None;
    for arg in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
        let (name, value) = arg
            .split_once('=')
            .ok_or_else(|| format!("expected name=value, got {arg:?}"))?;
        let value = value.trim();
        let bad = || format!("bad value for {}: {value:?}", name.trim());
        match name.trim() {
            "count" => count = Some(value.parse::<usize>().map_err(|_| bad())?),
            "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
            "alphabet" => alphabet = Some(value.parse::<usize>().map_err(|_| bad())?),
            "words" => words = Some(value.parse::<usize>().map_err(|_| bad())?),
            other => return Err(format!("unknown gen argument {other:?}")),
        }
    }
    let count = count.ok_or("gen(...) needs count=")?;
    if count == 0 {
        return Err("gen count must be positive".into());
    }
    Ok(Payload::Gen {
        count,
        seed,
        alphabet,
        words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> GenDefaults {
        GenDefaults {
            workload: BuiltinWorkload::WordCount,
            seed: 1,
            alphabet: 8,
            words: 2,
        }
    }

    #[test]
    fn parses_every_op() {
        let text = r#"
# header
append ["a b", "c; #not a comment"]
replace 4 gen(count=2, seed=9) ; delete @-1
slide gen(count = 1, alphabet=3, words=1)   # trailing
noop
"#;
        let s = DeltaScript::parse(text).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.deltas[0].line, 3);
        match &s.deltas[0].ops[..] {
            [ScriptOp::Append(Payload::Records(r))] => {
                assert_eq!(r[1].as_bytes(), b"c; #not a comment");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(s.deltas[1].ops.len(), 2);
        assert_eq!(s.deltas[1].ops[1], ScriptOp::Delete(ChunkRef::Pos(-1)));
        assert!(s.deltas[3].ops.is_empty());
    }

    #[test]
    fn rejects_malformed_lines() {
        for (text, line) in [
            ("append", 1),
            ("\nfrobnicate 3", 2),
            ("delete", 1),
            ("delete x", 1),
            ("append [\"\"]", 1),
            ("append []", 1),
            ("append gen(seed=1)", 1),
            ("append gen(count=0)", 1),
            ("append gen(count=1, colour=2)", 1),
            ("noop; delete 1", 1),
            ("delete 1;", 1),
            ("append [\"a\"", 1),
        ] {
            let e = DeltaScript::parse(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
        }
    }

    #[test]
    fn resolution_is_deterministic() {
        let s = DeltaScript::parse(
            "append gen(count=3)\nappend gen(count=3)\nreplace @0 gen(count=1, seed=5)",
        )
        .unwrap();
        let ids = [ChunkId(10), ChunkId(11)];
        let a = s.deltas[0].resolve(0, &defaults(), &ids).unwrap();
        let b = s.deltas[0].resolve(0, &defaults(), &ids).unwrap();
        let c = s.deltas[1].resolve(1, &defaults(), &ids).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c, "lines without a seed draw different records");
        let r = s.deltas[2].resolve(2, &defaults(), &ids).unwrap();
        assert!(matches!(&r.ops[0], DeltaOp::ReplaceChunk(ChunkId(10), recs) if recs.len() == 1));
    }

    #[test]
    fn positions_resolve_against_window() {
        let s = DeltaScript::parse("delete @1; delete @-1; delete 7").unwrap();
        let ids = [ChunkId(3), ChunkId(5), ChunkId(6)];
        let d = s.deltas[0].resolve(0, &defaults(), &ids).unwrap();
        assert_eq!(
            d.ops,
            vec![
                DeltaOp::DeleteChunk(ChunkId(5)),
                DeltaOp::DeleteChunk(ChunkId(6)),
                DeltaOp::DeleteChunk(ChunkId(7))
            ]
        );
        let e = DeltaScript::parse("delete @3").unwrap().deltas[0]
            .resolve(0, &defaults(), &ids)
            .unwrap_err();
        assert_eq!(
            e,
            ResolveError::NoSuchPosition {
                line: 1,
                pos: 3,
                len: 3
            }
        );
    }
}
