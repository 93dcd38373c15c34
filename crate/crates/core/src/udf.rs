//! User-defined Map, Combine and Reduce functions.
//!
//! A function is identified by a registered name and version rather than by
//! its code: bump the version whenever behavior changes so that stale memo
//! entries stop matching.
//!
//! Contracts the engine relies on but cannot check:
//! - every function is pure and deterministic;
//! - Combine is associative over ordered value lists, i.e. any grouping of
//!   adjacent values gives the same final result as a flat left fold;
//! - `reduce(k, combine(k, vs)) == reduce(k, vs)`;
//! - in fixed-width mode, Combine is also commutative and treats the empty
//!   list as identity (`combine(k, []) == []`).
//!
//! Monotonicity (`|combine(k, vs)| <= |vs|`) is optional; [`check_monotonic`]
//! samples it and the engine counts violations at run time.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::encode;
use crate::model::{Fingerprint, KVPair, Record, Value};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{function}: {message}")]
pub struct UdfError {
    pub function: String,
    pub message: String,
}

impl UdfError {
    pub fn new(function: impl Into<String>, message: impl Into<String>) -> Self {
        UdfError {
            function: function.into(),
            message: message.into(),
        }
    }
}

/// Name and version under which a function is registered.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FnIdentity {
    pub name: String,
    pub version: String,
}

impl FnIdentity {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        FnIdentity {
            name: name.into(),
            version: version.into(),
        }
    }

    pub fn fn_id(&self) -> Fingerprint {
        Fingerprint::of(&encode::encode_fn_identity(&self.name, &self.version))
    }
}

impl fmt::Display for FnIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

type MapImpl = dyn Fn(&Record) -> Result<Vec<KVPair>, UdfError> + Send + Sync;
type CombineImpl = dyn Fn(&[u8], &[Value]) -> Result<Vec<Value>, UdfError> + Send + Sync;
type ReduceImpl = dyn Fn(&[u8], &[Value]) -> Result<Vec<KVPair>, UdfError> + Send + Sync;

#[derive(Clone)]
pub struct MapFn {
    identity: FnIdentity,
    fn_id: Fingerprint,
    f: Arc<MapImpl>,
}

impl MapFn {
    pub fn new<F>(identity: FnIdentity, f: F) -> Self
    where
        F: Fn(&Record) -> Result<Vec<KVPair>, UdfError> + Send + Sync + 'static,
    {
        MapFn {
            fn_id: identity.fn_id(),
            identity,
            f: Arc::new(f),
        }
    }

    pub fn identity(&self) -> &FnIdentity {
        &self.identity
    }

    pub fn fn_id(&self) -> Fingerprint {
        self.fn_id
    }

    pub fn apply(&self, record: &Record) -> Result<Vec<KVPair>, UdfError> {
        (self.f)(record)
    }
}

impl fmt::Debug for MapFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MapFn({})", self.identity)
    }
}

#[derive(Clone)]
pub struct CombineFn {
    identity: FnIdentity,
    fn_id: Fingerprint,
    declared_monotonic: bool,
    f: Arc<CombineImpl>,
}

impl CombineFn {
    pub fn new<F>(identity: FnIdentity, declared_monotonic: bool, f: F) -> Self
    where
        F: Fn(&[u8], &[Value]) -> Result<Vec<Value>, UdfError> + Send + Sync + 'static,
    {
        CombineFn {
            fn_id: identity.fn_id(),
            identity,
            declared_monotonic,
            f: Arc::new(f),
        }
    }

    pub fn identity(&self) -> &FnIdentity {
        &self.identity
    }

    pub fn fn_id(&self) -> Fingerprint {
        self.fn_id
    }

    pub fn declared_monotonic(&self) -> bool {
        self.declared_monotonic
    }

    pub fn apply(&self, key: &[u8], values: &[Value]) -> Result<Vec<Value>, UdfError> {
        (self.f)(key, values)
    }
}

impl fmt::Debug for CombineFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CombineFn({})", self.identity)
    }
}

#[derive(Clone)]
pub struct ReduceFn {
    identity: FnIdentity,
    fn_id: Fingerprint,
    f: Arc<ReduceImpl>,
}

impl ReduceFn {
    pub fn new<F>(identity: FnIdentity, f: F) -> Self
    where
        F: Fn(&[u8], &[Value]) -> Result<Vec<KVPair>, UdfError> + Send + Sync + 'static,
    {
        ReduceFn {
            fn_id: identity.fn_id(),
            identity,
            f: Arc::new(f),
        }
    }

    pub fn identity(&self) -> &FnIdentity {
        &self.identity
    }

    pub fn fn_id(&self) -> Fingerprint {
        self.fn_id
    }

    pub fn apply(&self, key: &[u8], values: &[Value]) -> Result<Vec<KVPair>, UdfError> {
        (self.f)(key, values)
    }
}

impl fmt::Debug for ReduceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ReduceFn({})", self.identity)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MonotonicityReport {
    pub samples_checked: usize,
    /// `(input size, output size)` for every sample that grew.
    pub violations: Vec<(usize, usize)>,
}

impl MonotonicityReport {
    pub fn is_monotonic(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MonotonicityError {
    #[error("no samples given")]
    NoSamples,
    #[error("combine failed on sample {index} (key {key:?}, {values} values): {source}")]
    Udf {
        index: usize,
        key: Vec<u8>,
        values: usize,
        source: UdfError,
    },
}

/// Applies `combine` to every sample and records each one whose output holds
/// more values than its input.
pub fn check_monotonic(
    combine: &CombineFn,
    samples: &[(Vec<u8>, Vec<Value>)],
) -> Result<MonotonicityReport, MonotonicityError> {
    if samples.is_empty() {
        return Err(MonotonicityError::NoSamples);
    }
    let mut report = MonotonicityReport::default();
    for (index, (key, values)) in samples.iter().enumerate() {
        let out = combine
            .apply(key, values)
            .map_err(|source| MonotonicityError::Udf {
                index,
                key: key.clone(),
                values: values.len(),
                source,
            })?;
        report.samples_checked += 1;
        if out.len() > values.len() {
            report.violations.push((values.len(), out.len()));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum() -> CombineFn {
        CombineFn::new(FnIdentity::new("sum", "1"), true, |_, vs| {
            let total: i64 = vs
                .iter()
                .map(|v| std::str::from_utf8(v).unwrap().parse::<i64>().unwrap())
                .sum();
            Ok(if vs.is_empty() {
                vec![]
            } else {
                vec![total.to_string().into_bytes()]
            })
        })
    }

    fn values(xs: &[&str]) -> Vec<Value> {
        xs.iter().map(|x| x.as_bytes().to_vec()).collect()
    }

    #[test]
    fn sum_combiner_is_monotonic() {
        let report = check_monotonic(&sum(), &[(b"k".to_vec(), values(&["1", "2", "3"]))]).unwrap();
        assert_eq!(report.samples_checked, 1);
        assert!(report.is_monotonic());
        assert_eq!(
            sum().apply(b"k", &values(&["1", "2", "3"])).unwrap(),
            values(&["6"])
        );
    }

    #[test]
    fn duplicating_combiner_is_flagged() {
        let dup = CombineFn::new(FnIdentity::new("dup", "1"), false, |_, vs| {
            Ok(vs.iter().flat_map(|v| [v.clone(), v.clone()]).collect())
        });
        let report = check_monotonic(&dup, &[(b"k".to_vec(), values(&["1", "2", "3"]))]).unwrap();
        assert_eq!(report.violations, vec![(3, 6)]);
    }

    #[test]
    fn empty_samples_rejected() {
        assert_eq!(
            check_monotonic(&sum(), &[]),
            Err(MonotonicityError::NoSamples)
        );
    }

    #[test]
    fn udf_failure_carries_offending_sample() {
        let failing = CombineFn::new(FnIdentity::new("fail", "1"), true, |_, vs| {
            if vs.len() > 1 {
                Err(UdfError::new("fail", "too many"))
            } else {
                Ok(vs.to_vec())
            }
        });
        let samples = vec![
            (b"a".to_vec(), values(&["1"])),
            (b"b".to_vec(), values(&["1", "2"])),
        ];
        match check_monotonic(&failing, &samples) {
            Err(MonotonicityError::Udf {
                index, key, values, ..
            }) => {
                assert_eq!((index, key.as_slice(), values), (1, &b"b"[..], 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fn_id_tracks_version() {
        assert_ne!(
            FnIdentity::new("wc", "1").fn_id(),
            FnIdentity::new("wc", "2").fn_id()
        );
        assert_eq!(
            FnIdentity::new("wc", "1").fn_id(),
            FnIdentity::new("wc", "1").fn_id()
        );
    }
}
