//! Built-in workloads: word count, windowed sum and histogram.
//!
//! All three emit decimal integer values and combine/reduce by summation, so
//! their combiners are associative, commutative, monotonic and have the empty
//! list as identity. That makes them valid in every tree mode.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::model::{KVPair, Record, Value};
use crate::udf::{CombineFn, FnIdentity, MapFn, ReduceFn, UdfError};

pub const DEFAULT_HISTOGRAM_WIDTH: i64 = 10;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown workload {0:?} (expected wordcount, windowed_sum or histogram)")]
pub struct UnknownWorkload(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BuiltinWorkload {
    WordCount,
    WindowedSum,
    Histogram,
}

impl BuiltinWorkload {
    pub const ALL: [BuiltinWorkload; 3] = [
        BuiltinWorkload::WordCount,
        BuiltinWorkload::WindowedSum,
        BuiltinWorkload::Histogram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinWorkload::WordCount => "wordcount",
            BuiltinWorkload::WindowedSum => "windowed_sum",
            BuiltinWorkload::Histogram => "histogram",
        }
    }

    pub fn workload(self) -> Workload {
        match self {
            BuiltinWorkload::WordCount => wordcount(),
            BuiltinWorkload::WindowedSum => windowed_sum(),
            BuiltinWorkload::Histogram => histogram(DEFAULT_HISTOGRAM_WIDTH),
        }
    }

    /// Generates `count` records suited to this workload.
    ///
    /// Word count records hold `words` distinct tokens drawn from an alphabet of
    /// `alphabet` words (`w0`, `w1`, ...), so each record emits `words` pairs
    /// over distinct keys. Windowed sum records are integers in `0..1000`.
    /// Histogram records are integers spread over `alphabet` buckets of the
    /// default width.
    pub fn generate<R: Rng>(
        self,
        rng: &mut R,
        count: usize,
        alphabet: usize,
        words: usize,
    ) -> Vec<Record> {
        let alphabet = alphabet.max(1);
        (0..count)
            .map(|_| {
                let text = match self {
                    BuiltinWorkload::WordCount => {
                        let k = words.clamp(1, alphabet);
                        index::sample(rng, alphabet, k)
                            .iter()
                            .map(|i| format!("w{i}"))
                            .collect::<Vec<_>>()
                            .join(" ")
                    }
                    BuiltinWorkload::WindowedSum => rng.random_range(0..1000i64).to_string(),
                    BuiltinWorkload::Histogram => {
                        let span = alphabet as i64 * DEFAULT_HISTOGRAM_WIDTH;
                        rng.random_range(0..span).to_string()
                    }
                };
                Record::new(text.into_bytes()).expect("generated records are non-empty")
            })
            .collect()
    }
}

impl FromStr for BuiltinWorkload {
    type Err = UnknownWorkload;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wordcount" => Ok(BuiltinWorkload::WordCount),
            "windowed_sum" => Ok(BuiltinWorkload::WindowedSum),
            "histogram" => Ok(BuiltinWorkload::Histogram),
            other => Err(UnknownWorkload(other.to_string())),
        }
    }
}

impl fmt::Display for BuiltinWorkload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A Map/Combine/Reduce triple.
#[derive(Clone, Debug)]
pub struct Workload {
    pub map: MapFn,
    pub combine: CombineFn,
    pub reduce: ReduceFn,
}

pub fn builtin_workload(name: &str) -> Result<Workload, UnknownWorkload> {
    Ok(name.parse::<BuiltinWorkload>()?.workload())
}

fn parse_int(function: &str, bytes: &[u8]) -> Result<i64, UdfError> {
    std::str::from_utf8(bytes)
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .ok_or_else(|| {
            UdfError::new(
                function,
                format!("not an integer: {:?}", String::from_utf8_lossy(bytes)),
            )
        })
}

fn checked_sum(function: &str, values: &[Value]) -> Result<i64, UdfError> {
    values.iter().try_fold(0i64, |acc, v| {
        acc.checked_add(parse_int(function, v)?)
            .ok_or_else(|| UdfError::new(function, "integer overflow"))
    })
}

fn sum_combiner(name: &str) -> CombineFn {
    let fname = format!("{name}/combine");
    CombineFn::new(
        FnIdentity::new(fname.clone(), "1"),
        true,
        move |_key, values| {
            if values.is_empty() {
                return Ok(Vec::new());
            }
            Ok(vec![checked_sum(&fname, values)?.to_string().into_bytes()])
        },
    )
}

fn sum_reducer(name: &str) -> ReduceFn {
    let fname = format!("{name}/reduce");
    ReduceFn::new(FnIdentity::new(fname.clone(), "1"), move |key, values| {
        let total = checked_sum(&fname, values)?;
        Ok(vec![KVPair::new(
            key.to_vec(),
            total.to_string().into_bytes(),
        )
        .map_err(|e| UdfError::new(fname.as_str(), e.to_string()))?])
    })
}

/// One `(word, 1)` pair per whitespace-separated token.
pub fn wordcount() -> Workload {
    let map = MapFn::new(FnIdentity::new("wordcount/map", "1"), |record| {
        Ok(record
            .as_bytes()
            .split(|b| b.is_ascii_whitespace())
            .filter(|w| !w.is_empty())
            .map(|w| KVPair::new(w.to_vec(), b"1".to_vec()).expect("non-empty token"))
            .collect())
    });
    Workload {
        map,
        combine: sum_combiner("wordcount"),
        reduce: sum_reducer("wordcount"),
    }
}

/// One `("sum", value)` pair per integer record.
pub fn windowed_sum() -> Workload {
    let map = MapFn::new(FnIdentity::new("windowed_sum/map", "1"), |record| {
        let v = parse_int("windowed_sum/map", record.as_bytes())?;
        Ok(vec![KVPair::new(
            b"sum".to_vec(),
            v.to_string().into_bytes(),
        )
        .unwrap()])
    });
    Workload {
        map,
        combine: sum_combiner("windowed_sum"),
        reduce: sum_reducer("windowed_sum"),
    }
}

/// One `(bucket label, 1)` pair per integer record; buckets are `width` wide
/// and labelled `"lo-hi"` with inclusive bounds.
pub fn histogram(width: i64) -> Workload {
    assert!(width > 0, "histogram width must be positive");
    let map = MapFn::new(
        FnIdentity::new("histogram/map", format!("1/width={width}")),
        move |record| {
            let v = parse_int("histogram/map", record.as_bytes())?;
            let lo = v.div_euclid(width) * width;
            let label = format!("{}-{}", lo, lo + width - 1);
            Ok(vec![KVPair::new(label.into_bytes(), b"1".to_vec()).unwrap()])
        },
    );
    Workload {
        map,
        combine: sum_combiner("histogram"),
        reduce: sum_reducer("histogram"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::udf::check_monotonic;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn rec(s: &str) -> Record {
        Record::try_from(s).unwrap()
    }

    fn pairs(xs: &[(&str, &str)]) -> Vec<KVPair> {
        xs.iter()
            .map(|(k, v)| KVPair::new(k.as_bytes().to_vec(), v.as_bytes().to_vec()).unwrap())
            .collect()
    }

    // Straight-line evaluation: map everything, sum per key.
    fn from_scratch(w: &Workload, records: &[Record]) -> Vec<KVPair> {
        let mut groups: BTreeMap<Vec<u8>, Vec<Value>> = BTreeMap::new();
        for r in records {
            for p in w.map.apply(r).unwrap() {
                let (k, v) = p.into_parts();
                groups.entry(k).or_default().push(v);
            }
        }
        groups
            .into_iter()
            .flat_map(|(k, vs)| w.reduce.apply(&k, &vs).unwrap())
            .collect()
    }

    #[test]
    fn wordcount_map_emits_one_pair_per_token() {
        let w = wordcount();
        assert_eq!(
            w.map.apply(&rec("a b b")).unwrap(),
            pairs(&[("a", "1"), ("b", "1"), ("b", "1")])
        );
    }

    #[test]
    fn windowed_sum_totals_records() {
        let w = windowed_sum();
        let out = from_scratch(&w, &[rec("3"), rec("4"), rec("5")]);
        assert_eq!(out, pairs(&[("sum", "12")]));
    }

    #[test]
    fn histogram_buckets_by_width() {
        let w = histogram(5);
        let out = from_scratch(&w, &[rec("1"), rec("1"), rec("9")]);
        assert_eq!(out, pairs(&[("0-4", "2"), ("5-9", "1")]));
        let neg = w.map.apply(&rec("-3")).unwrap();
        assert_eq!(neg, pairs(&[("-5--1", "1")]));
    }

    #[test]
    fn non_numeric_record_is_a_udf_error() {
        assert!(windowed_sum().map.apply(&rec("abc")).is_err());
        assert!(histogram(5).map.apply(&rec("1.5")).is_err());
    }

    #[test]
    fn unknown_workload_rejected() {
        assert_eq!(
            builtin_workload("pagerank").unwrap_err(),
            UnknownWorkload("pagerank".into())
        );
        assert!(builtin_workload("histogram").is_ok());
    }

    #[test]
    fn combine_of_empty_is_identity() {
        for w in BuiltinWorkload::ALL {
            let wl = w.workload();
            assert!(wl.combine.apply(b"k", &[]).unwrap().is_empty());
            let x = vec![b"7".to_vec()];
            assert_eq!(wl.combine.apply(b"k", &x).unwrap(), x);
        }
    }

    #[test]
    fn wordcount_combiner_monotonic_on_random_samples() {
        let w = wordcount();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<(Vec<u8>, Vec<Value>)> = (0..100)
            .map(|i| {
                let n = rng.random_range(0..20);
                let vs = (0..n)
                    .map(|_| rng.random_range(0..50).to_string().into_bytes())
                    .collect();
                (format!("w{i}").into_bytes(), vs)
            })
            .collect();
        let report = check_monotonic(&w.combine, &samples).unwrap();
        assert_eq!(report.samples_checked, 100);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn generated_wordcount_records_have_distinct_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let recs = BuiltinWorkload::WordCount.generate(&mut rng, 50, 8, 4);
        for r in recs {
            let words: Vec<_> = r.as_bytes().split(|b| *b == b' ').collect();
            let distinct: std::collections::HashSet<_> = words.iter().collect();
            assert_eq!(words.len(), 4);
            assert_eq!(distinct.len(), 4);
        }
    }

    // Random binary grouping over the sequence, evaluated bottom-up.
    fn grouped(w: &Workload, vs: &[Value], splits: &mut impl Iterator<Item = usize>) -> Vec<Value> {
        if vs.len() <= 1 {
            return w.combine.apply(b"k", vs).unwrap();
        }
        let cut = 1 + splits.next().unwrap_or(0) % (vs.len() - 1);
        let mut merged = grouped(w, &vs[..cut], splits);
        merged.extend(grouped(w, &vs[cut..], splits));
        w.combine.apply(b"k", &merged).unwrap()
    }

    proptest! {
        #[test]
        fn builtin_combiners_are_associative(
            xs in proptest::collection::vec(-1000i64..1000, 0..40),
            cuts in proptest::collection::vec(any::<usize>(), 0..40),
        ) {
            let vs: Vec<Value> = xs.iter().map(|x| x.to_string().into_bytes()).collect();
            for w in BuiltinWorkload::ALL {
                let wl = w.workload();
                // left fold, one value at a time
                let mut acc: Vec<Value> = Vec::new();
                for v in &vs {
                    acc.push(v.clone());
                    acc = wl.combine.apply(b"k", &acc).unwrap();
                }
                let tree = grouped(&wl, &vs, &mut cuts.iter().copied());
                prop_assert_eq!(&tree, &acc);
                prop_assert!(acc.len() <= vs.len().max(1));
            }
        }
    }
}
