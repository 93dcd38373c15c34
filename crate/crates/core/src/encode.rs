//! Canonical byte encoding.
//!
//! Every encoded value starts with a one-byte type tag. Scalar fields are
//! written as a 4-byte big-endian length followed by the raw bytes; lists
//! carry a 4-byte big-endian element count before their elements. Because
//! every field is length-prefixed and every value is tagged, two different
//! values of the same type never share an encoding, which is what lets a
//! fingerprint of the encoding stand in for the value itself.

use thiserror::Error;

use crate::model::{Fingerprint, KVPair, Record, Value};

pub const TAG_RECORD: u8 = 0x01;
pub const TAG_KV: u8 = 0x02;
pub const TAG_KV_LIST: u8 = 0x03;
pub const TAG_VALUES: u8 = 0x04;
pub const TAG_NODE_INPUT: u8 = 0x05;
pub const TAG_REDUCE_INPUT: u8 = 0x06;
pub const TAG_SPLIT: u8 = 0x07;
pub const TAG_CHUNK: u8 = 0x08;
pub const TAG_FN_IDENTITY: u8 = 0x09;
pub const TAG_LEAF_IDENT: u8 = 0x0a;
pub const TAG_NODE_IDENT: u8 = 0x0b;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("expected type tag {expected:#04x}, found {found:#04x}")]
    BadTag { expected: u8, found: u8 },
    #[error("{0} trailing bytes after value")]
    Trailing(usize),
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// Values with a canonical, injective byte encoding.
pub trait CanonicalEncode {
    fn encode_into(&self, out: &mut Vec<u8>);

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&self.canonical_bytes())
    }
}

fn put_len(out: &mut Vec<u8>, len: usize) {
    let len = u32::try_from(len).expect("field longer than u32::MAX bytes");
    out.extend_from_slice(&len.to_be_bytes());
}

pub(crate) fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    put_len(out, bytes.len());
    out.extend_from_slice(bytes);
}

impl CanonicalEncode for Record {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(TAG_RECORD);
        put_field(out, self.as_bytes());
    }
}

impl CanonicalEncode for KVPair {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(TAG_KV);
        put_field(out, self.key());
        put_field(out, self.value());
    }
}

impl CanonicalEncode for [KVPair] {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(TAG_KV_LIST);
        put_len(out, self.len());
        for pair in self {
            put_field(out, pair.key());
            put_field(out, pair.value());
        }
    }
}

impl CanonicalEncode for [Value] {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(TAG_VALUES);
        put_len(out, self.len());
        for v in self {
            put_field(out, v);
        }
    }
}

pub fn encode_kv_list(pairs: &[KVPair]) -> Vec<u8> {
    pairs.canonical_bytes()
}

/// Encodes a combined value list (the payload carried by a tree node).
pub fn encode_values(values: &[Value]) -> Vec<u8> {
    values.canonical_bytes()
}

/// Input of a Combine task: the key plus the ordered payload fingerprints of
/// the children being merged.
pub fn encode_node_input(key: &[u8], children: &[Fingerprint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + key.len() + children.len() * 36);
    out.push(TAG_NODE_INPUT);
    put_field(&mut out, key);
    put_len(&mut out, children.len());
    for fp in children {
        put_field(&mut out, fp.as_bytes());
    }
    out
}

pub fn encode_reduce_input(key: &[u8], root: &Fingerprint) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + key.len() + 36);
    out.push(TAG_REDUCE_INPUT);
    put_field(&mut out, key);
    put_field(&mut out, root.as_bytes());
    out
}

pub fn encode_chunk_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(TAG_CHUNK);
    put_len(&mut out, records.len());
    for r in records {
        put_field(&mut out, r.as_bytes());
    }
    out
}

/// Input of a Map task: the ordered content fingerprints of the split's chunks.
pub fn encode_split(chunk_fps: &[Fingerprint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + chunk_fps.len() * 36);
    out.push(TAG_SPLIT);
    put_len(&mut out, chunk_fps.len());
    for fp in chunk_fps {
        put_field(&mut out, fp.as_bytes());
    }
    out
}

pub fn encode_fn_identity(name: &str, version: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(TAG_FN_IDENTITY);
    put_field(&mut out, name.as_bytes());
    put_field(&mut out, version.as_bytes());
    out
}

/// Position-independent identity of a variable-width leaf: the key plus the
/// split that produced the partial.
pub fn encode_leaf_ident(key: &[u8], split_id: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(TAG_LEAF_IDENT);
    put_field(&mut out, key);
    put_field(&mut out, &split_id.to_be_bytes());
    out
}

pub fn encode_node_ident(level: u32, children: &[Fingerprint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + children.len() * 36);
    out.push(TAG_NODE_IDENT);
    put_field(&mut out, &level.to_be_bytes());
    put_len(&mut out, children.len());
    for fp in children {
        put_field(&mut out, fp.as_bytes());
    }
    out
}

/// Cursor over an encoded byte string.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DecodeError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn field(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub(crate) fn fingerprint(&mut self) -> Result<Fingerprint, DecodeError> {
        let raw = self.field()?;
        let arr: [u8; 32] = raw
            .try_into()
            .map_err(|_| DecodeError::Invalid(format!("fingerprint of {} bytes", raw.len())))?;
        Ok(Fingerprint::from_bytes(arr))
    }

    pub(crate) fn expect_tag(&mut self, expected: u8) -> Result<(), DecodeError> {
        let found = self.u8()?;
        if found != expected {
            return Err(DecodeError::BadTag { expected, found });
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}

pub fn decode_kv_list(bytes: &[u8]) -> Result<Vec<KVPair>, DecodeError> {
    let mut r = Reader::new(bytes);
    r.expect_tag(TAG_KV_LIST)?;
    let n = r.u32()? as usize;
    let mut pairs = Vec::with_capacity(n.min(r.remaining() / 8));
    for _ in 0..n {
        let key = r.field()?.to_vec();
        let value = r.field()?.to_vec();
        pairs.push(KVPair::new(key, value).map_err(|e| DecodeError::Invalid(e.to_string()))?);
    }
    r.finish()?;
    Ok(pairs)
}

pub fn decode_values(bytes: &[u8]) -> Result<Vec<Value>, DecodeError> {
    let mut r = Reader::new(bytes);
    r.expect_tag(TAG_VALUES)?;
    let n = r.u32()? as usize;
    let mut values = Vec::with_capacity(n.min(r.remaining() / 4));
    for _ in 0..n {
        values.push(r.field()?.to_vec());
    }
    r.finish()?;
    Ok(values)
}

pub fn decode_chunk_records(bytes: &[u8]) -> Result<Vec<Record>, DecodeError> {
    let mut r = Reader::new(bytes);
    r.expect_tag(TAG_CHUNK)?;
    let n = r.u32()? as usize;
    let mut records = Vec::with_capacity(n.min(r.remaining() / 4));
    for _ in 0..n {
        let raw = r.field()?.to_vec();
        records.push(Record::new(raw).map_err(|e| DecodeError::Invalid(e.to_string()))?);
    }
    r.finish()?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kv(k: &str, v: &str) -> KVPair {
        KVPair::new(k.as_bytes().to_vec(), v.as_bytes().to_vec()).unwrap()
    }

    #[test]
    fn kv_pair_layout() {
        let bytes = kv("a", "1").canonical_bytes();
        assert_eq!(bytes, [TAG_KV, 0, 0, 0, 1, b'a', 0, 0, 0, 1, b'1']);
    }

    #[test]
    fn empty_kv_list_layout() {
        let empty: Vec<KVPair> = Vec::new();
        assert_eq!(encode_kv_list(&empty), [TAG_KV_LIST, 0, 0, 0, 0]);
    }

    #[test]
    fn empty_value_is_distinct_from_missing_value() {
        let a: Vec<Value> = vec![];
        let b: Vec<Value> = vec![vec![]];
        assert_ne!(encode_values(&a), encode_values(&b));
    }

    #[test]
    fn delimiter_ambiguity_is_impossible() {
        // "ab"+"c" versus "a"+"bc"
        assert_ne!(
            kv("ab", "c").canonical_bytes(),
            kv("a", "bc").canonical_bytes()
        );
        let l1 = vec![kv("a", "1"), kv("b", "2")];
        let l2 = vec![kv("a", "1b"), kv("x", "2")];
        assert_ne!(encode_kv_list(&l1), encode_kv_list(&l2));
    }

    #[test]
    fn decoders_reject_truncation_and_trailing_bytes() {
        let bytes = encode_kv_list(&[kv("k", "v")]);
        assert!(matches!(
            decode_kv_list(&bytes[..bytes.len() - 1]),
            Err(DecodeError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode_kv_list(&extra), Err(DecodeError::Trailing(1)));
        assert!(matches!(
            decode_values(&bytes),
            Err(DecodeError::BadTag {
                expected: TAG_VALUES,
                ..
            })
        ));
    }

    #[test]
    fn encoding_injective_over_random_corpus() {
        use rand::{Rng, SeedableRng};
        use std::collections::HashMap;
        // Tiny alphabet so that equal and near-equal pairs are frequent.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut seen: HashMap<Vec<u8>, KVPair> = HashMap::new();
        for _ in 0..100_000 {
            let klen = rng.random_range(1..4);
            let vlen = rng.random_range(0..4);
            let key: Vec<u8> = (0..klen).map(|_| rng.random_range(b'a'..b'c')).collect();
            let value: Vec<u8> = (0..vlen).map(|_| rng.random_range(b'a'..b'c')).collect();
            let pair = KVPair::new(key, value).unwrap();
            if let Some(prev) = seen.insert(pair.canonical_bytes(), pair.clone()) {
                assert_eq!(prev, pair);
            }
        }
    }

    fn arb_pair() -> impl Strategy<Value = KVPair> {
        (
            proptest::collection::vec(any::<u8>(), 1..6),
            proptest::collection::vec(any::<u8>(), 0..6),
        )
            .prop_map(|(k, v)| KVPair::new(k, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        // Structural equality is the oracle: equal encodings imply equal values.
        #[test]
        fn kv_encoding_is_injective(a in arb_pair(), b in arb_pair()) {
            prop_assert_eq!(a.canonical_bytes() == b.canonical_bytes(), a == b);
        }

        #[test]
        fn kv_list_encoding_is_injective(
            a in proptest::collection::vec(arb_pair(), 0..4),
            b in proptest::collection::vec(arb_pair(), 0..4),
        ) {
            prop_assert_eq!(encode_kv_list(&a) == encode_kv_list(&b), a == b);
        }

        #[test]
        fn kv_list_decodes_to_original(a in proptest::collection::vec(arb_pair(), 0..8)) {
            prop_assert_eq!(decode_kv_list(&encode_kv_list(&a)).unwrap(), a);
        }

        #[test]
        fn values_decode_to_original(v in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..5), 0..8)) {
            prop_assert_eq!(decode_values(&encode_values(&v)).unwrap(), v);
        }
    }
}
