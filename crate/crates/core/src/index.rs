//! Flat exact-search index over unit-norm embeddings.
//!
//! Every query is compared against every stored vector with Euclidean
//! distance computed in `f64`. Distances are turned into relevance scores by
//! `1 - d / sqrt(2)`, which maps identical vectors to 1 and orthogonal unit
//! vectors to 0.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::embedding::EmbeddingVector;

pub const INDEX_MAGIC: &[u8; 8] = b"RTLRAGIX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot build an index from zero entries")]
    Empty,
    #[error("entry `{id}` has dimension {got}, index dimension is {expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("query has dimension {got}, index dimension is {expected}")]
    QueryDimMismatch { expected: usize, got: usize },
    #[error("duplicate id `{id}` at entries {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("distance must be a non-negative number, got {0}")]
    NegativeDistance(f64),
    #[error("not an index file or unsupported format version ({0})")]
    Version(String),
    #[error("index file is truncated: {0}")]
    Truncated(String),
    #[error("index file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("index file is corrupt: {0}")]
    Corrupt(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Converts an L2 distance between unit vectors into a relevance score.
pub fn relevance_from_distance(distance: f64) -> Result<f64, IndexError> {
    if distance.is_nan() || distance < 0.0 {
        return Err(IndexError::NegativeDistance(distance));
    }
    Ok(relevance_unchecked(distance))
}

/// Inverse of [`relevance_from_distance`]: the distance at which a score equals `relevance`.
pub fn distance_for_relevance(relevance: f64) -> f64 {
    (1.0 - relevance) * std::f64::consts::SQRT_2
}

fn relevance_unchecked(distance: f64) -> f64 {
    1.0 - distance / std::f64::consts::SQRT_2
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub doc_id: String,
    /// Position of the entry in the index.
    pub position: usize,
    pub distance: f64,
    pub relevance: f64,
}

/// Immutable flat index. Entry order is insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl VectorIndex {
    pub fn build(pairs: Vec<(String, EmbeddingVector)>) -> Result<Self, IndexError> {
        let dim = pairs.first().ok_or(IndexError::Empty)?.1.dim();
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(pairs.len());
        for (i, (id, v)) in pairs.iter().enumerate() {
            if v.dim() != dim {
                return Err(IndexError::DimMismatch {
                    id: id.clone(),
                    expected: dim,
                    got: v.dim(),
                });
            }
            if let Some(first) = seen.insert(id.as_str(), i) {
                return Err(IndexError::DuplicateId {
                    id: id.clone(),
                    first,
                    second: i,
                });
            }
        }
        let (ids, vectors) = pairs.into_iter().unzip();
        Ok(Self { dim, ids, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, position: usize) -> &EmbeddingVector {
        &self.vectors[position]
    }

    /// Exact k-nearest search. Hits come back by ascending distance; equal
    /// distances keep index order.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::QueryDimMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let q = query.values();
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (l2_distance(q, v.values()), i))
            .collect();
        let by_distance_then_position =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_distance_then_position);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_distance_then_position);
        Ok(scored
            .into_iter()
            .map(|(distance, position)| SearchHit {
                doc_id: self.ids[position].clone(),
                position,
                distance,
                relevance: relevance_unchecked(distance),
            })
            .collect())
    }

    /// Serializes to the on-disk layout:
    ///
    /// ```text
    /// magic[8] | version u32 | dim u32 | count u64
    /// count x (id_len u32 | id utf-8)
    /// count x dim x f32
    /// crc32 u32 over everything above
    /// ```
    ///
    /// All integers and floats are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|id| 4 + id.len()).sum();
        let mut out = Vec::with_capacity(24 + id_bytes + self.len() * self.dim * 4 + 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.vectors {
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < INDEX_MAGIC.len() || &bytes[..INDEX_MAGIC.len()] != INDEX_MAGIC {
            return Err(IndexError::Version("bad magic bytes".into()));
        }
        if bytes.len() < 28 {
            return Err(IndexError::Truncated(format!("{} bytes is shorter than the fixed header", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(IndexError::Version(format!(
                "file version {version}, supported version {INDEX_VERSION}"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(IndexError::Checksum { stored, computed });
        }

        let mut reader = Reader { buf: body, pos: 12 };
        let dim = reader.u32()? as usize;
        let count = reader.u64()? as usize;
        if dim == 0 {
            return Err(IndexError::Corrupt("dimension is zero".into()));
        }
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = reader.u32()? as usize;
            let raw = reader.take(len)?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| IndexError::Corrupt("id is not valid UTF-8".into()))?;
            ids.push(id.to_string());
        }
        let mut pairs = Vec::with_capacity(ids.len());
        for id in ids {
            let raw = reader.take(dim * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::Corrupt(format!("entry `{id}` has non-finite values")));
            }
            pairs.push((id, values));
        }
        if reader.pos != body.len() {
            return Err(IndexError::Corrupt(format!(
                "{} trailing bytes after vectors",
                body.len() - reader.pos
            )));
        }
        let pairs = pairs
            .into_iter()
            .map(|(id, values)| {
                // stored vectors are unit-norm already, so their bits are kept as-is
                (id, EmbeddingVector::from_unit_values(values).expect("finite"))
            })
            .collect();
        match Self::build(pairs) {
            Ok(index) => Ok(index),
            Err(IndexError::Empty) => Err(IndexError::Corrupt("index has no entries".into())),
            Err(e) => Err(IndexError::Corrupt(e.to_string())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        fs::write(path, self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| IndexError::Truncated(format!("needed {n} bytes at offset {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{embed_deterministic, normalize};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&raw).unwrap()
    }

    fn random_index(seed: u64, n: usize, dim: usize) -> VectorIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorIndex::build((0..n).map(|i| (format!("doc{i}"), random_unit(&mut rng, dim))).collect()).unwrap()
    }

    #[test]
    fn self_match_is_first_with_full_relevance() {
        let index = random_index(7, 20, 384);
        let q = index.vector(13).clone();
        let hits = index.search(&q, 10).unwrap();
        assert_eq!(hits[0].doc_id, "doc13");
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits[0].relevance, 1.0);
    }

    #[test]
    fn brute_force_agreement_on_50_vectors() {
        let index = random_index(11, 50, 384);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let q = random_unit(&mut rng, 384);
        let hits = index.search(&q, 10).unwrap();
        let mut all: Vec<(f64, usize)> = (0..50)
            .map(|i| (l2_distance(q.values(), index.vector(i).values()), i))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let expected: Vec<String> = all[..10].iter().map(|(_, i)| format!("doc{i}")).collect();
        let got: Vec<String> = hits.iter().map(|h| h.doc_id.clone()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn k_larger_than_index_returns_everything() {
        let index = random_index(3, 3, 8);
        let q = index.vector(0).clone();
        assert_eq!(index.search(&q, 10).unwrap().len(), 3);
        assert!(matches!(index.search(&q, 0), Err(IndexError::ZeroK)));
    }

    #[test]
    fn ties_keep_insertion_order() {
        let v = embed_deterministic("counter", 16);
        let w = embed_deterministic("shift register", 16);
        let index = VectorIndex::build(vec![
            ("b".into(), w.clone()),
            ("x".into(), v.clone()),
            ("a".into(), v.clone()),
            ("y".into(), v.clone()),
        ])
        .unwrap();
        let ids: Vec<_> = index.search(&v, 3).unwrap().into_iter().map(|h| h.doc_id).collect();
        assert_eq!(ids, ["x", "a", "y"]);
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(matches!(VectorIndex::build(vec![]), Err(IndexError::Empty)));
        let a = embed_deterministic("a", 384);
        let b = embed_deterministic("b", 512);
        match VectorIndex::build(vec![("a".into(), a.clone()), ("b".into(), b)]) {
            Err(IndexError::DimMismatch { id, .. }) => assert_eq!(id, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            VectorIndex::build(vec![("a".into(), a.clone()), ("a".into(), a.clone())]),
            Err(IndexError::DuplicateId { first: 0, second: 1, .. })
        ));
        let index = VectorIndex::build(vec![("a".into(), a)]).unwrap();
        assert!(matches!(
            index.search(&embed_deterministic("q", 16), 1),
            Err(IndexError::QueryDimMismatch { expected: 384, got: 16 })
        ));
    }

    #[test]
    fn relevance_examples() {
        assert_eq!(relevance_from_distance(0.0).unwrap(), 1.0);
        assert!(relevance_from_distance(std::f64::consts::SQRT_2).unwrap().abs() < 1e-15);
        let antipodal = relevance_from_distance(2.0).unwrap();
        assert!((antipodal - (1.0 - std::f64::consts::SQRT_2)).abs() < 1e-12);
        assert!((antipodal + 0.41421).abs() < 1e-5);
        assert!(relevance_from_distance(-0.1).is_err());
        assert!(relevance_from_distance(f64::NAN).is_err());
        assert!((distance_for_relevance(0.55) - 0.45 * std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let index = random_index(5, 100, 384);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        index.save(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        assert_eq!(loaded, index);
        for i in 0..index.len() {
            let a: Vec<u32> = index.vector(i).values().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = loaded.vector(i).values().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let mut bytes = random_index(1, 3, 8).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(VectorIndex::from_bytes(&bytes), Err(IndexError::Version(_))));
        let mut bytes = random_index(1, 3, 8).to_bytes();
        bytes[8] = 9;
        assert!(matches!(VectorIndex::from_bytes(&bytes), Err(IndexError::Version(_))));
    }

    #[test]
    fn truncated_file_is_detected() {
        let bytes = random_index(1, 10, 8).to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 40, 30, 20] {
            let err = VectorIndex::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, IndexError::Truncated(_) | IndexError::Checksum { .. }),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = random_index(1, 10, 8).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(VectorIndex::from_bytes(&bytes), Err(IndexError::Checksum { .. })));
    }

    proptest! {
        #[test]
        fn relevance_is_strictly_decreasing(a in 0.0f64..2.0, b in 0.0f64..2.0) {
            prop_assume!(a < b);
            prop_assert!(relevance_from_distance(a).unwrap() > relevance_from_distance(b).unwrap());
        }

        #[test]
        fn unit_vector_relevance_is_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_unit(&mut rng, 32);
            let v = random_unit(&mut rng, 32);
            let r = relevance_from_distance(l2_distance(u.values(), v.values())).unwrap();
            prop_assert!((1.0 - std::f64::consts::SQRT_2 - 1e-6..=1.0 + 1e-12).contains(&r));
        }
    }
}
