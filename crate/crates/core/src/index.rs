//! Exact brute-force cosine index over unit-norm passage representations.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "PRFDENSE"
//! version   u32
//! dim       u32
//! count     u64
//! checksum  u32      CRC-32 of everything after the header
//! reserved  u32
//! ids       count x (u32 byte length, UTF-8 bytes)
//! vectors   count x dim x f32
//! ```

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Vector;
use crate::corpus::{PassageId, QueryId, RunEntry};
use crate::encode::{DenseRepresentation, RepresentationSource, UNIT_NORM_TOLERANCE};

const MAGIC: &[u8; 8] = b"PRFDENSE";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
/// Above this size scoring runs on the rayon pool.
const PARALLEL_THRESHOLD: usize = 8192;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an empty index")]
    Empty,
    #[error("duplicate passage id {0}")]
    DuplicateId(PassageId),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector for {0} is not unit-norm")]
    NotUnit(PassageId),
    #[error("zero vector has no cosine")]
    ZeroVector,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {found} (this build reads {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("index checksum mismatch: header {expected:#010x}, payload {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("index file truncated")]
    Truncated,
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error("encoding passage {passage_id}: {source}")]
    Encode {
        passage_id: PassageId,
        #[source]
        source: crate::encode::EncodeError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub passage_id: PassageId,
    pub score: f64,
    pub rank: u32,
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<PassageId>,
    /// Row-major `ids.len() x dim`.
    data: Vec<f32>,
    id_lookup: HashMap<PassageId, usize>,
}

/// Ordering where "greater" means "ranks higher": larger score, then smaller id.
struct Candidate<'a> {
    score: f64,
    id: &'a PassageId,
    pos: usize,
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate<'_> {}
impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(self.id))
    }
}

impl DenseIndex {
    pub fn build(
        representations: Vec<(PassageId, DenseRepresentation)>,
    ) -> Result<Self, IndexError> {
        let dim = representations.first().ok_or(IndexError::Empty)?.1.dim();
        let mut ids = Vec::with_capacity(representations.len());
        let mut data = Vec::with_capacity(representations.len() * dim);
        let mut id_lookup = HashMap::with_capacity(representations.len());
        for (id, rep) in representations {
            if rep.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    got: rep.dim(),
                });
            }
            if id_lookup.insert(id.clone(), ids.len()).is_some() {
                return Err(IndexError::DuplicateId(id));
            }
            data.extend_from_slice(rep.as_slice());
            ids.push(id);
        }
        Ok(Self {
            dim,
            ids,
            data,
            id_lookup,
        })
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

    pub fn ids(&self) -> &[PassageId] {
        &self.ids
    }

    pub fn vector(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn position(&self, id: &PassageId) -> Option<usize> {
        self.id_lookup.get(id).copied()
    }

    /// Cosine of the query against every entry, in insertion order.
    pub fn scores(&self, query: &DenseRepresentation) -> Result<Vec<f64>, IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let q = query.as_slice();
        // Both sides are unit-norm, so the dot product is the cosine.
        let score = |row: &[f32]| dot(q, row).clamp(-1.0, 1.0);
        Ok(if self.len() >= PARALLEL_THRESHOLD {
            self.data.par_chunks(self.dim).map(score).collect()
        } else {
            self.data.chunks(self.dim).map(score).collect()
        })
    }

    /// Exact top-`k` by cosine; ties go to the smaller passage id.
    pub fn search(
        &self,
        query: &DenseRepresentation,
        k: usize,
    ) -> Result<Vec<SearchResult>, IndexError> {
        let scores = self.scores(query)?;
        let k = k.min(self.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap: BinaryHeap<Reverse<Candidate<'_>>> = BinaryHeap::with_capacity(k + 1);
        for (pos, &score) in scores.iter().enumerate() {
            let cand = Candidate {
                score,
                id: &self.ids[pos],
                pos,
            };
            if heap.len() < k {
                heap.push(Reverse(cand));
            } else if let Some(worst) = heap.peek() {
                if cand > worst.0 {
                    heap.pop();
                    heap.push(Reverse(cand));
                }
            }
        }
        // into_sorted_vec on Reverse yields best first.
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(i, Reverse(c))| SearchResult {
                passage_id: self.ids[c.pos].clone(),
                score: c.score,
                rank: i as u32 + 1,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.data.len() * 4 + self.ids.len() * 16);
        for id in &self.ids {
            let b = id.as_str().as_bytes();
            payload.extend_from_slice(&(b.len() as u32).to_le_bytes());
            payload.extend_from_slice(b);
        }
        for &x in &self.data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < HEADER_LEN {
            return if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                Err(IndexError::BadMagic)
            } else {
                Err(IndexError::Truncated)
            };
        }
        if &bytes[..8] != MAGIC {
            return Err(IndexError::BadMagic);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(IndexError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let dim = u32_at(12) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let expected = u32_at(24);
        let payload = &bytes[HEADER_LEN..];
        let actual = crc32fast::hash(payload);
        if dim == 0 || count == 0 {
            return Err(IndexError::Corrupt(format!("dim {dim}, count {count}")));
        }

        let mut cursor = 0usize;
        let mut ids = Vec::with_capacity(count.min(payload.len() / 4));
        for _ in 0..count {
            let len_bytes = payload
                .get(cursor..cursor + 4)
                .ok_or(IndexError::Truncated)?;
            let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
            cursor += 4;
            let raw = payload
                .get(cursor..cursor + len)
                .ok_or(IndexError::Truncated)?;
            cursor += len;
            ids.push(raw);
        }
        let vec_bytes = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| IndexError::Corrupt("size overflow".into()))?;
        let rest = &payload[cursor..];
        if rest.len() < vec_bytes {
            return Err(IndexError::Truncated);
        }
        if actual != expected {
            return Err(IndexError::Checksum { expected, actual });
        }
        if rest.len() > vec_bytes {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        let data: Vec<f32> = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut reps = Vec::with_capacity(count);
        for (i, raw) in ids.into_iter().enumerate() {
            let s = std::str::from_utf8(raw).map_err(|e| IndexError::Corrupt(e.to_string()))?;
            let id = PassageId::new(s).map_err(|e| IndexError::Corrupt(e.to_string()))?;
            let v = Vector::new(data[i * dim..(i + 1) * dim].to_vec())
                .map_err(|e| IndexError::Corrupt(e.to_string()))?;
            if (v.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(IndexError::NotUnit(id));
            }
            let rep = DenseRepresentation::from_unit(v, RepresentationSource::Passage)
                .map_err(|e| IndexError::Corrupt(e.to_string()))?;
            reps.push((id, rep));
        }
        Self::build(reps)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|source| IndexError::Io {
            path: tmp.clone(),
            source,
        })?;
        fs::rename(&tmp, path).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn build_index(
    representations: Vec<(PassageId, DenseRepresentation)>,
) -> Result<DenseIndex, IndexError> {
    DenseIndex::build(representations)
}

/// Encodes every passage with the passage base prompt and builds the index.
///
/// Encoding runs on up to `parallelism` threads; the index keeps corpus order.
pub fn index_corpus<E: crate::backend::EmbedBackend + ?Sized>(
    passages: &[crate::corpus::Passage],
    embedder: &E,
    parallelism: usize,
) -> Result<DenseIndex, IndexError> {
    let encode_one = |p: &crate::corpus::Passage| {
        crate::encode::encode_passage(&p.text, embedder)
            .map(|rep| (p.id.clone(), rep))
            .map_err(|source| IndexError::Encode {
                passage_id: p.id.clone(),
                source,
            })
    };
    let reps: Result<Vec<_>, IndexError> = if parallelism <= 1 {
        passages.iter().map(encode_one).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| IndexError::Corrupt(format!("thread pool: {e}")))?
            .install(|| passages.par_iter().map(encode_one).collect())
    };
    DenseIndex::build(reps?)
}

/// Converts search results for one query into run entries.
pub fn to_run_entries(query_id: &QueryId, results: &[SearchResult], tag: &str) -> Vec<RunEntry> {
    results
        .iter()
        .map(|r| RunEntry {
            query_id: query_id.clone(),
            passage_id: r.passage_id.clone(),
            rank: r.rank,
            score: r.score,
            tag: tag.to_string(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rep(v: &[f32]) -> DenseRepresentation {
        DenseRepresentation::normalize(
            Vector::new(v.to_vec()).unwrap(),
            RepresentationSource::Passage,
        )
        .unwrap()
    }

    fn pid(s: &str) -> PassageId {
        PassageId::new(s).unwrap()
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DenseIndex {
        let reps = (0..n)
            .map(|i| {
                let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (pid(&format!("p{i:04}")), rep(&v))
            })
            .collect();
        DenseIndex::build(reps).unwrap()
    }

    /// Full sort of every score, independent of the heap selection.
    fn oracle(index: &DenseIndex, q: &DenseRepresentation, k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = (0..index.len())
            .map(|i| {
                let s: f64 = q
                    .as_slice()
                    .iter()
                    .zip(index.vector(i))
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                (index.ids()[i].to_string(), s.clamp(-1.0, 1.0))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(
            (cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs()
                < 1e-12
        );
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 1.0]),
            Err(IndexError::ZeroVector)
        ));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 1.0]),
            Err(IndexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn build_errors() {
        assert!(matches!(DenseIndex::build(vec![]), Err(IndexError::Empty)));
        let r = rep(&[1.0, 0.0]);
        assert!(matches!(
            DenseIndex::build(vec![(pid("a"), r.clone()), (pid("a"), r.clone())]),
            Err(IndexError::DuplicateId(_))
        ));
        assert!(matches!(
            DenseIndex::build(vec![
                (pid("a"), rep(&[1.0; 8])),
                (pid("b"), rep(&[1.0; 16]))
            ]),
            Err(IndexError::DimensionMismatch {
                expected: 8,
                got: 16
            })
        ));
        let idx =
            DenseIndex::build(vec![(pid("a"), r.clone()), (pid("b"), rep(&[0.0, 1.0]))]).unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.ids()[1].as_str(), "b");
    }

    #[test]
    fn k_beyond_size_and_ties() {
        let idx = DenseIndex::build(vec![
            (pid("z"), rep(&[1.0, 0.0])),
            (pid("b"), rep(&[1.0, 0.0])),
            (pid("m"), rep(&[0.0, 1.0])),
        ])
        .unwrap();
        let res = idx.search(&rep(&[1.0, 0.2]), 10).unwrap();
        let ids: Vec<_> = res.iter().map(|r| r.passage_id.as_str()).collect();
        assert_eq!(ids, ["b", "z", "m"]);
        assert_eq!(res.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(matches!(
            idx.search(&rep(&[1.0, 0.0, 0.0]), 1),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(idx.search(&rep(&[1.0, 0.0]), 0).unwrap().is_empty());
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let idx = random_index(&mut rng, 50, 16);
        let q = rep(&(0..16)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect::<Vec<f32>>());
        let got: Vec<_> = idx
            .search(&q, 10)
            .unwrap()
            .into_iter()
            .map(|r| (r.passage_id.to_string(), r.score))
            .collect();
        assert_eq!(got, oracle(&idx, &q, 10));
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = random_index(&mut rng, 3, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        idx.save(&path).unwrap();
        let back = DenseIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        for i in 0..3 {
            let a: Vec<u32> = idx.vector(i).iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.vector(i).iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }

        let mut bytes = idx.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            DenseIndex::from_bytes(&bytes),
            Err(IndexError::Checksum { .. })
        ));

        let mut bytes = idx.to_bytes();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            DenseIndex::from_bytes(&bytes),
            Err(IndexError::VersionMismatch { found: 2, .. })
        ));

        let bytes = idx.to_bytes();
        assert!(matches!(
            DenseIndex::from_bytes(&bytes[..bytes.len() - 3]),
            Err(IndexError::Truncated)
        ));
        assert!(matches!(
            DenseIndex::from_bytes(&bytes[..20]),
            Err(IndexError::Truncated)
        ));
        assert!(matches!(
            DenseIndex::from_bytes(b"NOTANINDEXFILE-------------------"),
            Err(IndexError::BadMagic)
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn search_is_exact_bounded_and_prefix_monotone(seed in any::<u64>(), n in 1usize..300, dim in 1usize..24, k in 1usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let idx = random_index(&mut rng, n, dim);
                let q = rep(&(0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).map(|x| if x == 0.0 { 0.5 } else { x }).collect::<Vec<_>>());
                let a = idx.search(&q, k).unwrap();
                let got: Vec<_> = a.iter().map(|r| (r.passage_id.to_string(), r.score)).collect();
                prop_assert_eq!(&got, &oracle(&idx, &q, k));
                prop_assert!(a.iter().all(|r| (-1.0..=1.0).contains(&r.score)));
                let b = idx.search(&q, k + 1).unwrap();
                prop_assert_eq!(&b[..a.len()], &a[..]);
            }
        }
    }
}
