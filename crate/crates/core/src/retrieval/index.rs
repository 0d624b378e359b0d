//! Flat embedded index with exact cosine search.
//!
//! On-disk layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "TRIX"
//! version      u32      FORMAT_VERSION
//! dimension    u32
//! count        u64
//! embedder_id  u32 length + UTF-8 bytes
//! mode         u32 length + UTF-8 bytes (unit mode tag)
//! unit ids     count × (u32 length + UTF-8 bytes)
//! vectors      count × dimension × f32
//! ```
//!
//! Unit texts live in a JSONL sidecar, `<index path>.units.jsonl`.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_records, write_atomic, write_records, CorpusError, CorpusUnit, UnitMode};
use crate::exec::Exec;
use crate::llm::{embed, EmbedError, Embedder, Role};

pub const MAGIC: &[u8; 4] = b"TRIX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot build an index from zero units")]
    Empty,
    #[error("duplicate unit id {0:?}")]
    DuplicateUnit(String),
    #[error("units mix modes {0} and {1}")]
    MixedModes(UnitMode, UnitMode),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("embedding dimension changed mid-build: expected {expected}, got {got}")]
    DimensionDrift { expected: usize, got: usize },
    #[error("index was built with embedder {index:?} but the query embedder is {query:?}")]
    EmbedderMismatch { index: String, query: String },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub unit_id: String,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub query_id: String,
    pub k: usize,
    /// Score descending, ties by ascending unit id.
    pub hits: Vec<Hit>,
}

/// The fixed fields at the start of an index file.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexHeader {
    pub dimension: usize,
    pub count: usize,
    pub embedder_id: String,
    pub mode: UnitMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    dimension: usize,
    embedder_id: String,
    mode: UnitMode,
    units: Vec<CorpusUnit>,
    /// Row-major, `units.len() × dimension`.
    vectors: Vec<f32>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".units.jsonl");
    PathBuf::from(s)
}

/// Orders by score descending, then unit id ascending.
fn rank(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

impl Index {
    /// Embeds every unit as a passage, in batches of `batch_size`.
    pub fn build(
        units: Vec<CorpusUnit>,
        embedder: &dyn Embedder,
        batch_size: usize,
        exec: Exec,
    ) -> Result<Self, IndexError> {
        let first = units.first().ok_or(IndexError::Empty)?;
        let mode = first.mode;
        let mut seen = HashSet::new();
        for u in &units {
            if u.mode != mode {
                return Err(IndexError::MixedModes(mode, u.mode));
            }
            if !seen.insert(u.unit_id.as_str()) {
                return Err(IndexError::DuplicateUnit(u.unit_id.clone()));
            }
        }
        let batches = exec.map_chunks(&units, batch_size, |batch| {
            let texts: Vec<&str> = batch.iter().map(|u| u.text.as_str()).collect();
            embed(embedder, &texts, Role::Passage)
        });
        let mut dimension = None;
        let mut vectors = Vec::new();
        for batch in batches {
            let batch = batch?;
            let d = batch[0].len();
            match dimension {
                None => dimension = Some(d),
                Some(e) if e != d => return Err(IndexError::DimensionDrift { expected: e, got: d }),
                _ => {}
            }
            for v in batch {
                vectors.extend(v);
            }
        }
        Ok(Self {
            dimension: dimension.expect("non-empty"),
            embedder_id: embedder.id(),
            mode,
            units,
            vectors,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn mode(&self) -> UnitMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[CorpusUnit] {
        &self.units
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn unit(&self, unit_id: &str) -> Option<&CorpusUnit> {
        self.units.iter().find(|u| u.unit_id == unit_id)
    }

    /// Exact top-k for an already embedded, unit-norm query vector.
    pub fn search_vector(&self, query: &[f32], k: usize) -> Vec<Hit> {
        let mut scored: Vec<(f64, &str, usize)> = (0..self.len())
            .map(|i| {
                let s = self
                    .vector(i)
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum::<f64>();
                (s, self.units[i].unit_id.as_str(), i)
            })
            .collect();
        let k = k.min(scored.len());
        let cmp = |a: &(f64, &str, usize), b: &(f64, &str, usize)| rank(&(a.0, a.1), &(b.0, b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored
            .into_iter()
            .map(|(score, id, i)| Hit {
                unit_id: id.to_string(),
                score,
                text: self.units[i].text.clone(),
            })
            .collect()
    }

    pub fn check_embedder(&self, embedder: &dyn Embedder) -> Result<(), IndexError> {
        let id = embedder.id();
        if id != self.embedder_id {
            return Err(IndexError::EmbedderMismatch {
                index: self.embedder_id.clone(),
                query: id,
            });
        }
        Ok(())
    }

    pub fn search(
        &self,
        query_id: &str,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<RetrievedContext, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        self.check_embedder(embedder)?;
        let q = embed(embedder, &[query], Role::Query)?.remove(0);
        if q.len() != self.dimension {
            return Err(IndexError::DimensionDrift {
                expected: self.dimension,
                got: q.len(),
            });
        }
        Ok(RetrievedContext {
            query_id: query_id.to_string(),
            k,
            hits: self.search_vector(&q, k),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(32 + self.vectors.len() * 4);
        let put_str = |b: &mut Vec<u8>, s: &str| {
            b.extend((s.len() as u32).to_le_bytes());
            b.extend(s.as_bytes());
        };
        b.extend(MAGIC);
        b.extend(FORMAT_VERSION.to_le_bytes());
        b.extend((self.dimension as u32).to_le_bytes());
        b.extend((self.units.len() as u64).to_le_bytes());
        put_str(&mut b, &self.embedder_id);
        put_str(&mut b, self.mode.tag());
        for u in &self.units {
            put_str(&mut b, &u.unit_id);
        }
        for v in &self.vectors {
            b.extend(v.to_le_bytes());
        }
        b
    }

    /// Writes the binary index and its unit sidecar.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        write_atomic(path, &self.to_bytes())?;
        write_records(&sidecar(path), &self.units)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path).map_err(|e| IndexError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let units: Vec<CorpusUnit> = load_records(&sidecar(path))?;
        Self::from_parts(&bytes, units).map_err(|message| IndexError::Format {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Reads only the header, without the vectors or the sidecar.
    pub fn read_header(path: &Path) -> Result<IndexHeader, IndexError> {
        use std::io::Read;
        let err = |message: String| IndexError::Format {
            path: path.to_path_buf(),
            message,
        };
        let f = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
        // Header strings are short; 64 KiB is far more than enough.
        let mut buf = Vec::new();
        f.take(1 << 16).read_to_end(&mut buf).map_err(|e| err(e.to_string()))?;
        Reader { b: &buf, pos: 0 }.header().map_err(err)
    }

    fn from_parts(bytes: &[u8], units: Vec<CorpusUnit>) -> Result<Self, String> {
        let mut r = Reader { b: bytes, pos: 0 };
        let IndexHeader {
            dimension,
            count,
            embedder_id,
            mode,
        } = r.header()?;
        if count != units.len() {
            return Err(format!("header says {count} units, sidecar has {}", units.len()));
        }
        for u in &units {
            let id = r.string()?;
            if id != u.unit_id {
                return Err(format!("unit id {id:?} does not match sidecar entry {:?}", u.unit_id));
            }
        }
        let raw = r.take(count * dimension * 4)?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let vectors = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            dimension,
            embedder_id,
            mode,
            units,
            vectors,
        })
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or("truncated index file")?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }

    fn header(&mut self) -> Result<IndexHeader, String> {
        if self.take(4)? != MAGIC {
            return Err("not an index file (bad magic)".into());
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        Ok(IndexHeader {
            dimension: self.u32()? as usize,
            count: self.u64()? as usize,
            embedder_id: self.string()?,
            mode: self.string()?.parse()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;
    use crate::llm::HashEmbedder;

    fn unit(id: &str, text: &str) -> CorpusUnit {
        CorpusUnit {
            unit_id: id.into(),
            source_id: id.into(),
            mode: UnitMode::Full,
            seq: 0,
            domain: Domain::Math,
            text: text.into(),
        }
    }

    fn units() -> Vec<CorpusUnit> {
        vec![
            unit("a", "binomial probability of tails"),
            unit("b", "envelope of projectile trajectories"),
            unit("c", "graph cycles and character mappings"),
            unit("d", "modular arithmetic with residues"),
            unit("e", "integer search over small cases"),
        ]
    }

    #[test]
    fn build_gives_unit_vectors() {
        let idx = Index::build(units(), &HashEmbedder::default(), 2, Exec::default()).unwrap();
        assert_eq!(idx.len(), 5);
        for i in 0..5 {
            let n: f64 = idx.vector(i).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_query_ranks_first() {
        let e = HashEmbedder::default();
        let idx = Index::build(units(), &e, 8, Exec::Sequential).unwrap();
        let r = idx.search("q", "modular arithmetic with residues", 3, &e).unwrap();
        assert_eq!(r.hits[0].unit_id, "d");
        assert!((r.hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(idx.search("q", "x", 10, &e).unwrap().hits.len(), 5);
    }

    #[test]
    fn duplicate_and_empty_rejected() {
        let e = HashEmbedder::default();
        let mut u = units();
        u.push(unit("a", "again"));
        assert!(matches!(Index::build(u, &e, 8, Exec::Sequential), Err(IndexError::DuplicateUnit(id)) if id == "a"));
        assert!(matches!(
            Index::build(vec![], &e, 8, Exec::Sequential),
            Err(IndexError::Empty)
        ));
    }

    #[test]
    fn mismatched_embedder_rejected() {
        let idx = Index::build(units(), &HashEmbedder::new(64), 8, Exec::Sequential).unwrap();
        assert!(matches!(
            idx.search("q", "x", 3, &HashEmbedder::new(128)),
            Err(IndexError::EmbedderMismatch { .. })
        ));
        assert!(matches!(
            idx.search("q", "x", 0, &HashEmbedder::new(64)),
            Err(IndexError::ZeroK)
        ));
    }

    #[test]
    fn ties_break_by_unit_id() {
        // Texts shorter than three characters all embed to e₀.
        let e = HashEmbedder::new(16);
        let u = vec![unit("z", "x"), unit("m", "y"), unit("b", "")];
        let idx = Index::build(u, &e, 8, Exec::Sequential).unwrap();
        let ids: Vec<String> = idx
            .search("q", "w", 3, &e)
            .unwrap()
            .hits
            .into_iter()
            .map(|h| h.unit_id)
            .collect();
        assert_eq!(ids, ["b", "m", "z"]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("full.idx");
        let e = HashEmbedder::default();
        let idx = Index::build(units(), &e, 8, Exec::Sequential).unwrap();
        idx.save(&p).unwrap();
        let back = Index::load(&p).unwrap();
        assert_eq!(back, idx);
        let h = Index::read_header(&p).unwrap();
        assert_eq!((h.dimension, h.count, h.mode), (idx.dimension(), 5, UnitMode::Full));
        assert_eq!(h.embedder_id, e.id());
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(Index::load(&p), Err(IndexError::Format { .. })));
    }
}
