//! File-backed vector store.
//!
//! A store is a directory holding three files:
//!
//! * `meta.json`: `{"magic": "GSTV1", "dim": d, "count": n, "dtype": "f32le"}`
//! * `ids.jsonl`: one JSON string per line; line order is vector order
//! * `vectors.bin`: `n·d` little-endian `f32`, row-major
//!
//! Lookups seek directly to `position·d·4`, so reading `m` ids touches `O(m)`
//! payload bytes. Writers hold an exclusive `.lock` file for their lifetime.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vectorlab::{EmbeddingVector, VectorError};

pub const STORE_MAGIC: &str = "GSTV1";
pub const STORE_DTYPE: &str = "f32le";
pub const META_FILE: &str = "meta.json";
pub const IDS_FILE: &str = "ids.jsonl";
pub const VECTORS_FILE: &str = "vectors.bin";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt store header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("truncated vector payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("missing embedding for ids {}", .0.join(", "))]
    MissingEmbedding(Vec<String>),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("store dimension is {expected}, got a vector of dimension {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{ids} ids but {vectors} vectors")]
    CountMismatch { ids: usize, vectors: usize },
    #[error("store {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("invalid vector in store: {0}")]
    Vector(#[from] VectorError),
}

type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreMeta {
    magic: String,
    dim: usize,
    count: usize,
    dtype: String,
}

/// Exclusive advisory lock on a store directory, released on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(StoreError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// An opened, validated store. Reads are safe from many threads.
#[derive(Debug, Clone)]
pub struct VectorStore {
    path: PathBuf,
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl VectorStore {
    pub fn exists(path: &Path) -> bool {
        path.join(META_FILE).is_file()
    }

    /// Opens a store, validating header, id list and payload size.
    pub fn open(path: &Path) -> Result<Self> {
        let meta_path = path.join(META_FILE);
        let raw = fs::read(&meta_path).map_err(io_err(&meta_path))?;
        let corrupt = |reason: String| StoreError::CorruptHeader {
            path: meta_path.clone(),
            reason,
        };
        let meta: StoreMeta = serde_json::from_slice(&raw).map_err(|e| corrupt(e.to_string()))?;
        if meta.magic != STORE_MAGIC {
            return Err(corrupt(format!("bad magic {:?}", meta.magic)));
        }
        if meta.dtype != STORE_DTYPE {
            return Err(corrupt(format!("unsupported dtype {:?}", meta.dtype)));
        }
        if meta.dim == 0 {
            return Err(corrupt("dim must be >= 1".into()));
        }

        let ids = read_ids(&path.join(IDS_FILE))?;
        if ids.len() != meta.count {
            return Err(corrupt(format!(
                "header count {} but {} ids",
                meta.count,
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }

        let vec_path = path.join(VECTORS_FILE);
        let found = fs::metadata(&vec_path).map_err(io_err(&vec_path))?.len();
        let expected = (meta.count * meta.dim * 4) as u64;
        if found != expected {
            return Err(StoreError::Truncated {
                path: vec_path,
                expected,
                found,
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
            dim: meta.dim,
            ids,
            index,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Vectors for `ids` in the given order, or every vector in stored order.
    pub fn read(&self, ids: Option<&[String]>) -> Result<Vec<EmbeddingVector>> {
        let positions: Vec<usize> = match ids {
            None => (0..self.count()).collect(),
            Some(ids) => {
                let missing: Vec<String> = ids
                    .iter()
                    .filter(|id| !self.contains(id))
                    .cloned()
                    .collect();
                if !missing.is_empty() {
                    return Err(StoreError::MissingEmbedding(missing));
                }
                ids.iter().map(|id| self.index[id.as_str()]).collect()
            }
        };
        let vec_path = self.path.join(VECTORS_FILE);
        let file = File::open(&vec_path).map_err(io_err(&vec_path))?;
        read_rows(BufReader::new(file), self.dim, &positions).map_err(|e| match e {
            StoreError::Io { source, .. } => io_err(&vec_path)(source),
            other => other,
        })
    }

    pub fn get(&self, id: &str) -> Result<EmbeddingVector> {
        Ok(self.read(Some(&[id.to_string()]))?.remove(0))
    }

    /// Streams the store in stored order, `chunk` vectors at a time.
    pub fn chunks(&self, chunk: usize) -> Result<StoreChunks<'_>> {
        let vec_path = self.path.join(VECTORS_FILE);
        let file = File::open(&vec_path).map_err(io_err(&vec_path))?;
        Ok(StoreChunks {
            store: self,
            reader: BufReader::new(file),
            next: 0,
            chunk: chunk.max(1),
        })
    }

    /// Appends new vectors under the store lock.
    pub fn append(&mut self, ids: &[String], vectors: &[EmbeddingVector]) -> Result<()> {
        let _lock = StoreLock::acquire(&self.path)?;
        check_batch(self.dim, ids, vectors)?;
        for id in ids {
            if self.contains(id) {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in ids {
            if !seen.insert(id) {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }
        let ids_path = self.path.join(IDS_FILE);
        let vec_path = self.path.join(VECTORS_FILE);
        let mut idw = BufWriter::new(
            OpenOptions::new()
                .append(true)
                .open(&ids_path)
                .map_err(io_err(&ids_path))?,
        );
        let mut vw = BufWriter::new(
            OpenOptions::new()
                .append(true)
                .open(&vec_path)
                .map_err(io_err(&vec_path))?,
        );
        for (id, v) in ids.iter().zip(vectors) {
            write_id(&mut idw, id).map_err(io_err(&ids_path))?;
            write_vector(&mut vw, v).map_err(io_err(&vec_path))?;
        }
        idw.flush().map_err(io_err(&ids_path))?;
        vw.flush().map_err(io_err(&vec_path))?;
        for id in ids {
            self.index.insert(id.clone(), self.ids.len());
            self.ids.push(id.clone());
        }
        write_meta(&self.path, self.dim, self.ids.len())
    }
}

/// Iterator over `(ids, vectors)` chunks of a store.
pub struct StoreChunks<'a> {
    store: &'a VectorStore,
    reader: BufReader<File>,
    next: usize,
    chunk: usize,
}

impl Iterator for StoreChunks<'_> {
    type Item = Result<(Vec<String>, Vec<EmbeddingVector>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.store.count() {
            return None;
        }
        let end = (self.next + self.chunk).min(self.store.count());
        let dim = self.store.dim;
        let mut buf = vec![0u8; dim * 4];
        let mut out = Vec::with_capacity(end - self.next);
        for _ in self.next..end {
            if let Err(e) = self.reader.read_exact(&mut buf) {
                return Some(Err(io_err(&self.store.path)(e)));
            }
            match decode_row(&buf) {
                Ok(v) => out.push(v),
                Err(e) => return Some(Err(e)),
            }
        }
        let ids = self.store.ids[self.next..end].to_vec();
        self.next = end;
        Some(Ok((ids, out)))
    }
}

/// Sequential writer for a new store; the header is written by `finish`.
pub struct StoreWriter {
    path: PathBuf,
    dim: usize,
    seen: HashMap<String, ()>,
    ids: BufWriter<File>,
    vectors: BufWriter<File>,
    _lock: StoreLock,
}

impl StoreWriter {
    /// Creates (or truncates) a store at `path`.
    pub fn create(path: &Path, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::Vector(VectorError::Empty));
        }
        fs::create_dir_all(path).map_err(io_err(path))?;
        let lock = StoreLock::acquire(path)?;
        let meta_path = path.join(META_FILE);
        if meta_path.exists() {
            fs::remove_file(&meta_path).map_err(io_err(&meta_path))?;
        }
        let ids_path = path.join(IDS_FILE);
        let vec_path = path.join(VECTORS_FILE);
        Ok(Self {
            path: path.to_path_buf(),
            dim,
            seen: HashMap::new(),
            ids: BufWriter::new(File::create(&ids_path).map_err(io_err(&ids_path))?),
            vectors: BufWriter::new(File::create(&vec_path).map_err(io_err(&vec_path))?),
            _lock: lock,
        })
    }

    pub fn push(&mut self, id: &str, v: &EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                found: v.dim(),
            });
        }
        if self.seen.insert(id.to_string(), ()).is_some() {
            return Err(StoreError::DuplicateId(id.to_string()));
        }
        write_id(&mut self.ids, id).map_err(io_err(&self.path))?;
        write_vector(&mut self.vectors, v).map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<VectorStore> {
        self.ids.flush().map_err(io_err(&self.path))?;
        self.vectors.flush().map_err(io_err(&self.path))?;
        write_meta(&self.path, self.dim, self.seen.len())?;
        let path = self.path.clone();
        drop(self);
        VectorStore::open(&path)
    }
}

/// Writes a complete store, replacing any previous contents.
pub fn store_write(path: &Path, ids: &[String], vectors: &[EmbeddingVector]) -> Result<VectorStore> {
    let dim = vectors.first().map_or(0, EmbeddingVector::dim);
    check_batch(dim, ids, vectors)?;
    let mut w = StoreWriter::create(path, dim)?;
    for (id, v) in ids.iter().zip(vectors) {
        w.push(id, v)?;
    }
    w.finish()
}

/// Reads `ids` (or everything) from the store at `path`.
pub fn store_read(path: &Path, ids: Option<&[String]>) -> Result<Vec<EmbeddingVector>> {
    VectorStore::open(path)?.read(ids)
}

/// Reads the rows at `positions` from a `vectors.bin` payload by seeking.
pub fn read_rows<R: Read + Seek>(
    mut reader: R,
    dim: usize,
    positions: &[usize],
) -> Result<Vec<EmbeddingVector>> {
    let row_bytes = dim * 4;
    let mut buf = vec![0u8; row_bytes];
    let mut out = Vec::with_capacity(positions.len());
    let mut cursor: Option<u64> = None;
    for &p in positions {
        let offset = (p * row_bytes) as u64;
        if cursor != Some(offset) {
            reader
                .seek(SeekFrom::Start(offset))
                .map_err(io_err(Path::new(VECTORS_FILE)))?;
        }
        reader
            .read_exact(&mut buf)
            .map_err(io_err(Path::new(VECTORS_FILE)))?;
        cursor = Some(offset + row_bytes as u64);
        out.push(decode_row(&buf)?);
    }
    Ok(out)
}

fn decode_row(buf: &[u8]) -> Result<EmbeddingVector> {
    let values = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(EmbeddingVector::new(values)?)
}

fn check_batch(dim: usize, ids: &[String], vectors: &[EmbeddingVector]) -> Result<()> {
    if ids.len() != vectors.len() {
        return Err(StoreError::CountMismatch {
            ids: ids.len(),
            vectors: vectors.len(),
        });
    }
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(StoreError::DimMismatch {
            expected: dim,
            found: v.dim(),
        });
    }
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut ids = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let id: String = serde_json::from_str(&line).map_err(|e| StoreError::CorruptHeader {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        ids.push(id);
    }
    Ok(ids)
}

fn write_id(w: &mut impl Write, id: &str) -> io::Result<()> {
    let encoded = serde_json::to_string(id).expect("string serializes");
    writeln!(w, "{encoded}")
}

fn write_vector(w: &mut impl Write, v: &EmbeddingVector) -> io::Result<()> {
    for x in v.as_slice() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_meta(dir: &Path, dim: usize, count: usize) -> Result<()> {
    let meta = StoreMeta {
        magic: STORE_MAGIC.into(),
        dim,
        count,
        dtype: STORE_DTYPE.into(),
    };
    let tmp = dir.join("meta.json.tmp");
    let body = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    fs::write(&tmp, body).map_err(io_err(&tmp))?;
    let dst = dir.join(META_FILE);
    fs::rename(&tmp, &dst).map_err(io_err(&dst))
}
