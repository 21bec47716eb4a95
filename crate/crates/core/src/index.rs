//! Exact nearest-neighbour index over screenshot embeddings.
//!
//! Three query modes share one ranking rule (ascending Euclidean distance,
//! ties by ascending id):
//! - full: one sketch embedding against each item's full-screen embedding;
//! - segments: only the grid cells the user drew, compared cell by cell;
//! - flow: a sequence of sketch embeddings against every run of consecutive
//!   screens in each interaction trace, with embeddings concatenated in order.
//!
//! Distances are accumulated in `f64`, one running sum over the concatenated
//! difference vector, so every mode is a plain L2 norm of a concatenation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::TraceRef;
use crate::encoder::{Embedding, EMBEDDING_DIM};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index is empty")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error("index has no part embeddings")]
    NoParts,
    #[error("parts grid {got:?} does not match index grid {want:?}")]
    GridMismatch { want: Option<(usize, usize)>, got: Option<(usize, usize)> },
    #[error("cell ({row}, {col}) outside the {rows}x{cols} grid")]
    CellOutOfRange { row: usize, col: usize, rows: usize, cols: usize },
    #[error("cell ({0}, {1}) given twice")]
    DuplicateCell(usize, usize),
    #[error("segments query needs at least one active cell")]
    NoActiveCells,
    #[error("flow query needs at least 2 screens, got {0}")]
    FlowTooShort(usize),
    #[error("no trace has {0} consecutive screens")]
    NoWindow(usize),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IndexError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub distance: f64,
}

/// Ranked (id, distance) list; distances nondecreasing, ids unique.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedResults(pub Vec<Ranked>);

impl RankedResults {
    /// Sort candidates by (distance, id) and keep the first `k`.
    pub fn from_candidates(mut c: Vec<Ranked>, k: usize) -> Self {
        c.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
        c.truncate(k);
        Self(c)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.0.iter().map(|r| r.id.as_str()).collect()
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.0.iter().position(|r| r.id == id).map(|p| p + 1)
    }
}

/// Per-cell embeddings of one screen, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PartsGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Embedding>,
}

impl PartsGrid {
    pub fn new(rows: usize, cols: usize, cells: Vec<Embedding>) -> Result<Self> {
        if rows == 0 || cols == 0 || cells.len() != rows * cols {
            return Err(IndexError::GridMismatch { want: Some((rows, cols)), got: None });
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn cell(&self, row: usize, col: usize) -> &Embedding {
        &self.cells[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedItem {
    pub id: String,
    pub full: Embedding,
    pub parts: Option<PartsGrid>,
    pub trace: Option<TraceRef>,
}

impl IndexedItem {
    pub fn new(id: impl Into<String>, full: Embedding) -> Self {
        Self { id: id.into(), full, parts: None, trace: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryMode {
    Full(Embedding),
    /// Active cells as `(row, col, embedding)`.
    Segments(Vec<(usize, usize, Embedding)>),
    Flow(Vec<Embedding>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub mode: QueryMode,
    pub k: usize,
}

#[inline]
fn accumulate(acc: &mut f64, a: &Embedding, b: &Embedding) {
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        let d = f64::from(*x) - f64::from(*y);
        *acc += d * d;
    }
}

pub fn euclidean(a: &Embedding, b: &Embedding) -> f64 {
    let mut acc = 0.0;
    accumulate(&mut acc, a, b);
    acc.sqrt()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Index {
    grid: Option<(usize, usize)>,
    items: Vec<IndexedItem>,
    by_id: HashMap<String, usize>,
}

const MAGIC: &[u8; 6] = b"SWIDX1";

impl Index {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn build(items: Vec<IndexedItem>) -> Result<Self> {
        let mut idx = Self::new();
        for it in items {
            idx.add(it)?;
        }
        Ok(idx)
    }

    /// Insert one item. All items must agree on whether they carry parts,
    /// and on the grid shape when they do.
    pub fn add(&mut self, item: IndexedItem) -> Result<()> {
        if self.by_id.contains_key(&item.id) {
            return Err(IndexError::DuplicateId(item.id));
        }
        let shape = item.parts.as_ref().map(|p| (p.rows, p.cols));
        if self.items.is_empty() {
            self.grid = shape;
        } else if self.grid != shape {
            return Err(IndexError::GridMismatch { want: self.grid, got: shape });
        }
        self.by_id.insert(item.id.clone(), self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn items(&self) -> &[IndexedItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&IndexedItem> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    fn check(&self, k: usize) -> Result<()> {
        if self.items.is_empty() {
            return Err(IndexError::Empty);
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        Ok(())
    }

    pub fn query(&self, spec: &QuerySpec) -> Result<RankedResults> {
        match &spec.mode {
            QueryMode::Full(q) => self.query_full(q, spec.k),
            QueryMode::Segments(cells) => self.query_segments(cells, spec.k),
            QueryMode::Flow(seq) => self.query_flow(seq, spec.k),
        }
    }

    pub fn query_full(&self, q: &Embedding, k: usize) -> Result<RankedResults> {
        self.check(k)?;
        let c = self
            .items
            .iter()
            .map(|it| Ranked { id: it.id.clone(), distance: euclidean(q, &it.full) })
            .collect();
        Ok(RankedResults::from_candidates(c, k))
    }

    /// Compare only the given cells; everything else in the item is ignored.
    pub fn query_segments(&self, cells: &[(usize, usize, Embedding)], k: usize) -> Result<RankedResults> {
        self.check(k)?;
        let (rows, cols) = self.grid.ok_or(IndexError::NoParts)?;
        if cells.is_empty() {
            return Err(IndexError::NoActiveCells);
        }
        let mut seen = vec![false; rows * cols];
        for &(row, col, _) in cells {
            if row >= rows || col >= cols {
                return Err(IndexError::CellOutOfRange { row, col, rows, cols });
            }
            if std::mem::replace(&mut seen[row * cols + col], true) {
                return Err(IndexError::DuplicateCell(row, col));
            }
        }
        // concatenation order: row-major over the active cells
        let mut ordered: Vec<&(usize, usize, Embedding)> = cells.iter().collect();
        ordered.sort_by_key(|(r, c, _)| (*r, *c));
        let c = self
            .items
            .iter()
            .map(|it| {
                let parts = it.parts.as_ref().expect("grid presence is uniform");
                let mut acc = 0.0;
                for (r, c, e) in &ordered {
                    accumulate(&mut acc, e, parts.cell(*r, *c));
                }
                Ranked { id: it.id.clone(), distance: acc.sqrt() }
            })
            .collect();
        Ok(RankedResults::from_candidates(c, k))
    }

    /// Screens of each trace, ordered by position.
    pub fn traces(&self) -> BTreeMap<&str, Vec<(usize, &IndexedItem)>> {
        let mut t: BTreeMap<&str, Vec<(usize, &IndexedItem)>> = BTreeMap::new();
        for it in &self.items {
            if let Some(tr) = &it.trace {
                t.entry(tr.id.as_str()).or_default().push((tr.position, it));
            }
        }
        for v in t.values_mut() {
            v.sort_by_key(|(p, _)| *p);
        }
        t
    }

    /// Id of the window covering positions `start..=end` of `trace`.
    pub fn window_id(trace: &str, start: usize, end: usize) -> String {
        format!("{trace}[{start}..{end}]")
    }

    /// Item ids covered by a flow window id, in trace order.
    pub fn window_members(&self, window: &str) -> Option<Vec<&str>> {
        let (trace, range) = window.strip_suffix(']')?.rsplit_once('[')?;
        let (a, b) = range.split_once("..")?;
        let (a, b): (usize, usize) = (a.parse().ok()?, b.parse().ok()?);
        let screens = self.traces().remove(trace)?;
        let ids: Vec<&str> = screens.iter().filter(|(p, _)| (a..=b).contains(p)).map(|(_, it)| it.id.as_str()).collect();
        (a <= b && ids.len() == b - a + 1).then_some(ids)
    }

    /// Rank every run of `seq.len()` consecutive screens in every trace.
    pub fn query_flow(&self, seq: &[Embedding], k: usize) -> Result<RankedResults> {
        self.check(k)?;
        if seq.len() < 2 {
            return Err(IndexError::FlowTooShort(seq.len()));
        }
        let n = seq.len();
        let mut c = Vec::new();
        for (trace, screens) in self.traces() {
            for w in screens.windows(n) {
                let contiguous = w.windows(2).all(|p| p[1].0 == p[0].0 + 1);
                if !contiguous {
                    continue;
                }
                let mut acc = 0.0;
                for (q, (_, it)) in seq.iter().zip(w) {
                    accumulate(&mut acc, q, &it.full);
                }
                c.push(Ranked { id: Self::window_id(trace, w[0].0, w[n - 1].0), distance: acc.sqrt() });
            }
        }
        if c.is_empty() {
            return Err(IndexError::NoWindow(n));
        }
        Ok(RankedResults::from_candidates(c, k))
    }

    /// Longest run of consecutive screens in any trace.
    pub fn max_flow_len(&self) -> usize {
        self.traces()
            .values()
            .map(|s| {
                let (mut best, mut run) = (0, 0);
                for (i, (p, _)) in s.iter().enumerate() {
                    run = if i > 0 && *p == s[i - 1].0 + 1 { run + 1 } else { 1 };
                    best = best.max(run);
                }
                best
            })
            .max()
            .unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        let (rows, cols) = self.grid.unwrap_or((0, 0));
        b.extend_from_slice(&(rows as u32).to_le_bytes());
        b.extend_from_slice(&(cols as u32).to_le_bytes());
        b.extend_from_slice(&(EMBEDDING_DIM as u32).to_le_bytes());
        b.extend_from_slice(&(self.items.len() as u64).to_le_bytes());
        let put_str = |b: &mut Vec<u8>, s: &str| {
            b.extend_from_slice(&(s.len() as u32).to_le_bytes());
            b.extend_from_slice(s.as_bytes());
        };
        let put_emb = |b: &mut Vec<u8>, e: &Embedding| {
            for v in e.as_slice() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        };
        for it in &self.items {
            put_str(&mut b, &it.id);
            put_emb(&mut b, &it.full);
            match &it.parts {
                Some(p) => {
                    b.push(1);
                    p.cells.iter().for_each(|e| put_emb(&mut b, e));
                }
                None => b.push(0),
            }
            match &it.trace {
                Some(t) => {
                    b.push(1);
                    put_str(&mut b, &t.id);
                    b.extend_from_slice(&(t.position as u32).to_le_bytes());
                }
                None => b.push(0),
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| IndexError::Corrupt(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: &body[MAGIC.len()..] };
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if dim != EMBEDDING_DIM {
            return Err(IndexError::Corrupt(format!("embedding dimension {dim}, expected {EMBEDDING_DIM}")));
        }
        let n = r.u64()? as usize;
        let mut idx = Index::new();
        for _ in 0..n {
            let id = r.string()?;
            let full = r.embedding()?;
            let parts = match r.u8()? {
                0 => None,
                1 => {
                    let cells = (0..rows * cols).map(|_| r.embedding()).collect::<Result<Vec<_>>>()?;
                    Some(PartsGrid::new(rows, cols, cells)?)
                }
                _ => return Err(corrupt("bad parts flag")),
            };
            let trace = match r.u8()? {
                0 => None,
                1 => {
                    let id = r.string()?;
                    Some(TraceRef { id, position: r.u32()? as usize })
                }
                _ => return Err(corrupt("bad trace flag")),
            };
            idx.add(IndexedItem { id, full, parts, trace })?;
        }
        if !r.buf.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(idx)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Short content hash of the serialized index.
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(&self.to_bytes())
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(IndexError::Corrupt("truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| IndexError::Corrupt("id is not utf-8".into()))
    }

    fn embedding(&mut self) -> Result<Embedding> {
        let raw = self.take(4 * EMBEDDING_DIM)?;
        let mut v = [0.0f32; EMBEDDING_DIM];
        for (o, c) in v.iter_mut().zip(raw.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
        Embedding::new(v.to_vec()).map_err(|e| IndexError::Corrupt(e.to_string()))
    }
}
