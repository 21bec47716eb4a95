//! Glue between the encoder and the index: embedding screens for indexing
//! and turning raw query images into index queries. The CLI and the HTTP
//! service both go through [`run_query`], so equal inputs give equal results.

use thiserror::Error;

use crate::dataset::{Manifest, TraceRef};
use crate::encoder::{Branch, Encoder, EncoderError};
use crate::imaging::{GrayImage, ImagingError};
use crate::index::{Index, IndexError, IndexedItem, PartsGrid, QueryMode, QuerySpec, RankedResults};

pub const DEFAULT_GRID: (usize, usize) = (3, 3);
const CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("segments mask has {got} cells, index grid needs {want}")]
    MaskSize { want: usize, got: usize },
    #[error("grid {0}x{1} is larger than the {2}x{3} image")]
    GridTooFine(usize, usize, usize, usize),
    #[error("invalid grid {0}x{1}")]
    BadGrid(usize, usize),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Pixel span `[lo, hi)` of cell `i` of `n` along a side of `len` pixels.
fn span(len: usize, n: usize, i: usize) -> (usize, usize) {
    (i * len / n, (i + 1) * len / n)
}

/// Crops of a `rows x cols` grid over `img`, row-major. Cells tile the image
/// exactly; when the size does not divide evenly the extra pixels spread
/// over the cells.
pub fn grid_cells(img: &GrayImage, rows: usize, cols: usize) -> Result<Vec<GrayImage>> {
    if rows == 0 || cols == 0 {
        return Err(PipelineError::BadGrid(rows, cols));
    }
    if rows > img.height() || cols > img.width() {
        return Err(PipelineError::GridTooFine(rows, cols, img.width(), img.height()));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (y0, y1) = span(img.height(), rows, r);
        for c in 0..cols {
            let (x0, x1) = span(img.width(), cols, c);
            out.push(img.crop(x0, y0, x1 - x0, y1 - y0)?);
        }
    }
    Ok(out)
}

/// A screen to be indexed.
pub struct Screen {
    pub id: String,
    pub image: GrayImage,
    pub trace: Option<TraceRef>,
}

/// Embed screens with the screenshot branch; with a grid, also embed every cell.
pub fn index_items(enc: &Encoder, screens: &[Screen], grid: Option<(usize, usize)>) -> Result<Vec<IndexedItem>> {
    let images: Vec<GrayImage> = screens.iter().map(|s| s.image.clone()).collect();
    let full = enc.encode_images(Branch::Screenshot, &images, CHUNK)?;
    let mut items = Vec::with_capacity(screens.len());
    for (s, e) in screens.iter().zip(full) {
        let parts = match grid {
            Some((rows, cols)) => {
                let cells = enc.encode_images(Branch::Screenshot, &grid_cells(&s.image, rows, cols)?, CHUNK)?;
                Some(PartsGrid::new(rows, cols, cells)?)
            }
            None => None,
        };
        items.push(IndexedItem { id: s.id.clone(), full: e, parts, trace: s.trace.clone() });
    }
    Ok(items)
}

pub fn build_index(enc: &Encoder, screens: &[Screen], grid: Option<(usize, usize)>) -> Result<Index> {
    Ok(Index::build(index_items(enc, screens, grid)?)?)
}

/// One screen per example in the manifest, keyed by example id. The first
/// record of each example supplies its screenshot path and trace.
pub fn manifest_screens(m: &Manifest) -> std::result::Result<Vec<Screen>, ImagingError> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for r in &m.pairs {
        if !seen.insert(r.example_id.clone()) {
            continue;
        }
        out.push(Screen {
            id: r.example_id.clone(),
            image: crate::imaging::load_gray(m.resolve(&r.screenshot))?,
            trace: r.trace.clone(),
        });
    }
    Ok(out)
}

/// A query as it arrives from a user: images, not embeddings.
#[derive(Debug, Clone)]
pub enum QueryInput {
    Full(GrayImage),
    /// `mask` is row-major over the index grid; `true` marks a drawn cell.
    Segments { image: GrayImage, mask: Vec<bool> },
    Flow(Vec<GrayImage>),
}

impl QueryInput {
    pub fn mode_name(&self) -> &'static str {
        match self {
            QueryInput::Full(_) => "full",
            QueryInput::Segments { .. } => "segments",
            QueryInput::Flow(_) => "flow",
        }
    }
}

/// Embed a query with the sketch branch. Segment cells are cropped from the
/// sketch with the same grid the index used for screenshots.
pub fn encode_query(enc: &Encoder, index: &Index, input: &QueryInput) -> Result<QueryMode> {
    Ok(match input {
        QueryInput::Full(img) => QueryMode::Full(enc.encode_image(Branch::Sketch, img)?),
        QueryInput::Segments { image, mask } => {
            let (rows, cols) = index.grid().ok_or(IndexError::NoParts)?;
            if mask.len() != rows * cols {
                return Err(PipelineError::MaskSize { want: rows * cols, got: mask.len() });
            }
            let cells = grid_cells(image, rows, cols)?;
            let active: Vec<GrayImage> =
                cells.into_iter().zip(mask).filter(|(_, &on)| on).map(|(c, _)| c).collect();
            let embs = enc.encode_images(Branch::Sketch, &active, CHUNK)?;
            let pos = mask.iter().enumerate().filter(|(_, &on)| on).map(|(i, _)| (i / cols, i % cols));
            QueryMode::Segments(pos.zip(embs).map(|((r, c), e)| (r, c, e)).collect())
        }
        QueryInput::Flow(frames) => QueryMode::Flow(enc.encode_images(Branch::Sketch, frames, CHUNK)?),
    })
}

/// Encode and rank. `k` beyond the number of candidates returns them all.
pub fn run_query(enc: &Encoder, index: &Index, input: &QueryInput, k: usize) -> Result<RankedResults> {
    let mode = encode_query(enc, index, input)?;
    Ok(index.query(&QuerySpec { mode, k })?)
}


/// Load `(key, sketch, screenshot)` for each record. Records need a
/// processed sketch; raw photos go through `preprocess` first.
pub fn load_pair_images(
    m: &Manifest,
    records: &[crate::dataset::PairRecord],
) -> std::result::Result<Vec<(String, GrayImage, GrayImage)>, LoadError> {
    records
        .iter()
        .map(|r| {
            let sketch = r.sketch.as_ref().ok_or_else(|| LoadError::NoSketch(r.key()))?;
            Ok((r.key(), crate::imaging::load_gray(m.resolve(sketch))?, crate::imaging::load_gray(m.resolve(&r.screenshot))?))
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("pair {0} has no processed sketch; run preprocess first")]
    NoSketch(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}
