//! Sketch/screenshot pair datasets: the JSON manifest, postprocessing of
//! photographed sketches, and a procedural generator of UI layouts rendered
//! both as grayscale "screenshots" and as hand-drawn-looking binary sketches.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    self, binarize, rectify, GrayImage, Homography, ImagingError, Point, QuadCorners,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("record {id}: {problem}")]
    Invalid { id: String, problem: String },
    #[error("duplicate record for example {example} by designer {designer}")]
    Duplicate { example: String, designer: String },
    #[error("record {id}: file not found: {path}")]
    Dangling { id: String, path: PathBuf },
    #[error("invalid counts: {0}")]
    Counts(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRef {
    pub id: String,
    pub position: usize,
}

/// One sketch of one UI example by one designer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub example_id: String,
    pub app_id: String,
    pub designer_id: String,
    pub screenshot: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch_raw: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corners: Option<QuadCorners>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceRef>,
}

impl PairRecord {
    /// Key used for ranking and index ids.
    pub fn key(&self) -> String {
        format!("{}@{}", self.example_id, self.designer_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub pairs: Vec<PairRecord>,
    /// Directory that relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

/// Loose on-disk form; every field optional so problems can be reported per record.
#[derive(Deserialize)]
struct RawManifest {
    schema_version: Option<u32>,
    pairs: Vec<RawRecord>,
}

#[derive(Deserialize)]
struct RawRecord {
    example_id: Option<String>,
    app_id: Option<String>,
    designer_id: Option<String>,
    screenshot: Option<PathBuf>,
    sketch_raw: Option<PathBuf>,
    sketch: Option<PathBuf>,
    corners: Option<QuadCorners>,
    trace: Option<TraceRef>,
}

/// Prefix rewrites applied to every stored path, for datasets whose file
/// naming differs from the manifest's.
#[derive(Debug, Clone, Default)]
pub struct PathMap(pub Vec<(PathBuf, PathBuf)>);

impl PathMap {
    fn apply(&self, p: &Path) -> PathBuf {
        for (from, to) in &self.0 {
            if let Ok(rest) = p.strip_prefix(from) {
                return to.join(rest);
            }
        }
        p.to_path_buf()
    }
}

impl Manifest {
    pub fn new(pairs: Vec<PairRecord>) -> Self {
        Self { schema_version: SCHEMA_VERSION, pairs, root: PathBuf::new() }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.root.join(p) }
    }

    pub fn designers(&self) -> Vec<String> {
        let mut d: Vec<String> = self.pairs.iter().map(|p| p.designer_id.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    pub fn apps(&self) -> Vec<String> {
        let mut a: Vec<String> = self.pairs.iter().map(|p| p.app_id.clone()).collect();
        a.sort();
        a.dedup();
        a
    }

    pub fn examples(&self) -> Vec<String> {
        let mut e: Vec<String> = self.pairs.iter().map(|p| p.example_id.clone()).collect();
        e.sort();
        e.dedup();
        e
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            let id = if p.example_id.is_empty() { "<unnamed>".to_string() } else { p.example_id.clone() };
            for (name, v) in [("example_id", &p.example_id), ("app_id", &p.app_id), ("designer_id", &p.designer_id)] {
                if v.is_empty() {
                    return Err(DatasetError::Invalid { id, problem: format!("empty {name}") });
                }
            }
            if p.screenshot.as_os_str().is_empty() {
                return Err(DatasetError::Invalid { id, problem: "missing screenshot path".into() });
            }
            if p.sketch.is_none() && (p.sketch_raw.is_none() || p.corners.is_none()) {
                return Err(DatasetError::Invalid {
                    id,
                    problem: "needs a processed sketch or a raw photo with corners".into(),
                });
            }
            if let Some(c) = &p.corners {
                c.validate()?;
            }
            if !seen.insert((p.example_id.as_str(), p.designer_id.as_str())) {
                return Err(DatasetError::Duplicate {
                    example: p.example_id.clone(),
                    designer: p.designer_id.clone(),
                });
            }
        }
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        for p in &self.pairs {
            let mut paths = vec![&p.screenshot];
            paths.extend(p.sketch.iter());
            paths.extend(p.sketch_raw.iter());
            for path in paths {
                let full = self.resolve(path);
                if !full.is_file() {
                    return Err(DatasetError::Dangling { id: p.example_id.clone(), path: full });
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    load_manifest_with(path, &PathMap::default())
}

/// Parse, remap, validate, and check that every referenced file exists.
pub fn load_manifest_with(path: impl AsRef<Path>, map: &PathMap) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: RawManifest = serde_json::from_str(&text)
        .map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })?;
    let mut pairs = Vec::with_capacity(raw.pairs.len());
    for (i, r) in raw.pairs.into_iter().enumerate() {
        let id = r.example_id.clone().unwrap_or_else(|| format!("<record {i}>"));
        let missing = |field: &str| DatasetError::Invalid { id: id.clone(), problem: format!("missing {field}") };
        pairs.push(PairRecord {
            example_id: r.example_id.clone().ok_or_else(|| missing("example_id"))?,
            app_id: r.app_id.ok_or_else(|| missing("app_id"))?,
            designer_id: r.designer_id.ok_or_else(|| missing("designer_id"))?,
            screenshot: map.apply(&r.screenshot.ok_or_else(|| missing("screenshot path"))?),
            sketch_raw: r.sketch_raw.map(|p| map.apply(&p)),
            sketch: r.sketch.map(|p| map.apply(&p)),
            corners: r.corners,
            trace: r.trace,
        });
    }
    let manifest = Manifest {
        schema_version: raw.schema_version.unwrap_or(SCHEMA_VERSION),
        pairs,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    manifest.validate()?;
    manifest.check_files()?;
    Ok(manifest)
}

pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(m)
        .map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Rectify the marked page region and threshold it to ink/paper.
pub fn postprocess(
    photo: &GrayImage,
    corners: &QuadCorners,
    out_w: usize,
    out_h: usize,
    thresh: f32,
) -> Result<GrayImage> {
    let flat = rectify(photo, corners, out_w, out_h)?;
    Ok(binarize(&flat, thresh))
}

pub const DEFAULT_BINARIZE_THRESHOLD: f32 = 0.5;

// ---------------------------------------------------------------------------
// Synthetic layouts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Topbar,
    TextRow,
    ImageBlock,
    Button,
    ListDivider,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.x >= self.x && o.y >= self.y && o.x + o.w <= self.x + self.w && o.y + o.h <= self.y + self.h
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub kind: ElementKind,
    pub rect: Rect,
    pub shade: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLayout {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub elements: Vec<Element>,
}

/// Canvas size of generated pairs (portrait, phone-like).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self { width: 72, height: 128 }
    }
}

/// How one designer's hand perturbs strokes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignerStyle {
    /// Multiplier on the base jitter sigma.
    pub jitter_scale: f64,
    /// Constant per-designer drift added to every vertex, pixels.
    pub bias: (f64, f64),
}

impl Default for DesignerStyle {
    fn default() -> Self {
        Self { jitter_scale: 1.0, bias: (0.0, 0.0) }
    }
}

impl DesignerStyle {
    pub fn for_designer(index: usize) -> Self {
        const SCALES: [f64; 5] = [1.0, 0.8, 1.2, 0.9, 1.1];
        let h = splitmix64(0x5157_4952_4544_0000 ^ index as u64);
        let unit = |bits: u64| (bits & 0xffff) as f64 / 65535.0 - 0.5;
        Self { jitter_scale: SCALES[index % SCALES.len()], bias: (unit(h), unit(h >> 16)) }
    }
}

/// Base standard deviation of per-vertex stroke jitter, pixels.
pub const JITTER_SIGMA: f64 = 0.8;
/// Random part of the jitter is truncated to this many pixels per axis.
pub const JITTER_CLAMP: f64 = 1.0;
/// Long strokes are split so no segment exceeds this length, pixels.
const STROKE_STEP: f64 = 8.0;
/// Template-text squiggle: amplitude and period in pixels.
const WAVE_AMPLITUDE: f64 = 1.0;
const WAVE_PERIOD: f64 = 6.0;
/// Pen radius in pixels; strokes are `2 * PEN_RADIUS + 1` wide.
pub const PEN_RADIUS: usize = 1;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random phone-screen layout: optional top bar, then a vertical stack of sections.
pub fn generate_layout(seed: u64, canvas: Canvas) -> SyntheticLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (canvas.width as f64, canvas.height as f64);
    let margin = (w * 0.06).round().max(2.0);
    let content_w = w - 2.0 * margin;
    let mut elements = Vec::new();
    let mut y = 0.0;
    if rng.random_bool(0.85) {
        let bar_h = (h * rng.random_range(0.08..0.13)).round();
        elements.push(Element {
            kind: ElementKind::Topbar,
            rect: Rect { x: 0.0, y: 0.0, w, h: bar_h },
            shade: rng.random_range(0.15..0.5),
        });
        y = bar_h;
    }
    y += rng.random_range(3.0..7.0_f64).round();
    let text_h = (h * 0.03).round().max(2.0);
    let bottom = h - margin;
    loop {
        let remaining = bottom - y;
        if remaining < text_h + 2.0 {
            break;
        }
        let mut section = Vec::new();
        match rng.random_range(0..6) {
            0 => {
                // paragraph of template text
                let lines = rng.random_range(1..=3);
                let gap = text_h + 2.0;
                for i in 0..lines {
                    let lw = (content_w * rng.random_range(0.35..1.0)).round();
                    section.push(Element {
                        kind: ElementKind::TextRow,
                        rect: Rect { x: margin, y: y + i as f64 * gap, w: lw, h: text_h },
                        shade: rng.random_range(0.05..0.4),
                    });
                }
            }
            1 => {
                // banner image
                let bh = (h * rng.random_range(0.14..0.3)).round();
                section.push(Element {
                    kind: ElementKind::ImageBlock,
                    rect: Rect { x: margin, y, w: content_w, h: bh },
                    shade: rng.random_range(0.3..0.8),
                });
            }
            2 => {
                // row of thumbnails
                let count = rng.random_range(2..=3);
                let gap = 3.0;
                let side = ((content_w - gap * (count as f64 - 1.0)) / count as f64).floor();
                for i in 0..count {
                    section.push(Element {
                        kind: ElementKind::ImageBlock,
                        rect: Rect { x: margin + i as f64 * (side + gap), y, w: side, h: side.min(h * 0.2).round() },
                        shade: rng.random_range(0.3..0.8),
                    });
                }
            }
            3 => {
                // list item: thumbnail with two text lines beside it
                let side = (h * rng.random_range(0.09..0.14)).round();
                section.push(Element {
                    kind: ElementKind::ImageBlock,
                    rect: Rect { x: margin, y, w: side, h: side },
                    shade: rng.random_range(0.3..0.8),
                });
                let tx = margin + side + 3.0;
                let avail = w - margin - tx;
                for i in 0..2 {
                    let lw = (avail * rng.random_range(0.4..1.0)).round().max(4.0);
                    section.push(Element {
                        kind: ElementKind::TextRow,
                        rect: Rect { x: tx, y: y + 1.0 + i as f64 * (text_h + 2.0), w: lw, h: text_h },
                        shade: rng.random_range(0.05..0.4),
                    });
                }
            }
            4 => {
                let bw = (content_w * rng.random_range(0.35..1.0)).round();
                let bx = if rng.random_bool(0.5) { margin } else { ((w - bw) / 2.0).round() };
                section.push(Element {
                    kind: ElementKind::Button,
                    rect: Rect { x: bx, y, w: bw, h: (h * rng.random_range(0.06..0.09)).round() },
                    shade: rng.random_range(0.2..0.7),
                });
            }
            _ => {
                section.push(Element {
                    kind: ElementKind::ListDivider,
                    rect: Rect { x: margin, y, w: content_w, h: 1.0 },
                    shade: rng.random_range(0.55..0.8),
                });
            }
        }
        let section_bottom = section.iter().map(|e| e.rect.y + e.rect.h).fold(y, f64::max);
        if section_bottom > bottom {
            if elements.len() > 1 && rng.random_bool(0.5) {
                break;
            }
            // try something smaller next round, or stop when nothing fits
            if remaining < h * 0.1 {
                break;
            }
            continue;
        }
        elements.extend(section);
        y = section_bottom + rng.random_range(3.0..8.0_f64).round();
    }
    SyntheticLayout { seed, width: canvas.width, height: canvas.height, elements }
}

fn fill_rect(img: &mut GrayImage, r: &Rect, v: f32) {
    let x0 = r.x.max(0.0) as usize;
    let y0 = r.y.max(0.0) as usize;
    let x1 = ((r.x + r.w) as usize).min(img.width());
    let y1 = ((r.y + r.h) as usize).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            img.set(x, y, v);
        }
    }
}

/// Flat-shaded rendering of a layout.
pub fn render_screenshot(layout: &SyntheticLayout) -> GrayImage {
    let mut img = GrayImage::filled(layout.width, layout.height, 1.0);
    for e in &layout.elements {
        match e.kind {
            ElementKind::TextRow => {
                // words separated by deterministic gaps
                let mut rng = ChaCha8Rng::seed_from_u64(layout.seed ^ (e.rect.y as u64) << 8 ^ e.rect.x as u64);
                let mut x = e.rect.x;
                while x < e.rect.x + e.rect.w {
                    let word = rng.random_range(4.0..12.0_f64).round().min(e.rect.x + e.rect.w - x);
                    fill_rect(&mut img, &Rect { x, y: e.rect.y, w: word, h: e.rect.h }, e.shade);
                    x += word + 2.0;
                }
            }
            _ => fill_rect(&mut img, &e.rect, e.shade),
        }
    }
    img
}

/// Nominal (un-jittered) stroke centerlines a sketcher would draw for `e`.
pub fn element_strokes(e: &Element) -> Vec<Vec<Point>> {
    let Rect { x, y, w, h } = e.rect;
    let (x1, y1) = (x + w - 1.0, y + h - 1.0);
    let outline = vec![Point::new(x, y), Point::new(x1, y), Point::new(x1, y1), Point::new(x, y1), Point::new(x, y)];
    match e.kind {
        ElementKind::Topbar | ElementKind::Button => vec![outline],
        ElementKind::ImageBlock => {
            vec![outline, vec![Point::new(x, y), Point::new(x1, y1)], vec![Point::new(x1, y), Point::new(x, y1)]]
        }
        ElementKind::ListDivider => vec![vec![Point::new(x, y), Point::new(x1, y)]],
        ElementKind::TextRow => {
            let cy = y + (h - 1.0) / 2.0;
            let n = ((x1 - x) / 1.0).ceil().max(1.0) as usize;
            let pts = (0..=n)
                .map(|i| {
                    let px = x + (x1 - x) * i as f64 / n as f64;
                    let phase = (px - x) / WAVE_PERIOD * std::f64::consts::TAU;
                    Point::new(px, cy + WAVE_AMPLITUDE * phase.sin())
                })
                .collect();
            vec![pts]
        }
    }
}

/// Split segments longer than `STROKE_STEP` so jitter bends long lines.
fn subdivide(poly: &[Point]) -> Vec<Point> {
    let mut out = Vec::with_capacity(poly.len() * 2);
    for seg in poly.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = (b.x - a.x).hypot(b.y - a.y);
        let parts = (len / STROKE_STEP).ceil().max(1.0) as usize;
        for i in 0..parts {
            let t = i as f64 / parts as f64;
            out.push(Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t));
        }
    }
    if let Some(last) = poly.last() {
        out.push(*last);
    }
    out
}

fn draw_polyline(img: &mut GrayImage, pts: &[Point]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let steps = ((b.x - a.x).abs().max((b.y - a.y).abs()) * 4.0).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let px = (a.x + (b.x - a.x) * t + 0.5).floor();
            let py = (a.y + (b.y - a.y) * t + 0.5).floor();
            if px < 0.0 || py < 0.0 || px >= w || py >= h {
                continue;
            }
            let (cx, cy) = (px as usize, py as usize);
            for y in cy.saturating_sub(PEN_RADIUS)..=(cy + PEN_RADIUS).min(img.height() - 1) {
                for x in cx.saturating_sub(PEN_RADIUS)..=(cx + PEN_RADIUS).min(img.width() - 1) {
                    img.set(x, y, 0.0);
                }
            }
        }
    }
}

/// Binary hand-drawn rendering of a layout: outlines for bars and buttons,
/// crossed boxes for images, squiggles for text, single lines for dividers.
pub fn render_sketch(layout: &SyntheticLayout, style: DesignerStyle, jitter_seed: u64) -> GrayImage {
    let mut img = GrayImage::filled(layout.width, layout.height, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let normal = Normal::new(0.0, JITTER_SIGMA * style.jitter_scale).expect("positive sigma");
    let jitter = |rng: &mut ChaCha8Rng| normal.sample(rng).clamp(-JITTER_CLAMP, JITTER_CLAMP);
    for e in &layout.elements {
        for stroke in element_strokes(e) {
            let closed = stroke.len() > 2 && stroke.first() == stroke.last();
            let mut pts = subdivide(&stroke);
            let n = pts.len();
            for (i, p) in pts.iter_mut().enumerate() {
                if closed && i == n - 1 {
                    break;
                }
                p.x += jitter(&mut rng) + style.bias.0;
                p.y += jitter(&mut rng) + style.bias.1;
            }
            if closed {
                pts[n - 1] = pts[0];
            }
            draw_polyline(&mut img, &pts);
        }
    }
    img
}

pub struct GeneratedPair {
    pub screenshot: GrayImage,
    pub sketch: GrayImage,
    pub layout: SyntheticLayout,
}

/// A layout and its two renderings, with the default sketching style.
pub fn generate_pair(seed: u64) -> GeneratedPair {
    generate_pair_with(seed, Canvas::default(), DesignerStyle::default(), splitmix64(seed ^ 0xA5A5))
}

pub fn generate_pair_with(seed: u64, canvas: Canvas, style: DesignerStyle, jitter_seed: u64) -> GeneratedPair {
    let layout = generate_layout(seed, canvas);
    GeneratedPair { screenshot: render_screenshot(&layout), sketch: render_sketch(&layout, style, jitter_seed), layout }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n: usize,
    pub designers: usize,
    pub apps: usize,
    pub seed: u64,
    pub canvas: Canvas,
    pub trace_len: usize,
    /// Also write simulated page photos with corner markers to `sketches_raw/`.
    pub raw_photos: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n: 600, designers: 4, apps: 30, seed: 7, canvas: Canvas::default(), trace_len: 4, raw_photos: false }
    }
}

pub fn example_id(i: usize) -> String {
    format!("ex{i:05}")
}

pub fn app_id(a: usize) -> String {
    format!("app{a:03}")
}

pub fn designer_id(d: usize) -> String {
    format!("d{d}")
}

/// Manifest records for a synthetic corpus, without touching the disk.
///
/// Pair `i` gets designer `i mod designers` and app `i mod apps`; within
/// an app, consecutive pairs form flow traces of `trace_len` screens.
pub fn corpus_records(cfg: &CorpusConfig) -> Result<Vec<PairRecord>> {
    if cfg.n == 0 || cfg.designers == 0 || cfg.apps == 0 || cfg.n < cfg.designers || cfg.n < cfg.apps {
        return Err(DatasetError::Counts(format!(
            "need n >= designers >= 1 and n >= apps >= 1 (n={}, designers={}, apps={})",
            cfg.n, cfg.designers, cfg.apps
        )));
    }
    if cfg.trace_len == 0 {
        return Err(DatasetError::Counts("trace length must be positive".into()));
    }
    let mut per_app: BTreeMap<usize, usize> = BTreeMap::new();
    Ok((0..cfg.n)
        .map(|i| {
            let app = i % cfg.apps;
            let slot = per_app.entry(app).or_insert(0);
            let (trace, pos) = (*slot / cfg.trace_len, *slot % cfg.trace_len);
            *slot += 1;
            let id = example_id(i);
            PairRecord {
                example_id: id.clone(),
                app_id: app_id(app),
                designer_id: designer_id(i % cfg.designers),
                screenshot: PathBuf::from(format!("screenshots/{id}.png")),
                sketch_raw: cfg.raw_photos.then(|| PathBuf::from(format!("sketches_raw/{id}.png"))),
                sketch: Some(PathBuf::from(format!("sketches/{id}.png"))),
                corners: None,
                trace: Some(TraceRef { id: format!("{}-t{trace}", app_id(app)), position: pos }),
            }
        })
        .collect())
}

/// Seed of pair `i`'s layout, derived from the corpus seed.
pub fn pair_seed(corpus_seed: u64, i: usize) -> u64 {
    splitmix64(corpus_seed ^ splitmix64(i as u64))
}

/// Render pair `i` of a corpus in memory.
pub fn corpus_pair(cfg: &CorpusConfig, i: usize) -> GeneratedPair {
    let seed = pair_seed(cfg.seed, i);
    let style = DesignerStyle::for_designer(i % cfg.designers);
    generate_pair_with(seed, cfg.canvas, style, splitmix64(seed ^ 0x5EED))
}

/// Marker centers sit this far (fraction of the longer page side) diagonally
/// outside each page corner.
pub const MARKER_OFFSET: f64 = 0.06;
/// Half the side of a square marker, same units.
const MARKER_HALF: f64 = 0.025;

/// Simulated photo of a sketch: the page, with four square markers just
/// outside its corners, under a mild projective distortion at twice the
/// sketch resolution. Returns the photo and the page corners in photo
/// coordinates.
pub fn simulate_photo(sketch: &GrayImage, seed: u64, max_shift: f64) -> Result<(GrayImage, QuadCorners)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (sketch.width() as f64, sketch.height() as f64);
    let scale = 2.0;
    let pad = 0.25 * w.max(h) * scale;
    let (pw, ph) = ((w * scale + 2.0 * pad).round(), (h * scale + 2.0 * pad).round());
    let mut corners = QuadCorners::rect(pad, pad, w * scale, h * scale);
    for c in corners.0.iter_mut() {
        c.x += rng.random_range(-max_shift..=max_shift) * w * scale;
        c.y += rng.random_range(-max_shift..=max_shift) * h * scale;
    }
    let page = QuadCorners::rect(0.0, 0.0, w, h);
    let hmg = Homography::from_quads(&page, &corners)?;
    let mut photo = imaging::warp(sketch, &hmg, pw as usize, ph as usize)?;
    let (off, half) = (MARKER_OFFSET * w.max(h), MARKER_HALF * w.max(h));
    let centers = [(-off, -off), (w + off, -off), (w + off, h + off), (-off, h + off)];
    let inv = hmg.inverse()?;
    for y in 0..ph as usize {
        for x in 0..pw as usize {
            let p = inv.apply(Point::new(x as f64 + 0.5, y as f64 + 0.5));
            if centers.iter().any(|(cx, cy)| (p.x - cx).abs() <= half && (p.y - cy).abs() <= half) {
                photo.set(x, y, 0.05);
            }
        }
    }
    Ok((photo, corners))
}

/// Page corners of a simulated photo, found from its markers alone.
pub fn locate_page(photo: &GrayImage, page_w: usize, page_h: usize) -> Result<QuadCorners> {
    let markers = imaging::detect_markers(photo, DEFAULT_BINARIZE_THRESHOLD)?;
    let off = MARKER_OFFSET * page_w.max(page_h) as f64;
    Ok(imaging::page_from_markers(&markers, page_w as f64, page_h as f64, off)?)
}

/// Write a synthetic corpus under `dir` (manifest.json, screenshots/, sketches/,
/// optionally sketches_raw/). Pairs are rendered on all available cores.
pub fn generate_corpus(cfg: &CorpusConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let mut records = corpus_records(cfg)?;
    for sub in ["screenshots", "sketches", "sketches_raw"] {
        if sub == "sketches_raw" && !cfg.raw_photos {
            continue;
        }
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(cfg.n);
    let corners: Vec<Option<QuadCorners>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|wk| {
                let records = &records;
                s.spawn(move || -> Result<Vec<(usize, Option<QuadCorners>)>> {
                    let mut out = Vec::new();
                    for i in (wk..cfg.n).step_by(workers) {
                        let pair = corpus_pair(cfg, i);
                        let rec = &records[i];
                        imaging::save_png(&pair.screenshot, dir.join(&rec.screenshot))?;
                        imaging::save_png(&pair.sketch, dir.join(rec.sketch.as_ref().expect("set by generator")))?;
                        let mut c = None;
                        if let Some(raw) = &rec.sketch_raw {
                            let (photo, quad) = simulate_photo(&pair.sketch, splitmix64(pair_seed(cfg.seed, i) ^ 0xF070), 0.08)?;
                            imaging::save_png(&photo, dir.join(raw))?;
                            c = Some(quad);
                        }
                        out.push((i, c));
                    }
                    Ok(out)
                })
            })
            .collect();
        let mut all = vec![None; cfg.n];
        for h in handles {
            for (i, c) in h.join().expect("generator thread panicked")? {
                all[i] = c;
            }
        }
        Ok::<_, DatasetError>(all)
    })?;
    for (r, c) in records.iter_mut().zip(corners) {
        r.corners = c;
    }
    let mut m = Manifest::new(records);
    m.root = dir.to_path_buf();
    save_manifest(&m, dir.join("manifest.json"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_pair() {
        let a = generate_pair(11);
        let b = generate_pair(11);
        assert_eq!(a.screenshot, b.screenshot);
        assert_eq!(a.sketch, b.sketch);
        assert_eq!(a.layout, b.layout);
        assert_ne!(generate_pair(12).layout, a.layout);
    }

    #[test]
    fn empty_layout_renders_blank() {
        let layout = SyntheticLayout { seed: 0, width: 20, height: 30, elements: vec![] };
        assert!(render_screenshot(&layout).data().iter().all(|&v| v == 1.0));
        assert!(render_sketch(&layout, DesignerStyle::default(), 1).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn layouts_stay_in_canvas_and_do_not_overlap() {
        for seed in 0..200 {
            let l = generate_layout(seed, Canvas::default());
            assert!(!l.elements.is_empty());
            let canvas = Rect { x: 0.0, y: 0.0, w: l.width as f64, h: l.height as f64 };
            for (i, a) in l.elements.iter().enumerate() {
                assert!(canvas.contains_rect(&a.rect), "seed {seed}: {a:?}");
                for b in &l.elements[i + 1..] {
                    let nested = a.rect.contains_rect(&b.rect) || b.rect.contains_rect(&a.rect);
                    assert!(!a.rect.overlaps(&b.rect) || nested, "seed {seed}: {a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn sketches_binary_and_screens_have_contrast() {
        for seed in 0..50 {
            let p = generate_pair(seed);
            assert!(p.sketch.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let mut levels: Vec<u32> = p.screenshot.data().iter().map(|v| v.to_bits()).collect();
            levels.sort_unstable();
            levels.dedup();
            assert!(levels.len() >= 2);
        }
    }

    #[test]
    fn corpus_counts_round_robin() {
        let cfg = CorpusConfig { n: 100, designers: 4, apps: 10, ..Default::default() };
        let recs = corpus_records(&cfg).unwrap();
        for d in 0..4 {
            assert_eq!(recs.iter().filter(|r| r.designer_id == designer_id(d)).count(), 25);
        }
        for a in 0..10 {
            let mut traces: Vec<_> = recs
                .iter()
                .filter(|r| r.app_id == app_id(a))
                .map(|r| r.trace.clone().unwrap())
                .collect();
            traces.sort_by(|x, y| (&x.id, x.position).cmp(&(&y.id, y.position)));
            assert_eq!(traces.len(), 10);
            assert!(traces.iter().all(|t| t.position < 4));
        }
        assert!(corpus_records(&CorpusConfig { n: 3, designers: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn manifest_requires_screenshot() {
        let mut r = corpus_records(&CorpusConfig { n: 4, designers: 2, apps: 2, ..Default::default() }).unwrap();
        r[2].screenshot = PathBuf::new();
        let err = Manifest::new(r).validate().unwrap_err();
        assert!(err.to_string().contains("ex00002"), "{err}");
    }
}
