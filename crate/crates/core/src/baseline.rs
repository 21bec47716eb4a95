//! Bag-of-words HOG retrieval baseline.
//!
//! Screenshots go through Canny first; sketches are already line drawings and
//! go straight to HOG. Each 2x2-cell block of the descriptor is one "patch"
//! for the codebook.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, CannyParams, GrayImage, ImagingError};
use crate::index::{Ranked, RankedResults};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("empty image")]
    EmptyImage,
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("need at least {k} samples, got {got}")]
    TooFewSamples { k: usize, got: usize },
    #[error("only {distinct} distinct samples for k = {k}")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corrupt codebook: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogParams {
    pub cell: usize,
    pub bins: usize,
}

impl Default for HogParams {
    fn default() -> Self {
        Self { cell: 8, bins: 9 }
    }
}

pub const BLOCK_EPS: f64 = 1e-6;

/// Per-cell orientation histograms, row-major over cells, `bins` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HogDescriptor {
    pub cells_x: usize,
    pub cells_y: usize,
    pub bins: usize,
    pub values: Vec<f32>,
}

impl HogDescriptor {
    pub fn cell(&self, cx: usize, cy: usize) -> &[f32] {
        let o = (cy * self.cells_x + cx) * self.bins;
        &self.values[o..o + self.bins]
    }

    /// Block sub-vectors (4 cells each, row-major inside the block).
    pub fn patches(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        for by in 0..self.cells_y / 2 {
            for bx in 0..self.cells_x / 2 {
                let mut p = Vec::with_capacity(4 * self.bins);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    p.extend_from_slice(self.cell(2 * bx + dx, 2 * by + dy));
                }
                out.push(p);
            }
        }
        out
    }

    pub fn patch_dim(&self) -> usize {
        4 * self.bins
    }
}

/// HOG over a grayscale image (or an edge map rendered as one).
///
/// Dimensions not divisible by `2 * cell` are padded by replicating the
/// border, which adds no gradient.
pub fn hog(img: &GrayImage, params: HogParams) -> Result<HogDescriptor> {
    let HogParams { cell, bins } = params;
    if img.width() == 0 || img.height() == 0 {
        return Err(BaselineError::EmptyImage);
    }
    if cell == 0 || bins < 2 {
        return Err(BaselineError::Param(format!("cell {cell}, bins {bins}")));
    }
    let (w, h) = (img.width(), img.height());
    let span = 2 * cell;
    let cells_x = w.div_ceil(span) * 2;
    let cells_y = h.div_ceil(span) * 2;
    let at = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        f64::from(img.get(x, y))
    };
    let width = std::f64::consts::PI / bins as f64;
    let mut hist = vec![0.0f64; cells_x * cells_y * bins];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = (at(xi + 1, yi) - at(xi - 1, yi)) / 2.0;
            let gy = (at(xi, yi + 1) - at(xi, yi - 1)) / 2.0;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            if theta >= std::f64::consts::PI {
                theta -= std::f64::consts::PI;
            }
            let pos = theta / width;
            let b0 = pos.floor();
            let frac = pos - b0;
            let b0 = (b0 as usize) % bins;
            let b1 = (b0 + 1) % bins;
            let base = ((y / cell) * cells_x + x / cell) * bins;
            hist[base + b0] += mag * (1.0 - frac);
            hist[base + b1] += mag * frac;
        }
    }
    for by in 0..cells_y / 2 {
        for bx in 0..cells_x / 2 {
            let cells = [(0, 0), (1, 0), (0, 1), (1, 1)].map(|(dx, dy)| ((2 * by + dy) * cells_x + 2 * bx + dx) * bins);
            let norm2: f64 = cells.iter().flat_map(|&o| &hist[o..o + bins]).map(|v| v * v).sum();
            let scale = 1.0 / (norm2 + BLOCK_EPS * BLOCK_EPS).sqrt();
            for o in cells {
                hist[o..o + bins].iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    Ok(HogDescriptor { cells_x, cells_y, bins, values: hist.into_iter().map(|v| v as f32).collect() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    pub centroids: Vec<f32>,
}

const BOW_MAGIC: &[u8; 6] = b"SWBOW1";

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid, lowest index on ties.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.k {
            let d = sq_dist(v, self.centroid(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(26 + 4 * self.centroids.len());
        b.extend_from_slice(BOW_MAGIC);
        b.extend_from_slice(&(self.k as u32).to_le_bytes());
        b.extend_from_slice(&(self.dim as u32).to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        for v in &self.centroids {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 22 || &b[..6] != BOW_MAGIC {
            return Err(BaselineError::Corrupt("bad magic".into()));
        }
        let k = u32::from_le_bytes(b[6..10].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(b[10..14].try_into().expect("4 bytes")) as usize;
        let seed = u64::from_le_bytes(b[14..22].try_into().expect("8 bytes"));
        let body = &b[22..];
        if body.len() != 4 * k * dim {
            return Err(BaselineError::Corrupt(format!("expected {} data bytes, found {}", 4 * k * dim, body.len())));
        }
        let centroids: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(BaselineError::Corrupt("non-finite centroid".into()));
        }
        Ok(Self { k, dim, seed, centroids })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut b = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut b)?;
        Self::from_bytes(&b)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

fn sq_dist64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - y).powi(2)).sum()
}

/// Codebook plus the within-cluster sum of squares after each assignment.
#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub codebook: Codebook,
    pub objective: Vec<f64>,
}

pub fn kmeans_fit(samples: &[Vec<f32>], k: usize, iters: usize, seed: u64) -> Result<Codebook> {
    kmeans_fit_traced(samples, k, iters, seed).map(|f| f.codebook)
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_fit_traced(samples: &[Vec<f32>], k: usize, iters: usize, seed: u64) -> Result<KmeansFit> {
    if k < 2 {
        return Err(BaselineError::Param(format!("k = {k}")));
    }
    if samples.len() < k {
        return Err(BaselineError::TooFewSamples { k, got: samples.len() });
    }
    let dim = samples[0].len();
    if let Some(s) = samples.iter().find(|s| s.len() != dim) {
        return Err(BaselineError::Dimension { expected: dim, got: s.len() });
    }
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let first = rng.random_range(0..n);
    let mut centers: Vec<Vec<f64>> = vec![samples[first].iter().map(|&v| f64::from(v)).collect()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist64(s, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(BaselineError::TooFewDistinct { k, distinct: centers.len() });
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        while d2[pick] <= 0.0 {
            pick -= 1;
        }
        let c: Vec<f64> = samples[pick].iter().map(|&v| f64::from(v)).collect();
        for (i, s) in samples.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist64(s, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..iters {
        let mut changed = false;
        let mut obj = 0.0;
        let mut dists = vec![0.0; n];
        for (i, s) in samples.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist64(s, ctr);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[i] != best.1 {
                changed = true;
                assign[i] = best.1;
            }
            dists[i] = best.0;
            obj += best.0;
        }
        objective.push(obj);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, s) in samples.iter().enumerate() {
            counts[assign[i]] += 1;
            for (a, &v) in sums[assign[i]].iter_mut().zip(s) {
                *a += f64::from(v);
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k");
                taken[far] = true;
                dists[far] = 0.0;
                centers[c] = samples[far].iter().map(|&v| f64::from(v)).collect();
            }
        }
    }
    let centroids = centers.into_iter().flatten().map(|v| v as f32).collect();
    Ok(KmeansFit { codebook: Codebook { k, dim, seed, centroids }, objective })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BowHistogram(pub Vec<f32>);

pub fn bow_encode(desc: &HogDescriptor, book: &Codebook) -> Result<BowHistogram> {
    if desc.patch_dim() != book.dim {
        return Err(BaselineError::Dimension { expected: book.dim, got: desc.patch_dim() });
    }
    Ok(bow_from_patches(&desc.patches(), book))
}

fn bow_from_patches(patches: &[Vec<f32>], book: &Codebook) -> BowHistogram {
    let mut counts = vec![0usize; book.k];
    for p in patches {
        counts[book.nearest(p)] += 1;
    }
    let n = patches.len();
    BowHistogram(counts.into_iter().map(|c| if n > 0 { (c as f64 / n as f64) as f32 } else { 0.0 }).collect())
}

/// Rank `corpus` by Euclidean distance to `query`, ties by id.
pub fn baseline_rank(query: &BowHistogram, corpus: &[(String, BowHistogram)]) -> Result<RankedResults> {
    if corpus.is_empty() {
        return Err(BaselineError::EmptyCorpus);
    }
    let mut c = Vec::with_capacity(corpus.len());
    for (id, h) in corpus {
        if h.0.len() != query.0.len() {
            return Err(BaselineError::Dimension { expected: query.0.len(), got: h.0.len() });
        }
        c.push(Ranked { id: id.clone(), distance: sq_dist(&query.0, &h.0).sqrt() });
    }
    let n = c.len();
    Ok(RankedResults::from_candidates(c, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub width: usize,
    pub height: usize,
    pub hog: HogParams,
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    pub canny: CannyParams,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { width: 64, height: 128, hog: HogParams::default(), k: 256, iters: 50, seed: 0, canny: CannyParams::default() }
    }
}

/// Fitted baseline: preprocessing settings plus codebook.
#[derive(Debug, Clone)]
pub struct BowBaseline {
    pub config: BaselineConfig,
    pub codebook: Codebook,
}

impl BowBaseline {
    pub fn sketch_descriptor(config: &BaselineConfig, sketch: &GrayImage) -> Result<HogDescriptor> {
        let img = imaging::resize(sketch, config.width, config.height)?;
        hog(&img, config.hog)
    }

    pub fn screenshot_descriptor(config: &BaselineConfig, shot: &GrayImage) -> Result<HogDescriptor> {
        let img = imaging::resize(shot, config.width, config.height)?;
        let edges = imaging::canny(&img, config.canny)?;
        hog(&edges.to_gray(), config.hog)
    }

    /// Fit the codebook on patches from both sketches and screenshots.
    pub fn fit(config: BaselineConfig, sketches: &[GrayImage], screenshots: &[GrayImage]) -> Result<Self> {
        let mut patches = Vec::new();
        for s in sketches {
            patches.extend(Self::sketch_descriptor(&config, s)?.patches());
        }
        for s in screenshots {
            patches.extend(Self::screenshot_descriptor(&config, s)?.patches());
        }
        let codebook = kmeans_fit(&patches, config.k, config.iters, config.seed)?;
        Ok(Self { config, codebook })
    }

    pub fn encode_sketch(&self, sketch: &GrayImage) -> Result<BowHistogram> {
        bow_encode(&Self::sketch_descriptor(&self.config, sketch)?, &self.codebook)
    }

    pub fn encode_screenshot(&self, shot: &GrayImage) -> Result<BowHistogram> {
        bow_encode(&Self::screenshot_descriptor(&self.config, shot)?, &self.codebook)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_gives_zero_descriptor() {
        let d = hog(&GrayImage::filled(64, 64, 0.7), HogParams::default()).unwrap();
        assert_eq!(d.values.len(), 576);
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_sizes_are_padded_to_whole_blocks() {
        let d = hog(&GrayImage::filled(20, 9, 0.0), HogParams::default()).unwrap();
        assert_eq!((d.cells_x, d.cells_y), (4, 2));
        assert_eq!(d.patches().len(), 2);
    }

    #[test]
    fn codebook_bytes_round_trip() {
        let book = Codebook { k: 2, dim: 3, seed: 9, centroids: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5] };
        let b = book.to_bytes();
        assert_eq!(&b[..6], b"SWBOW1");
        assert_eq!(Codebook::from_bytes(&b).unwrap(), book);
        assert!(Codebook::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn kmeans_two_clusters_1d() {
        let s: Vec<Vec<f32>> = [0.0, 0.0, 10.0, 10.0].iter().map(|&v| vec![v]).collect();
        let mut c = kmeans_fit(&s, 2, 10, 3).unwrap().centroids;
        c.sort_by(f32::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
    }

    #[test]
    fn kmeans_rejects_degenerate_input() {
        let s = vec![vec![1.0f32]; 5];
        assert!(matches!(kmeans_fit(&s, 2, 5, 0), Err(BaselineError::TooFewDistinct { .. })));
        assert!(matches!(kmeans_fit(&s[..1], 2, 5, 0), Err(BaselineError::TooFewSamples { .. })));
    }

    #[test]
    fn bow_hand_count() {
        let book = Codebook { k: 3, dim: 1, seed: 0, centroids: vec![0.0, 5.0, 10.0] };
        let h = bow_from_patches(&[vec![0.1], vec![-1.0], vec![9.0]], &book);
        assert_eq!(h.0, vec![(2.0f64 / 3.0) as f32, 0.0, (1.0f64 / 3.0) as f32]);
        // equidistant from 0 and 5: lowest index wins
        assert_eq!(book.nearest(&[2.5]), 0);
    }

    #[test]
    fn rank_two_items() {
        let corpus = vec![("far".to_string(), BowHistogram(vec![2.0])), ("near".to_string(), BowHistogram(vec![1.0]))];
        let r = baseline_rank(&BowHistogram(vec![0.0]), &corpus).unwrap();
        assert_eq!(r.ids(), ["near", "far"]);
        assert!(matches!(baseline_rank(&BowHistogram(vec![0.0]), &[]), Err(BaselineError::EmptyCorpus)));
    }
}
