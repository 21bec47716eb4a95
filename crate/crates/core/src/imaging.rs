//! Raster types and the image operations used across the pipeline:
//! preprocessing for the encoders, Canny edges for the baseline, and
//! four-corner rectification plus thresholding for photographed sketches.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid image dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("pixel buffer length {got} does not match {expected}")]
    BufferLength { expected: usize, got: usize },
    #[error("pixel values must be finite and within [0, 1]")]
    OutOfRange,
    #[error("canny thresholds must satisfy 0 < low < high <= 1 (got low={low}, high={high})")]
    ThresholdOrder { low: f64, high: f64 },
    #[error("canny sigma must be positive (got {0})")]
    Sigma(f64),
    #[error("degenerate quadrilateral: {0}")]
    DegenerateQuad(&'static str),
    #[error("image io: {0}")]
    Io(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Single-channel raster, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        if data.len() != width * height {
            return Err(ImagingError::BufferLength { expected: width * height, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(ImagingError::OutOfRange);
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self { width, height, data: vec![value.clamp(0.0, 1.0); width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Clamp-to-edge lookup with signed coordinates.
    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Crop the rectangle `[x0, x0+w) x [y0, y0+h)`; the rectangle must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(ImagingError::InvalidDimensions { width: w, height: h });
        }
        Ok(Self::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers on integers).
    /// Returns `None` outside `[-0.5, w-0.5] x [-0.5, h-0.5]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f32> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= -0.5 && x <= w - 0.5 && y >= -0.5 && y <= h - 0.5) {
            return None;
        }
        let x = x.clamp(0.0, w - 1.0);
        let y = y.clamp(0.0, h - 1.0);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let top = lerp(self.get(x0, y0), self.get(x1, y0), fx);
        let bottom = lerp(self.get(x0, y1), self.get(x1, y1), fx);
        Some(lerp(top, bottom, fy))
    }
}

/// `a + (b - a) * t`; exact when `a == b`, which keeps constant images constant.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Interleaved RGB raster, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        if data.len() != 3 * width * height {
            return Err(ImagingError::BufferLength { expected: 3 * width * height, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(ImagingError::OutOfRange);
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Binary edge mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl EdgeMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Edges as a gray raster (edge = 1.0).
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Four corners ordered top-left, top-right, bottom-right, bottom-left.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuadCorners(pub [Point; 4]);

impl QuadCorners {
    /// Corners of the continuous rectangle `[0, w] x [0, h]` shifted by `(x0, y0)`.
    pub fn rect(x0: f64, y0: f64, w: f64, h: f64) -> Self {
        Self([
            Point::new(x0, y0),
            Point::new(x0 + w, y0),
            Point::new(x0 + w, y0 + h),
            Point::new(x0, y0 + h),
        ])
    }

    /// Signed shoelace area; positive for the clockwise-on-screen (y down) ordering used here.
    pub fn signed_area(&self) -> f64 {
        let p = &self.0;
        let mut acc = 0.0;
        for i in 0..4 {
            let a = p[i];
            let b = p[(i + 1) % 4];
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }

    /// Rejects near-collinear corner triples, self-intersecting and inverted quads.
    pub fn validate(&self) -> Result<()> {
        let p = &self.0;
        if p.iter().any(|c| !c.x.is_finite() || !c.y.is_finite()) {
            return Err(ImagingError::DegenerateQuad("non-finite corner"));
        }
        let scale = p
            .iter()
            .flat_map(|a| p.iter().map(move |b| (a.x - b.x).hypot(a.y - b.y)))
            .fold(0.0_f64, f64::max);
        if scale <= 1e-9 {
            return Err(ImagingError::DegenerateQuad("coincident corners"));
        }
        // Each consecutive corner triple must turn the same way with a non-trivial area;
        // that excludes collinear triples, bow-ties and reflex (non-convex) corners.
        let tol = 1e-6 * scale * scale;
        for i in 0..4 {
            let a = p[i];
            let b = p[(i + 1) % 4];
            let c = p[(i + 2) % 4];
            let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
            if cross <= tol {
                return Err(ImagingError::DegenerateQuad(
                    "corners are collinear, self-intersecting or out of order",
                ));
            }
        }
        Ok(())
    }
}

/// 3x3 projective transform acting on homogeneous `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Projective map taking `src[i]` to `dst[i]` for the four corners.
    ///
    /// The eight unknowns (h33 fixed to 1) come from the stacked 8x8 system,
    /// solved in the least-squares sense through an SVD pseudo-inverse.
    pub fn from_quads(src: &QuadCorners, dst: &QuadCorners) -> Result<Self> {
        src.validate()?;
        dst.validate()?;
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (s, d)) in src.0.iter().zip(dst.0.iter()).enumerate() {
            let r = 2 * i;
            a[(r, 0)] = s.x;
            a[(r, 1)] = s.y;
            a[(r, 2)] = 1.0;
            a[(r, 6)] = -s.x * d.x;
            a[(r, 7)] = -s.y * d.x;
            b[r] = d.x;
            a[(r + 1, 3)] = s.x;
            a[(r + 1, 4)] = s.y;
            a[(r + 1, 5)] = 1.0;
            a[(r + 1, 6)] = -s.x * d.y;
            a[(r + 1, 7)] = -s.y * d.y;
            b[r + 1] = d.y;
        }
        let h = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|_| ImagingError::DegenerateQuad("singular correspondence system"))?;
        let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
        if m.iter().any(|v| !v.is_finite()) || m.determinant().abs() < 1e-12 {
            return Err(ImagingError::DegenerateQuad("singular homography"));
        }
        Ok(Self(m))
    }

    /// Least-squares affine fit (six parameters) to the four correspondences.
    pub fn affine_from_quads(src: &QuadCorners, dst: &QuadCorners) -> Result<Self> {
        src.validate()?;
        dst.validate()?;
        let mut a = SMatrix::<f64, 8, 6>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (s, d)) in src.0.iter().zip(dst.0.iter()).enumerate() {
            let r = 2 * i;
            a[(r, 0)] = s.x;
            a[(r, 1)] = s.y;
            a[(r, 2)] = 1.0;
            b[r] = d.x;
            a[(r + 1, 3)] = s.x;
            a[(r + 1, 4)] = s.y;
            a[(r + 1, 5)] = 1.0;
            b[r + 1] = d.y;
        }
        let h = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|_| ImagingError::DegenerateQuad("singular correspondence system"))?;
        let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], 0.0, 0.0, 1.0);
        if m.determinant().abs() < 1e-12 {
            return Err(ImagingError::DegenerateQuad("singular affine map"));
        }
        Ok(Self(m))
    }

    pub fn inverse(&self) -> Result<Self> {
        self.0
            .try_inverse()
            .map(Self)
            .ok_or(ImagingError::DegenerateQuad("homography not invertible"))
    }

    pub fn apply(&self, p: Point) -> Point {
        let v = self.0 * Vector3::new(p.x, p.y, 1.0);
        Point::new(v.x / v.z, v.y / v.z)
    }
}

/// Luminance reduction `0.299 R + 0.587 G + 0.114 B`.
pub fn to_gray(img: &RgbImage) -> GrayImage {
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).clamp(0.0, 1.0))
        .collect();
    GrayImage { width: img.width, height: img.height, data }
}

/// Bilinear resize with pixel-center alignment.
pub fn resize(img: &GrayImage, w: usize, h: usize) -> Result<GrayImage> {
    if w == 0 || h == 0 {
        return Err(ImagingError::InvalidDimensions { width: w, height: h });
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            // in range by construction
            data.push(img.sample_bilinear(fx, fy).unwrap_or(1.0));
        }
    }
    Ok(GrayImage { width: w, height: h, data })
}

/// Affine map `v -> 2v - 1` into a `(1, h, w)` tensor.
pub fn normalize_signed(img: &GrayImage) -> Tensor {
    let values = img.data.iter().map(|v| 2.0 * v - 1.0).collect();
    Tensor::from_vec(vec![1, img.height, img.width], values)
        .expect("shape matches pixel count by construction")
}

/// Pixels below `thresh` become ink (0), the rest paper (1).
pub fn binarize(img: &GrayImage, thresh: f32) -> GrayImage {
    let data = img.data.iter().map(|&v| if v < thresh { 0.0 } else { 1.0 }).collect();
    GrayImage { width: img.width, height: img.height, data }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: 1.4, low: 0.1, high: 0.2 }
    }
}

/// Normalized 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with edge replication, in double precision.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * f64::from(img.get_clamped(x as isize + i as isize - r, y as isize));
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Sobel gradients `(gx, gy)` of a row-major field with edge replication.
pub fn sobel(field: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        field[y * w + x]
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Canny edge detector. Thresholds are fractions of the maximum gradient magnitude.
pub fn canny(img: &GrayImage, params: CannyParams) -> Result<EdgeMap> {
    let CannyParams { sigma, low, high } = params;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ImagingError::Sigma(sigma));
    }
    if !(low > 0.0 && low < high && high <= 1.0) {
        return Err(ImagingError::ThresholdOrder { low, high });
    }
    let (w, h) = (img.width, img.height);
    let smoothed = gaussian_blur(img, sigma);
    let (gx, gy) = sobel(&smoothed, w, h);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().copied().fold(0.0, f64::max);
    let mut out = EdgeMap { width: w, height: h, data: vec![0; w * h] };
    if max <= 1e-9 {
        return Ok(out);
    }
    // Magnitudes within `tie` of each other are treated as equal so that
    // rounding noise cannot split a symmetric ridge into two pixels.
    let tie = 1e-9 * max;
    let m_at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    let mut thin = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m <= tie {
                continue;
            }
            let (dx, dy) = quantize_direction(gx[i], gy[i]);
            let (xi, yi) = (x as isize, y as isize);
            let behind = m_at(xi - dx, yi - dy);
            let ahead = m_at(xi + dx, yi + dy);
            if m > behind + tie && m >= ahead - tie {
                thin[i] = m;
            }
        }
    }

    let hi = high * max;
    let lo = low * max;
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= hi - tie {
            out.data[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out.data[j] == 0 && thin[j] >= lo - tie && thin[j] > 0.0 {
                    out.data[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(out)
}

/// Gradient direction snapped to one of four neighbour offsets.
fn quantize_direction(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (1, 0)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

/// Inverse-warp `img` through `forward` (source -> destination) into a `dst_w x dst_h` raster.
/// Destination pixel centers sit at half-integers of the continuous frame; samples falling
/// outside the source read as paper white.
pub fn warp(img: &GrayImage, forward: &Homography, dst_w: usize, dst_h: usize) -> Result<GrayImage> {
    if dst_w == 0 || dst_h == 0 {
        return Err(ImagingError::InvalidDimensions { width: dst_w, height: dst_h });
    }
    let inv = forward.inverse()?;
    let mut data = Vec::with_capacity(dst_w * dst_h);
    for y in 0..dst_h {
        for x in 0..dst_w {
            let p = inv.apply(Point::new(x as f64 + 0.5, y as f64 + 0.5));
            let v = if p.x.is_finite() && p.y.is_finite() {
                img.sample_bilinear(p.x - 0.5, p.y - 0.5).unwrap_or(1.0)
            } else {
                1.0
            };
            data.push(v);
        }
    }
    Ok(GrayImage { width: dst_w, height: dst_h, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RectifyModel {
    #[default]
    Projective,
    Affine,
}

/// Map the quadrilateral `src` of `img` onto a `dst_w x dst_h` rectangle.
pub fn rectify(img: &GrayImage, src: &QuadCorners, dst_w: usize, dst_h: usize) -> Result<GrayImage> {
    rectify_with(img, src, dst_w, dst_h, RectifyModel::Projective)
}

pub fn rectify_with(
    img: &GrayImage,
    src: &QuadCorners,
    dst_w: usize,
    dst_h: usize,
    model: RectifyModel,
) -> Result<GrayImage> {
    if dst_w == 0 || dst_h == 0 {
        return Err(ImagingError::InvalidDimensions { width: dst_w, height: dst_h });
    }
    let dst = QuadCorners::rect(0.0, 0.0, dst_w as f64, dst_h as f64);
    let h = match model {
        RectifyModel::Projective => Homography::from_quads(src, &dst)?,
        RectifyModel::Affine => Homography::affine_from_quads(src, &dst)?,
    };
    warp(img, &h, dst_w, dst_h)
}

/// Dark components smaller than this many pixels are ignored as specks.
pub const MIN_MARKER_AREA: usize = 8;

/// Locate the four dark fiducial blobs and return their centroids, TL, TR, BR, BL.
///
/// Pixels below `thresh` are grouped into 4-connected components. For each
/// image corner the component (of at least [`MIN_MARKER_AREA`] pixels) whose
/// centroid lies nearest to it is taken; markers sit outside the drawing, so
/// they are closer to the image corners than any ink.
pub fn detect_markers(img: &GrayImage, thresh: f32) -> Result<QuadCorners> {
    let (w, h) = (img.width, img.height);
    let mut label = vec![usize::MAX; w * h];
    let mut blobs: Vec<(usize, f64, f64)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if label[start] != usize::MAX || img.data[start] >= thresh {
            continue;
        }
        let id = blobs.len();
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            n += 1;
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            let mut visit = |j: usize| {
                if label[j] == usize::MAX && img.data[j] < thresh {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        blobs.push((n, sx / n as f64, sy / n as f64));
    }
    let pts: Vec<Point> = blobs.iter().filter(|b| b.0 >= MIN_MARKER_AREA).map(|b| Point::new(b.1, b.2)).collect();
    if pts.len() < 4 {
        return Err(ImagingError::DegenerateQuad("fewer than four dark markers found"));
    }
    let (fw, fh) = (w as f64, h as f64);
    let mut quad = [Point::new(0.0, 0.0); 4];
    for (slot, (cx, cy)) in quad.iter_mut().zip([(0.0, 0.0), (fw, 0.0), (fw, fh), (0.0, fh)]) {
        let d = |p: &Point| (p.x - cx).powi(2) + (p.y - cy).powi(2);
        *slot = *pts.iter().min_by(|a, b| d(a).total_cmp(&d(b))).expect("nonempty");
    }
    let quad = QuadCorners(quad);
    quad.validate()?;
    Ok(quad)
}

/// Page corners implied by marker centroids, for markers centered `offset`
/// page units diagonally outside each corner of a `page_w x page_h` page.
pub fn page_from_markers(markers: &QuadCorners, page_w: f64, page_h: f64, offset: f64) -> Result<QuadCorners> {
    let sheet = QuadCorners::rect(-offset, -offset, page_w + 2.0 * offset, page_h + 2.0 * offset);
    let hmg = Homography::from_quads(&sheet, markers)?;
    let page = QuadCorners::rect(0.0, 0.0, page_w, page_h);
    let out = QuadCorners(page.0.map(|p| hmg.apply(p)));
    out.validate()?;
    Ok(out)
}

/// Decode any supported file (PNG, JPEG) into luminance gray.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let img = image::open(path)?;
    Ok(from_dynamic(&img))
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory(bytes)?;
    Ok(from_dynamic(&img))
}

fn from_dynamic(img: &image::DynamicImage) -> GrayImage {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    to_gray(&RgbImage { width: w as usize, height: h as usize, data })
}

fn to_luma8(img: &GrayImage) -> image::GrayImage {
    let raw = img.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    image::GrayImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer length checked at construction")
}

/// Write 8-bit PNG; binary images come out as {0, 255}.
pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    to_luma8(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    to_luma8(img).write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}
