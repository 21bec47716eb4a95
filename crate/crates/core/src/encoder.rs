//! Twin convolutional encoders mapping sketches and screenshots to 64-d
//! embeddings.
//!
//! Both branches share a topology but never storage. Five conv blocks (one
//! 3x3 conv in the first two, two in the rest), each followed by 2x2 max
//! pooling, then three dense layers. ReLU follows every layer but the last.
//! Flattening is channel-major, row-major.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, GrayImage, ImagingError};
use crate::numerics::{conv2d_forward, dense_forward, maxpool2_forward, NumericsError, Tape, Tensor, Var};

pub const EMBEDDING_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("embedding must have {EMBEDDING_DIM} finite values, got {0} values")]
    BadEmbedding(usize),
    #[error("input shape {got:?}, expected {want:?}")]
    InputShape { want: Vec<usize>, got: Vec<usize> },
    #[error("shape mismatch for {name}: file has {file:?}, config wants {want:?}")]
    TensorShape { name: String, file: Vec<usize>, want: Vec<usize> },
    #[error("corrupt weights file: {0}")]
    Corrupt(String),
    #[error("weights file has no {0} branch")]
    MissingBranch(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Exactly 64 finite values.
#[derive(Clone, Copy, PartialEq)]
pub struct Embedding([f32; EMBEDDING_DIM]);

impl std::fmt::Debug for Embedding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("Embedding").field(&&self.0[..]).finish()
    }
}

impl Embedding {
    pub fn new(v: Vec<f32>) -> Result<Self> {
        Self::from_slice(&v)
    }

    pub fn from_slice(v: &[f32]) -> Result<Self> {
        if v.len() != EMBEDDING_DIM || v.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::BadEmbedding(v.len()));
        }
        let mut a = [0.0; EMBEDDING_DIM];
        a.copy_from_slice(v);
        Ok(Self(a))
    }

    pub fn zeros() -> Self {
        Self([0.0; EMBEDDING_DIM])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    #[default]
    Glorot,
    /// Uniform in ±sqrt(6 / fan_in).
    He,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub profile: String,
    pub input_size: usize,
    pub input_channels: usize,
    pub block_filters: [usize; 5],
    pub fc_sizes: [usize; 3],
    #[serde(default)]
    pub init: InitScheme,
    /// Scale embeddings to unit length after the last layer.
    #[serde(default)]
    pub normalize_output: bool,
}

/// Added under the square root when normalizing embeddings.
pub const NORM_EPS: f32 = 1e-12;

/// Conv layers per block.
pub const BLOCK_DEPTHS: [usize; 5] = [1, 1, 2, 2, 2];

impl EncoderConfig {
    pub fn full() -> Self {
        Self {
            profile: "full".into(),
            input_size: 224,
            input_channels: 1,
            block_filters: [64, 128, 256, 512, 512],
            fc_sizes: [4096, 4096, EMBEDDING_DIM],
            init: InitScheme::Glorot,
            normalize_output: false,
        }
    }

    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            input_size: 64,
            input_channels: 1,
            block_filters: [8, 16, 32, 64, 64],
            fc_sizes: [256, 256, EMBEDDING_DIM],
            init: InitScheme::Glorot,
            normalize_output: false,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(EncoderError::Config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("input size {} not a positive multiple of 32", self.input_size));
        }
        if self.input_channels == 0 {
            return bad("zero input channels".into());
        }
        if self.block_filters.contains(&0) || self.fc_sizes.contains(&0) {
            return bad("zero-width layer".into());
        }
        if self.fc_sizes[2] != EMBEDDING_DIM {
            return bad(format!("final layer must have {EMBEDDING_DIM} units, got {}", self.fc_sizes[2]));
        }
        Ok(())
    }

    /// Spatial side after the five pooling stages.
    pub fn final_side(&self) -> usize {
        self.input_size / 32
    }

    pub fn flat_features(&self) -> usize {
        self.block_filters[4] * self.final_side() * self.final_side()
    }

    /// Ordered (name, shape) of every parameter tensor of one branch.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for (b, (&f, &depth)) in self.block_filters.iter().zip(&BLOCK_DEPTHS).enumerate() {
            for j in 0..depth {
                out.push((format!("conv{}_{}.w", b + 1, j + 1), vec![f, cin, 3, 3]));
                out.push((format!("conv{}_{}.b", b + 1, j + 1), vec![f]));
                cin = f;
            }
        }
        let mut n = self.flat_features();
        for (i, &m) in self.fc_sizes.iter().enumerate() {
            out.push((format!("fc{}.w", i + 1), vec![m, n]));
            out.push((format!("fc{}.b", i + 1), vec![m]));
            n = m;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.input_channels, self.input_size, self.input_size]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Sketch,
    Screenshot,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Sketch => "sketch",
            Branch::Screenshot => "screenshot",
        }
    }
}

/// Parameters of one branch, in [`EncoderConfig::layer_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub branch: Branch,
    pub config: EncoderConfig,
    pub params: Vec<Tensor>,
}

fn init_tensor(shape: &[usize], scheme: InitScheme, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    if shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let (fan_in, fan_out) = match shape {
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        [o, i] => (*i, *o),
        _ => unreachable!("parameters are 1-, 2- or 4-D"),
    };
    let limit = match scheme {
        InitScheme::Glorot => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        InitScheme::He => (6.0 / fan_in as f64).sqrt(),
    } as f32;
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let values = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape.to_vec(), values).expect("shape matches")
}

impl EncoderWeights {
    pub fn init(config: &EncoderConfig, branch: Branch, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let params = config.layer_shapes().iter().map(|(_, s)| init_tensor(s, config.init, rng)).collect();
        Ok(Self { branch, config: config.clone(), params })
    }

    pub fn zeros(config: &EncoderConfig, branch: Branch) -> Result<Self> {
        config.validate()?;
        let params = config.layer_shapes().iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Ok(Self { branch, config: config.clone(), params })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layer_shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// Inference forward pass on `n` images laid out `[n, c, s, s]`.
    pub fn forward_batch(&self, x: &[f32], n: usize) -> Result<Vec<Embedding>> {
        let c = &self.config;
        let per = c.input_channels * c.input_size * c.input_size;
        if x.len() != n * per {
            return Err(EncoderError::InputShape { want: vec![n, c.input_channels, c.input_size, c.input_size], got: vec![x.len()] });
        }
        let mut act = x.to_vec();
        let (mut ch, mut side) = (c.input_channels, c.input_size);
        let mut p = self.params.iter();
        for (&f, &depth) in c.block_filters.iter().zip(&BLOCK_DEPTHS) {
            for _ in 0..depth {
                let (w, b) = (p.next().expect("conv w"), p.next().expect("conv b"));
                act = conv2d_forward(&act, n, ch, side, side, w.values(), f, b.values(), None);
                act.iter_mut().for_each(|v| *v = v.max(0.0));
                ch = f;
            }
            act = maxpool2_forward(&act, n * ch, side, side).0;
            side /= 2;
        }
        let mut width = ch * side * side;
        for (i, &m) in c.fc_sizes.iter().enumerate() {
            let (w, b) = (p.next().expect("fc w"), p.next().expect("fc b"));
            act = dense_forward(&act, n, width, w.values(), m, b.values());
            if i + 1 < c.fc_sizes.len() {
                act.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            width = m;
        }
        if c.normalize_output {
            for row in act.chunks_exact_mut(EMBEDDING_DIM) {
                let ss: f64 = row.iter().map(|v| f64::from(*v) * f64::from(*v)).sum();
                let n = (ss + f64::from(NORM_EPS)).sqrt() as f32;
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        act.chunks_exact(EMBEDDING_DIM).map(Embedding::from_slice).collect()
    }

    /// Embed one preprocessed image of shape `[c, s, s]`.
    pub fn encode(&self, img: &Tensor) -> Result<Embedding> {
        if img.shape() != self.config.input_shape() {
            return Err(EncoderError::InputShape { want: self.config.input_shape(), got: img.shape().to_vec() });
        }
        Ok(self.forward_batch(img.values(), 1)?.remove(0))
    }

    /// Register every parameter as a trainable leaf.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_requires_grad(true);
                tape.leaf(&t)
            })
            .collect()
    }

    /// Recorded forward pass; `x` is `[n, c, s, s]`, result `[n, 64]`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let c = &self.config;
        let n = tape.shape(x)[0];
        let mut v = vars.iter().copied();
        let mut h = x;
        for &depth in &BLOCK_DEPTHS {
            for _ in 0..depth {
                let (w, b) = (v.next().expect("conv w"), v.next().expect("conv b"));
                h = tape.conv2d(h, w, b)?;
                h = tape.relu(h)?;
            }
            h = tape.maxpool2(h)?;
        }
        h = tape.reshape(h, vec![n, c.flat_features()])?;
        for i in 0..c.fc_sizes.len() {
            let (w, b) = (v.next().expect("fc w"), v.next().expect("fc b"));
            h = tape.dense(h, w, b)?;
            if i + 1 < c.fc_sizes.len() {
                h = tape.relu(h)?;
            }
        }
        if c.normalize_output {
            h = tape.l2_normalize_rows(h, NORM_EPS)?;
        }
        Ok(h)
    }
}

/// Resize and normalize a grayscale image into encoder input.
pub fn preprocess(img: &GrayImage, config: &EncoderConfig) -> Result<Tensor> {
    let s = config.input_size;
    let t = imaging::normalize_signed(&imaging::resize(img, s, s)?);
    if config.input_channels == 1 {
        return Ok(t);
    }
    let mut values = Vec::with_capacity(config.input_channels * s * s);
    for _ in 0..config.input_channels {
        values.extend_from_slice(t.values());
    }
    Ok(Tensor::from_vec(config.input_shape(), values)?)
}

/// Both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub sketch: EncoderWeights,
    pub screenshot: EncoderWeights,
}

const MAGIC: &[u8; 6] = b"SWENC1";

impl Encoder {
    /// Deterministic init; the sketch branch draws first from one seeded stream.
    pub fn build(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sketch = EncoderWeights::init(config, Branch::Sketch, &mut rng)?;
        let screenshot = EncoderWeights::init(config, Branch::Screenshot, &mut rng)?;
        Ok(Self { sketch, screenshot })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.sketch.config
    }

    pub fn branch(&self, b: Branch) -> &EncoderWeights {
        match b {
            Branch::Sketch => &self.sketch,
            Branch::Screenshot => &self.screenshot,
        }
    }

    pub fn encode_image(&self, b: Branch, img: &GrayImage) -> Result<Embedding> {
        self.branch(b).encode(&preprocess(img, self.config())?)
    }

    /// Embed many images, `chunk` at a time.
    pub fn encode_images(&self, b: Branch, imgs: &[GrayImage], chunk: usize) -> Result<Vec<Embedding>> {
        let w = self.branch(b);
        let mut out = Vec::with_capacity(imgs.len());
        for group in imgs.chunks(chunk.max(1)) {
            let mut x = Vec::new();
            for img in group {
                x.extend_from_slice(preprocess(img, self.config())?.values());
            }
            out.extend(w.forward_batch(&x, group.len())?);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        let put = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
        let profile = c.profile.as_bytes();
        put(&mut b, profile.len());
        b.extend_from_slice(profile);
        put(&mut b, c.input_size);
        put(&mut b, c.input_channels);
        c.block_filters.iter().for_each(|&f| put(&mut b, f));
        c.fc_sizes.iter().for_each(|&f| put(&mut b, f));
        put(&mut b, c.init as usize);
        put(&mut b, usize::from(c.normalize_output));
        let shapes = c.layer_shapes();
        put(&mut b, 2 * shapes.len());
        for w in [&self.sketch, &self.screenshot] {
            for ((name, shape), t) in shapes.iter().zip(&w.params) {
                let full = format!("{}.{name}", w.branch.name());
                put(&mut b, full.len());
                b.extend_from_slice(full.as_bytes());
                put(&mut b, shape.len());
                shape.iter().for_each(|&d| put(&mut b, d));
                for v in t.values() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes, None)
    }

    /// Decode, requiring the file's architecture to equal `expect`.
    pub fn from_bytes_expecting(bytes: &[u8], expect: &EncoderConfig) -> Result<Self> {
        Self::decode(bytes, Some(expect))
    }

    fn decode(bytes: &[u8], expect: Option<&EncoderConfig>) -> Result<Self> {
        let corrupt = |m: &str| EncoderError::Corrupt(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut cur = Cursor { buf: &body[MAGIC.len()..] };
        let plen = cur.u32()?;
        let profile = String::from_utf8(cur.take(plen)?.to_vec()).map_err(|_| corrupt("profile is not utf-8"))?;
        let input_size = cur.u32()?;
        let input_channels = cur.u32()?;
        let mut block_filters = [0; 5];
        for f in &mut block_filters {
            *f = cur.u32()?;
        }
        let mut fc_sizes = [0; 3];
        for f in &mut fc_sizes {
            *f = cur.u32()?;
        }
        let init = match cur.u32()? {
            0 => InitScheme::Glorot,
            1 => InitScheme::He,
            _ => return Err(corrupt("unknown init scheme")),
        };
        let normalize_output = match cur.u32()? {
            0 => false,
            1 => true,
            _ => return Err(corrupt("bad normalization flag")),
        };
        let file_cfg = EncoderConfig { profile, input_size, input_channels, block_filters, fc_sizes, init, normalize_output };
        file_cfg.validate().map_err(|e| EncoderError::Corrupt(e.to_string()))?;
        let config = match expect {
            Some(want) => {
                if want.input_size != file_cfg.input_size || want.normalize_output != file_cfg.normalize_output {
                    return Err(EncoderError::TensorShape {
                        name: "input".into(),
                        file: file_cfg.input_shape(),
                        want: want.input_shape(),
                    });
                }
                let mismatch = file_cfg.layer_shapes().into_iter().zip(want.layer_shapes()).find(|(a, b)| a != b);
                if let Some(((name, file), (_, want))) = mismatch {
                    return Err(EncoderError::TensorShape { name, file, want });
                }
                want.clone()
            }
            None => file_cfg,
        };
        let shapes = config.layer_shapes();
        let count = cur.u32()?;
        if count != 2 * shapes.len() {
            return Err(EncoderError::Corrupt(format!("{count} tensors, expected {}", 2 * shapes.len())));
        }
        let mut branches = Vec::new();
        for branch in [Branch::Sketch, Branch::Screenshot] {
            let mut params = Vec::new();
            for (name, shape) in &shapes {
                let nlen = cur.u32()?;
                let got = String::from_utf8(cur.take(nlen)?.to_vec()).map_err(|_| corrupt("name is not utf-8"))?;
                let full = format!("{}.{name}", branch.name());
                if got != full {
                    return Err(EncoderError::Corrupt(format!("expected tensor {full}, found {got}")));
                }
                let nd = cur.u32()?;
                let dims = (0..nd).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
                if &dims != shape {
                    return Err(EncoderError::TensorShape { name: full, file: dims, want: shape.clone() });
                }
                let n: usize = dims.iter().product();
                let raw = cur.take(4 * n)?;
                let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(EncoderError::Corrupt(format!("non-finite value in {full}")));
                }
                params.push(Tensor::from_vec(dims, values)?);
            }
            branches.push(EncoderWeights { branch, config: config.clone(), params });
        }
        if !cur.buf.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let screenshot = branches.pop().ok_or(EncoderError::MissingBranch("screenshot"))?;
        let sketch = branches.pop().ok_or(EncoderError::MissingBranch("sketch"))?;
        Ok(Self { sketch, screenshot })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let tmp = path.as_ref().with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut b = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut b)?;
        Self::from_bytes(&b)
    }

    pub fn load_expecting(path: impl AsRef<Path>, config: &EncoderConfig) -> Result<Self> {
        let mut b = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut b)?;
        Self::from_bytes_expecting(&b, config)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(EncoderError::Corrupt("truncated".into()));
        }
        let (h, t) = self.buf.split_at(n);
        self.buf = t;
        Ok(h)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}
