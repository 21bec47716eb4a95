//! Optional TOML config file. Every value can also be given as a flag;
//! flags win. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use swire_core::trainer::LrSchedule;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {}: {source}", path.display())]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("grid must look like 3x3 or none, got {0:?}")]
    Grid(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub weights: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub port: Option<u16>,
    /// Segments grid as `RxC`, or `none`.
    pub grid: Option<String>,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub baseline: BaselineSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub profile: Option<String>,
    pub normalize_output: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub lr: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub batch_size: Option<usize>,
    pub margin: Option<f64>,
    pub seed: Option<u64>,
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub held_out: Option<String>,
    pub max_test_apps: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub k: Option<usize>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
    pub canny_sigma: Option<f64>,
    pub canny_low: Option<f64>,
    pub canny_high: Option<f64>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), source: Box::new(e) })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.weights, &mut cfg.index, &mut cfg.manifest, &mut cfg.codebook].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// `"3x3"` to `Some((3, 3))`; `"none"` to `None`.
pub fn parse_grid(s: &str) -> Result<Option<(usize, usize)>, ConfigError> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let bad = || ConfigError::Grid(s.to_string());
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (r, c): (usize, usize) = (r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?);
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok(Some((r, c)))
}
