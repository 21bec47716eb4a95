//! Top-k retrieval metrics and the comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{baseline_rank, BaselineError, BowBaseline};
use crate::encoder::{Branch, Embedding, Encoder, EncoderError};
use crate::imaging::GrayImage;
use crate::index::{euclidean, Index, IndexError, IndexedItem, RankedResults};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{rankings} rankings but {truths} ground-truth ids")]
    LengthMismatch { rankings: usize, truths: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("empty test set")]
    Empty,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Fraction of queries whose truth id is among the first `k` results.
pub fn topk_accuracy(rankings: &[RankedResults], truth: &[String], k: usize) -> Result<f64> {
    if rankings.len() != truth.len() {
        return Err(EvalError::LengthMismatch { rankings: rankings.len(), truths: truth.len() });
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if rankings.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = rankings.iter().zip(truth).filter(|(r, t)| r.rank_of(t).is_some_and(|p| p <= k)).count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// 1-based rank of candidate `i` for query `i`, using the index ordering
/// (distance, then id).
pub fn match_ranks(queries: &[Embedding], candidates: &[Embedding], ids: &[String]) -> Vec<usize> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let own = euclidean(q, &candidates[i]);
            1 + candidates
                .iter()
                .enumerate()
                .filter(|&(j, c)| {
                    let d = euclidean(q, c);
                    j != i && (d < own || (d == own && ids[j] < ids[i]))
                })
                .count()
        })
        .collect()
}

pub fn top_k_rate(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Expected top-k accuracy of a uniformly random ranking over `n` items.
pub fn chance_topk(n: usize, k: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    k.min(n) as f64 / n as f64
}

/// Top-k hit rate over `trials` random permutations of `n` items.
pub fn simulate_chance(n: usize, k: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut hits = 0;
    for _ in 0..trials {
        order.shuffle(&mut rng);
        // item 0 plays the ground truth
        if order[..k.min(n)].contains(&0) {
            hits += 1;
        }
    }
    hits as f64 / trials.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub name: String,
    pub top1: f64,
    pub top10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodRow>,
    pub n: usize,
    pub fingerprints: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodRow> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Plain-text table, one row per method.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>9} {:>9}", "Method", "Top-1", "Top-10");
        for m in &self.methods {
            let _ = writeln!(s, "{:<12} {:>8.3}% {:>8.2}%", m.name, 100.0 * m.top1, 100.0 * m.top10);
        }
        let _ = writeln!(s, "n = {}", self.n);
        s
    }
}

/// Test pairs, by id.
pub struct TestSet<'a> {
    pub ids: Vec<String>,
    pub sketches: Vec<&'a GrayImage>,
    pub screenshots: Vec<&'a GrayImage>,
}

/// Query every test sketch against all test screenshots with each method.
/// Rows: chance, then the baseline, then the encoder, whichever are given.
pub fn run_eval(test: &TestSet<'_>, encoder: Option<&Encoder>, baseline: Option<&BowBaseline>) -> Result<EvalReport> {
    let n = test.ids.len();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let mut methods = vec![MethodRow { name: "chance".into(), top1: chance_topk(n, 1), top10: chance_topk(n, 10) }];
    let mut fingerprints = BTreeMap::new();

    if let Some(b) = baseline {
        let corpus = test
            .ids
            .iter()
            .zip(&test.screenshots)
            .map(|(id, s)| Ok((id.clone(), b.encode_screenshot(s)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut rankings = Vec::with_capacity(n);
        for s in &test.sketches {
            rankings.push(baseline_rank(&b.encode_sketch(s)?, &corpus)?);
        }
        methods.push(MethodRow {
            name: "bow-hog".into(),
            top1: topk_accuracy(&rankings, &test.ids, 1)?,
            top10: topk_accuracy(&rankings, &test.ids, 10)?,
        });
        fingerprints.insert("codebook".into(), crate::index::fingerprint_bytes(&b.codebook.to_bytes()));
    }

    if let Some(e) = encoder {
        let shots: Vec<GrayImage> = test.screenshots.iter().map(|s| (*s).clone()).collect();
        let sketches: Vec<GrayImage> = test.sketches.iter().map(|s| (*s).clone()).collect();
        let se = e.encode_images(Branch::Screenshot, &shots, 32)?;
        let qe = e.encode_images(Branch::Sketch, &sketches, 32)?;
        let index = Index::build(test.ids.iter().zip(se).map(|(id, emb)| IndexedItem::new(id.clone(), emb)).collect())?;
        let rankings = qe.iter().map(|q| index.query_full(q, n)).collect::<std::result::Result<Vec<_>, _>>()?;
        methods.push(MethodRow {
            name: "encoder".into(),
            top1: topk_accuracy(&rankings, &test.ids, 1)?,
            top10: topk_accuracy(&rankings, &test.ids, 10)?,
        });
        fingerprints.insert("weights".into(), crate::index::fingerprint_bytes(&e.to_bytes()));
        fingerprints.insert("index".into(), index.fingerprint());
    }
    Ok(EvalReport { methods, n, fingerprints })
}
