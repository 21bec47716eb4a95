//! Triplet training of the twin encoders.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Manifest, PairRecord};
use crate::encoder::{preprocess, Embedding, Encoder, EncoderError};
use crate::eval::{match_ranks, top_k_rate};
use crate::imaging::GrayImage;
use crate::numerics::{sgd_step, NumericsError, Scalar, Tape, Tensor, Var, DEFAULT_LR};

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_BATCH: usize = 32;
/// Added under the square root of each distance.
pub const DIST_EPS: f32 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("margin must be positive, got {0}")]
    Margin(f64),
    #[error("non-finite input to the loss")]
    NonFinite,
    #[error("need at least 2 designers to split, found {0}")]
    TooFewDesigners(usize),
    #[error("designer {0:?} not in manifest")]
    UnknownDesigner(String),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, last_good: Box<Encoder> },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Share of the training pairs held back for validation.
    pub val_fraction: f64,
    pub schedule: LrSchedule,
}

/// Per-epoch learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at the first epoch towards 0 after the last.
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown lr schedule {other:?}; use constant or cosine")),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            margin: DEFAULT_MARGIN,
            epochs: 30,
            seed: 0,
            patience: Some(5),
            val_fraction: 0.1,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Learning rate used throughout `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = (epoch.saturating_sub(1)) as f64 / self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        if !(self.margin > 0.0) {
            return Err(TrainError::Margin(self.margin));
        }
        Ok(())
    }
}

/// `|es - ep| + max(0, m - |es - en|)`.
pub fn triplet_loss(es: &Embedding, ep: &Embedding, en: &Embedding, m: f64) -> Result<f64> {
    if !m.is_finite() || m <= 0.0 {
        return Err(TrainError::Margin(m));
    }
    let (es, ep, en) = (es.as_slice(), ep.as_slice(), en.as_slice());
    if [es, ep, en].iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(TrainError::NonFinite);
    }
    let exact = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>().sqrt()
    };
    Ok(exact(es, ep) + (m - exact(es, en)).max(0.0))
}

/// Recorded batch loss: mean over rows of the triplet loss, where row `r`
/// pairs `es[r]` with `ep[r]` and negative `ep[neg[r]]`.
pub fn triplet_loss_tape<T: Scalar>(tape: &mut Tape<T>, es: Var, ep: Var, neg: &[usize], m: f64) -> Result<Var> {
    let en = tape.gather_rows(ep, neg)?;
    let d = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var> {
        let diff = tape.sub(a, b)?;
        let sq = tape.mul(diff, diff)?;
        let ss = tape.sum_rows(sq)?;
        let ss = tape.add_scalar(ss, T::from_f64(f64::from(DIST_EPS)))?;
        Ok(tape.sqrt(ss)?)
    };
    let dp = d(tape, es, ep)?;
    let dn = d(tape, es, en)?;
    let flipped = tape.scale(dn, T::from_f64(-1.0))?;
    let gap = tape.add_scalar(flipped, T::from_f64(m))?;
    let hinge = tape.relu(gap)?;
    let per = tape.add(dp, hinge)?;
    Ok(tape.mean(per)?)
}

/// Indices into a pair list: sketch of `anchor`, screenshot of `positive`
/// (always the same pair) and screenshot of `negative`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One triplet per batch member; the negative is drawn uniformly from the
/// other members.
pub fn sample_batch(batch: &[usize], rng: &mut impl Rng) -> Result<Vec<Triplet>> {
    if batch.len() < 2 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    let n = batch.len();
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let j = (i + rng.random_range(1..n)) % n;
            Triplet { anchor: a, positive: a, negative: batch[j] }
        })
        .collect())
}

/// Shuffled epoch order cut into batches. A trailing singleton joins the
/// previous batch so every batch has a negative.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out.retain(|b| b.len() >= 2);
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    /// Defaults to the last designer in sorted order.
    pub held_out: Option<String>,
    /// Keep only the first N (sorted) apps of the held-out designer in test.
    pub max_test_apps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
    pub held_out: String,
    pub test_apps: Vec<String>,
    /// Pairs in neither side.
    pub dropped: usize,
}

/// Test = one designer's pairs; train = other designers' pairs on apps that
/// never appear in test.
pub fn split(m: &Manifest, policy: &SplitPolicy) -> Result<Split> {
    let designers = m.designers();
    if designers.len() < 2 {
        return Err(TrainError::TooFewDesigners(designers.len()));
    }
    let held_out = match &policy.held_out {
        Some(d) if designers.contains(d) => d.clone(),
        Some(d) => return Err(TrainError::UnknownDesigner(d.clone())),
        None => designers.last().expect("nonempty").clone(),
    };
    let mut apps: Vec<String> =
        m.pairs.iter().filter(|p| p.designer_id == held_out).map(|p| p.app_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if let Some(cap) = policy.max_test_apps {
        apps.truncate(cap);
    }
    let test_apps: BTreeSet<&String> = apps.iter().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for p in &m.pairs {
        if p.designer_id == held_out {
            if test_apps.contains(&p.app_id) {
                test.push(p.clone());
            }
        } else if !test_apps.contains(&p.app_id) {
            train.push(p.clone());
        }
    }
    let dropped = m.pairs.len() - train.len() - test.len();
    Ok(Split { train, test, held_out, test_apps: apps, dropped })
}

/// Deterministically move `fraction` of `items` into a validation list.
pub fn carve_validation<T>(mut items: Vec<T>, fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let n_val = ((items.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    if n_val < 2 || items.len() - n_val < 2 {
        return (items, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69_6461_7465);
    items.shuffle(&mut rng);
    let val = items.split_off(items.len() - n_val);
    (items, val)
}

/// Preprocessed image pairs, ready for batching.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub ids: Vec<String>,
    /// Values per image.
    pub per: usize,
    pub sketches: Vec<f32>,
    pub screenshots: Vec<f32>,
}

impl TrainSet {
    pub fn new(config: &crate::encoder::EncoderConfig, pairs: &[(String, GrayImage, GrayImage)]) -> Result<Self> {
        let per: usize = config.input_shape().iter().product();
        let mut set = Self { ids: Vec::new(), per, sketches: Vec::new(), screenshots: Vec::new() };
        for (id, sketch, shot) in pairs {
            set.ids.push(id.clone());
            set.sketches.extend_from_slice(preprocess(sketch, config)?.values());
            set.screenshots.extend_from_slice(preprocess(shot, config)?.values());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn gather(src: &[f32], per: usize, idx: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(per * idx.len());
        for &i in idx {
            out.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        out
    }

    /// Top-1 and top-10 rates of each sketch retrieving its own screenshot.
    pub fn retrieval(&self, enc: &Encoder) -> Result<(f64, f64)> {
        let all: Vec<usize> = (0..self.len()).collect();
        let mut qs = Vec::new();
        let mut cs = Vec::new();
        for chunk in all.chunks(64) {
            qs.extend(enc.sketch.forward_batch(&Self::gather(&self.sketches, self.per, chunk), chunk.len())?);
            cs.extend(enc.screenshot.forward_batch(&Self::gather(&self.screenshots, self.per, chunk), chunk.len())?);
        }
        let ranks = match_ranks(&qs, &cs, &self.ids);
        Ok((top_k_rate(&ranks, 1), top_k_rate(&ranks, 10)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_top1: Option<f64>,
    pub val_top10: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation weights when early stopping is on, otherwise the last epoch's.
    pub encoder: Encoder,
    pub trace: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

pub fn write_trace_csv(trace: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,step,loss,lr")?;
    for r in trace {
        writeln!(f, "{},{},{},{}", r.epoch, r.step, r.loss, r.lr)?;
    }
    f.flush()?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.swenc"))
}

/// One SGD step on the given batch; returns the batch loss.
pub fn train_step(enc: &mut Encoder, data: &TrainSet, batch: &[usize], margin: f64, lr: f64, rng: &mut impl Rng) -> Result<f64> {
    let triplets = sample_batch(batch, rng)?;
    let pos: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let slot = |id: usize| pos.iter().position(|&p| p == id).expect("negative is a batch member");
    let neg: Vec<usize> = triplets.iter().map(|t| slot(t.negative)).collect();
    let c = enc.config().clone();
    let shape = vec![batch.len(), c.input_channels, c.input_size, c.input_size];

    let mut tape = Tape::new();
    let vs = enc.sketch.attach(&mut tape);
    let vi = enc.screenshot.attach(&mut tape);
    let xs = tape.constant(shape.clone(), TrainSet::gather(&data.sketches, data.per, &pos))?;
    let xi = tape.constant(shape, TrainSet::gather(&data.screenshots, data.per, &pos))?;
    let es = enc.sketch.forward_tape(&mut tape, &vs, xs)?;
    let ei = enc.screenshot.forward_tape(&mut tape, &vi, xi)?;
    let loss = triplet_loss_tape(&mut tape, es, ei, &neg, margin)?;
    let value = f64::from(tape.value(loss)[0]);
    let grads = tape.backward(loss)?;

    let mut params: Vec<&mut Tensor> = Vec::new();
    for (w, vars) in [(&mut enc.sketch, &vs), (&mut enc.screenshot, &vi)] {
        for (p, v) in w.params.iter_mut().zip(vars) {
            p.set_requires_grad(true);
            grads.accumulate_into(*v, p)?;
            params.push(p);
        }
    }
    sgd_step(&mut params, lr)?;
    for p in params {
        p.set_requires_grad(false);
        p.clear_grad();
    }
    Ok(value)
}

/// Run SGD epochs. `progress` sees each finished epoch.
pub fn train(
    cfg: &TrainConfig,
    mut enc: Encoder,
    data: &TrainSet,
    val: Option<&TrainSet>,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(TrainError::EmptyTrainSet);
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let val = val.filter(|v| v.len() >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<((f64, f64), usize, Encoder)> = None;
    let mut stopped_early = false;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let start = std::time::Instant::now();
        let last_good = enc.clone();
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut rng);
        let lr = cfg.lr_at(epoch);
        for batch in &batches {
            step += 1;
            let loss = match train_step(&mut enc, data, batch, cfg.margin, lr, &mut rng) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(TrainError::Numerics(NumericsError::NonFinite(_))) => {
                    return Err(TrainError::Diverged { epoch, step, last_good: Box::new(last_good) });
                }
                Err(e) => return Err(e),
            };
            total += loss;
            trace.push(LossRecord { epoch, step, loss, lr });
        }
        let (val_top1, val_top10) = match val {
            Some(v) => {
                let (t1, t10) = v.retrieval(&enc)?;
                (Some(t1), Some(t10))
            }
            None => (None, None),
        };
        let summary = EpochSummary {
            epoch,
            mean_loss: total / batches.len().max(1) as f64,
            val_top1,
            val_top10,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(dir) = checkpoint_dir {
            enc.save(checkpoint_path(dir, epoch))?;
        }
        progress(&summary);
        epochs.push(summary);
        if let (Some(t1), Some(t10)) = (val_top1, val_top10) {
            let score = (t10, t1);
            let improved = best.as_ref().is_none_or(|(s, _, _)| score > *s);
            if improved {
                best = Some((score, epoch, enc.clone()));
            } else if let (Some(p), Some((_, at, _))) = (cfg.patience, &best) {
                if epoch - at >= p {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    // without early stopping the schedule decides; a peak on a small
    // validation set is mostly noise
    let (encoder, best_epoch) = match best {
        Some((_, e, w)) if cfg.patience.is_some() => (w, Some(e)),
        Some((_, e, _)) => (enc, Some(e)),
        None => (enc, None),
    };
    Ok(TrainOutcome { encoder, trace, epochs, best_epoch, stopped_early })
}
