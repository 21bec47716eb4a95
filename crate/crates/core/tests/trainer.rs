use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swire_core::encoder::{Embedding, Encoder, EncoderConfig, EMBEDDING_DIM};
use swire_core::imaging::GrayImage;
use swire_core::numerics::{Tape, Tensor};
use swire_core::trainer::{
    epoch_batches, sample_batch, train, train_step, triplet_loss, triplet_loss_tape, LrSchedule, TrainConfig, TrainSet,
    DEFAULT_MARGIN,
};

fn emb(v: &[f32]) -> Embedding {
    let mut a = vec![0.0; EMBEDDING_DIM];
    a[..v.len()].copy_from_slice(v);
    Embedding::new(a).unwrap()
}

#[test]
fn margin_default() {
    assert_eq!(DEFAULT_MARGIN, 0.2);
}

#[test]
fn loss_examples() {
    let z = emb(&[]);
    // positive matches, negative beyond the margin
    assert_eq!(triplet_loss(&z, &z, &emb(&[0.3, 0.4]), 0.2).unwrap(), 0.0);
    // collapsed embeddings pay exactly the margin
    assert_eq!(triplet_loss(&z, &z, &z, 0.2).unwrap(), 0.2);
    // D+ = 1.0, D- = 0.1
    let l = triplet_loss(&z, &emb(&[1.0]), &emb(&[0.0, 0.1]), 0.2).unwrap();
    let d_neg = f64::from(0.1f32);
    assert_eq!(l, 1.0 + (0.2 - d_neg));
    assert!((l - 1.1).abs() < 1e-8);
}

#[test]
fn loss_rejects_bad_input() {
    let z = emb(&[]);
    assert!(triplet_loss(&z, &z, &z, -0.1).is_err());
    assert!(triplet_loss(&z, &z, &z, f64::NAN).is_err());
}

#[test]
fn inactive_hinge_ignores_negative() {
    let es = emb(&[0.1, -0.2, 0.3]);
    let ep = emb(&[0.0, 0.4]);
    let en = emb(&[1.0, 1.0, -1.0]);
    let h = 1e-3f32;
    for i in 0..EMBEDDING_DIM {
        let mut plus = en.to_vec();
        plus[i] += h;
        let mut minus = en.to_vec();
        minus[i] -= h;
        let fd = (triplet_loss(&es, &ep, &Embedding::new(plus).unwrap(), 0.2).unwrap()
            - triplet_loss(&es, &ep, &Embedding::new(minus).unwrap(), 0.2).unwrap())
            / (2.0 * f64::from(h));
        assert!(fd.abs() < 1e-6, "component {i}: {fd}");
    }
}

#[test]
fn inactive_hinge_tape_gradient_on_negative_is_zero() {
    // row 0: anchor a, positive p, negative n (far away)
    // row 1: anchor n, positive n, negative p; row 1 contributes nothing to n
    let a = [0.1, -0.2, 0.3, 0.0];
    let p = [0.0, 0.4, 0.1, 0.2];
    let n = [1.0, 1.0, -1.0, 0.5];
    let es = Tensor::<f64>::from_vec(vec![2, 4], [a, n].concat()).unwrap().trainable();
    let ep = Tensor::<f64>::from_vec(vec![2, 4], [p, n].concat()).unwrap().trainable();
    let mut tape = Tape::new();
    let (vs, vp) = (tape.leaf(&es), tape.leaf(&ep));
    let loss = triplet_loss_tape(&mut tape, vs, vp, &[1, 0], 0.2).unwrap();
    let g = tape.backward(loss).unwrap();
    let gp = g.get(vp).unwrap();
    for (i, v) in gp[4..].iter().enumerate() {
        assert!(v.abs() < 1e-6, "component {i}: {v}");
    }
    // the positive's gradient is live
    assert!(gp[..4].iter().any(|v| v.abs() > 0.1));
}

#[test]
fn batch_of_two_negatives_are_forced() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let t = sample_batch(&[3, 8], &mut rng).unwrap();
        assert_eq!((t[0].negative, t[1].negative), (8, 3));
    }
}

/// Pearson chi-square on the negatives drawn for one anchor of a 33-member
/// batch; 31 degrees of freedom, 0.1% critical value 61.1.
#[test]
fn negatives_uniform_over_other_members() {
    let batch: Vec<usize> = (100..133).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 32_000;
    let mut counts = vec![0usize; 33];
    for _ in 0..draws {
        let t = sample_batch(&batch, &mut rng).unwrap();
        counts[t[0].negative - 100] += 1;
    }
    assert_eq!(counts[0], 0);
    let expected = draws as f64 / 32.0;
    let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 61.1, "chi-square {chi2}");
}

proptest! {
    #[test]
    fn negative_never_equals_positive(n in 2usize..70, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        for t in sample_batch(&batch, &mut rng).unwrap() {
            prop_assert_eq!(t.anchor, t.positive);
            prop_assert_ne!(t.negative, t.positive);
            prop_assert!(batch.contains(&t.negative));
        }
    }

    #[test]
    fn batches_partition_the_epoch(n in 2usize..200, size in 2usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = epoch_batches(n, size, &mut rng);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(b.iter().all(|x| x.len() >= 2 && x.len() <= size + 1));
    }
}

fn tiny() -> EncoderConfig {
    EncoderConfig {
        profile: "tiny".into(),
        input_size: 32,
        block_filters: [4, 4, 4, 4, 4],
        fc_sizes: [16, 16, EMBEDDING_DIM],
        normalize_output: true,
        ..EncoderConfig::desk()
    }
}

/// Two pairs told apart by which half of the page holds the ink.
fn separable() -> TrainSet {
    let half = |left: bool| GrayImage::from_fn(64, 64, |x, _| if (x < 32) == left { 0.0 } else { 1.0 });
    let pairs = vec![("L".to_string(), half(true), half(true)), ("R".to_string(), half(false), half(false))];
    TrainSet::new(&tiny(), &pairs).unwrap()
}

/// Plain SGD on an unsquared distance never settles exactly at zero; the
/// loss falls to an lr-sized floor, far under the margin.
#[test]
fn separable_pairs_reach_zero_loss() {
    let cfg = EncoderConfig::desk();
    let half = |left: bool| GrayImage::from_fn(64, 64, |x, _| if (x < 32) == left { 0.0 } else { 1.0 });
    let pairs = vec![("L".to_string(), half(true), half(true)), ("R".to_string(), half(false), half(false))];
    let data = TrainSet::new(&cfg, &pairs).unwrap();
    let mut enc = Encoder::build(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let losses: Vec<f64> = (0..200).map(|_| train_step(&mut enc, &data, &[0, 1], 0.2, 1e-2, &mut rng).unwrap()).collect();
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.1, "mean loss over the last 10 steps {tail}");
    // both sketches now retrieve their own screenshot
    assert_eq!(data.retrieval(&enc).unwrap().0, 1.0);
}

#[test]
fn zero_epochs_keep_init() {
    let data = separable();
    let enc = Encoder::build(&tiny(), 8).unwrap();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let out = train(&cfg, enc.clone(), &data, None, None, |_| {}).unwrap();
    assert_eq!(out.encoder.to_bytes(), enc.to_bytes());
    assert!(out.trace.is_empty());
}

#[test]
fn training_is_deterministic_and_checkpoints() {
    let data = separable();
    let cfg = TrainConfig { epochs: 3, batch_size: 2, seed: 1, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let a = train(&cfg, Encoder::build(&tiny(), 2).unwrap(), &data, None, Some(dir.path()), |_| {}).unwrap();
    let b = train(&cfg, Encoder::build(&tiny(), 2).unwrap(), &data, None, None, |_| {}).unwrap();
    assert_eq!(a.encoder.to_bytes(), b.encoder.to_bytes());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.len(), 3);
    let last = Encoder::load(swire_core::trainer::checkpoint_path(dir.path(), 3)).unwrap();
    assert_eq!(last.to_bytes(), a.encoder.to_bytes());
}

#[test]
fn weights_returned_depend_on_early_stopping() {
    let data = separable();
    let run = |patience| {
        let cfg = TrainConfig { epochs: 4, batch_size: 2, seed: 1, patience, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, Encoder::build(&tiny(), 2).unwrap(), &data, Some(&data), Some(dir.path()), |_| {}).unwrap();
        let at = |e| Encoder::load(swire_core::trainer::checkpoint_path(dir.path(), e)).unwrap().to_bytes();
        let best = out.best_epoch.expect("validation ran");
        (out.encoder.to_bytes(), at(best), at(out.epochs.len()))
    };
    let (got, _, last) = run(None);
    assert_eq!(got, last);
    let (got, best, _) = run(Some(100));
    assert_eq!(got, best);
}

#[test]
fn cosine_schedule_decays_from_lr() {
    let cfg = TrainConfig { lr: 0.04, epochs: 4, schedule: LrSchedule::Cosine, ..TrainConfig::default() };
    let lrs: Vec<f64> = (1..=4).map(|e| cfg.lr_at(e)).collect();
    assert_eq!(lrs[0], 0.04);
    assert!((lrs[2] - 0.02).abs() < 1e-15);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]) && lrs[3] > 0.0);
    let flat = TrainConfig { lr: 0.04, ..TrainConfig::default() };
    assert!((1..=50).all(|e| flat.lr_at(e) == 0.04));
    assert_eq!("cosine".parse::<LrSchedule>().unwrap(), LrSchedule::Cosine);
    assert!("step".parse::<LrSchedule>().is_err());
}
