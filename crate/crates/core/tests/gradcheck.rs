//! Analytic gradients of every tape op against central finite differences.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swire_core::numerics::{Tape, Tensor, Var};
use swire_core::trainer::triplet_loss_tape;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Worst relative error over every input element.
fn check(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let value = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("leaf gradient").to_vec();
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].values_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].values_mut()[i] -= STEP;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), v).unwrap().trainable()
}

/// Values bounded away from zero so relu never straddles its kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), v).unwrap().trainable()
}

/// Distinct values spaced well beyond the step, so pooling winners are stable.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape.to_vec(), v).unwrap().trainable()
}

/// Reduce any output to a scalar through fixed random weights.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product();
    let w = tape.constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

fn for_seeds(name: &str, f: impl Fn(u64) -> f64) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        worst = worst.max(f(seed));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn every_op_matches_finite_differences() {
    let start = Instant::now();

    for_seeds("conv2d", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        check(&[x, w, b], &move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            project(t, y, seed)
        })
    });

    for_seeds("conv2d unbatched", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 3, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 1, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
        check(&[x, w, b], &move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            project(t, y, seed)
        })
    });

    for_seeds("maxpool2", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = spaced(&mut rng, &[2, 5, 6]);
        check(&[x], &move |t, v| {
            let y = t.maxpool2(v[0]).unwrap();
            project(t, y, seed)
        })
    });

    for_seeds("dense", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        check(&[x, w, b], &move |t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            project(t, y, seed)
        })
    });

    for_seeds("dense unbatched", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
        check(&[x, w, b], &move |t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            project(t, y, seed)
        })
    });

    for_seeds("relu", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = away_from_zero(&mut rng, &[4, 6]);
        check(&[x], &move |t, v| {
            let y = t.relu(v[0]).unwrap();
            project(t, y, seed)
        })
    });

    for_seeds("add/sub/mul", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let c = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        check(&[a, b, c], &move |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[2]).unwrap();
            let m = t.mul(d, v[0]).unwrap();
            project(t, m, seed)
        })
    });

    for_seeds("scale/add_scalar/sqrt", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[7], 0.5, 2.0);
        check(&[x], &move |t, v| {
            let s = t.scale(v[0], 1.7).unwrap();
            let a = t.add_scalar(s, 0.3).unwrap();
            let r = t.sqrt(a).unwrap();
            project(t, r, seed)
        })
    });

    for_seeds("sum/mean", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        check(&[x], &move |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            let s = t.sum(sq).unwrap();
            let m = t.mean(v[0]).unwrap();
            let both = t.add(s, m).unwrap();
            t.reshape(both, vec![]).unwrap()
        })
    });

    for_seeds("sum_rows/gather_rows/reshape", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let rows = [2usize, 0, 2, 3, 1];
        check(&[x], &move |t, v| {
            let g = t.gather_rows(v[0], &rows).unwrap();
            let r = t.reshape(g, vec![3, 5]).unwrap();
            let s = t.sum_rows(r).unwrap();
            project(t, s, seed)
        })
    });

    for_seeds("l2_normalize_rows", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
        check(&[x], &move |t, v| {
            let y = t.l2_normalize_rows(v[0], 1e-12).unwrap();
            project(t, y, seed)
        })
    });

    for_seeds("triplet loss", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // margin scaled with the inputs so both hinge states occur
        let m = 2.0;
        // resample until no hinge sits within 10 steps of its kink
        let (es, ep) = loop {
            let es = rand_tensor(&mut rng, &[4, 8], -1.0, 1.0);
            let ep = rand_tensor(&mut rng, &[4, 8], -1.0, 1.0);
            let ok = (0..4).all(|r| {
                let n = (r + 1) % 4;
                let d: f64 = (0..8).map(|c| (es.values()[r * 8 + c] - ep.values()[n * 8 + c]).powi(2)).sum::<f64>().sqrt();
                (d - m).abs() > 10.0 * STEP
            });
            if ok {
                break (es, ep);
            }
        };
        check(&[es, ep], &move |t, v| triplet_loss_tape(t, v[0], v[1], &[1, 2, 3, 0], m).unwrap())
    });

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "gradient checks took {elapsed:?}");
}
