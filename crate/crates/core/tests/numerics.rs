use proptest::prelude::*;
use swire_core::numerics::{sgd_step, NumericsError, Tape, Tensor, DEFAULT_LR};

fn t(shape: &[usize], v: Vec<f32>) -> Tensor {
    Tensor::from_vec(shape.to_vec(), v).unwrap()
}

fn conv(x: Tensor, w: Tensor, b: Tensor) -> Vec<f32> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.conv2d(x, w, b).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn conv_identity_kernel() {
    let x: Vec<f32> = (0..20).map(|i| i as f32 * 0.1 - 1.0).collect();
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    assert_eq!(conv(t(&[1, 4, 5], x.clone()), t(&[1, 1, 3, 3], k), t(&[1], vec![0.0])), x);
}

#[test]
fn conv_zero_weights_give_bias() {
    let out = conv(t(&[2, 3, 3], vec![0.7; 18]), Tensor::zeros(&[3, 2, 3, 3]), t(&[3], vec![1.0, -2.0, 0.5]));
    assert_eq!(out.len(), 27);
    for (c, want) in [1.0, -2.0, 0.5].into_iter().enumerate() {
        assert!(out[c * 9..(c + 1) * 9].iter().all(|&v| v == want));
    }
}

#[test]
fn conv_ones_center_and_corner() {
    let out = conv(t(&[1, 3, 3], vec![1.0; 9]), t(&[1, 1, 3, 3], vec![1.0; 9]), t(&[1], vec![0.0]));
    assert_eq!(out[4], 9.0);
    for c in [0, 2, 6, 8] {
        assert_eq!(out[c], 4.0);
    }
    assert_eq!(out[1], 6.0);
}

#[test]
fn conv_channel_mismatch_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&Tensor::zeros(&[2, 4, 4]));
    let w = tape.leaf(&Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.leaf(&Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, w, b), Err(NumericsError::Shape { .. })));
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let c = tape.leaf(&t(&[1, 4, 6], vec![0.3; 24]));
    let y = tape.maxpool2(c).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 3]);
    assert!(tape.value(y).iter().all(|&v| v == 0.3));

    let x = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).trainable();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let y = tape.maxpool2(v).unwrap();
    assert_eq!(tape.value(y), &[4.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_ties_route_to_first() {
    let x = t(&[1, 2, 2], vec![5.0; 4]).trainable();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let y = tape.maxpool2(v).unwrap();
    let s = tape.sum(y).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn dense_examples() {
    let run = |w: Vec<f32>, x: Vec<f32>, b: Vec<f32>| {
        let mut tape = Tape::new();
        let n = x.len();
        let m = b.len();
        let (x, w, b) = (tape.leaf(&t(&[n], x)), tape.leaf(&t(&[m, n], w)), tape.leaf(&t(&[m], b)));
        let y = tape.dense(x, w, b).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(run(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 1.0], vec![0.0, 0.0]), vec![3.0, 7.0]);
    assert_eq!(run(vec![1.0, 0.0, 0.0, 1.0], vec![0.25, -3.0], vec![0.0, 0.0]), vec![0.25, -3.0]);
    assert_eq!(run(vec![0.0; 6], vec![1.0, 2.0, 3.0], vec![0.5, -0.5]), vec![0.5, -0.5]);
}

#[test]
fn relu_examples() {
    let run = |v: Vec<f32>| {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[v.len()], v));
        let y = tape.relu(x).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(run(vec![-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
    assert_eq!(run(vec![-3.0, -0.1]), vec![0.0, 0.0]);
    assert_eq!(run(vec![0.0, 1.5, 9.0]), vec![0.0, 1.5, 9.0]);

    // subgradient at zero is zero
    let x = t(&[3], vec![-1.0, 0.0, 2.0]).trainable();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let y = tape.relu(v).unwrap();
    let s = tape.sum(y).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn backward_examples() {
    let x = t(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -4.0]).trainable();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.sum(v).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &[1.0; 6]);

    let x = Tensor::scalar(1.5f32).trainable();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let sq = tape.mul(v, v).unwrap();
    assert_eq!(tape.backward(sq).unwrap().get(v).unwrap(), &[3.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f32>::new();
    let v = tape.leaf(&t(&[2], vec![1.0, 2.0]).trainable());
    assert!(matches!(tape.backward(v), Err(NumericsError::NotScalar(_))));

    let mut tape = Tape::<f32>::new();
    let c = tape.leaf(&t(&[2], vec![1.0, 2.0]));
    let s = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(s), Err(NumericsError::Detached)));
}

#[test]
fn sgd_examples() {
    assert_eq!(DEFAULT_LR, 1e-2);
    let mut p = Tensor::scalar(1.0f32).trainable();
    p.accumulate_grad(&[0.5]).unwrap();
    sgd_step(&mut [&mut p], 0.01).unwrap();
    assert_eq!(p.values(), &[0.995]);
    assert_eq!(p.grad().unwrap(), &[0.0]);

    let mut q = t(&[3], vec![0.1, 0.2, 0.3]).trainable();
    q.accumulate_grad(&[0.0; 3]).unwrap();
    sgd_step(&mut [&mut q], 0.5).unwrap();
    assert_eq!(q.values(), &[0.1, 0.2, 0.3]);

    let mut r = Tensor::scalar(1.0f32).trainable();
    assert!(matches!(sgd_step(&mut [&mut r], 0.01), Err(NumericsError::MissingGradient(0))));
}

fn square_sum_grad(x: &Tensor<f64>, scale: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    let l = tape.scale(s, scale).unwrap();
    tape.backward(l).unwrap().get(v).unwrap().to_vec()
}

proptest! {
    /// Backward of a sum of losses equals the sum of the separate backwards.
    #[test]
    fn backward_is_linear(v in proptest::collection::vec(-1.0f64..1.0, 1..12)) {
        let x = Tensor::from_vec(vec![v.len()], v.clone()).unwrap().trainable();
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let sq = tape.mul(a, a).unwrap();
        let s1 = tape.sum(sq).unwrap();
        let s2 = tape.sum(a).unwrap();
        let both = tape.add(s1, s2).unwrap();
        let joint = tape.backward(both).unwrap().get(a).unwrap().to_vec();
        let first = square_sum_grad(&x, 1.0);
        for (i, g) in joint.iter().enumerate() {
            prop_assert!((g - (first[i] + 1.0)).abs() < 1e-12);
        }
    }

    /// Exactly one routed gradient per pooling window.
    #[test]
    fn maxpool_gradient_is_a_routing_mask(v in proptest::collection::vec(-1.0f32..1.0, 2 * 4 * 6)) {
        let x = t(&[2, 4, 6], v).trainable();
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let y = tape.maxpool2(a).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().get(a).unwrap().to_vec();
        for c in 0..2 {
            for wy in 0..2 {
                for wx in 0..3 {
                    let cells = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| g[c * 24 + (2 * wy + dy) * 6 + 2 * wx + dx]);
                    prop_assert_eq!(cells.iter().filter(|&&v| v == 1.0).count(), 1);
                    prop_assert_eq!(cells.iter().filter(|&&v| v == 0.0).count(), 3);
                }
            }
        }
    }

    #[test]
    fn ops_stay_finite(v in proptest::collection::vec(-1e3f32..1e3, 2 * 4 * 4), w in proptest::collection::vec(-1e3f32..1e3, 18)) {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 4, 4], v));
        let k = tape.leaf(&t(&[1, 2, 3, 3], w));
        let b = tape.leaf(&t(&[1], vec![0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        let r = tape.relu(y).unwrap();
        let p = tape.maxpool2(r).unwrap();
        prop_assert!(tape.value(p).iter().all(|v| v.is_finite()));
    }
}
