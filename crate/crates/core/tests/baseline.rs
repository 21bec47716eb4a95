use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swire_core::baseline::{
    baseline_rank, bow_encode, hog, kmeans_fit, kmeans_fit_traced, BaselineConfig, BowBaseline, BowHistogram,
    Codebook, HogDescriptor, HogParams, BLOCK_EPS,
};
use swire_core::dataset::generate_pair;
use swire_core::imaging::GrayImage;

const SMALL: HogParams = HogParams { cell: 4, bins: 9 };

#[test]
fn descriptor_length() {
    let d = hog(&GrayImage::filled(64, 64, 0.3), HogParams::default()).unwrap();
    assert_eq!(d.values.len(), 8 * 8 * 9);
    assert!(d.values.iter().all(|&v| v == 0.0));
}

/// 8x8, ink on the left half. Central differences give |g| = 0.5 at the two
/// columns next to the step, pointing along +x, so each 4x4 cell collects
/// 4 rows * 0.5 in bin 0; the one 2x2 block then has L2 norm 4.
#[test]
fn vertical_step_fills_bin_zero() {
    let img = GrayImage::from_fn(8, 8, |x, _| if x < 4 { 0.0 } else { 1.0 });
    let d = hog(&img, SMALL).unwrap();
    let want = (2.0 / (16.0 + BLOCK_EPS * BLOCK_EPS).sqrt()) as f32;
    for cy in 0..2 {
        for cx in 0..2 {
            let c = d.cell(cx, cy);
            assert_eq!(c[0], want);
            assert!(c[1..].iter().all(|&v| v == 0.0));
        }
    }
}

/// Orientation pi/2 sits halfway between the centers of bins 4 and 5, so
/// each cell holds 1.0 in both; block norm sqrt(8).
#[test]
fn horizontal_step_splits_between_middle_bins() {
    let img = GrayImage::from_fn(8, 8, |_, y| if y < 4 { 0.0 } else { 1.0 });
    let d = hog(&img, SMALL).unwrap();
    let want = (1.0 / (8.0 + BLOCK_EPS * BLOCK_EPS).sqrt()) as f32;
    for cy in 0..2 {
        for cx in 0..2 {
            let c = d.cell(cx, cy);
            for (b, &v) in c.iter().enumerate() {
                let expect = if b == 4 || b == 5 { want } else { 0.0 };
                assert!((v - expect).abs() < 1e-6, "cell ({cx},{cy}) bin {b}: {v}");
            }
        }
    }
}

fn blob(dx: usize, dy: usize) -> GrayImage {
    GrayImage::from_fn(64, 64, |x, y| {
        let (x, y) = (x as isize - dx as isize, y as isize - dy as isize);
        if (10..22).contains(&x) && (12..20).contains(&y) || (x - 16).pow(2) + (y - 26).pow(2) < 16 {
            0.0
        } else {
            1.0
        }
    })
}

/// Shifting by one 2x2 block moves the descriptor by one block.
#[test]
fn translation_by_a_block_shifts_cells() {
    let a = hog(&blob(0, 0), HogParams::default()).unwrap();
    let b = hog(&blob(16, 16), HogParams::default()).unwrap();
    for cy in 0..6 {
        for cx in 0..6 {
            assert_eq!(a.cell(cx, cy), b.cell(cx + 2, cy + 2), "cell ({cx},{cy})");
        }
    }
}

#[test]
fn kmeans_recovers_repeated_points() {
    let pts: Vec<Vec<f32>> = vec![vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 4.0]];
    let samples: Vec<Vec<f32>> = (0..30).map(|i| pts[i % 3].clone()).collect();
    let book = kmeans_fit(&samples, 3, 20, 1).unwrap();
    let mut got: Vec<Vec<f32>> = (0..3).map(|i| book.centroid(i).to_vec()).collect();
    let mut want = pts.clone();
    let key = |v: &Vec<f32>| (v[0].to_bits(), v[1].to_bits());
    got.sort_by_key(key);
    want.sort_by_key(key);
    assert_eq!(got, want);
}

#[test]
fn kmeans_1d_two_clusters() {
    let s = vec![vec![0.0], vec![0.0], vec![10.0], vec![10.0]];
    let book = kmeans_fit(&s, 2, 10, 4).unwrap();
    let mut c = [book.centroid(0)[0], book.centroid(1)[0]];
    c.sort_by(f32::total_cmp);
    assert_eq!(c, [0.0, 10.0]);
}

#[test]
fn kmeans_deterministic_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<Vec<f32>> = (0..400).map(|_| (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    let a = kmeans_fit_traced(&samples, 12, 30, 9).unwrap();
    let b = kmeans_fit_traced(&samples, 12, 30, 9).unwrap();
    assert_eq!(a.codebook, b.codebook);
    assert!(!a.objective.is_empty());
    for w in a.objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "objective rose: {w:?}");
    }
}

fn book(centroids: &[&[f32]]) -> Codebook {
    Codebook {
        k: centroids.len(),
        dim: centroids[0].len(),
        seed: 0,
        centroids: centroids.iter().flat_map(|c| c.iter().copied()).collect(),
    }
}

fn desc_from_patches(patches: &[Vec<f32>]) -> HogDescriptor {
    // one row of blocks; each patch's 4 cells laid out as the 2x2 block
    let bins = patches[0].len() / 4;
    let cells_x = 2 * patches.len();
    let mut values = vec![0.0; cells_x * 2 * bins];
    for (bx, p) in patches.iter().enumerate() {
        for (i, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
            let o = (dy * cells_x + 2 * bx + dx) * bins;
            values[o..o + bins].copy_from_slice(&p[i * bins..(i + 1) * bins]);
        }
    }
    HogDescriptor { cells_x, cells_y: 2, bins, values }
}

#[test]
fn bow_examples() {
    let c: Vec<Vec<f32>> = (0..4).map(|i| vec![i as f32 * 10.0; 4]).collect();
    let b = book(&c.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let d = desc_from_patches(&[c[3].clone(), c[3].clone(), c[3].clone()]);
    assert_eq!(d.patches(), vec![c[3].clone(); 3]);
    assert_eq!(bow_encode(&d, &b).unwrap().0, vec![0.0, 0.0, 0.0, 1.0]);
    let d = desc_from_patches(&[c[1].clone(), c[2].clone(), c[2].clone(), c[1].clone()]);
    assert_eq!(bow_encode(&d, &b).unwrap().0, vec![0.0, 0.5, 0.5, 0.0]);
    // equidistant between centroids 1 and 2: lower index wins
    let d = desc_from_patches(&[vec![15.0; 4]]);
    assert_eq!(bow_encode(&d, &b).unwrap().0, vec![0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn rank_against_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let corpus: Vec<(String, BowHistogram)> = (0..50)
        .map(|i| (format!("h{i:02}"), BowHistogram((0..16).map(|_| rng.random_range(0..4) as f32 / 4.0).collect())))
        .collect();
    for _ in 0..20 {
        let q = BowHistogram((0..16).map(|_| rng.random_range(0..4) as f32 / 4.0).collect());
        let mut oracle: Vec<(f64, String)> = corpus
            .iter()
            .map(|(id, h)| {
                let s: f64 = q.0.iter().zip(&h.0).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
                (s.sqrt(), id.clone())
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got = baseline_rank(&q, &corpus).unwrap();
        assert_eq!(got.ids(), oracle.iter().map(|o| o.1.as_str()).collect::<Vec<_>>());
        for (g, o) in got.0.iter().zip(&oracle) {
            assert!((g.distance - o.0).abs() < 1e-12);
        }
    }
    let own = baseline_rank(&corpus[7].1, &corpus).unwrap();
    assert_eq!(own.0[0].distance, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bow_is_a_distribution(seed in any::<u64>(), k in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cents: Vec<Vec<f32>> = (0..k).map(|_| (0..36).map(|_| rng.random_range(0.0f32..1.0)).collect()).collect();
        let b = book(&cents.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let img = GrayImage::from_fn(40, 24, |_, _| if rng.random_bool(0.3) { 0.0 } else { 1.0 });
        let h = bow_encode(&hog(&img, HogParams::default()).unwrap(), &b).unwrap();
        let total: f32 = h.0.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-5);
        prop_assert!(h.0.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn hog_blocks_are_unit_or_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = GrayImage::from_fn(33, 47, |_, _| rng.random_range(0.0f32..1.0));
        let d = hog(&img, HogParams::default()).unwrap();
        for p in d.patches() {
            let n: f32 = p.iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-4, "block norm {}", n);
        }
    }
}

#[test]
fn fitted_baseline_ranks_own_screenshot_high() {
    let pairs: Vec<_> = (0..20).map(generate_pair).collect();
    let sketches: Vec<GrayImage> = pairs.iter().map(|p| p.sketch.clone()).collect();
    let shots: Vec<GrayImage> = pairs.iter().map(|p| p.screenshot.clone()).collect();
    let cfg = BaselineConfig { k: 16, iters: 10, ..BaselineConfig::default() };
    let a = BowBaseline::fit(cfg.clone(), &sketches, &shots).unwrap();
    let b = BowBaseline::fit(cfg, &sketches, &shots).unwrap();
    assert_eq!(a.codebook, b.codebook);
    let corpus: Vec<(String, BowHistogram)> =
        shots.iter().enumerate().map(|(i, s)| (format!("p{i:02}"), a.encode_screenshot(s).unwrap())).collect();
    for (i, s) in sketches.iter().enumerate() {
        let h = a.encode_sketch(s).unwrap();
        assert!((h.0.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert_eq!(baseline_rank(&h, &corpus).unwrap().len(), 20, "query {i}");
    }
}
