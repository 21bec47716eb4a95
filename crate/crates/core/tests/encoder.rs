use swire_core::encoder::{Branch, Encoder, EncoderConfig, EncoderError, EncoderWeights, EMBEDDING_DIM};
use swire_core::imaging::GrayImage;
use swire_core::numerics::Tensor;

#[test]
fn full_profile_param_count() {
    // per-branch counts worked out by hand: conv blocks, then fc layers
    let conv = (64 * 9 + 64)
        + (128 * 64 * 9 + 128)
        + (256 * 128 * 9 + 256)
        + (256 * 256 * 9 + 256)
        + (512 * 256 * 9 + 512)
        + 3 * (512 * 512 * 9 + 512);
    let fc = (512 * 7 * 7 * 4096 + 4096) + (4096 * 4096 + 4096) + (4096 * 64 + 64);
    assert_eq!(conv, 9_219_328);
    assert_eq!(EncoderConfig::full().param_count(), conv + fc);
    assert_eq!(EncoderConfig::full().param_count(), 129_027_392);
}

#[test]
fn desk_profile_shape() {
    let d = EncoderConfig::desk();
    assert_eq!((d.input_size, d.block_filters, d.fc_sizes), (64, [8, 16, 32, 64, 64], [256, 256, 64]));
    assert_eq!(d.final_side(), 2);
    assert_eq!(d.param_count(), 292_448);
    let f = EncoderConfig::full();
    assert_eq!((f.input_size, f.fc_sizes), (224, [4096, 4096, 64]));
    assert_eq!(f.final_side(), 7);
    assert!(!d.normalize_output && !f.normalize_output);
}

#[test]
fn blocks_have_one_then_two_convs() {
    let names: Vec<String> = EncoderConfig::desk().layer_shapes().into_iter().map(|(n, _)| n).collect();
    for b in 1..=5 {
        let convs = names.iter().filter(|n| n.starts_with(&format!("conv{b}_")) && n.ends_with(".w")).count();
        assert_eq!(convs, if b <= 2 { 1 } else { 2 }, "block {b}");
    }
    assert_eq!(names.iter().filter(|n| n.starts_with("fc") && n.ends_with(".w")).count(), 3);
}

fn probe() -> GrayImage {
    GrayImage::from_fn(64, 64, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0)
}

#[test]
fn embedding_is_64_and_deterministic() {
    let enc = Encoder::build(&EncoderConfig::desk(), 3).unwrap();
    let a = enc.encode_image(Branch::Sketch, &probe()).unwrap();
    let b = enc.encode_image(Branch::Sketch, &probe()).unwrap();
    assert_eq!(a.as_slice().len(), EMBEDDING_DIM);
    assert_eq!(a, b);
    // branches have their own weights
    assert_ne!(a, enc.encode_image(Branch::Screenshot, &probe()).unwrap());
}

#[test]
fn zero_weights_embed_to_zero() {
    let w = EncoderWeights::zeros(&EncoderConfig::desk(), Branch::Sketch).unwrap();
    let x = Tensor::from_vec(vec![1, 64, 64], vec![0.3; 64 * 64]).unwrap();
    assert!(w.encode(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn batched_encoding_matches_single() {
    let enc = Encoder::build(&EncoderConfig::desk(), 1).unwrap();
    let imgs: Vec<GrayImage> =
        (0..5).map(|s| GrayImage::from_fn(72, 128, |x, y| ((x + s * y) % 5) as f32 / 4.0)).collect();
    let batch = enc.encode_images(Branch::Screenshot, &imgs, 2).unwrap();
    for (img, e) in imgs.iter().zip(&batch) {
        assert_eq!(&enc.encode_image(Branch::Screenshot, img).unwrap(), e);
    }
}

#[test]
fn save_load_round_trip() {
    let enc = Encoder::build(&EncoderConfig::desk(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.swenc");
    enc.save(&path).unwrap();
    let back = Encoder::load(&path).unwrap();
    assert_eq!(back, enc);
    assert_eq!(
        back.encode_image(Branch::Sketch, &probe()).unwrap(),
        enc.encode_image(Branch::Sketch, &probe()).unwrap()
    );
    assert_eq!(&std::fs::read(&path).unwrap()[..6], b"SWENC1");
}

#[test]
fn truncated_file_fails_checksum() {
    let bytes = Encoder::build(&EncoderConfig::desk(), 9).unwrap().to_bytes();
    let cut = &bytes[..bytes.len() - 100];
    match Encoder::from_bytes(cut) {
        Err(EncoderError::Corrupt(m)) => assert!(m.contains("checksum"), "{m}"),
        other => panic!("expected checksum error, got {other:?}"),
    }
    let mut flipped = bytes.clone();
    flipped[200] ^= 1;
    assert!(matches!(Encoder::from_bytes(&flipped), Err(EncoderError::Corrupt(_))));
}

#[test]
fn config_mismatch_is_a_shape_error() {
    let bytes = Encoder::build(&EncoderConfig::desk(), 9).unwrap().to_bytes();
    let other = EncoderConfig { block_filters: [8, 16, 32, 64, 32], ..EncoderConfig::desk() };
    assert!(matches!(Encoder::from_bytes_expecting(&bytes, &other), Err(EncoderError::TensorShape { .. })));
    assert!(Encoder::from_bytes_expecting(&bytes, &EncoderConfig::desk()).is_ok());
}

#[test]
fn wrong_input_shape_rejected() {
    let w = EncoderWeights::zeros(&EncoderConfig::desk(), Branch::Sketch).unwrap();
    let x = Tensor::from_vec(vec![1, 32, 32], vec![0.0; 32 * 32]).unwrap();
    assert!(matches!(w.encode(&x), Err(EncoderError::InputShape { .. })));
}

/// Regression guard: one pixel moved by eps moves the embedding by at most
/// K * eps. K was measured on the untrained desk network and padded 4x.
#[test]
fn single_pixel_sensitivity_is_bounded() {
    let enc = Encoder::build(&EncoderConfig::desk(), 0).unwrap();
    let base = probe();
    let e0 = enc.encode_image(Branch::Sketch, &base).unwrap();
    let eps = 0.05;
    let mut worst: f64 = 0.0;
    for (x, y) in [(0, 0), (10, 20), (31, 31), (63, 5), (40, 60)] {
        let mut img = base.clone();
        img.set(x, y, (img.get(x, y) + eps).min(1.0));
        let delta = (img.get(x, y) - base.get(x, y)) as f64;
        let e1 = enc.encode_image(Branch::Sketch, &img).unwrap();
        let d: f64 = e0.as_slice().iter().zip(e1.as_slice()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(d / delta);
    }
    assert!(worst < K, "sensitivity {worst}");
}

const K: f64 = 0.02;
