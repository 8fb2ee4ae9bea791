use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tos_core::augment::{preprocess_record, PreprocessConfig};
use tos_core::gradcam::{attention_mass, cam_from_activations, gradcam, gradcam_parts, GradCamMap, Region, DEFAULT_TARGET_LAYER};
use tos_core::model::{ModelConfig, MtlNet};
use tos_core::phantom::{generate_phantom, PhantomSpec};
use tos_core::tensor::{Conv2d, Flatten, Layer, Linear, MaxPool2d, Relu, Sequential, Tensor};
use tos_core::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Zero-padded 3×3 cross-correlation of one plane.
fn correlate(x: &[f64], k: &[f64], b: f64, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![b; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (y, z) = (i + di, j + dj);
                    if y >= 0 && z >= 0 && y < h as isize && z < w as isize {
                        out[(i * w as isize + j) as usize] +=
                            k[((di + 1) * 3 + dj + 1) as usize] * x[(y * w as isize + z) as usize];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn single_channel_matches_closed_form() {
    let (h, w) = (6, 10);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = random(&[1, 1, 3, 3], &mut rng);
        let bias = rng.random_range(-0.5..0.5);
        let fc_w = random(&[h, h * w], &mut rng);
        let mut trunk = Sequential::new();
        trunk.push("toy.conv1", Layer::Conv2d(Conv2d::from_parts("toy.conv1", kernel.clone(), Tensor::new(vec![1], vec![bias]).unwrap()).unwrap()));
        let mut head = Sequential::new();
        head.push("toy.flatten1", Layer::Flatten(Flatten::default()));
        head.push("toy.fc1", Layer::Linear(Linear::from_parts("toy.fc1", fc_w.clone(), Tensor::zeros(&[h])).unwrap()));
        let x = random(&[1, 1, h, w], &mut rng);

        let a = correlate(x.data(), kernel.data(), bias, h, w);
        for target in 0..h {
            let row = &fc_w.data()[target * h * w..(target + 1) * h * w];
            let alpha = row.iter().sum::<f64>() / (h * w) as f64;
            let raw: Vec<f64> = a.iter().map(|v| (alpha * v).max(0.0)).collect();
            let max = raw.iter().cloned().fold(0.0, f64::max);
            let want: Vec<f64> = raw.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
            let got = gradcam_parts(&trunk, 0, &head, &x, target).unwrap();
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "seed {seed} target {target}: {g} vs {e}");
            }
        }
    }
}

fn shift_rows(v: &[f64], n: usize, w: usize, k: usize) -> Vec<f64> {
    (0..n).flat_map(|s| v[((s + n - k) % n) * w..((s + n - k) % n + 1) * w].iter().copied()).collect()
}

/// 1×1 conv, ReLU, time-only pooling and a sector-circulant readout: a
/// model whose output commutes with circular sector shifts.
fn circulant_model(n: usize, f: usize, channels: usize, rng: &mut ChaCha8Rng) -> (Sequential, Sequential) {
    let mut trunk = Sequential::new();
    trunk.push("eq.conv1", Layer::Conv2d(Conv2d::from_parts("eq.conv1", random(&[channels, 1, 1, 1], rng), random(&[channels], rng)).unwrap()));
    trunk.push("eq.relu1", Layer::Relu(Relu::default()));
    trunk.push("eq.pool1", Layer::MaxPool(MaxPool2d::new(1, 2).unwrap()));
    let fp = f.div_ceil(2);
    let g = random(&[channels, n, fp], rng);
    let mut w = vec![0.0; n * channels * n * fp];
    for t in 0..n {
        for c in 0..channels {
            for s in 0..n {
                for j in 0..fp {
                    w[t * channels * n * fp + (c * n + s) * fp + j] = g.data()[(c * n + (s + n - t) % n) * fp + j];
                }
            }
        }
    }
    let mut head = Sequential::new();
    head.push("eq.flatten1", Layer::Flatten(Flatten::default()));
    head.push("eq.fc1", Layer::Linear(Linear::from_parts("eq.fc1", Tensor::new(vec![n, channels * n * fp], w).unwrap(), Tensor::zeros(&[n])).unwrap()));
    (trunk, head)
}

#[test]
fn circular_shift_equivariance() {
    let (n, f) = (18, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (trunk, head) = circulant_model(n, f, 4, &mut rng);
    for _ in 0..5 {
        let x = random(&[1, 1, n, f], &mut rng);
        let target = rng.random_range(0..n);
        let base = gradcam_parts(&trunk, 2, &head, &x, target).unwrap();
        assert!(base.iter().any(|&v| v > 0.0));
        for k in 0..n {
            let xs = Tensor::new(vec![1, 1, n, f], shift_rows(x.data(), n, f, k)).unwrap();
            let got = gradcam_parts(&trunk, 2, &head, &xs, (target + k) % n).unwrap();
            let want = shift_rows(&base, n, f, k);
            let mad = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).sum::<f64>() / got.len() as f64;
            assert!(mad < 1e-6, "shift {k}: mean abs diff {mad}");
        }
    }
}

#[test]
fn circular_upsampling_commutes_with_even_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (c, h, w) = (3, 9, 6);
    let a = random(&[1, c, h, w], &mut rng);
    let g = random(&[1, c, h, w], &mut rng);
    let base = cam_from_activations(&a, &g, 2 * h, 4 * w).unwrap();
    for k in 0..h {
        let shift = |t: &Tensor| {
            let d: Vec<f64> = t.data().chunks(h * w).flat_map(|p| shift_rows(p, h, w, k)).collect();
            Tensor::new(vec![1, c, h, w], d).unwrap()
        };
        let got = cam_from_activations(&shift(&a), &shift(&g), 2 * h, 4 * w).unwrap();
        let want = shift_rows(&base, 2 * h, 4 * w, 2 * k);
        let mad = got.iter().zip(&want).map(|(x, y)| (x - y).abs()).sum::<f64>() / got.len() as f64;
        assert!(mad < 1e-12, "shift {k}: {mad}");
    }
}

fn inputs() -> Vec<tos_core::strain::StrainMatrix> {
    let recs = generate_phantom(&PhantomSpec { rng_seed: 5, ..Default::default() }, 4).unwrap();
    recs.iter().map(|r| preprocess_record(r, &PreprocessConfig::default()).unwrap().strain).collect()
}

#[test]
fn maps_are_normalized_and_repeatable() {
    let net = MtlNet::new(ModelConfig::default(), 3).unwrap();
    for (i, m) in inputs().iter().enumerate() {
        for layer in ["joint.conv1", "joint.relu2", DEFAULT_TARGET_LAYER] {
            let map = gradcam(&net, m, i % 18, layer).unwrap();
            assert_eq!(map.values.len(), 18 * 48);
            assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = map.max();
            assert!(max == 0.0 || max == 1.0, "max {max}");
            let again = gradcam(&net, m, i % 18, layer).unwrap();
            assert_eq!(map, again);
        }
    }
}

#[test]
fn map_json_round_trip() {
    let net = MtlNet::new(ModelConfig::default(), 3).unwrap();
    let map = gradcam(&net, &inputs()[0], 4, DEFAULT_TARGET_LAYER).unwrap();
    let text = serde_json::to_string(&map).unwrap();
    let back: GradCamMap = serde_json::from_str(&text).unwrap();
    assert_eq!(back, map);
    assert_eq!(back.target_layer, "joint.conv3");
}

#[test]
fn unknown_layer_is_a_config_error() {
    let net = MtlNet::new(ModelConfig::default(), 3).unwrap();
    let err = gradcam(&net, &inputs()[0], 0, "joint.conv9").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(gradcam(&net, &inputs()[0], 18, DEFAULT_TARGET_LAYER).is_err());
}

#[test]
fn attention_mass_is_additive_over_sectors() {
    let net = MtlNet::new(ModelConfig::default(), 9).unwrap();
    let map = gradcam(&net, &inputs()[1], 7, DEFAULT_TARGET_LAYER).unwrap();
    let whole = Region { frames: 0..48, center_sector: 9, half_width: 9 };
    let m = attention_mass(&map, &whole);
    assert!(m == 0.0 || (m - 1.0).abs() < 1e-12);
    let total: f64 = (0..18).map(|s| attention_mass(&map, &Region { frames: 0..48, center_sector: s, half_width: 0 })).sum();
    assert!((total - m).abs() < 1e-12);
}
