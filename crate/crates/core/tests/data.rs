use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stagewise::data::*;
use stagewise::tensor::Tensor;

fn synth(dir: &std::path::Path, train: [usize; 4], test: [usize; 4], size: usize) -> DatasetManifest {
    gen_synthetic(dir, &SynthConfig { train, test, image_size: size, seed: 11 }).unwrap()
}

fn opts(batch_size: usize, seed: u64) -> BatchOptions {
    BatchOptions { size: 16, batch_size, seed, augment: AugmentPolicy::default(), stats: NormalizationStats::default() }
}

#[test]
fn rotation_draws_stay_in_range_and_center_on_zero() {
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let angles: Vec<f64> = (0..10_000).map(|_| policy.sample(&mut rng).angle_deg as f64).collect();
    assert!(angles.iter().all(|a| a.abs() <= 15.0));
    let mean = angles.iter().sum::<f64>() / angles.len() as f64;
    assert!(mean.abs() < 0.5, "{mean}");
}

#[test]
fn batches_cover_the_split_once_with_a_short_tail() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = Dataset::new(synth(dir.path(), [20, 20, 20, 10], [3, 3, 3, 1], 16));
    let batches: Vec<Batch> = data.batches(Split::Train, &opts(32, 1)).unwrap().map(Result::unwrap).collect();
    assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), [32, 32, 6]);
    assert_eq!(batches[0].images.shape(), &[32, 3, 16, 16]);
    let seen: Vec<usize> = batches.iter().flat_map(|b| b.records.clone()).collect();
    let unique: BTreeSet<usize> = seen.iter().copied().collect();
    assert_eq!(seen.len(), 70);
    assert_eq!(unique.len(), 70);
    let manifest = data.manifest().clone();
    for b in &batches {
        for (r, l) in b.records.iter().zip(&b.labels) {
            assert_eq!(manifest.records[*r].label, *l);
            assert_eq!(manifest.records[*r].split, Split::Train);
        }
    }
}

#[test]
fn test_order_is_fixed_and_train_order_follows_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::new(synth(dir.path(), [10, 10, 10, 5], [4, 4, 4, 2], 16));
    assert_eq!(data.order(Split::Test, 1), data.order(Split::Test, 2));
    let test = data.order(Split::Test, 1);
    assert!(test.windows(2).all(|w| w[0] < w[1]));
    let (a, b) = (data.order(Split::Train, 1), data.order(Split::Train, 2));
    assert_ne!(a, b);
    assert_eq!(a, data.order(Split::Train, 1));
    let (mut sa, mut sb) = (a.clone(), b.clone());
    sa.sort();
    sb.sort();
    assert_eq!(sa, sb);
}

#[test]
fn test_batches_are_not_augmented() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = Dataset::new(synth(dir.path(), [2, 2, 2, 2], [2, 2, 2, 2], 16));
    let a: Vec<Batch> = data.batches(Split::Test, &opts(4, 1)).unwrap().map(Result::unwrap).collect();
    let b: Vec<Batch> = data.batches(Split::Test, &opts(4, 99)).unwrap().map(Result::unwrap).collect();
    assert_eq!(a[0].images, b[0].images);
    let expect = normalize(data.image(a[0].records[0]).unwrap(), &NormalizationStats::default()).unwrap();
    assert_eq!(&a[0].images.data()[..3 * 16 * 16], expect.data());
}

#[test]
fn ppm_round_trip_is_exact_on_8_bit_values() {
    let img = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
    let bytes = encode_ppm(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
    assert_eq!(decode_image(&bytes).unwrap(), img);
}

#[test]
fn synthetic_set_is_deterministic_and_counted() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = synth(d1.path(), [5, 4, 3, 2], [2, 2, 1, 1], 24);
    let m2 = synth(d2.path(), [5, 4, 3, 2], [2, 2, 1, 1], 24);
    assert_eq!(m1.counts(Split::Train), [5, 4, 3, 2]);
    assert_eq!(m1.counts(Split::Test), [2, 2, 1, 1]);
    assert_eq!(m1.records, m2.records);
    for r in &m1.records {
        assert_eq!(std::fs::read(m1.resolve(r)).unwrap(), std::fs::read(m2.resolve(r)).unwrap());
    }
    assert_eq!(load_manifest(&d1.path().join("manifest.csv")).unwrap().records, m1.records);
}

/// Multinomial logistic regression on standardized raw pixels of one
/// channel, full-batch gradient descent with L2 penalty.
fn linear_baseline(data: &mut Dataset) -> f64 {
    let k = data.manifest().n_classes();
    let mut xs = |split: Split| -> (Vec<Vec<f64>>, Vec<usize>) {
        let idx = data.order(split, 0);
        let labels = idx.iter().map(|&i| data.manifest().records[i].label).collect();
        let rows = idx
            .iter()
            .map(|&i| {
                let img = data.image(i).unwrap();
                let plane = img.shape()[1] * img.shape()[2];
                img.data()[..plane].iter().map(|&v| v as f64).collect()
            })
            .collect();
        (rows, labels)
    };
    let (mut train, ytr) = xs(Split::Train);
    let (mut test, yte) = xs(Split::Test);
    let d = train[0].len();
    let n = train.len() as f64;
    for j in 0..d {
        let mean = train.iter().map(|r| r[j]).sum::<f64>() / n;
        let sd = (train.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
        for r in train.iter_mut().chain(test.iter_mut()) {
            r[j] = (r[j] - mean) / sd;
        }
    }
    let mut w = vec![vec![0.0f64; d + 1]; k];
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter().map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    let (lr, l2) = (0.05, 1e-2);
    for _ in 0..300 {
        let mut grad = vec![vec![0.0f64; d + 1]; k];
        for (x, &y) in train.iter().zip(&ytr) {
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - if c == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += g * x[j];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                let reg = if j < d { l2 * w[c][j] } else { 0.0 };
                w[c][j] -= lr * (grad[c][j] / n + reg);
            }
        }
    }
    let correct = test
        .iter()
        .zip(&yte)
        .filter(|(x, &y)| {
            let z = logits(&w, x);
            let best = (0..k).fold(0, |b, c| if z[c] > z[b] { c } else { b });
            best == y
        })
        .count();
    100.0 * correct as f64 / test.len() as f64
}

#[test]
fn linear_classifier_leaves_headroom_on_synthetic_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = Dataset::new(gen_synthetic(dir.path(), &SynthConfig::default()).unwrap());
    let acc = linear_baseline(&mut data);
    println!("linear baseline on raw pixels: {acc:.2}%");
    assert!((60.0..95.0).contains(&acc), "linear baseline {acc:.2}%");
}

/// Bilinear sample with half-pixel centers and edge clamping.
fn reference_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let coord = |d: usize, dn: usize, sn: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(sn - 1), s - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, dh, sh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, dw, sw);
            let at = |yy: usize, xx: usize| src[yy * sw + xx] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

proptest! {
    #[test]
    fn resize_stays_within_input_range(
        data in prop::collection::vec(0.0f32..1.0, 3 * 9 * 6),
        h in 1usize..20,
        w in 1usize..20,
    ) {
        let img = Tensor::new(&[3, 9, 6], data.clone()).unwrap();
        let out = resize_bilinear(&img, h, w).unwrap();
        prop_assert_eq!(out.shape(), &[3, h, w]);
        let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    #[test]
    fn resize_matches_scalar_reference(data in prop::collection::vec(0.0f32..1.0, 64)) {
        let img = Tensor::new(&[1, 8, 8], data.clone()).unwrap();
        let out = resize_bilinear(&img, 5, 5).unwrap();
        let expect = reference_resize(&data, 8, 8, 5, 5);
        for (a, b) in out.data().iter().zip(expect) {
            prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn normalize_inverts(data in prop::collection::vec(0.0f32..1.0, 3 * 4 * 4)) {
        let img = Tensor::new(&[3, 4, 4], data).unwrap();
        let stats = NormalizationStats::default();
        let back = denormalize(&normalize(&img, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}
