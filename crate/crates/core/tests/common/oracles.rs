use std::f64::consts::PI;

use fpforge::augment::{perturb_mixup, perturb_scaling, recompose};
use fpforge::metrics::average_precision;
use fpforge::spectrum::{fft2d, fft2d_complex, ifft2d};
use fpforge::synthgan::{default_categories, gen_real};
use fpforge::{Extractor, Fingerprint, Image};
use num_complex::Complex64;
use rand::Rng;

use super::rng;

pub fn sample_images(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let cats = default_categories();
    (0..n)
        .map(|i| gen_real(&cats[i % cats.len()], seed + i as u64, side))
        .collect()
}

fn max_diff(a: &Image, b: &Image) -> f64 {
    a.max_abs_diff(b)
}

/// Decomposition, scaling and mixing identities on real extractor output.
pub fn algebra_suite() {
    let images = sample_images(6, 32, 3);
    let extractor = Extractor::new(5);
    let (recons, fps) = extractor.decompose(&images).unwrap();
    for ((x, r), f) in images.iter().zip(&recons).zip(&fps) {
        let back = recompose(r, f).unwrap();
        assert!(max_diff(&back, x) <= 1e-6, "recompose round trip {}", max_diff(&back, x));
    }

    let mut rng = rng(17);
    for f in &fps {
        for _ in 0..10 {
            let mag = rng.gen_range(0.1..=5.0);
            let a = if rng.gen_bool(0.5) { mag } else { -mag };
            let there = perturb_scaling(f, a).unwrap();
            let back = perturb_scaling(&there, 1.0 / a).unwrap();
            assert!(max_diff(back.image(), f.image()) <= 1e-5, "scaling round trip at {a}");
        }
    }

    let (f1, f2) = (&fps[0], &fps[1]);
    let degenerate = perturb_mixup(&[f1, f2], &[1.0, 0.0]).unwrap();
    assert_eq!(degenerate.image().data(), f1.image().data());
    for _ in 0..20 {
        let b: f64 = rng.gen_range(0.0..=1.0);
        let same = perturb_mixup(&[f1, f1], &[b, 1.0 - b]).unwrap();
        assert_eq!(same.image().data(), f1.image().data(), "fixed point at beta {b}");
        let mixed = perturb_mixup(&[f1, f2], &[b, 1.0 - b]).unwrap();
        for ((&m, &p), &q) in mixed.image().data().iter().zip(f1.image().data()).zip(f2.image().data()) {
            assert!(p.min(q) <= m && m <= p.max(q), "{m} outside [{p}, {q}]");
        }
    }
    let one = Fingerprint::new(Image::filled(3, 8, 8, 1.0));
    let neg = Fingerprint::new(Image::filled(3, 8, 8, -1.0));
    let m = perturb_mixup(&[&one, &neg], &[0.3, 0.7]).unwrap();
    assert!((m.image().get(0, 0, 0) as f64 + 0.4).abs() < 1e-7);
}

/// Precision/recall integration with the ranking recomputed per element:
/// `i` precedes `j` when its score is higher, or equal with a smaller index.
pub fn brute_force_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let npos = labels.iter().filter(|&&y| y).count() as f64;
    let rank: Vec<usize> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for k in 1..=n {
        let tp = (0..n).filter(|&i| rank[i] < k && labels[i]).count();
        let precision = tp as f64 / k as f64;
        // recall step taken from counts so it is exact
        ap += ((tp - prev_tp) as f64 / npos) * precision;
        prev_tp = tp;
    }
    ap
}

/// Returns the largest deviation seen over `trials` random instances.
/// Instances with distinct scores must match exactly.
pub fn metric_oracle(trials: usize) -> f64 {
    let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
    assert_eq!(ap, 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
    assert!((ap - 5.0 / 6.0).abs() <= f64::EPSILON);

    let mut rng = rng(23);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let n = rng.gen_range(1..=12);
        let tied = t % 2 == 1;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if tied {
                    rng.gen_range(0..4) as f64 / 4.0
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let forced = rng.gen_range(0..n);
        labels[forced] = true;
        let got = average_precision(&scores, &labels).unwrap();
        let want = brute_force_ap(&scores, &labels);
        if !tied {
            assert_eq!(got, want, "distinct scores {scores:?} labels {labels:?}");
        }
        worst = worst.max((got - want).abs());
    }
    worst
}

pub fn direct_dft(input: &[Complex64], side: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); side * side];
    for u in 0..side {
        for v in 0..side {
            let mut acc = Complex64::default();
            for y in 0..side {
                for x in 0..side {
                    let phase = -2.0 * PI * ((u * y + v * x) as f64) / side as f64;
                    acc += input[y * side + x] * Complex64::from_polar(1.0, phase);
                }
            }
            out[u * side + v] = acc;
        }
    }
    out
}

pub struct FftErrors {
    pub vs_direct: f64,
    pub parseval_rel: f64,
    pub round_trip: f64,
}

pub fn fft_oracle() -> FftErrors {
    let mut rng = rng(29);
    let mut vs_direct: f64 = 0.0;
    for side in [4, 8] {
        for _ in 0..5 {
            let real: Vec<f64> = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let complex: Vec<Complex64> = (0..side * side)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let as_complex: Vec<Complex64> = real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            for (fast, slow) in [
                (fft2d(&real).unwrap(), direct_dft(&as_complex, side)),
                (fft2d_complex(&complex).unwrap(), direct_dft(&complex, side)),
            ] {
                for (a, b) in fast.iter().zip(&slow) {
                    vs_direct = vs_direct.max((a - b).norm());
                }
            }
        }
    }

    let mut parseval_rel: f64 = 0.0;
    let mut round_trip: f64 = 0.0;
    for side in [16, 64] {
        let x: Vec<f64> = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = fft2d(&x).unwrap();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spec_energy: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / (side * side) as f64;
        parseval_rel = parseval_rel.max((energy - spec_energy).abs() / energy);
        let back = ifft2d(&spec).unwrap();
        for (a, b) in x.iter().zip(&back) {
            round_trip = round_trip.max((a - b.re).abs().max(b.im.abs()));
        }
    }
    FftErrors {
        vs_direct,
        parseval_rel,
        round_trip,
    }
}
