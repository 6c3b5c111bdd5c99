use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rcdn_core::spectral::{
    channel_standardize, dft2d, dft2d_image, fft_shift, ifft_shift, log_magnitude, spectral_preprocess, ComplexGrid,
    RealGrid, STD_EPS,
};

fn random_plane(seed: u64, n: usize) -> Vec<f64> {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(0.0..1.0)).collect()
}

/// Textbook quadruple sum.
fn naive_dft(f: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for x in 0..h {
                for y in 0..w {
                    let angle = -2.0 * std::f64::consts::PI * ((u * x) as f64 / h as f64 + (v * y) as f64 / w as f64);
                    acc += f[x * w + y] * Complex64::new(angle.cos(), angle.sin());
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

fn max_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn constant_image_is_dc_only() {
    let n = 8;
    let c = 0.37;
    let f = dft2d(&vec![c; n * n], n, n).unwrap();
    assert!((f[0].re - c * (n * n) as f64).abs() < 1e-9 && f[0].im.abs() < 1e-9);
    assert!(f[1..].iter().all(|z| z.norm() < 1e-9));
}

#[test]
fn impulse_has_flat_spectrum() {
    let mut img = vec![0.0; 64];
    img[0] = 1.0;
    let f = dft2d(&img, 8, 8).unwrap();
    assert!(f.iter().all(|z| *z == Complex64::new(1.0, 0.0)));
}

#[test]
fn fft_matches_naive_and_parseval() {
    for (i, &(h, w)) in [(8, 8), (2, 2), (4, 16), (32, 32), (6, 10), (3, 5)].iter().enumerate() {
        let img = random_plane(i as u64, h * w);
        let fast = dft2d(&img, h, w).unwrap();
        let slow = naive_dft(&img, h, w);
        assert!(max_err(&fast, &slow) < 1e-9, "{h}x{w}");
        let spatial: f64 = img.iter().map(|v| v * v).sum();
        let freq: f64 = fast.iter().map(|z| z.norm_sqr()).sum::<f64>() / (h * w) as f64;
        assert!(((spatial - freq) / spatial).abs() < 1e-10, "{h}x{w}");
    }
}

#[test]
fn real_input_is_conjugate_symmetric() {
    let (h, w) = (8, 12);
    let f = dft2d(&random_plane(9, h * w), h, w).unwrap();
    for u in 0..h {
        for v in 0..w {
            let mirror = f[((h - u) % h) * w + (w - v) % w];
            assert!((f[u * w + v] - mirror.conj()).norm() < 1e-9);
        }
    }
}

fn index_grid(h: usize, w: usize) -> ComplexGrid {
    ComplexGrid {
        height: h,
        width: w,
        planes: vec![(0..h * w).map(|i| Complex64::new(i as f64, 0.0)).collect()],
    }
}

#[test]
fn shift_permutation_examples() {
    let g = index_grid(4, 4);
    let s = fft_shift(&g);
    assert_eq!(s.at(0, 2, 2).re, 0.0);
    assert_eq!(fft_shift(&s), g);

    let g = index_grid(3, 3);
    let s = fft_shift(&g);
    assert_eq!(s.at(0, 1, 1).re, 0.0);
    assert_ne!(fft_shift(&s), g);
    assert_eq!(ifft_shift(&s), g);

    // permutation: sorted multisets agree
    let g = index_grid(5, 6);
    let mut a: Vec<f64> = g.planes[0].iter().map(|z| z.re).collect();
    let mut b: Vec<f64> = fft_shift(&g).planes[0].iter().map(|z| z.re).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn log_magnitude_cases() {
    let e1 = std::f64::consts::E - 1.0;
    let g = ComplexGrid {
        height: 1,
        width: 2,
        planes: vec![vec![Complex64::new(0.0, 0.0), Complex64::new(e1, 0.0)]],
    };
    let m = log_magnitude(&g);
    assert_eq!(m.data[0], 0.0);
    assert!((m.data[1] - 1.0).abs() < 1e-15);

    let mut r = Xoshiro256PlusPlus::seed_from_u64(3);
    let g = ComplexGrid {
        height: 4,
        width: 4,
        planes: (0..2)
            .map(|_| {
                (0..16)
                    .map(|_| Complex64::new(r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0)))
                    .collect()
            })
            .collect(),
    };
    let m = log_magnitude(&g);
    for c in 0..2 {
        for i in 0..16 {
            let z = g.planes[c][i];
            let want = (1.0 + (z.re * z.re + z.im * z.im).sqrt()).ln();
            assert!((m.data[i * 2 + c] - want).abs() < 1e-12);
            assert!(m.data[i * 2 + c] >= 0.0);
        }
    }
}

#[test]
fn standardize_statistics() {
    let constant = RealGrid::new(3, 3, 1, vec![4.2; 9]).unwrap();
    assert!(channel_standardize(&constant).0.data.iter().all(|&v| v == 0.0));

    let vals = random_plane(4, 2 * 64);
    let grid = RealGrid::new(8, 8, 2, vals).unwrap();
    let s = channel_standardize(&grid);
    for c in 0..2 {
        let ch: Vec<f64> = s.0.plane(c);
        let mean = ch.iter().sum::<f64>() / 64.0;
        let sd = (ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((sd - 1.0).abs() < 1e-6);
    }
}

fn image(seed: u64, n: usize) -> RealGrid {
    RealGrid::new(n, n, 3, random_plane(seed, n * n * 3)).unwrap()
}

#[test]
fn gray_image_gives_two_level_map() {
    // One spike of height a = ln(1 + 0.5 N^2) among N^2 - 1 zeros; the
    // standardized levels follow from its population mean and std.
    for n in [8usize, 64] {
        let gray = RealGrid::new(n, n, 3, vec![0.5; n * n * 3]).unwrap();
        let map = spectral_preprocess(&gray).unwrap();
        let count = (n * n) as f64;
        let a = (0.5 * count).ln_1p();
        let mean = a / count;
        let sd = a * (count - 1.0).sqrt() / count;
        let (peak, floor) = ((a - mean) / (sd + STD_EPS), -mean / (sd + STD_EPS));
        for y in 0..n {
            for x in 0..n {
                for c in 0..3 {
                    let want = if y == n / 2 && x == n / 2 { peak } else { floor };
                    assert!((map.0.at(y, x, c) - want).abs() < 1e-6, "{n} ({y},{x})");
                }
            }
        }
    }
    let black = RealGrid::new(8, 8, 3, vec![0.0; 192]).unwrap();
    assert!(spectral_preprocess(&black).unwrap().0.data.iter().all(|&v| v == 0.0));
}

#[test]
fn circular_translation_invariance() {
    let n = 16;
    let img = image(5, n);
    let (dy, dx) = (5, 11);
    let mut moved = img.clone();
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                moved.data[(((y + dy) % n) * n + (x + dx) % n) * 3 + c] = img.at(y, x, c);
            }
        }
    }
    let a = spectral_preprocess(&img).unwrap();
    let b = spectral_preprocess(&moved).unwrap();
    let diff =
        a.0.data
            .iter()
            .zip(&b.0.data)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
    assert!(diff < 1e-9);
}

#[test]
fn pipeline_is_stage_composition() {
    let img = image(6, 16);
    let composed = channel_standardize(&log_magnitude(&fft_shift(&dft2d_image(&img).unwrap())));
    assert_eq!(spectral_preprocess(&img).unwrap(), composed);
    let map = composed.0;
    for c in 0..3 {
        let ch = map.plane(c);
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!(ch.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn non_power_of_two_image_uses_direct_path() {
    let img = image(7, 12);
    let map = spectral_preprocess(&img).unwrap();
    assert_eq!(map.0.data.len(), 12 * 12 * 3);
    let plane = img.plane(1);
    let fast = dft2d(&plane, 12, 12).unwrap();
    assert!(max_err(&fast, &naive_dft(&plane, 12, 12)) < 1e-9);
}
