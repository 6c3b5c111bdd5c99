//! Two-feature spectral probe used to gate the difficulty of the synthetic
//! families, plus the spectral measurements it relies on.

use crate::error::{Error, Result};
use crate::spectral::{dft2d, RealGrid};

use super::synth::signed_frequency;

/// `|F(u, v)|^2` averaged over channels, in unshifted DFT order.
pub fn power_spectrum(image: &RealGrid) -> Result<Vec<f64>> {
    let (h, w) = (image.height, image.width);
    let mut power = vec![0.0; h * w];
    for c in 0..image.channels {
        for (p, z) in power.iter_mut().zip(dft2d(&image.plane(c), h, w)?) {
            *p += z.norm_sqr() / image.channels as f64;
        }
    }
    Ok(power)
}

fn radius(u: usize, v: usize, n: usize) -> f64 {
    signed_frequency(u, n).hypot(signed_frequency(v, n))
}

/// Mean power in integer radius bins `0..bins` (bin `k` holds radii in `[k - 0.5, k + 0.5)`).
pub fn radial_profile(image: &RealGrid, bins: usize) -> Result<Vec<f64>> {
    let n = image.width;
    let power = power_spectrum(image)?;
    let mut sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for u in 0..n {
        for v in 0..n {
            let k = radius(u, v, n).round() as usize;
            if k < bins {
                sum[k] += power[u * n + v];
                count[k] += 1;
            }
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect())
}

/// Mean power over frequencies with radius above `N / 4`.
pub fn high_band_energy(image: &RealGrid) -> Result<f64> {
    let n = image.width;
    let power = power_spectrum(image)?;
    let cutoff = n as f64 / 4.0;
    let (mut sum, mut count) = (0.0, 0usize);
    for u in 0..n {
        for v in 0..n {
            if radius(u, v, n) > cutoff {
                sum += power[u * n + v];
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Mean power at the four `(+-N/4, +-N/4)` bins.
pub fn checker_peak_energy(image: &RealGrid) -> Result<f64> {
    let n = image.width;
    let power = power_spectrum(image)?;
    let (a, b) = (n / 4, n - n / 4);
    Ok([(a, a), (a, b), (b, a), (b, b)]
        .iter()
        .map(|&(u, v)| power[u * n + v])
        .sum::<f64>()
        / 4.0)
}

/// Log high-band energy and log checkerboard-peak energy.
pub fn probe_features(image: &RealGrid) -> Result<[f64; 2]> {
    Ok([
        (high_band_energy(image)? + 1e-12).ln(),
        (checker_peak_energy(image)? + 1e-12).ln(),
    ])
}

/// Linear classifier `w . x + b > 0 => fake` over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weights: [f64; 2],
    pub bias: f64,
}

impl LinearProbe {
    pub fn is_fake(&self, x: &[f64; 2]) -> bool {
        self.weights[0] * x[0] + self.weights[1] * x[1] + self.bias > 0.0
    }

    /// Fisher discriminant direction with the threshold that maximizes
    /// training accuracy.
    pub fn fit(features: &[[f64; 2]], fake: &[bool]) -> Result<Self> {
        let class = |want: bool| -> Vec<[f64; 2]> {
            features
                .iter()
                .zip(fake)
                .filter(|(_, &f)| f == want)
                .map(|(x, _)| *x)
                .collect()
        };
        let (real, forged) = (class(false), class(true));
        if real.len() < 2 || forged.len() < 2 {
            return Err(Error::Validation("probe needs at least two samples per class".into()));
        }
        let mean = |s: &[[f64; 2]]| {
            let n = s.len() as f64;
            [
                s.iter().map(|x| x[0]).sum::<f64>() / n,
                s.iter().map(|x| x[1]).sum::<f64>() / n,
            ]
        };
        let (m0, m1) = (mean(&real), mean(&forged));
        let mut cov = [[0.0; 2]; 2];
        for (set, m) in [(&real, m0), (&forged, m1)] {
            for x in set.iter() {
                let d = [x[0] - m[0], x[1] - m[1]];
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] += d[i] * d[j];
                    }
                }
            }
        }
        let ridge = 1e-9 * (cov[0][0] + cov[1][1] + 1.0);
        cov[0][0] += ridge;
        cov[1][1] += ridge;
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let diff = [m1[0] - m0[0], m1[1] - m0[1]];
        let w = [
            (cov[1][1] * diff[0] - cov[0][1] * diff[1]) / det,
            (cov[0][0] * diff[1] - cov[1][0] * diff[0]) / det,
        ];
        let mut scored: Vec<(f64, bool)> = features
            .iter()
            .zip(fake)
            .map(|(x, &f)| (w[0] * x[0] + w[1] * x[1], f))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        // threshold below index i: everything from i upward is called fake
        let total_fake = scored.iter().filter(|s| s.1).count();
        let (mut best, mut best_correct) = (f64::NEG_INFINITY, total_fake);
        let mut correct = total_fake;
        for i in 0..scored.len() {
            correct = if scored[i].1 { correct - 1 } else { correct + 1 };
            let next = scored.get(i + 1).map_or(scored[i].0 + 1.0, |s| s.0);
            if correct > best_correct && next > scored[i].0 {
                best_correct = correct;
                best = (scored[i].0 + next) / 2.0;
            }
        }
        Ok(LinearProbe {
            weights: w,
            bias: -best,
        })
    }

    pub fn accuracy(&self, features: &[[f64; 2]], fake: &[bool]) -> f64 {
        let hits = features.iter().zip(fake).filter(|(x, &f)| self.is_fake(x) == f).count();
        hits as f64 / features.len() as f64
    }
}
