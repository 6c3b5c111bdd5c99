//! Procedural image families.
//!
//! Real images are smooth random fields with soft elliptical blobs and a
//! fine 1/f texture. Each forgery family starts from an independent real
//! texture and imprints a distinct artifact:
//!
//! * FE: a rectangular patch (10-25% of the area) replaced by a blurred,
//!   color-shifted, noise-textured copy with a 2-pixel blend border.
//! * I2I: 2x box downsampling with nearest-neighbor upsampling plus a
//!   period-4 checkerboard, which peaks at the `(N/4, N/4)` frequency family.
//! * T2I: spectrum truncated above radius `N/4`, then a mild period-8 grid and
//!   weak white noise.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::spectral::{dft2d, idft2d, RealGrid};

/// Bumped whenever generated pixels change.
pub const GENERATOR_VERSION: &str = "rcdn-synth-1";

const BLOB_EDGE_PX: f64 = 1.5;
/// Amplitude range of the fine 1/f texture of real images.
const FINE_TEXTURE: (f64, f64) = (0.02, 0.05);
const FE_PATCH_NOISE: (f64, f64) = (0.04, 0.14);
const FE_COLOR_SHIFT: f64 = 0.06;
const FE_BLUR_SIGMA: f64 = 1.5;
const I2I_CHECKER: (f64, f64) = (0.0, 0.03);
const T2I_GRID: (f64, f64) = (0.01, 0.03);
const T2I_NOISE: (f64, f64) = (0.0, 0.012);

/// Patch of an FE forgery, `[x0, x0 + width) x [y0, y0 + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl PatchRect {
    /// Chebyshev distance from `(x, y)` to the rectangle (0 inside).
    pub fn distance(&self, x: usize, y: usize) -> usize {
        let dx = if x < self.x0 {
            self.x0 - x
        } else {
            (x + 1).saturating_sub(self.x0 + self.width)
        };
        let dy = if y < self.y0 {
            self.y0 - y
        } else {
            (y + 1).saturating_sub(self.y0 + self.height)
        };
        dx.max(dy)
    }
}

/// Width of the FE blend ramp outside the patch.
pub const FE_BLEND_BORDER: usize = 2;

pub(crate) fn check_size(size: usize) -> Result<()> {
    if size < 16 || !size.is_multiple_of(8) {
        return Err(Error::Validation(format!(
            "image size {size} unsupported: need a multiple of 8 that is at least 16"
        )));
    }
    Ok(())
}

/// Signed frequency index of DFT bin `k` on an axis of length `n`.
pub fn signed_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

fn white(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n * n).map(|_| rng::normal(rng)).collect()
}

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let len = v.len() as f64;
    let mean = v.iter().sum::<f64>() / len;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / len).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    v
}

/// Separable Gaussian blur with circular boundary of an `n x n` plane.
fn gaussian_blur(plane: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= norm);
    let wrap = |i: isize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * n + wrap(x as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[wrap(y as isize + k as isize - radius) * n + x])
                .sum();
        }
    }
    out
}

/// Applies a real, symmetric radial transfer function in the Fourier domain.
fn radial_filter(plane: &[f64], n: usize, transfer: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let mut f = dft2d(plane, n, n)?;
    for u in 0..n {
        for v in 0..n {
            let r = signed_frequency(u, n).hypot(signed_frequency(v, n));
            f[u * n + v] *= transfer(r);
        }
    }
    Ok(idft2d(&f, n, n)?.iter().map(|z: &Complex64| z.re).collect())
}

/// Zero-mean, unit-variance field with amplitude spectrum `1 / r`.
fn pink_field(rng: &mut StreamRng, n: usize) -> Result<Vec<f64>> {
    let w = white(rng, n);
    let f = radial_filter(&w, n, |r| if r == 0.0 { 0.0 } else { 1.0 / r })?;
    Ok(standardize(f))
}

fn smooth_field(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    standardize(gaussian_blur(&white(rng, n), n, n as f64 / 16.0))
}

fn clamp_unit(data: &mut [f64]) {
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// A real-family texture in `[0, 1]`.
pub(crate) fn real_texture(rng: &mut StreamRng, n: usize) -> Result<RealGrid> {
    let lum = smooth_field(rng, n);
    let lum_amp = rng::uniform_in(rng, 0.06, 0.14);
    let mut data = vec![0.0; n * n * 3];
    for c in 0..3 {
        let base = rng::uniform_in(rng, 0.3, 0.7);
        let chroma = smooth_field(rng, n);
        let chroma_amp = rng::uniform_in(rng, 0.02, 0.05);
        for i in 0..n * n {
            data[i * 3 + c] = base + lum_amp * lum[i] + chroma_amp * chroma[i];
        }
    }

    let blobs = 2 + (rng::uniform(rng) * 3.0) as usize;
    for _ in 0..blobs {
        let (cx, cy) = (rng::uniform_in(rng, 0.0, n as f64), rng::uniform_in(rng, 0.0, n as f64));
        let a = rng::uniform_in(rng, n as f64 / 10.0, n as f64 / 3.0);
        let b = rng::uniform_in(rng, n as f64 / 10.0, n as f64 / 3.0);
        let theta = rng::uniform_in(rng, 0.0, PI);
        let opacity = rng::uniform_in(rng, 0.5, 1.0);
        let delta: [f64; 3] = std::array::from_fn(|_| rng::uniform_in(rng, -0.25, 0.25));
        let (s, co) = theta.sin_cos();
        let sharp = a.min(b) / BLOB_EDGE_PX;
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (co * dx + s * dy, -s * dx + co * dy);
                let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                let w = opacity / (1.0 + ((r - 1.0) * sharp).exp());
                for c in 0..3 {
                    data[(y * n + x) * 3 + c] += w * delta[c];
                }
            }
        }
    }

    let fine_amp = rng::uniform_in(rng, FINE_TEXTURE.0, FINE_TEXTURE.1);
    for c in 0..3 {
        let fine = pink_field(rng, n)?;
        for i in 0..n * n {
            data[i * 3 + c] += fine_amp * fine[i];
        }
    }
    clamp_unit(&mut data);
    RealGrid::new(n, n, 3, data)
}

/// FE artifact; returns the forged image and its patch.
pub(crate) fn face_edit(rng: &mut StreamRng, base: &RealGrid) -> Result<(RealGrid, PatchRect)> {
    let n = base.width;
    let area = rng::uniform_in(rng, 0.10, 0.25) * (n * n) as f64;
    let aspect = rng::uniform_in(rng, 0.5, 2.0);
    let width = ((area * aspect).sqrt().round() as usize).clamp(2, n - 2 * FE_BLEND_BORDER);
    let height = ((area / width as f64).round() as usize).clamp(2, n - 2 * FE_BLEND_BORDER);
    let x0 = (rng::uniform(rng) * (n - width + 1) as f64) as usize;
    let y0 = (rng::uniform(rng) * (n - height + 1) as f64) as usize;
    let rect = PatchRect { x0, y0, width, height };

    let shift: [f64; 3] = std::array::from_fn(|_| rng::uniform_in(rng, -FE_COLOR_SHIFT, FE_COLOR_SHIFT));
    let noise_sd = rng::uniform_in(rng, FE_PATCH_NOISE.0, FE_PATCH_NOISE.1);
    let mut out = base.clone();
    for (c, &dc) in shift.iter().enumerate() {
        let blurred = gaussian_blur(&base.plane(c), n, FE_BLUR_SIGMA);
        let noise = white(rng, n);
        for y in 0..n {
            for x in 0..n {
                let d = rect.distance(x, y);
                if d > FE_BLEND_BORDER {
                    continue;
                }
                let alpha = 1.0 - d as f64 / (FE_BLEND_BORDER + 1) as f64;
                let i = y * n + x;
                let texture = blurred[i] + dc + noise_sd * noise[i];
                let v = &mut out.data[i * 3 + c];
                *v = ((1.0 - alpha) * *v + alpha * texture).clamp(0.0, 1.0);
            }
        }
    }
    Ok((out, rect))
}

/// I2I artifact: block resampling plus a period-4 checkerboard.
pub(crate) fn image_to_image(rng: &mut StreamRng, base: &RealGrid) -> Result<RealGrid> {
    let n = base.width;
    let amp = rng::uniform_in(rng, I2I_CHECKER.0, I2I_CHECKER.1);
    let mut data = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let (by, bx) = (y & !1, x & !1);
            let checker = amp * (PI * x as f64 / 2.0).cos() * (PI * y as f64 / 2.0).cos();
            for c in 0..3 {
                let block =
                    (base.at(by, bx, c) + base.at(by, bx + 1, c) + base.at(by + 1, bx, c) + base.at(by + 1, bx + 1, c))
                        / 4.0;
                data[(y * n + x) * 3 + c] = block + checker;
            }
        }
    }
    clamp_unit(&mut data);
    RealGrid::new(n, n, 3, data)
}

/// T2I artifact: band-limited resynthesis, period-8 grid and weak noise.
pub(crate) fn text_to_image(rng: &mut StreamRng, base: &RealGrid) -> Result<RealGrid> {
    let n = base.width;
    let cutoff = n as f64 / 4.0;
    let grid_amp = rng::uniform_in(rng, T2I_GRID.0, T2I_GRID.1);
    let noise_sd = rng::uniform_in(rng, T2I_NOISE.0, T2I_NOISE.1);
    let mut data = vec![0.0; n * n * 3];
    for c in 0..3 {
        let low = radial_filter(&base.plane(c), n, |r| if r > cutoff { 0.0 } else { 1.0 })?;
        for y in 0..n {
            for x in 0..n {
                let grid = grid_amp * ((2.0 * PI * x as f64 / 8.0).cos() + (2.0 * PI * y as f64 / 8.0).cos()) / 2.0;
                let i = y * n + x;
                data[i * 3 + c] = low[i] + grid + noise_sd * rng::normal(rng);
            }
        }
    }
    clamp_unit(&mut data);
    RealGrid::new(n, n, 3, data)
}
