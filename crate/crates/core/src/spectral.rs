//! Frequency-domain preprocessing for the spectral branch.
//!
//! Pipeline per RGB channel: 2D DFT, recentering of the zero frequency,
//! `ln(1 + |F|)` compression and per-image channel standardization.
//! The transform uses an iterative radix-2 FFT when both extents are powers of
//! two and falls back to a direct (quadratic per axis) DFT otherwise.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Added to the standard deviation in [`channel_standardize`].
pub const STD_EPS: f64 = 1e-8;

/// Per-channel complex coefficients, each plane row-major `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub planes: Vec<Vec<Complex64>>,
}

impl ComplexGrid {
    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn at(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.planes[c][u * self.width + v]
    }
}

/// Real `H x W x C` grid, channel-interleaved (the layout of decoded images).
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl RealGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim("real_grid", "shape", "zero extent"));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(
                "real_grid",
                "values",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(RealGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Extracts channel `c` as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Channel-major copy, `C x H x W`.
    pub fn to_chw(&self) -> Vec<f64> {
        (0..self.channels).flat_map(|c| self.plane(c)).collect()
    }
}

/// Standardized log-magnitude spectrum, the input of the spectral branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMap(pub RealGrid);

impl SpectralMap {
    pub fn grid(&self) -> &RealGrid {
        &self.0
    }

    pub fn to_chw(&self) -> Vec<f64> {
        self.0.to_chw()
    }
}

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place iterative radix-2 FFT. `buf.len()` must be a power of two.
/// The inverse is unnormalized.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(is_power_of_two(n));
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddles: Vec<Complex64> = (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * step];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Direct O(n^2) DFT of any length.
fn dft_direct(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = input.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            input
                .iter()
                .enumerate()
                .map(|(t, x)| {
                    // reduce the phase index first so large products stay exact
                    let phase = ((k * t) % n) as f64 / n as f64;
                    x * Complex64::from_polar(1.0, sign * 2.0 * PI * phase)
                })
                .sum()
        })
        .collect()
}

fn transform_1d(buf: &mut [Complex64], inverse: bool) {
    if is_power_of_two(buf.len()) {
        fft_in_place(buf, inverse);
    } else {
        let out = dft_direct(buf, inverse);
        buf.copy_from_slice(&out);
    }
}

/// Separable 2D transform of a row-major `h x w` plane.
fn transform_2d(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    for row in plane.chunks_exact_mut(w) {
        transform_1d(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        transform_1d(&mut col, inverse);
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
}

/// `F(u,v) = sum_{x,y} f(x,y) exp(-2 pi i (u x / H + v y / W))` of one real channel.
pub fn dft2d(channel: &[f64], height: usize, width: usize) -> Result<Vec<Complex64>> {
    if height == 0 || width == 0 {
        return Err(Error::dim("dft2d", "height/width", "extents must be at least 1"));
    }
    if channel.len() != height * width {
        return Err(Error::dim(
            "dft2d",
            "values",
            format!(
                "{height}x{width} plane needs {} values, got {}",
                height * width,
                channel.len()
            ),
        ));
    }
    let mut plane: Vec<Complex64> = channel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut plane, height, width, false);
    Ok(plane)
}

/// Inverse of [`dft2d`] including the `1 / (H W)` normalization.
pub fn idft2d(spectrum: &[Complex64], height: usize, width: usize) -> Result<Vec<Complex64>> {
    if spectrum.len() != height * width || height == 0 || width == 0 {
        return Err(Error::dim("idft2d", "values", "spectrum does not match extents"));
    }
    let mut plane = spectrum.to_vec();
    transform_2d(&mut plane, height, width, true);
    let scale = 1.0 / (height * width) as f64;
    plane.iter_mut().for_each(|v| *v *= scale);
    Ok(plane)
}

/// Transforms every channel of an interleaved image.
pub fn dft2d_image(image: &RealGrid) -> Result<ComplexGrid> {
    let planes = (0..image.channels)
        .map(|c| dft2d(&image.plane(c), image.height, image.width))
        .collect::<Result<_>>()?;
    Ok(ComplexGrid {
        height: image.height,
        width: image.width,
        planes,
    })
}

fn roll(grid: &ComplexGrid, dy: usize, dx: usize) -> ComplexGrid {
    let (h, w) = (grid.height, grid.width);
    let planes = grid
        .planes
        .iter()
        .map(|p| {
            let mut out = vec![Complex64::new(0.0, 0.0); p.len()];
            for u in 0..h {
                for v in 0..w {
                    out[((u + dy) % h) * w + (v + dx) % w] = p[u * w + v];
                }
            }
            out
        })
        .collect();
    ComplexGrid {
        height: h,
        width: w,
        planes,
    }
}

/// Moves the zero frequency to the center: `(u, v) -> ((u + H/2) mod H, (v + W/2) mod W)`.
pub fn fft_shift(grid: &ComplexGrid) -> ComplexGrid {
    roll(grid, grid.height / 2, grid.width / 2)
}

/// Inverse permutation of [`fft_shift`]; differs from it only for odd extents.
pub fn ifft_shift(grid: &ComplexGrid) -> ComplexGrid {
    let (h, w) = (grid.height, grid.width);
    roll(grid, h - h / 2, w - w / 2)
}

/// `ln(1 + |F|)` per coefficient, returned channel-interleaved.
pub fn log_magnitude(grid: &ComplexGrid) -> RealGrid {
    let (h, w, c) = (grid.height, grid.width, grid.channels());
    let mut data = vec![0.0; h * w * c];
    for (ch, plane) in grid.planes.iter().enumerate() {
        for (i, z) in plane.iter().enumerate() {
            data[i * c + ch] = z.norm().ln_1p();
        }
    }
    RealGrid {
        height: h,
        width: w,
        channels: c,
        data,
    }
}

/// Per-channel `(v - mean) / (std + STD_EPS)` with population std; constant
/// channels map to zeros.
pub fn channel_standardize(m: &RealGrid) -> SpectralMap {
    let c = m.channels;
    let count = (m.height * m.width) as f64;
    let mut out = m.clone();
    for ch in 0..c {
        let vals = || m.data.iter().skip(ch).step_by(c);
        let first = m.data[ch];
        if vals().all(|&v| v == first) {
            out.data.iter_mut().skip(ch).step_by(c).for_each(|v| *v = 0.0);
            continue;
        }
        let mean = vals().sum::<f64>() / count;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let denom = var.sqrt() + STD_EPS;
        for (o, v) in out.data.iter_mut().skip(ch).step_by(c).zip(vals()) {
            *o = (v - mean) / denom;
        }
    }
    SpectralMap(out)
}

/// Full spectral pipeline for a 3-channel image with values in `[0, 1]`.
pub fn spectral_preprocess(image: &RealGrid) -> Result<SpectralMap> {
    if image.channels != 3 {
        return Err(Error::dim(
            "spectral_preprocess",
            "channels",
            format!("expected 3, got {}", image.channels),
        ));
    }
    if let Some(bad) = image.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite pixel value {bad}")));
    }
    let spectrum = dft2d_image(image)?;
    Ok(channel_standardize(&log_magnitude(&fft_shift(&spectrum))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_of_two_detection() {
        assert!(is_power_of_two(1));
        assert!(is_power_of_two(64));
        assert!(!is_power_of_two(48));
        assert!(!is_power_of_two(0));
    }

    #[test]
    fn inverse_round_trip() {
        for (h, w) in [(8, 8), (6, 5), (4, 16)] {
            let vals: Vec<f64> = (0..h * w).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
            let f = dft2d(&vals, h, w).unwrap();
            let back = idft2d(&f, h, w).unwrap();
            for (a, b) in vals.iter().zip(&back) {
                assert!((a - b.re).abs() < 1e-12 && b.im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standardize_two_values() {
        let g = RealGrid::new(1, 2, 1, vec![0.0, 2.0]).unwrap();
        let s = channel_standardize(&g);
        assert!((s.0.data[0] + 1.0).abs() < 1e-7);
        assert!((s.0.data[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let g = RealGrid::new(2, 2, 1, vec![0.0; 4]).unwrap();
        assert!(matches!(spectral_preprocess(&g), Err(Error::Dimension { .. })));
    }
}
