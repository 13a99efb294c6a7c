//! First-pass estimate: an external denoiser's output or built-in
//! non-local means.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{load_image, Image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlmParams {
    /// Odd, >= 3.
    pub patch_side: usize,
    /// Odd search window side, >= patch_side.
    pub window_side: usize,
    /// Filtering strength in intensity units. `None` picks the default for
    /// the noise level.
    pub h: Option<f64>,
}

impl NlmParams {
    /// Patch/window/strength table by noise level.
    pub fn for_sigma(sigma: f64) -> Self {
        let (patch_side, window_side) = if sigma <= 15.0 {
            (3, 21)
        } else if sigma <= 30.0 {
            (5, 21)
        } else if sigma <= 45.0 {
            (7, 35)
        } else if sigma <= 75.0 {
            (9, 35)
        } else {
            (11, 35)
        };
        Self {
            patch_side,
            window_side,
            h: None,
        }
    }

    /// `h`, defaulting to `0.4 * sigma * patch_side`.
    pub fn strength(&self, sigma: f64) -> f64 {
        self.h.unwrap_or(0.4 * sigma * self.patch_side as f64)
    }

    pub fn validate(&self, sigma: f64) -> Result<()> {
        if self.patch_side < 3 || self.patch_side.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "nlm patch_side must be odd and >= 3, got {}",
                self.patch_side
            )));
        }
        if self.window_side < self.patch_side || self.window_side.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "nlm window_side must be odd and >= patch_side, got {}",
                self.window_side
            )));
        }
        let h = self.strength(sigma);
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("nlm h must be > 0, got {h}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FirstPassSpec {
    External(PathBuf),
    BuiltinNlm(NlmParams),
}

impl FirstPassSpec {
    pub fn nlm_for_sigma(sigma: f64) -> Self {
        FirstPassSpec::BuiltinNlm(NlmParams::for_sigma(sigma))
    }
}

pub fn first_pass(y: &Image, sigma: f64, spec: &FirstPassSpec) -> Result<Image> {
    match spec {
        FirstPassSpec::External(path) => {
            let z = load_image(path)?;
            z.check_same_dims(y, "external first-pass estimate")?;
            Ok(z)
        }
        FirstPassSpec::BuiltinNlm(params) => nlm_denoise(y, sigma, params),
    }
}

/// Reflect-padded copy of an image (`abcd|dcba` mirroring).
struct Padded {
    width: usize,
    data: Vec<f64>,
}

impl Padded {
    fn new(image: &Image, pad: usize) -> Self {
        let (w, h) = image.dims();
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let period = 2 * n;
            let mut m = i.rem_euclid(period);
            if m >= n {
                m = period - 1 - m;
            }
            m as usize
        };
        let pw = w + 2 * pad;
        let ph = h + 2 * pad;
        let mut data = Vec::with_capacity(pw * ph);
        for r in 0..ph {
            let sr = reflect(r as isize - pad as isize, h);
            for c in 0..pw {
                let sc = reflect(c as isize - pad as isize, w);
                data.push(image.get(sr, sc));
            }
        }
        Self { width: pw, data }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }
}

/// Normalized 2-D Gaussian over the patch, std = half the patch side.
fn patch_kernel(side: usize) -> Vec<f64> {
    let half = (side / 2) as f64;
    let std = half.max(1.0);
    let mut k = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            k.push((-(di * di + dj * dj) / (2.0 * std * std)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

struct NlmContext {
    padded: Padded,
    kernel: Vec<f64>,
    half_patch: usize,
    half_window: usize,
    pad: usize,
    noise_offset: f64,
    inv_h2: f64,
}

impl NlmContext {
    fn new(y: &Image, sigma: f64, params: &NlmParams) -> Result<Self> {
        params.validate(sigma)?;
        let half_patch = params.patch_side / 2;
        let half_window = params.window_side / 2;
        let pad = half_patch + half_window;
        let h = params.strength(sigma);
        Ok(Self {
            padded: Padded::new(y, pad),
            kernel: patch_kernel(params.patch_side),
            half_patch,
            half_window,
            pad,
            noise_offset: 2.0 * sigma * sigma,
            inv_h2: 1.0 / (h * h),
        })
    }

    /// Calls `visit(weight, value)` for every window candidate of `(row, col)`.
    #[inline]
    fn for_each_weight(&self, row: usize, col: usize, mut visit: impl FnMut(f64, f64)) {
        let side = 2 * self.half_patch + 1;
        let (pr, pc) = (row + self.pad, col + self.pad);
        for wr in pr - self.half_window..=pr + self.half_window {
            for wc in pc - self.half_window..=pc + self.half_window {
                let mut d2 = 0.0;
                for i in 0..side {
                    let ra = pr + i - self.half_patch;
                    let rb = wr + i - self.half_patch;
                    for j in 0..side {
                        let a = self.padded.at(ra, pc + j - self.half_patch);
                        let b = self.padded.at(rb, wc + j - self.half_patch);
                        d2 += self.kernel[i * side + j] * (a - b) * (a - b);
                    }
                }
                let w = (-(d2 - self.noise_offset).max(0.0) * self.inv_h2).exp();
                visit(w, self.padded.at(wr, wc));
            }
        }
    }
}

/// Non-local means with a Gaussian-weighted patch distance `d^2` (a
/// weighted mean of squared differences) and weights
/// `exp(-max(d^2 - 2 sigma^2, 0) / h^2)`. Borders are reflect-padded.
pub fn nlm_denoise(y: &Image, sigma: f64, params: &NlmParams) -> Result<Image> {
    let ctx = NlmContext::new(y, sigma, params)?;
    let (w, h) = y.dims();
    let data: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|row| {
            let ctx = &ctx;
            (0..w).map(move |col| {
                let mut num = 0.0;
                let mut den = 0.0;
                ctx.for_each_weight(row, col, |wt, v| {
                    num += wt * v;
                    den += wt;
                });
                num / den
            })
        })
        .collect();
    Image::new(w, h, data)
}

/// Normalized NLM weights for one output pixel, in window raster order.
pub fn nlm_pixel_weights(
    y: &Image,
    sigma: f64,
    params: &NlmParams,
    row: usize,
    col: usize,
) -> Result<Vec<f64>> {
    if row >= y.height() || col >= y.width() {
        return Err(Error::Geometry(format!("pixel ({row}, {col}) outside image")));
    }
    let ctx = NlmContext::new(y, sigma, params)?;
    let mut weights = Vec::new();
    ctx.for_each_weight(row, col, |wt, _| weights.push(wt));
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{add_gaussian_noise, save_image, NoiseSpec};
    use crate::metrics::psnr;

    fn std_dev(img: &Image) -> f64 {
        let m = img.mean();
        (img.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / img.data().len() as f64).sqrt()
    }

    #[test]
    fn external_is_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let clean = Image::from_fn(12, 9, |r, c| ((r * 19 + c * 5) % 256) as f64);
        let path = dir.path().join("z.pgm");
        save_image(&clean, &path).unwrap();
        let y = add_gaussian_noise(&clean, NoiseSpec::new(20.0, 1).unwrap());
        let z = first_pass(&y, 20.0, &FirstPassSpec::External(path)).unwrap();
        assert_eq!(z, clean);
    }

    #[test]
    fn external_dimension_mismatch_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pgm");
        save_image(&Image::filled(5, 5, 1.0), &path).unwrap();
        let y = Image::filled(6, 5, 1.0);
        assert!(matches!(
            first_pass(&y, 10.0, &FirstPassSpec::External(path)),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            first_pass(&y, 10.0, &FirstPassSpec::External(dir.path().join("nope.pgm"))),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn nlm_reduces_noise_on_constant_image() {
        let clean = Image::filled(48, 48, 120.0);
        let y = add_gaussian_noise(&clean, NoiseSpec::new(30.0, 4).unwrap());
        let z = first_pass(&y, 30.0, &FirstPassSpec::nlm_for_sigma(30.0)).unwrap();
        assert!(std_dev(&z) < std_dev(&y) * 0.5, "{} vs {}", std_dev(&z), std_dev(&y));
        assert!(psnr(&clean, &z).unwrap() > psnr(&clean, &y).unwrap());
    }

    #[test]
    fn tiny_h_returns_input() {
        let y = Image::from_fn(16, 16, |r, c| ((r * 37 + c * 101) % 256) as f64);
        let params = NlmParams {
            patch_side: 3,
            window_side: 7,
            h: Some(1e-6),
        };
        let z = nlm_denoise(&y, 1.0, &params).unwrap();
        for (a, b) in z.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_are_normalized_and_non_negative() {
        let clean = Image::from_fn(20, 20, |r, c| (r * 8 + c * 3) as f64);
        let y = add_gaussian_noise(&clean, NoiseSpec::new(25.0, 2).unwrap());
        let params = NlmParams::for_sigma(25.0);
        for (r, c) in [(0, 0), (10, 7), (19, 19)] {
            let w = nlm_pixel_weights(&y, 25.0, &params, r, c).unwrap();
            assert_eq!(w.len(), 21 * 21);
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let y = Image::filled(8, 8, 1.0);
        for (p, w, h) in [(4, 9, None), (1, 9, None), (5, 3, None), (3, 9, Some(0.0))] {
            let params = NlmParams {
                patch_side: p,
                window_side: w,
                h,
            };
            assert!(nlm_denoise(&y, 10.0, &params).is_err(), "{p} {w} {h:?}");
        }
    }

    #[test]
    fn reflect_padding_mirrors_edges() {
        let img = Image::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let p = Padded::new(&img, 2);
        let row: Vec<f64> = (0..7).map(|c| p.at(2, c)).collect();
        assert_eq!(row, vec![2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 2.0]);
    }
}
