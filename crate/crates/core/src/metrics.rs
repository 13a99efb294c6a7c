//! Image quality metrics and residual distribution fitting.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::image::Image;

const PEAK: f64 = 255.0;

/// SSIM window: 11x11 Gaussian, std 1.5.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub const MIN_FIT_SAMPLES: usize = 100;
pub const HYPER_LAPLACIAN_EXPONENTS: [f64; 4] = [0.5, 0.6, 0.7, 0.8];
pub const HISTOGRAM_BINS: usize = 201;
/// Fraction of samples sharing one value above which a fit is flagged.
const DEGENERATE_FRACTION: f64 = 0.99;

pub fn mse(reference: &Image, test: &Image) -> Result<f64> {
    reference.check_same_dims(test, "mse")?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for 8-bit peak 255.
///
/// Returns `f64::INFINITY` for identical images.
pub fn psnr(reference: &Image, test: &Image) -> Result<f64> {
    let mse = mse(reference, test)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let radius = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, w) in k.iter_mut().enumerate() {
        let x = i as f64 - radius;
        *w = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Separable 'valid' filtering: output is (w - 10) x (h - 10).
fn filter_valid(data: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out_w = width - SSIM_WINDOW + 1;
    let out_h = height - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; out_w * height];
    for row in 0..height {
        let src = &data[row * width..(row + 1) * width];
        for col in 0..out_w {
            horiz[row * out_w + col] = k.iter().zip(&src[col..]).map(|(w, v)| w * v).sum();
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for row in 0..out_h {
        for col in 0..out_w {
            out[row * out_w + col] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * horiz[(row + i) * out_w + col])
                .sum();
        }
    }
    out
}

/// Mean structural similarity over all window positions fully inside the
/// image (single scale, Gaussian window, dynamic range 255).
pub fn ssim(reference: &Image, test: &Image) -> Result<f64> {
    reference.check_same_dims(test, "ssim")?;
    let (w, h) = reference.dims();
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = gaussian_kernel();
    let x = reference.data();
    let y = test.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();

    let mu_x = filter_valid(x, w, h, &k);
    let mu_y = filter_valid(y, w, h, &k);
    let e_xx = filter_valid(&xx, w, h, &k);
    let e_yy = filter_valid(&yy, w, h, &k);
    let e_xy = filter_valid(&xy, w, h, &k);

    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = e_xx[i] - mx * mx;
            let var_y = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelFit {
    pub scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Total log-likelihood in nats.
    pub loglik: f64,
    pub loglik_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn build(samples: &[f64], bins: usize) -> Self {
        let half = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let half = if half > 0.0 { half } else { 1.0 };
        let width = 2.0 * half / bins as f64;
        let edges = (0..=bins).map(|i| -half + i as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for &v in samples {
            let bin = (((v + half) / width).floor() as usize).min(bins - 1);
            counts[bin] += 1;
        }
        Self { edges, counts }
    }

    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }
}

/// Zero-mean fits of Gaussian, Laplacian and hyper-Laplacian densities to a
/// sample of residual coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionFitReport {
    pub sample_count: usize,
    pub gaussian: ModelFit,
    pub laplacian: ModelFit,
    pub hyper_laplacian: ModelFit,
    pub histogram: Histogram,
    pub warnings: Vec<String>,
}

impl DistributionFitReport {
    /// Model name -> fit, in the layout the residual report uses.
    pub fn models(&self) -> BTreeMap<&'static str, &ModelFit> {
        BTreeMap::from([
            ("gaussian", &self.gaussian),
            ("laplacian", &self.laplacian),
            ("hyper_laplacian", &self.hyper_laplacian),
        ])
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Wire<'a> {
            sample_count: usize,
            models: BTreeMap<&'static str, &'a ModelFit>,
            best_model: &'static str,
            histogram: &'a Histogram,
            warnings: &'a [String],
        }
        let wire = Wire {
            sample_count: self.sample_count,
            models: self.models(),
            best_model: self.best_model(),
            histogram: &self.histogram,
            warnings: &self.warnings,
        };
        serde_json::to_string_pretty(&wire).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn best_model(&self) -> &'static str {
        self.models()
            .into_iter()
            .max_by(|a, b| a.1.loglik.total_cmp(&b.1.loglik))
            .map(|(name, _)| name)
            .unwrap_or("gaussian")
    }
}

pub fn gaussian_pdf(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

pub fn laplacian_pdf(x: f64, b: f64) -> f64 {
    (-x.abs() / b).exp() / (2.0 * b)
}

/// Generalized Gaussian `p / (2 s Gamma(1/p)) exp(-|x/s|^p)`.
pub fn hyper_laplacian_pdf(x: f64, scale: f64, p: f64) -> f64 {
    (p.ln() - std::f64::consts::LN_2 - scale.ln() - ln_gamma(1.0 / p) - (x.abs() / scale).powf(p))
        .exp()
}

pub fn fit_residual_distributions(samples: &[f64]) -> Result<DistributionFitReport> {
    let n = samples.len();
    if n < MIN_FIT_SAMPLES {
        return Err(Error::TooFewSamples {
            got: n,
            need: MIN_FIT_SAMPLES,
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residual samples"));
    }
    let first = samples[0];
    if samples.iter().all(|&v| v == first) {
        return Err(Error::Degenerate(format!(
            "all {n} residual samples equal {first}"
        )));
    }
    let nf = n as f64;

    let mut warnings = Vec::new();
    let dominant = dominant_value_count(samples);
    if dominant as f64 > DEGENERATE_FRACTION * nf {
        warnings.push(format!(
            "degenerate input: {dominant} of {n} samples share a single value"
        ));
    }

    let sigma = (samples.iter().map(|v| v * v).sum::<f64>() / nf).sqrt();
    let gaussian_ll = -0.5 * nf * ((2.0 * std::f64::consts::PI * sigma * sigma).ln() + 1.0);

    let b = samples.iter().map(|v| v.abs()).sum::<f64>() / nf;
    let laplacian_ll = -nf * ((2.0 * b).ln() + 1.0);

    // For fixed p, matching E|x|^p = s^p / p gives the scale; the best p wins.
    let hyper = HYPER_LAPLACIAN_EXPONENTS
        .iter()
        .filter_map(|&p| {
            let moment = samples.iter().map(|v| v.abs().powf(p)).sum::<f64>() / nf;
            let scale = (p * moment).powf(1.0 / p);
            if !(scale > 0.0 && scale.is_finite()) {
                return None;
            }
            let norm = p.ln() - std::f64::consts::LN_2 - scale.ln() - ln_gamma(1.0 / p);
            let tail: f64 = samples.iter().map(|v| (v.abs() / scale).powf(p)).sum();
            Some((p, scale, nf * norm - tail))
        })
        .max_by(|a, b| a.2.total_cmp(&b.2))
        .ok_or_else(|| Error::Degenerate("no finite hyper-Laplacian scale".into()))?;

    Ok(DistributionFitReport {
        sample_count: n,
        gaussian: ModelFit {
            scale: sigma,
            p: None,
            loglik: gaussian_ll,
            loglik_per_sample: gaussian_ll / nf,
        },
        laplacian: ModelFit {
            scale: b,
            p: None,
            loglik: laplacian_ll,
            loglik_per_sample: laplacian_ll / nf,
        },
        hyper_laplacian: ModelFit {
            scale: hyper.1,
            p: Some(hyper.0),
            loglik: hyper.2,
            loglik_per_sample: hyper.2 / nf,
        },
        histogram: Histogram::build(samples, HISTOGRAM_BINS),
        warnings,
    })
}

fn dominant_value_count(samples: &[f64]) -> usize {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = 0;
    let mut run = 0;
    for i in 0..sorted.len() {
        run = if i > 0 && sorted[i] == sorted[i - 1] { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}
