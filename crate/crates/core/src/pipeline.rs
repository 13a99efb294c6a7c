//! The iterative denoising loop.
//!
//! Each pass re-adds a fraction of the method noise to the current estimate,
//! picks the image used for block matching with an SSIM gate, re-estimates
//! the noise level and then, for every reference patch, shrinks the noisy
//! group codes toward the first-pass codes under a per-group PCA basis.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_sparse::{
    encode, estimate_residual_std, lambda_schedule, pca_dictionary, reconstruct, shrink_group,
    CodeMatrix, Dictionary,
};
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::patch::{
    block_match, gather_group, reference_positions, Aggregator, GroupIndex, PatchGeometry,
    PatchGroup, Position,
};

/// References processed per parallel batch. Fixed so results do not depend
/// on the thread count.
const BATCH: usize = 256;

pub const DEFAULT_WINDOW: usize = 30;
pub const DEFAULT_K: usize = 60;
pub const DEFAULT_TAU: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseParams {
    pub sigma: f64,
    pub geometry: PatchGeometry,
    pub c: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
    pub iterations: usize,
}

impl DenoiseParams {
    /// Defaults for a noise level: patch side 6/7/8/9 at sigma <= 20/50/75/
    /// above, 30x30 window, k = 60, `(c, gamma, delta)` = (0.7, 1, 0.67)
    /// up to sigma 30 and (1.05, 1, 0.67) above, tau = 1e-4, and 6/8/10
    /// iterations at sigma <= 30/50/above.
    pub fn for_sigma(sigma: f64) -> Self {
        let patch_side = if sigma <= 20.0 {
            6
        } else if sigma <= 50.0 {
            7
        } else if sigma <= 75.0 {
            8
        } else {
            9
        };
        let (c, gamma, delta) = if sigma <= 30.0 {
            (0.7, 1.0, 0.67)
        } else {
            (1.05, 1.0, 0.67)
        };
        let iterations = if sigma <= 30.0 {
            6
        } else if sigma <= 50.0 {
            8
        } else {
            10
        };
        Self {
            sigma,
            geometry: PatchGeometry {
                patch_side,
                stride: PatchGeometry::default_stride(patch_side),
                window_side: DEFAULT_WINDOW,
                k: DEFAULT_K,
            },
            c,
            gamma,
            delta,
            tau: DEFAULT_TAU,
            iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must be in (0, 1], got {}", self.delta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return bad(format!("c must be >= 0, got {}", self.c));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        self.geometry.validate()
    }
}

/// Image that drives block matching in an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateChoice {
    Regularized,
    FirstPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTelemetry {
    pub t: usize,
    pub sigma_t: f64,
    pub gate_choice: GateChoice,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    pub ssim_gate_value: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub image: Image,
    pub telemetry: Vec<IterationTelemetry>,
    /// Estimate after each iteration, when requested.
    pub iterates: Vec<Image>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DenoiseOptions<'a> {
    /// Clean image for per-iteration PSNR telemetry.
    pub reference: Option<&'a Image>,
    pub keep_iterates: bool,
}

/// Everything computed for one group, handed to observers before
/// aggregation. Groups arrive in reference order.
pub struct GroupEvent<'a> {
    pub iteration: usize,
    pub group: usize,
    pub index: &'a GroupIndex,
    pub dictionary: &'a Dictionary,
    /// Codes of the regularized image's group before shrinkage.
    pub noisy_code: &'a CodeMatrix,
    /// Codes of the first-pass group.
    pub estimate_code: &'a CodeMatrix,
}

/// `x_hat + delta * (y - x_hat)`.
pub fn iterative_regularization(y: &Image, x_hat: &Image, delta: f64) -> Result<Image> {
    x_hat.zip_map(y, "iterative_regularization", |x, y| x + delta * (y - x))
}

/// `gamma * sqrt(max(0, sigma0^2 - mean((y - x_hat)^2)))`.
pub fn update_sigma(sigma0: f64, y: &Image, x_hat: &Image, gamma: f64) -> Result<f64> {
    let ms = crate::metrics::mse(y, x_hat)?;
    Ok(gamma * (sigma0 * sigma0 - ms).max(0.0).sqrt())
}

/// SSIM gate. Returns the matching target and `ssim(candidate, z)`.
///
/// The candidate is chosen when its SSIM against `z` improves on
/// `previous`'s by less than `tau`.
pub fn select_target(
    candidate: &Image,
    previous: &Image,
    z: &Image,
    tau: f64,
) -> Result<(GateChoice, f64)> {
    let s_new = ssim(candidate, z)?;
    let s_old = ssim(previous, z)?;
    let choice = if s_new - s_old < tau {
        GateChoice::Regularized
    } else {
        GateChoice::FirstPass
    };
    Ok((choice, s_new))
}

struct GroupResult {
    index: GroupIndex,
    dictionary: Dictionary,
    noisy_code: CodeMatrix,
    estimate_code: CodeMatrix,
    estimate: PatchGroup,
}

struct GroupPass<'a> {
    target: &'a Image,
    y_reg: &'a Image,
    z: &'a Image,
    geometry: PatchGeometry,
    sigma_n: f64,
    c: f64,
}

impl GroupPass<'_> {
    fn run(&self, reference: Position) -> Result<GroupResult> {
        let index = block_match(self.target, reference, &self.geometry);
        let noisy = gather_group(self.y_reg, &index)?;
        let first = gather_group(self.z, &index)?;
        let dictionary = pca_dictionary(&noisy)?;
        let noisy_code = encode(&dictionary, &noisy)?;
        let estimate_code = encode(&dictionary, &first)?;
        let residual_std = estimate_residual_std(&noisy_code, &estimate_code)?;
        let schedule = lambda_schedule(self.sigma_n, &residual_std, self.c);
        let shrunk = shrink_group(&noisy_code, &estimate_code, &schedule)?;
        let estimate = reconstruct(&dictionary, &shrunk, self.geometry.patch_side)?;
        Ok(GroupResult {
            index,
            dictionary,
            noisy_code,
            estimate_code,
            estimate,
        })
    }

    /// Processes every reference and aggregates. Per-group work runs in
    /// parallel; aggregation and observer calls happen in reference order.
    fn execute(
        &self,
        references: &[Position],
        iteration: usize,
        observer: &mut dyn FnMut(&GroupEvent<'_>),
    ) -> Result<Image> {
        let (w, h) = self.y_reg.dims();
        let mut agg = Aggregator::new(w, h);
        let mut group_no = 0;
        for batch in references.chunks(BATCH) {
            let results: Vec<GroupResult> = batch
                .par_iter()
                .map(|&r| self.run(r))
                .collect::<Result<_>>()?;
            for res in &results {
                observer(&GroupEvent {
                    iteration,
                    group: group_no,
                    index: &res.index,
                    dictionary: &res.dictionary,
                    noisy_code: &res.noisy_code,
                    estimate_code: &res.estimate_code,
                });
                agg.add(&res.estimate, &res.index)?;
                group_no += 1;
            }
        }
        agg.finish()
    }
}

pub fn denoise(y: &Image, z: &Image, params: &DenoiseParams) -> Result<DenoiseOutput> {
    denoise_with(y, z, params, DenoiseOptions::default(), &mut |_| {})
}

/// Full loop with telemetry options and a per-group observer.
pub fn denoise_with(
    y: &Image,
    z: &Image,
    params: &DenoiseParams,
    options: DenoiseOptions<'_>,
    observer: &mut dyn FnMut(&GroupEvent<'_>),
) -> Result<DenoiseOutput> {
    params.validate()?;
    y.check_same_dims(z, "noisy vs first-pass")?;
    if let Some(reference) = options.reference {
        reference.check_same_dims(y, "clean reference")?;
    }
    let (w, h) = y.dims();
    let references = reference_positions(w, h, &params.geometry)?;

    let mut x_hat = y.clone();
    let mut prev_reg: Option<Image> = None;
    let mut telemetry = Vec::with_capacity(params.iterations);
    let mut iterates = Vec::new();

    for t in 1..=params.iterations {
        let started = Instant::now();
        let y_reg = iterative_regularization(y, &x_hat, params.delta)?;
        let (choice, gate_value) = match &prev_reg {
            None => (GateChoice::FirstPass, ssim(&y_reg, z)?),
            Some(prev) => select_target(&y_reg, prev, z, params.tau)?,
        };
        // Noise left in the image that is about to be shrunk.
        let sigma_t = update_sigma(params.sigma, y, &y_reg, params.gamma)?;

        let pass = GroupPass {
            target: match choice {
                GateChoice::Regularized => &y_reg,
                GateChoice::FirstPass => z,
            },
            y_reg: &y_reg,
            z,
            geometry: params.geometry,
            sigma_n: sigma_t,
            c: params.c,
        };
        x_hat = pass.execute(&references, t, observer)?;
        if x_hat.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("iteration estimate"));
        }

        telemetry.push(IterationTelemetry {
            t,
            sigma_t,
            gate_choice: choice,
            psnr: options.reference.map(|r| psnr(r, &x_hat)).transpose()?,
            ssim_gate_value: gate_value,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if options.keep_iterates {
            iterates.push(x_hat.clone());
        }
        prev_reg = Some(y_reg);
    }

    Ok(DenoiseOutput {
        image: x_hat,
        telemetry,
        iterates,
    })
}

/// Residual codes `A0 - B` of every group in the first iteration, in
/// reference order and column-major within a group. The first iteration
/// regularizes to `y` itself and matches on `z`, so only the geometry
/// matters.
pub fn collect_residuals(y: &Image, z: &Image, geometry: &PatchGeometry) -> Result<Vec<f64>> {
    geometry.validate()?;
    y.check_same_dims(z, "noisy vs first-pass")?;
    let (w, h) = y.dims();
    let references = reference_positions(w, h, geometry)?;
    let pass = GroupPass {
        target: z,
        y_reg: y,
        z,
        geometry: *geometry,
        sigma_n: 0.0,
        c: 0.0,
    };
    let mut samples = Vec::new();
    pass.execute(&references, 1, &mut |ev| {
        samples.extend(
            ev.noisy_code
                .coefficients
                .iter()
                .zip(ev.estimate_code.coefficients.iter())
                .map(|(a, b)| a - b),
        );
    })?;
    Ok(samples)
}
