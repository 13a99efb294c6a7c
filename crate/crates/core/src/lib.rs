//! Grayscale image denoising by group sparsity residual constraint.
//!
//! Noisy group codes under per-group PCA bases are pulled toward the codes
//! of a first-pass estimate by soft-thresholding their difference, inside an
//! iterative-regularization loop. See [`pipeline::denoise`].

pub mod cli;
pub mod error;
pub mod firstpass;
pub mod group_sparse;
pub mod image;
pub mod metrics;
pub mod patch;
pub mod pipeline;

pub use error::{Error, Result};
pub use firstpass::{first_pass, FirstPassSpec, NlmParams};
pub use image::{add_gaussian_noise, load_image, save_image, Image, NoiseSpec};
pub use metrics::{fit_residual_distributions, psnr, ssim, DistributionFitReport};
pub use patch::{GroupIndex, PatchGeometry, PatchGroup, Position};
pub use pipeline::{denoise, DenoiseOutput, DenoiseParams, GateChoice, IterationTelemetry};
