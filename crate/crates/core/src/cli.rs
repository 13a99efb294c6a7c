//! Command-line front end: `denoise`, `bench` and `residual`.
//!
//! Every flag can also come from a JSON file given with `--config`; flags
//! win over the file, and `GSRC_THREADS` is consulted last for the thread
//! count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::firstpass::{first_pass, FirstPassSpec};
use crate::image::{add_gaussian_noise, load_image, save_image, Image, NoiseSpec};
use crate::metrics::{fit_residual_distributions, psnr, ssim};
use crate::patch::PatchGeometry;
use crate::pipeline::{collect_residuals, denoise_with, DenoiseOptions, DenoiseParams};

pub const THREADS_ENV: &str = "GSRC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gsrc", version, about = "Group sparsity residual constraint denoising")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Denoise one image.
    Denoise(RunArgs),
    /// Synthesize noise on a directory of clean images and tabulate PSNR.
    Bench(RunArgs),
    /// Fit distributions to the first-iteration group residuals.
    Residual(RunArgs),
}

/// Flags shared by all commands. The JSON config file uses the same field
/// names.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// JSON file with defaults for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Input image (denoise, residual) or directory of clean images (bench).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Clean reference for PSNR/SSIM reporting.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Output image (denoise) or JSON report (residual).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Noise std; bench accepts a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    pub sigma: Option<Vec<f64>>,
    /// Synthesize noise with this seed (denoise, residual) or mix it into
    /// the per-image seeds (bench).
    #[arg(long)]
    pub seed: Option<u64>,
    /// `nlm` or `external:PATH`.
    #[arg(long)]
    pub first_pass: Option<String>,
    #[arg(long)]
    pub patch_side: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Telemetry JSON-lines path (denoise). Defaults to beside the output.
    #[arg(long)]
    pub telemetry: Option<PathBuf>,
    /// Results CSV (bench) or histogram CSV (residual).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

macro_rules! fill {
    ($dst:ident, $src:ident, $($field:ident),*) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field; } )*
    };
}

impl RunArgs {
    /// Fills unset flags from the `--config` file and the environment.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: RunArgs = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidParameter(format!("config {}: {e}", path.display())))?;
            fill!(
                self, file, input, clean, output, sigma, seed, first_pass, patch_side, stride,
                window, k, iterations, c, gamma, delta, tau, threads, telemetry, csv
            );
        }
        if self.threads.is_none() {
            if let Ok(v) = std::env::var(THREADS_ENV) {
                let n = v.trim().parse().map_err(|_| {
                    Error::InvalidParameter(format!("{THREADS_ENV} must be an integer, got {v:?}"))
                })?;
                self.threads = Some(n);
            }
        }
        Ok(self)
    }

    fn input(&self) -> Result<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("--input is required".into()))
    }

    fn single_sigma(&self) -> Result<f64> {
        match self.sigma.as_deref() {
            Some([s]) => Ok(*s),
            Some(_) => Err(Error::InvalidParameter("expected a single --sigma".into())),
            None => Err(Error::InvalidParameter("--sigma is required".into())),
        }
    }

    fn sigmas(&self) -> Result<&[f64]> {
        match self.sigma.as_deref() {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::InvalidParameter("--sigma is required".into())),
        }
    }

    /// Defaults for `sigma` with any geometry or scalar overrides applied.
    pub fn params(&self, sigma: f64) -> Result<DenoiseParams> {
        let mut p = DenoiseParams::for_sigma(sigma);
        if let Some(side) = self.patch_side {
            p.geometry.patch_side = side;
            p.geometry.stride = PatchGeometry::default_stride(side);
        }
        if let Some(v) = self.stride {
            p.geometry.stride = v;
        }
        if let Some(v) = self.window {
            p.geometry.window_side = v;
        }
        if let Some(v) = self.k {
            p.geometry.k = v;
        }
        if let Some(v) = self.iterations {
            p.iterations = v;
        }
        if let Some(v) = self.c {
            p.c = v;
        }
        if let Some(v) = self.gamma {
            p.gamma = v;
        }
        if let Some(v) = self.delta {
            p.delta = v;
        }
        if let Some(v) = self.tau {
            p.tau = v;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn first_pass_spec(&self, sigma: f64) -> Result<FirstPassSpec> {
        match self.first_pass.as_deref() {
            None | Some("nlm") => Ok(FirstPassSpec::nlm_for_sigma(sigma)),
            Some(s) => match s.strip_prefix("external:") {
                Some(path) if !path.is_empty() => Ok(FirstPassSpec::External(path.into())),
                _ => Err(Error::InvalidParameter(format!(
                    "--first-pass must be nlm or external:PATH, got {s:?}"
                ))),
            },
        }
    }
}

/// Runs a parsed command line, inside a dedicated thread pool when a thread
/// count is configured.
pub fn run(cli: Cli) -> Result<()> {
    let (command, args): (fn(&RunArgs) -> Result<()>, RunArgs) = match cli.command {
        Command::Denoise(a) => (cmd_denoise, a),
        Command::Bench(a) => (cmd_bench, a),
        Command::Residual(a) => (cmd_residual, a),
    };
    let args = args.resolve()?;
    match args.threads {
        Some(0) => Err(Error::InvalidParameter("threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(|| command(&args)),
        None => command(&args),
    }
}

/// `out.png` -> `out.telemetry.jsonl`.
pub fn default_telemetry_path(output: &Path) -> PathBuf {
    output.with_extension("telemetry.jsonl")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Noisy input, optional clean reference, and sigma for `denoise` and
/// `residual`. With `--seed` the input is taken as clean and noise is
/// synthesized; otherwise the input is already noisy.
fn observed(args: &RunArgs) -> Result<(Image, Option<Image>, f64)> {
    let sigma = args.single_sigma()?;
    let input = load_image(args.input()?)?;
    let clean = args.clean.as_ref().map(load_image).transpose()?;
    if let Some(clean) = &clean {
        clean.check_same_dims(&input, "clean reference")?;
    }
    match args.seed {
        Some(seed) => {
            let y = add_gaussian_noise(&input, NoiseSpec::new(sigma, seed)?);
            Ok((y, Some(clean.unwrap_or(input)), sigma))
        }
        None => Ok((input, clean, sigma)),
    }
}

pub fn cmd_denoise(args: &RunArgs) -> Result<()> {
    let output = args
        .output
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("--output is required".into()))?;
    let (y, clean, sigma) = observed(args)?;
    let params = args.params(sigma)?;
    let z = first_pass(&y, sigma, &args.first_pass_spec(sigma)?)?;
    let options = DenoiseOptions {
        reference: clean.as_ref(),
        keep_iterates: false,
    };
    let out = denoise_with(&y, &z, &params, options, &mut |_| {})?;
    save_image(&out.image, output)?;

    let mut lines = String::new();
    for record in &out.telemetry {
        let line =
            serde_json::to_string(record).map_err(|e| Error::Serialization(e.to_string()))?;
        lines.push_str(&line);
        lines.push('\n');
    }
    let telemetry = args
        .telemetry
        .clone()
        .unwrap_or_else(|| default_telemetry_path(output));
    write_file(&telemetry, lines.as_bytes())?;

    if let Some(clean) = &clean {
        println!(
            "psnr_noisy={:.4} psnr_firstpass={:.4} psnr={:.4} ssim={:.4}",
            psnr(clean, &y)?,
            psnr(clean, &z)?,
            psnr(clean, &out.image)?,
            ssim(clean, &out.image)?
        );
    }
    Ok(())
}

/// Bench CSV row. Summary rows carry `image = "summary"` and per-sigma
/// means; failed rows carry `status = "FAILED"` and the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub image: String,
    pub sigma: f64,
    pub psnr_noisy: Option<f64>,
    pub psnr_firstpass: Option<f64>,
    pub psnr_gsrc: Option<f64>,
    pub ssim_gsrc: Option<f64>,
    pub seconds: Option<f64>,
    pub seconds_std: Option<f64>,
    pub firstpass_seconds: Option<f64>,
    pub status: String,
    pub error: String,
}

pub const SUMMARY_IMAGE: &str = "summary";

/// Noise seed for one benchmark item: the first 8 bytes of
/// SHA-256(`name`, `sigma`, `seed`).
pub fn bench_seed(name: &str, sigma: f64, seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    hasher.update(sigma.to_le_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn bench_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("pgm" | "png")) {
            images.push(path);
        }
    }
    images.sort();
    if images.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no images in {}",
            dir.display()
        )));
    }
    Ok(images)
}

fn bench_one(args: &RunArgs, path: &Path, name: &str, sigma: f64) -> Result<BenchRow> {
    let clean = load_image(path)?;
    let params = args.params(sigma)?;
    let seed = bench_seed(name, sigma, args.seed.unwrap_or(0));
    let y = add_gaussian_noise(&clean, NoiseSpec::new(sigma, seed)?);
    let started = Instant::now();
    let z = first_pass(&y, sigma, &args.first_pass_spec(sigma)?)?;
    let firstpass_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let out = denoise_with(&y, &z, &params, DenoiseOptions::default(), &mut |_| {})?;
    let seconds = started.elapsed().as_secs_f64();
    Ok(BenchRow {
        image: name.to_string(),
        sigma,
        psnr_noisy: Some(psnr(&clean, &y)?),
        psnr_firstpass: Some(psnr(&clean, &z)?),
        psnr_gsrc: Some(psnr(&clean, &out.image)?),
        ssim_gsrc: Some(ssim(&clean, &out.image)?),
        seconds: Some(seconds),
        seconds_std: None,
        firstpass_seconds: Some(firstpass_seconds),
        status: "ok".into(),
        error: String::new(),
    })
}

fn summarize(sigma: f64, rows: &[BenchRow]) -> BenchRow {
    let ok: Vec<&BenchRow> = rows.iter().filter(|r| r.status == "ok").collect();
    let mean = |f: fn(&BenchRow) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let seconds_mean = mean(|r| r.seconds);
    let seconds_std = seconds_mean.map(|m| {
        let v: Vec<f64> = ok.iter().filter_map(|r| r.seconds).collect();
        (v.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / v.len() as f64).sqrt()
    });
    BenchRow {
        image: SUMMARY_IMAGE.into(),
        sigma,
        psnr_noisy: mean(|r| r.psnr_noisy),
        psnr_firstpass: mean(|r| r.psnr_firstpass),
        psnr_gsrc: mean(|r| r.psnr_gsrc),
        ssim_gsrc: mean(|r| r.ssim_gsrc),
        seconds: seconds_mean,
        seconds_std,
        firstpass_seconds: mean(|r| r.firstpass_seconds),
        status: format!("{}/{}", ok.len(), rows.len()),
        error: String::new(),
    }
}

pub fn cmd_bench(args: &RunArgs) -> Result<()> {
    let images = bench_images(args.input()?)?;
    let sigmas = args.sigmas()?;
    let sink: Box<dyn Write> = match &args.csv {
        Some(path) => Box::new(fs::File::create(path).map_err(|e| Error::io(path, e))?),
        None => Box::new(std::io::stdout()),
    };
    let mut writer = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Serialization(e.to_string());
    let mut failures = 0;
    for &sigma in sigmas {
        let mut rows = Vec::new();
        for path in &images {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            let row = bench_one(args, path, &name, sigma).unwrap_or_else(|e| {
                failures += 1;
                BenchRow {
                    image: name.clone(),
                    sigma,
                    psnr_noisy: None,
                    psnr_firstpass: None,
                    psnr_gsrc: None,
                    ssim_gsrc: None,
                    seconds: None,
                    seconds_std: None,
                    firstpass_seconds: None,
                    status: "FAILED".into(),
                    error: e.to_string(),
                }
            });
            eprintln!(
                "bench {name} sigma={sigma}: {}",
                match row.psnr_gsrc {
                    Some(p) => format!("{p:.2} dB"),
                    None => format!("FAILED ({})", row.error),
                }
            );
            writer.serialize(&row).map_err(csv_err)?;
            rows.push(row);
        }
        writer.serialize(summarize(sigma, &rows)).map_err(csv_err)?;
    }
    writer
        .flush()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    if failures > 0 {
        return Err(Error::InvalidParameter(format!(
            "{failures} benchmark item(s) failed"
        )));
    }
    Ok(())
}

/// `report.json` -> `report.hist.csv`.
pub fn default_histogram_path(output: &Path) -> PathBuf {
    output.with_extension("hist.csv")
}

pub fn cmd_residual(args: &RunArgs) -> Result<()> {
    let output = args
        .output
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("--output is required".into()))?;
    let sigma = args.single_sigma()?;
    let clean = load_image(args.input()?)?;
    let y = add_gaussian_noise(&clean, NoiseSpec::new(sigma, args.seed.unwrap_or(0))?);
    let z = first_pass(&y, sigma, &args.first_pass_spec(sigma)?)?;
    let geometry = args.params(sigma.max(f64::MIN_POSITIVE))?.geometry;
    let samples = collect_residuals(&y, &z, &geometry)?;
    let histogram_path = args
        .csv
        .clone()
        .unwrap_or_else(|| default_histogram_path(output));

    let report = match fit_residual_distributions(&samples) {
        Ok(report) => report,
        Err(Error::Degenerate(reason)) => {
            eprintln!("warning: degenerate input: {reason}");
            let json = serde_json::json!({
                "sample_count": samples.len(),
                "models": null,
                "best_model": null,
                "warnings": [format!("degenerate input: {reason}")],
            });
            write_file(output, json.to_string().as_bytes())?;
            return write_file(&histogram_path, HISTOGRAM_HEADER.as_bytes());
        }
        Err(e) => return Err(e),
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_file(output, report.to_json()?.as_bytes())?;

    let mut csv = String::from(HISTOGRAM_HEADER);
    let h = &report.histogram;
    for (i, &count) in h.counts.iter().enumerate() {
        let (lo, hi) = (h.edges[i], h.edges[i + 1]);
        csv.push_str(&format!(
            "{lo},{hi},{},{count},{}\n",
            0.5 * (lo + hi),
            (count as f64).ln_1p()
        ));
    }
    write_file(&histogram_path, csv.as_bytes())?;
    println!(
        "samples={} best={} loglik_gaussian={:.3} loglik_laplacian={:.3} loglik_hyper_laplacian={:.3}",
        report.sample_count,
        report.best_model(),
        report.gaussian.loglik,
        report.laplacian.loglik,
        report.hyper_laplacian.loglik
    );
    Ok(())
}

/// Histogram CSV columns; `log_count` is `ln(1 + count)`.
pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,center,count,log_count\n";
