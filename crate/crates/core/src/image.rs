//! Grayscale image container, PGM/PNG I/O and seeded Gaussian noise.
//!
//! Samples are `f64` in row-major order with a nominal range of `[0, 255]`.
//! Nothing in here clamps except [`save_image`]: noisy intermediates are
//! allowed to leave the nominal range.
//!
//! Noise is drawn from `ChaCha8Rng::seed_from_u64(seed)` through
//! `rand_distr::StandardNormal` (ziggurat), one draw per pixel in row-major
//! order. Changing either breaks stored test vectors.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Luminance weights applied to RGB input.
const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "expected {} samples for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Constant image. Panics on zero dimensions or a non-finite value.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("valid constant image")
    }

    /// Builds an image from `f(row, col)`. Panics on zero dimensions or
    /// non-finite samples.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self::new(width, height, data).expect("valid generated image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Row slice `[col, col + len)` of `row`.
    #[inline]
    pub fn row_segment(&self, row: usize, col: usize, len: usize) -> &[f64] {
        let start = row * self.width + col;
        &self.data[start..start + len]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn check_same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(what, self.dims(), other.dims()));
        }
        Ok(())
    }

    /// Elementwise combination of two equally sized images.
    pub(crate) fn zip_map(
        &self,
        other: &Image,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Image> {
        self.check_same_dims(other, what)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Image::new(self.width, self.height, data)
    }

    /// Top-left `width`x`height` window starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<Image> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::Geometry(format!(
                "crop {width}x{height} at ({row}, {col}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(width, height, |r, c| self.get(row + r, col + c)))
    }

    /// The 8-bit values [`save_image`] would store.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

/// Clamp to `[0, 255]` and round half-up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(Self { sigma, seed })
    }
}

/// Adds i.i.d. `Normal(0, sigma^2)` noise. The result is not clamped.
pub fn add_gaussian_noise(image: &Image, spec: NoiseSpec) -> Image {
    if spec.sigma == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let data = image
        .data
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + spec.sigma * n
        })
        .collect();
    Image {
        width: image.width,
        height: image.height,
        data,
    }
}

/// Loads an 8-bit PGM (P5) or 8-bit PNG. The format is detected from the
/// file contents. Color PNGs are converted with Rec. 601 luma weights.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P") {
        decode_pgm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)
    } else {
        Err(Error::Format(format!(
            "unsupported format: {} is neither PGM nor PNG",
            path.display()
        )))
    }
}

/// Writes `image` as PGM (P5) or PNG depending on the extension, after
/// clamping to `[0, 255]` and rounding half-up.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let encoded = match ext.as_deref() {
        Some("pgm") => encode_pgm(image),
        Some("png") => encode_png(image)?,
        other => {
            return Err(Error::Format(format!(
                "unsupported output extension: {}",
                other.unwrap_or("<none>")
            )))
        }
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(&encoded)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Format(format!(
            "unsupported PGM magic: {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_header_number(bytes, &mut pos, "width")?;
    let height = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "unsupported bit depth: PGM maxval {maxval}, only 255 is accepted"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("truncated PGM raster: expected {need} bytes")))?;
    Image::new(width, height, raster.iter().map(|&b| f64::from(b)).collect())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let token = next_token(bytes, pos)?;
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("malformed PGM {field}")))
}

fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_u8());
    out
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("malformed PNG: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "unsupported bit depth: PNG has {} bits per sample",
            info.bit_depth as u8
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Format(
                "unsupported color type: indexed PNG".to_string(),
            ))
        }
    };
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("malformed PNG: {e}")))?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let data = buf[..frame.buffer_size()]
        .chunks_exact(channels)
        .map(|px| match channels {
            1 | 2 => f64::from(px[0]),
            _ => {
                LUMA_R * f64::from(px[0]) + LUMA_G * f64::from(px[1]) + LUMA_B * f64::from(px[2])
            }
        })
        .collect();
    Image::new(width, height, data)
}

fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(format!("PNG encode failed: {e}")))?;
        writer
            .write_image_data(&image.to_u8())
            .map_err(|e| Error::Format(format!("PNG encode failed: {e}")))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) {
        let file = fs::File::create(path).unwrap();
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.write_header().unwrap().write_image_data(data).unwrap();
    }

    #[test]
    fn pgm_bytes_map_directly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, b"P5\n# comment\n2 2\n255\n\x00\xff\x80\x40").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(img.data(), &[0.0, 255.0, 128.0, 64.0]);
    }

    #[test]
    fn pgm_rejects_other_maxval_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported bit depth"), "{err}");
        fs::write(&path, b"P2\n1 1\n255\n0\n").unwrap();
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncated_pgm_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, b"P5\n4 4\n255\n\x00\x00").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = load_image("/definitely/not/here.pgm").unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
        assert!(err.to_string().starts_with("input not found"));
    }

    #[test]
    fn png_16_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        write_png(&path, 1, 1, png::ColorType::Grayscale, png::BitDepth::Sixteen, &[0, 0]);
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported bit depth"), "{err}");
    }

    #[test]
    fn rgb_png_converted_by_luminance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("red.png");
        write_png(&path, 1, 1, png::ColorType::Rgb, png::BitDepth::Eight, &[255, 0, 0]);
        let img = load_image(&path).unwrap();
        assert!((img.get(0, 0) - 76.245).abs() < 1e-12);
    }

    #[test]
    fn save_clamps_and_rounds_half_up() {
        assert_eq!(quantize(255.7), 255);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(2.5), 3);
        assert_eq!(quantize(2.49), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let img = Image::new(3, 1, vec![255.7, -3.0, 10.5]).unwrap();
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap().data(), &[255.0, 0.0, 11.0]);
    }

    #[test]
    fn integer_images_round_trip_through_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(7, 5, |r, c| ((r * 37 + c * 11) % 256) as f64);
        for name in ["x.pgm", "x.png", "x.PNG"] {
            let path = dir.path().join(name);
            save_image(&img, &path).unwrap();
            assert_eq!(load_image(&path).unwrap(), img, "{name}");
        }
    }

    #[test]
    fn unknown_extension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(2, 2, 1.0);
        assert!(matches!(
            save_image(&img, dir.path().join("x.bmp")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(Image::new(0, 3, vec![]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let img = Image::from_fn(8, 8, |r, c| (r * c) as f64);
        assert_eq!(add_gaussian_noise(&img, NoiseSpec::new(0.0, 3).unwrap()), img);
    }

    #[test]
    fn noise_is_deterministic_and_seed_dependent() {
        let img = Image::filled(16, 16, 100.0);
        let a = add_gaussian_noise(&img, NoiseSpec::new(10.0, 42).unwrap());
        let b = add_gaussian_noise(&img, NoiseSpec::new(10.0, 42).unwrap());
        let c = add_gaussian_noise(&img, NoiseSpec::new(10.0, 43).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_statistics_on_512_square() {
        let img = Image::filled(512, 512, 0.0);
        for (sigma, seed) in [(10.0, 1), (30.0, 2), (100.0, 3)] {
            let noisy = add_gaussian_noise(&img, NoiseSpec::new(sigma, seed).unwrap());
            let n = noisy.data().len() as f64;
            let mean = noisy.mean();
            let std = (noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() <= 0.5, "mean {mean}");
            assert!((std / sigma - 1.0).abs() <= 0.01, "std {std} for sigma {sigma}");
        }
    }

    #[test]
    fn noise_spec_rejects_negative_sigma() {
        assert!(NoiseSpec::new(-1.0, 0).is_err());
        assert!(NoiseSpec::new(f64::NAN, 0).is_err());
    }
}
