//! Synthetic grayscale image distribution and PGM (P5) image I/O.
//!
//! Each image is a linear-gradient background plus two to four isotropic
//! Gaussian blobs, clamped to `[-1, 1]`. An image is a pure function of its
//! seed; image `i` of a dataset uses seed `master_seed + i`, with the test
//! split indexed after the training split.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels in `[-1, 1]`.
    pub pixels: Vec<f64>,
    pub seed: u64,
}

impl ImageSample {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, seed: u64) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension {
                what: "image pixels",
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Copy with pixels clamped into the image range.
    pub fn clamped(&self) -> ImageSample {
        ImageSample {
            pixels: self.pixels.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub master_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            train_count: 2000,
            test_count: 100,
            master_seed: 1000,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid(format!("image_size must be >= 8, got {}", self.image_size)));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::invalid("train_count and test_count must be >= 1"));
        }
        Ok(())
    }

    pub fn train_seed(&self, index: usize) -> u64 {
        self.master_seed.wrapping_add(index as u64)
    }

    pub fn test_seed(&self, index: usize) -> u64 {
        self.master_seed.wrapping_add((self.train_count + index) as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let train = (0..spec.train_count)
        .map(|i| sample_image(spec.image_size, spec.train_seed(i)))
        .collect();
    let test = (0..spec.test_count)
        .map(|i| sample_image(spec.image_size, spec.test_seed(i)))
        .collect();
    Ok(Dataset {
        spec: *spec,
        train,
        test,
    })
}

/// Draws one square image of side `size` from the synthetic distribution.
pub fn sample_image(size: usize, seed: u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let unit = s / 16.0;

    let base = rng.random_range(-0.12..0.12);
    let gx = rng.random_range(-0.2..0.2);
    let gy = rng.random_range(-0.2..0.2);
    let n_blobs = rng.random_range(2..=4);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let cx = rng.random_range(2.0 * unit..s - 2.0 * unit);
            let cy = rng.random_range(2.0 * unit..s - 2.0 * unit);
            let width = rng.random_range(1.2 * unit..2.5 * unit);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amp = sign * rng.random_range(0.25..0.6);
            (cx, cy, width, amp)
        })
        .collect();

    let mut pixels = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let u = 2.0 * x / s - 1.0;
            let v = 2.0 * y / s - 1.0;
            let mut value = base + gx * u + gy * v;
            for &(cx, cy, w, a) in &blobs {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                value += a * (-r2 / (2.0 * w * w)).exp();
            }
            pixels.push(value.clamp(-1.0, 1.0));
        }
    }
    ImageSample {
        width: size,
        height: size,
        pixels,
        seed,
    }
}

/// Maps a pixel in `[-1, 1]` to a byte via `round((v + 1)·127.5)`.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn encode_pgm(sample: &ImageSample) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", sample.width, sample.height).into_bytes();
    out.extend(sample.pixels.iter().map(|&v| to_byte(v)));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageSample> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("PGM header is truncated".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Parse("PGM header is not ASCII".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Parse(format!("expected PGM magic P5, found '{}'", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Parse(format!("PGM {what} '{s}' is not a number")))
    };
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::Parse(format!("only maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != n {
        return Err(Error::Parse(format!(
            "PGM raster has {} bytes, expected {n} for {width}x{height}",
            raster.len()
        )));
    }
    Ok(ImageSample {
        width,
        height,
        pixels: raster.iter().map(|&b| from_byte(b)).collect(),
        seed: 0,
    })
}

pub fn write_image(sample: &ImageSample, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pgm(sample))?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageSample> {
    decode_pgm(&std::fs::read(path)?)
}
