//! Conversions between images, byte payloads and cipherimages, plus the
//! Gaussian corruption stage.
//!
//! Serialization order is row-major over (row, column, channel): pixel (0,0)
//! channel 0 comes first. In float32 mode each value occupies four bytes,
//! least-significant byte first (little-endian IEEE-754 single). A
//! cipherimage maps each ciphertext byte `b` to `b / 255` and keeps the bytes
//! in serialization order, so the bytes belonging to one pixel become that
//! pixel's channels (12 channels for an RGB float32 image).

pub mod container;
pub mod export;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How plaintext pixel values are serialized before encryption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    /// Four little-endian bytes per value (IEEE-754 single).
    Float32,
    /// One byte per value, `round(v * 255)`.
    Uint8,
}

impl EncodingMode {
    pub fn bytes_per_value(self) -> usize {
        match self {
            EncodingMode::Float32 => 4,
            EncodingMode::Uint8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EncodingMode::Float32 => "float32",
            EncodingMode::Uint8 => "uint8",
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float32" | "f32" => Ok(EncodingMode::Float32),
            "uint8" | "u8" => Ok(EncodingMode::Uint8),
            other => Err(Error::InvalidArgument(format!("unknown encoding mode {other:?}"))),
        }
    }
}

/// An H×W×C image stored row-major as (row, column, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![v; height * width * channels],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.values[self.index(row, col, ch)]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        let i = self.index(row, col, ch);
        self.values[i] = v;
    }

    /// False when any value is NaN or infinite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Checks the ground-truth invariant: finite and inside [0, 1].
    pub fn validate_ground_truth(&self) -> Result<()> {
        match self
            .values
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            None => Ok(()),
            Some(i) => Err(Error::InvalidValue(format!(
                "value {} at flat index {i} is not a finite number in [0, 1]",
                self.values[i]
            ))),
        }
    }

    /// Values clamped to [0, 1]; NaN becomes 0.
    pub fn clamped(&self) -> ImageTensor {
        let values = self
            .values
            .iter()
            .map(|&v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        ImageTensor { values, ..*self }
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, ch: usize) -> Result<ImageTensor> {
        if ch >= self.channels {
            return Err(Error::InvalidArgument(format!(
                "channel {ch} out of range for {} channels",
                self.channels
            )));
        }
        let values = self.values.iter().skip(ch).step_by(self.channels).copied().collect();
        ImageTensor::new(self.height, self.width, 1, values)
    }
}

/// Ciphertext reinterpreted as an image with values `byte / 255`.
///
/// After [`add_gaussian`] the values may leave [0, 1]; they are never clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub mode: EncodingMode,
    pub noise_sigma: f64,
}

impl CipherImage {
    /// Channel count of the plaintext image this cipherimage encodes.
    pub fn plain_channels(&self) -> usize {
        self.channels / self.mode.bytes_per_value()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn as_image(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.clone(),
        }
    }
}

/// Nearest byte for a value on the [0, 1] scale, clamped to [0, 255].
#[inline]
pub fn quantize_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn image_to_bytes(img: &ImageTensor, mode: EncodingMode) -> Result<Vec<u8>> {
    img.validate_ground_truth()?;
    Ok(match mode {
        EncodingMode::Float32 => img.values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        EncodingMode::Uint8 => img.values.iter().map(|&v| quantize_byte(v)).collect(),
    })
}

/// Inverse of [`image_to_bytes`]. Non-finite floats are kept as they are.
pub fn bytes_to_image(
    buf: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    mode: EncodingMode,
) -> Result<ImageTensor> {
    let expected = height * width * channels * mode.bytes_per_value();
    if buf.len() != expected {
        return Err(Error::LengthMismatch(format!(
            "{height}x{width}x{channels} {mode} image needs {expected} bytes, got {}",
            buf.len()
        )));
    }
    let values = match mode {
        EncodingMode::Float32 => buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        EncodingMode::Uint8 => buf.iter().map(|&b| b as f32 / 255.0).collect(),
    };
    ImageTensor::new(height, width, channels, values)
}

pub fn bytes_to_cipherimage(
    buf: &[u8],
    height: usize,
    width: usize,
    plain_channels: usize,
    mode: EncodingMode,
) -> Result<CipherImage> {
    let channels = plain_channels * mode.bytes_per_value();
    if buf.len() != height * width * channels {
        return Err(Error::LengthMismatch(format!(
            "{height}x{width}x{channels} cipherimage needs {} bytes, got {}",
            height * width * channels,
            buf.len()
        )));
    }
    Ok(CipherImage {
        height,
        width,
        channels,
        values: buf.iter().map(|&b| b as f32 / 255.0).collect(),
        mode,
        noise_sigma: 0.0,
    })
}

/// Rounds every value to the nearest byte (clamped), undoing
/// [`bytes_to_cipherimage`] exactly on clean input.
pub fn cipherimage_to_bytes(ci: &CipherImage) -> Result<Vec<u8>> {
    if let Some(i) = ci.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "non-finite cipherimage value at flat index {i}"
        )));
    }
    Ok(ci.values.iter().map(|&v| quantize_byte(v)).collect())
}

/// Adds i.i.d. N(0, sigma²) to every value. Deterministic in `seed`.
pub fn add_gaussian(ci: &CipherImage, sigma: f64, seed: u64) -> Result<CipherImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = ci.clone();
    out.noise_sigma = sigma;
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for v in out.values.iter_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)) as f32;
    }
    Ok(out)
}
