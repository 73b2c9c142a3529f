//! The composed forward operator and the two non-learned baselines.
//!
//! Forward: serialize → encrypt (CTR keystream XOR, or CBC) → reinterpret as
//! a cipherimage → add Gaussian noise. Exact decryption inverts that chain
//! with the key and, for noisy data, first rounds every value to the nearest
//! byte. Its output is never clamped or repaired.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::blockcipher::{self, CtrKeystream, KeyMaterial};
use crate::codec::container::{ContainerReader, ContainerWriter, Dtype, Header};
use crate::codec::{self, CipherImage, EncodingMode, ImageTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CipherMode {
    Ctr,
    Cbc,
}

impl CipherMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CipherMode::Ctr => "ctr",
            CipherMode::Cbc => "cbc",
        }
    }
}

impl fmt::Display for CipherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CipherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ctr" => Ok(CipherMode::Ctr),
            "cbc" => Ok(CipherMode::Cbc),
            other => Err(Error::InvalidArgument(format!("unknown cipher mode {other:?}"))),
        }
    }
}

/// Full definition of the forward operator for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSpec {
    pub key: KeyMaterial,
    pub mode: EncodingMode,
    pub cipher_mode: CipherMode,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ForwardSpec {
    pub fn new(key: KeyMaterial, mode: EncodingMode, cipher_mode: CipherMode) -> Self {
        Self {
            key,
            mode,
            cipher_mode,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise_sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// A [`ForwardSpec`] with the key expanded and the CTR keystream cached.
///
/// Every image of a dataset shares key and iv, so the keystream for a given
/// payload length is generated once.
#[derive(Debug)]
pub struct ForwardOperator {
    spec: ForwardSpec,
    ctr: CtrKeystream,
    keystream: Mutex<Option<Arc<Vec<u8>>>>,
}

impl ForwardOperator {
    pub fn new(spec: ForwardSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            ctr: CtrKeystream::new(&spec.key),
            spec,
            keystream: Mutex::new(None),
        })
    }

    pub fn spec(&self) -> &ForwardSpec {
        &self.spec
    }

    fn keystream(&self, n: usize) -> Arc<Vec<u8>> {
        let mut cached = self.keystream.lock().expect("keystream cache poisoned");
        match cached.as_ref() {
            Some(ks) if ks.len() == n => ks.clone(),
            _ => {
                let ks = Arc::new(self.ctr.generate(n));
                *cached = Some(ks.clone());
                ks
            }
        }
    }

    fn encipher(&self, plain: &[u8]) -> Result<Vec<u8>> {
        match self.spec.cipher_mode {
            CipherMode::Ctr => blockcipher::xor_apply(plain, &self.keystream(plain.len())),
            CipherMode::Cbc => blockcipher::cbc_encrypt(plain, &self.spec.key),
        }
    }

    fn decipher(&self, cipher: &[u8]) -> Result<Vec<u8>> {
        match self.spec.cipher_mode {
            CipherMode::Ctr => blockcipher::xor_apply(cipher, &self.keystream(cipher.len())),
            CipherMode::Cbc => blockcipher::cbc_decrypt(cipher, &self.spec.key),
        }
    }

    /// Noise seed of the `index`-th image of a dataset.
    pub fn noise_seed(&self, index: u64) -> u64 {
        self.spec.seed ^ index
    }

    /// Forward operator for the `index`-th image of a dataset.
    pub fn encrypt(&self, img: &ImageTensor, index: u64) -> Result<CipherImage> {
        let plain = codec::image_to_bytes(img, self.spec.mode)?;
        let cipher = self.encipher(&plain)?;
        let ci = codec::bytes_to_cipherimage(&cipher, img.height, img.width, img.channels, self.spec.mode)?;
        codec::add_gaussian(&ci, self.spec.noise_sigma, self.noise_seed(index))
    }

    /// Keyed inversion. With `round_first` unset the cipherimage must hold
    /// exact byte values; with it set, values are rounded to the nearest byte
    /// (clamped) first. Non-finite plaintext floats are passed through.
    pub fn decrypt(&self, ci: &CipherImage, round_first: bool) -> Result<ImageTensor> {
        if ci.mode != self.spec.mode {
            return Err(Error::InvalidArgument(format!(
                "cipherimage is {} encoded, operator expects {}",
                ci.mode, self.spec.mode
            )));
        }
        if ci.channels % ci.mode.bytes_per_value() != 0 {
            return Err(Error::Shape(format!(
                "{} channels is not a multiple of {}",
                ci.channels,
                ci.mode.bytes_per_value()
            )));
        }
        let bytes = if round_first {
            ci.values.iter().map(|&v| codec::quantize_byte(v)).collect()
        } else {
            if let Some(i) = ci.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "non-finite cipherimage value at flat index {i}; enable rounding"
                )));
            }
            let bytes = codec::cipherimage_to_bytes(ci)?;
            if bytes.iter().zip(&ci.values).any(|(&b, &v)| b as f32 / 255.0 != v) {
                return Err(Error::InvalidValue(
                    "cipherimage values are not exact bytes (noisy?); enable rounding".into(),
                ));
            }
            bytes
        };
        let plain = self.decipher(&bytes)?;
        codec::bytes_to_image(&plain, ci.height, ci.width, ci.plain_channels(), ci.mode)
    }

    pub fn encrypt_all(&self, images: &[ImageTensor]) -> Result<Vec<CipherImage>> {
        crate::par_map(images, |i, img| self.encrypt(img, i as u64)).into_iter().collect()
    }

    pub fn decrypt_all(&self, cis: &[CipherImage], round_first: bool) -> Result<Vec<ImageTensor>> {
        crate::par_map(cis, |_, ci| self.decrypt(ci, round_first)).into_iter().collect()
    }
}

/// Forward operator applied to a single image (noise seeded with `spec.seed`).
pub fn encrypt_image(img: &ImageTensor, spec: &ForwardSpec) -> Result<CipherImage> {
    ForwardOperator::new(spec.clone())?.encrypt(img, 0)
}

pub fn decrypt_exact(ci: &CipherImage, spec: &ForwardSpec, round_first: bool) -> Result<ImageTensor> {
    ForwardOperator::new(spec.clone())?.decrypt(ci, round_first)
}

/// The constant predictor equal to the pixelwise training mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPredictor {
    pub mean_image: ImageTensor,
    pub n_samples: usize,
}

/// Streaming pixelwise mean with compensated (Kahan) summation in `f64`.
#[derive(Debug, Clone)]
pub struct MeanAccumulator {
    shape: Option<(usize, usize, usize)>,
    sum: Vec<f64>,
    comp: Vec<f64>,
    n: usize,
}

impl Default for MeanAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl MeanAccumulator {
    pub fn new() -> Self {
        Self {
            shape: None,
            sum: Vec::new(),
            comp: Vec::new(),
            n: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    fn add_value(sum: &mut f64, comp: &mut f64, v: f64) {
        let y = v - *comp;
        let t = *sum + y;
        *comp = (t - *sum) - y;
        *sum = t;
    }

    pub fn push(&mut self, img: &ImageTensor) -> Result<()> {
        match self.shape {
            None => {
                self.shape = Some(img.shape());
                self.sum = vec![0.0; img.len()];
                self.comp = vec![0.0; img.len()];
            }
            Some(s) if s != img.shape() => {
                return Err(Error::Shape(format!(
                    "training image {:?} differs from {:?}",
                    img.shape(),
                    s
                )))
            }
            Some(_) => {}
        }
        for ((s, c), &v) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(&img.values) {
            Self::add_value(s, c, v as f64);
        }
        self.n += 1;
        Ok(())
    }

    /// Folds another partial sum into this one. Merging partials in a fixed
    /// order gives a deterministic result.
    pub fn merge(&mut self, other: &MeanAccumulator) -> Result<()> {
        let Some(os) = other.shape else { return Ok(()) };
        match self.shape {
            None => {
                *self = other.clone();
                return Ok(());
            }
            Some(s) if s != os => {
                return Err(Error::Shape(format!("partial sums {s:?} vs {os:?}")));
            }
            Some(_) => {}
        }
        for i in 0..self.sum.len() {
            Self::add_value(&mut self.sum[i], &mut self.comp[i], other.sum[i]);
            Self::add_value(&mut self.sum[i], &mut self.comp[i], -other.comp[i]);
        }
        self.n += other.n;
        Ok(())
    }

    pub fn finish(self) -> Result<MeanPredictor> {
        let (h, w, c) = self
            .shape
            .ok_or_else(|| Error::InvalidArgument("mean of an empty training set".into()))?;
        let n = self.n as f64;
        let values = self
            .sum
            .iter()
            .map(|&s| ((s / n) as f32).clamp(0.0, 1.0))
            .collect();
        Ok(MeanPredictor {
            mean_image: ImageTensor::new(h, w, c, values)?,
            n_samples: self.n,
        })
    }
}

/// Pixelwise arithmetic mean of the training images, single pass.
pub fn fit_mean<'a, I>(train: I) -> Result<MeanPredictor>
where
    I: IntoIterator<Item = &'a ImageTensor>,
{
    let mut acc = MeanAccumulator::new();
    for img in train {
        acc.push(img)?;
    }
    acc.finish()
}

/// Same as [`fit_mean`] but accumulates fixed-size chunks independently and
/// merges them in chunk order, so the result does not depend on scheduling.
pub fn fit_mean_chunked(train: &[ImageTensor], chunk: usize) -> Result<MeanPredictor> {
    let chunk = chunk.max(1);
    let chunks: Vec<&[ImageTensor]> = train.chunks(chunk).collect();
    let partials: Vec<Result<MeanAccumulator>> = crate::par_map(&chunks, |_, c| {
        let mut acc = MeanAccumulator::new();
        for img in c.iter() {
            acc.push(img)?;
        }
        Ok(acc)
    });
    let mut total = MeanAccumulator::new();
    for p in partials {
        total.merge(&p?)?;
    }
    total.finish()
}

/// Ignores the cipherimage and returns the training mean.
pub fn predict_mean(mp: &MeanPredictor, _ci: &CipherImage) -> ImageTensor {
    mp.mean_image.clone()
}

impl MeanPredictor {
    /// Writes the mean image as a one-record f32 container; the sample count
    /// goes to a `.json` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.mean_image;
        let mut w = ContainerWriter::create(path, Header::image(m.height, m.width, m.channels, Dtype::F32))?;
        w.push_image(m)?;
        w.finish()?;
        let side = path.with_extension("json");
        let text = serde_json::json!({ "n_samples": self.n_samples }).to_string();
        std::fs::write(&side, text).map_err(Error::io(&side))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ContainerReader::open(path)?;
        let mean_image = r.read_image(0)?;
        let side = path.with_extension("json");
        let n_samples = match std::fs::read_to_string(&side) {
            Ok(text) => serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v["n_samples"].as_u64())
                .ok_or_else(|| Error::format("mean sidecar", "missing n_samples"))?
                as usize,
            Err(_) => 1,
        };
        Ok(Self {
            mean_image,
            n_samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn byte_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = (0..h * w * c).map(|_| rng.random::<u8>() as f32 / 255.0).collect();
        ImageTensor::new(h, w, c, v).unwrap()
    }

    fn spec(mode: EncodingMode, cm: CipherMode) -> ForwardSpec {
        ForwardSpec::new(KeyMaterial::from_seed(1), mode, cm)
    }

    #[test]
    fn clean_roundtrip_all_modes() {
        let img = byte_image(8, 8, 3, 3);
        for mode in [EncodingMode::Float32, EncodingMode::Uint8] {
            for cm in [CipherMode::Ctr, CipherMode::Cbc] {
                let s = spec(mode, cm);
                let ci = encrypt_image(&img, &s).unwrap();
                assert_eq!(ci.channels, 3 * mode.bytes_per_value());
                assert_eq!(decrypt_exact(&ci, &s, false).unwrap(), img);
                assert_eq!(decrypt_exact(&ci, &s, true).unwrap(), img);
            }
        }
    }

    #[test]
    fn stl_shape_gives_twelve_channels() {
        let ci = encrypt_image(&byte_image(96, 96, 3, 1), &spec(EncodingMode::Float32, CipherMode::Ctr)).unwrap();
        assert_eq!(ci.shape(), (96, 96, 12));
    }

    #[test]
    fn distinct_images_distinct_cipherimages() {
        let s = spec(EncodingMode::Uint8, CipherMode::Ctr);
        let op = ForwardOperator::new(s).unwrap();
        let imgs: Vec<_> = (0..20).map(|k| byte_image(4, 4, 1, k)).collect();
        let cis = op.encrypt_all(&imgs).unwrap();
        for i in 0..cis.len() {
            for j in i + 1..cis.len() {
                if imgs[i] != imgs[j] {
                    assert_ne!(cis[i].values, cis[j].values);
                }
            }
        }
    }

    #[test]
    fn noisy_values_need_rounding() {
        let s = spec(EncodingMode::Uint8, CipherMode::Ctr).with_noise(0.01, 5);
        let img = byte_image(8, 8, 1, 2);
        let ci = encrypt_image(&img, &s).unwrap();
        assert!(decrypt_exact(&ci, &s, false).is_err());
        let mut nan = ci.clone();
        nan.values[0] = f32::NAN;
        assert!(decrypt_exact(&nan, &s, false).is_err());
        assert!(decrypt_exact(&ci, &s, true).is_ok());
    }

    #[test]
    fn sub_half_byte_noise_is_absorbed_by_rounding() {
        let clean = spec(EncodingMode::Float32, CipherMode::Ctr);
        let img = byte_image(8, 8, 3, 9);
        let mut ci = encrypt_image(&img, &clean).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for v in ci.values.iter_mut() {
            *v += rng.random_range(-0.49f32..0.49) / 255.0;
        }
        ci.noise_sigma = 0.01;
        assert_eq!(decrypt_exact(&ci, &clean, true).unwrap(), img);
    }

    #[test]
    fn mean_of_one_and_two() {
        let a = byte_image(4, 4, 2, 1);
        let b = byte_image(4, 4, 2, 2);
        assert_eq!(fit_mean([&a]).unwrap().mean_image, a);
        let m = fit_mean([&a, &b]).unwrap();
        assert_eq!(m.n_samples, 2);
        for i in 0..a.len() {
            let want = (a.values[i] as f64 + b.values[i] as f64) / 2.0;
            assert!((m.mean_image.values[i] as f64 - want).abs() < 1e-7);
        }
        assert!(fit_mean(std::iter::empty()).is_err());
        assert!(fit_mean([&a, &byte_image(4, 4, 1, 3)]).is_err());
    }

    #[test]
    fn mean_predictor_is_constant() {
        let imgs: Vec<_> = (0..5).map(|k| byte_image(4, 4, 1, k)).collect();
        let mp = fit_mean(&imgs).unwrap();
        let s = spec(EncodingMode::Uint8, CipherMode::Ctr);
        let c1 = encrypt_image(&imgs[0], &s).unwrap();
        let c2 = encrypt_image(&imgs[1], &s).unwrap();
        assert_eq!(predict_mean(&mp, &c1), predict_mean(&mp, &c2));
        assert!(predict_mean(&mp, &c1).values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn chunked_mean_matches_and_is_order_independent() {
        let mut imgs: Vec<_> = (0..300).map(|k| byte_image(6, 6, 1, k)).collect();
        let a = fit_mean(&imgs).unwrap();
        let b = fit_mean_chunked(&imgs, 7).unwrap();
        imgs.reverse();
        let c = fit_mean(&imgs).unwrap();
        for i in 0..a.mean_image.len() {
            assert!((a.mean_image.values[i] - b.mean_image.values[i]).abs() <= 1e-5);
            assert!((a.mean_image.values[i] - c.mean_image.values[i]).abs() <= 1e-5);
        }
        assert_eq!(b, fit_mean_chunked(&imgs.iter().rev().cloned().collect::<Vec<_>>(), 7).unwrap());
    }

    #[test]
    fn mean_predictor_persists() {
        let dir = tempfile::tempdir().unwrap();
        let mp = fit_mean(&[byte_image(3, 3, 3, 1), byte_image(3, 3, 3, 2)]).unwrap();
        let p = dir.path().join("mean.cimg");
        mp.save(&p).unwrap();
        assert_eq!(MeanPredictor::load(&p).unwrap(), mp);
    }
}
