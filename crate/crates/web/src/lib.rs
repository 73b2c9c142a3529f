//! WebAssembly bindings behind `www/index.html`.
//!
//! The page works on one synthetic RGB image. It can encrypt the image and
//! show three cipherimage channels at a time. It can decrypt with the key
//! after Gaussian noise on the cipherimage, and it can score the mean of
//! other toy images as the uninformed baseline.

use cipherimg::blockcipher::KeyMaterial;
use cipherimg::codec::export::{cipher_channels_rgb, to_rgba8};
use cipherimg::codec::{CipherImage, EncodingMode, ImageTensor};
use cipherimg::datakit::{synth_toy, ToySpec};
use cipherimg::metrics;
use cipherimg::pipeline::{fit_mean, CipherMode, ForwardOperator, ForwardSpec};
use cipherimg::{Error, Result};
use wasm_bindgen::prelude::*;

/// Demo state without any JavaScript types, so it runs natively too.
pub struct Scene {
    image_seed: u32,
    gt: ImageTensor,
    spec: ForwardSpec,
    cipher: CipherImage,
}

/// A reconstruction and its scores against the ground truth.
pub struct Outcome {
    pub image: ImageTensor,
    pub psnr: f64,
    pub ssim: f64,
    pub finite: bool,
}

fn toy(n: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    synth_toy(&ToySpec {
        n,
        height: side,
        width: side,
        channels: 3,
        seed,
    })
}

impl Scene {
    /// `side` must be a multiple of 4 so CBC payloads are block aligned.
    pub fn new(image_seed: u32, side: usize, key_seed: u32, float32: bool, cbc: bool) -> Result<Self> {
        if side < 12 || side % 4 != 0 {
            return Err(Error::InvalidArgument(format!("side must be a multiple of 4 and >= 12, got {side}")));
        }
        let gt = toy(1, side, u64::from(image_seed)).remove(0);
        let mode = if float32 { EncodingMode::Float32 } else { EncodingMode::Uint8 };
        let cipher_mode = if cbc { CipherMode::Cbc } else { CipherMode::Ctr };
        let spec = ForwardSpec::new(KeyMaterial::from_seed(u64::from(key_seed)), mode, cipher_mode);
        let cipher = ForwardOperator::new(spec.clone())?.encrypt(&gt, 0)?;
        Ok(Self {
            image_seed,
            gt,
            spec,
            cipher,
        })
    }

    pub fn ground_truth(&self) -> &ImageTensor {
        &self.gt
    }

    pub fn cipher(&self) -> &CipherImage {
        &self.cipher
    }

    /// Cipherimage channels `first..first + 3` as an RGB image.
    pub fn cipher_view(&self, first: usize) -> Result<ImageTensor> {
        cipher_channels_rgb(&self.cipher, first)
    }

    /// Adds noise to the cipherimage, rounds to the nearest byte when noisy
    /// and inverts the cipher with the right key.
    pub fn decrypt(&self, sigma: f64, noise_seed: u32) -> Result<Outcome> {
        let op = ForwardOperator::new(self.spec.clone().with_noise(sigma, u64::from(noise_seed)))?;
        let noisy = op.encrypt(&self.gt, 0)?;
        self.score(op.decrypt(&noisy, sigma > 0.0)?)
    }

    /// Mean of `n_train` other toy images, used as the reconstruction.
    pub fn mean_baseline(&self, n_train: usize) -> Result<Outcome> {
        let train = toy(n_train, self.gt.height, u64::from(self.image_seed) + 1);
        self.score(fit_mean(train.iter())?.mean_image)
    }

    fn score(&self, image: ImageTensor) -> Result<Outcome> {
        let r = metrics::evaluate(0, &image, &self.gt)?;
        Ok(Outcome {
            image,
            psnr: r.psnr,
            ssim: r.ssim,
            finite: r.finite,
        })
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(image_seed: u32, side: u32, key_seed: u32, float32: bool, cbc: bool) -> std::result::Result<Demo, JsError> {
        let scene = Scene::new(image_seed, side as usize, key_seed, float32, cbc).map_err(js)?;
        Ok(Demo { scene })
    }

    pub fn side(&self) -> u32 {
        self.scene.gt.height as u32
    }

    pub fn cipher_channels(&self) -> u32 {
        self.scene.cipher.channels as u32
    }

    pub fn ground_truth_rgba(&self) -> std::result::Result<Vec<u8>, JsError> {
        to_rgba8(self.scene.ground_truth()).map_err(js)
    }

    pub fn cipher_rgba(&self, first: u32) -> std::result::Result<Vec<u8>, JsError> {
        to_rgba8(&self.scene.cipher_view(first as usize).map_err(js)?).map_err(js)
    }

    pub fn decrypt(&self, sigma: f64, noise_seed: u32) -> std::result::Result<Reconstruction, JsError> {
        self.scene.decrypt(sigma, noise_seed).map(Reconstruction::from).map_err(js)
    }

    pub fn mean_baseline(&self, n_train: u32) -> std::result::Result<Reconstruction, JsError> {
        self.scene.mean_baseline(n_train as usize).map(Reconstruction::from).map_err(js)
    }
}

#[wasm_bindgen]
pub struct Reconstruction {
    rgba: Vec<u8>,
    psnr: f64,
    ssim: f64,
    finite: bool,
}

impl From<Outcome> for Reconstruction {
    fn from(o: Outcome) -> Self {
        Self {
            rgba: to_rgba8(&o.image).expect("reconstructions are RGB"),
            psnr: o.psnr,
            ssim: o.ssim,
            finite: o.finite,
        }
    }
}

#[wasm_bindgen]
impl Reconstruction {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }

    #[wasm_bindgen(getter)]
    pub fn finite(&self) -> bool {
        self.finite
    }
}
