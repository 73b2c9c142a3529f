//! Supervised training of the U-Net on (cipherimage, image) pairs and
//! inference.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::codec::container::ContainerReader;
use crate::codec::{CipherImage, ImageTensor};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::adam::{AdamConfig, AdamState, StepOutcome};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::tensor::{chw_to_hwc, hwc_to_chw, Tensor};
use crate::nn::unet::{ParameterSet, UNet, UNetConfig};
use crate::{par_map, worker_count};

pub const LOG_HEADER: &str = "epoch,train_loss,val_psnr,wall_time";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Single chunk per batch and a fixed accumulation order.
    pub deterministic: bool,
    /// Write `checkpoint_epochNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Fail on a non-finite gradient instead of skipping the step.
    pub strict: bool,
    /// Fraction of the training pairs held out (from the end) for validation.
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 32,
            lr: 2e-3,
            epochs: 35,
            seed: 0,
            deterministic: false,
            checkpoint_every: 0,
            strict: false,
            val_fraction: 0.05,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("adam betas must be in [0, 1) and epsilon positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("train config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// Number of held-out validation pairs for a training set of `n`.
    pub fn val_count(&self, n: usize) -> usize {
        if self.val_fraction == 0.0 || n < 2 {
            return 0;
        }
        ((n as f64 * self.val_fraction).round() as usize).clamp(1, n - 1)
    }
}

/// Random-access supervised pairs, both in row-major H×W×C layout.
pub trait PairSource {
    fn len(&self) -> usize;
    fn input_shape(&self) -> (usize, usize, usize);
    fn target_shape(&self) -> (usize, usize, usize);
    fn pair(&mut self, index: usize) -> Result<(Vec<f32>, Vec<f32>)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_pairs(inputs: &[(usize, usize, usize)], targets: &[(usize, usize, usize)]) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if let (Some(a), Some(b)) = (inputs.first(), targets.first()) {
        if a.0 != b.0 || a.1 != b.1 {
            return Err(Error::Shape(format!("input {a:?} and target {b:?} differ in size")));
        }
        if inputs.iter().any(|s| s != a) || targets.iter().any(|s| s != b) {
            return Err(Error::Shape("pairs do not share one shape".into()));
        }
    }
    Ok(())
}

/// Pairs held in memory.
#[derive(Debug, Clone)]
pub struct MemoryPairs {
    inputs: Vec<ImageTensor>,
    targets: Vec<ImageTensor>,
}

impl MemoryPairs {
    pub fn new(inputs: Vec<ImageTensor>, targets: Vec<ImageTensor>) -> Result<Self> {
        check_pairs(
            &inputs.iter().map(|i| i.shape()).collect::<Vec<_>>(),
            &targets.iter().map(|i| i.shape()).collect::<Vec<_>>(),
        )?;
        Ok(Self { inputs, targets })
    }

    pub fn from_cipher(inputs: &[CipherImage], targets: Vec<ImageTensor>) -> Result<Self> {
        Self::new(inputs.iter().map(CipherImage::as_image).collect(), targets)
    }

    pub fn inputs(&self) -> &[ImageTensor] {
        &self.inputs
    }

    pub fn targets(&self) -> &[ImageTensor] {
        &self.targets
    }
}

impl PairSource for MemoryPairs {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.inputs.first().map(|i| i.shape()).unwrap_or_default()
    }

    fn target_shape(&self) -> (usize, usize, usize) {
        self.targets.first().map(|i| i.shape()).unwrap_or_default()
    }

    fn pair(&mut self, index: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        match (self.inputs.get(index), self.targets.get(index)) {
            (Some(a), Some(b)) => Ok((a.values.clone(), b.values.clone())),
            _ => Err(Error::InvalidArgument(format!("pair {index} out of range"))),
        }
    }
}

/// Pairs streamed from a cipherimage container and an image container.
pub struct ContainerPairs {
    inputs: ContainerReader,
    targets: ContainerReader,
}

impl ContainerPairs {
    pub fn open(inputs: &Path, targets: &Path) -> Result<Self> {
        let inputs = ContainerReader::open(inputs)?;
        let targets = ContainerReader::open(targets)?;
        let (a, b) = (inputs.header(), targets.header());
        check_pairs(
            &[(a.height, a.width, a.channels)],
            &[(b.height, b.width, b.channels)],
        )?;
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }
}

impl PairSource for ContainerPairs {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        let h = self.inputs.header();
        (h.height, h.width, h.channels)
    }

    fn target_shape(&self) -> (usize, usize, usize) {
        let h = self.targets.header();
        (h.height, h.width, h.channels)
    }

    fn pair(&mut self, index: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        Ok((self.inputs.read_values(index)?, self.targets.read_values(index)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean squared error per element over the epoch's training batches.
    pub train_loss: f64,
    /// Extended-real mean PSNR of clamped predictions on the held-out slice;
    /// NaN without validation.
    pub val_psnr: f64,
    pub wall_time: f64,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{:.3}", self.epoch, self.train_loss, self.val_psnr, self.wall_time)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub steps: u64,
    pub skipped_steps: u64,
    pub n_train: usize,
    pub n_val: usize,
}

impl TrainReport {
    /// Training loss per epoch, the curve compared by determinism checks.
    pub fn loss_curve(&self) -> Vec<f64> {
        self.log.iter().map(|e| e.train_loss).collect()
    }
}

fn to_tensor(samples: &[&[f32]], (h, w, c): (usize, usize, usize)) -> Result<Tensor<f32>> {
    let per = h * w * c;
    let mut data = vec![0.0f32; samples.len() * per];
    for (dst, src) in data.chunks_exact_mut(per).zip(samples) {
        hwc_to_chw(src, h, w, c, dst);
    }
    Tensor::from_vec([samples.len(), c, h, w], data)
}

/// Loss sum and parameter gradients of one group of samples, with the loss
/// gradient normalized by `denom` elements.
fn group_grads(
    net: &UNet,
    params: &ParameterSet<f32>,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    denom: f32,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let cache = net.forward_cached(params, x)?;
    let pred = &cache.output;
    let mut dout = Tensor::zeros(pred.shape());
    let mut sum = 0.0f64;
    for ((g, &p), &t) in dout.data_mut().iter_mut().zip(pred.data()).zip(y.data()) {
        let d = p - t;
        sum += f64::from(d) * f64::from(d);
        *g = 2.0 * d / denom;
    }
    let mut grads = params.zeros_like();
    net.backward(params, &cache, &dout, &mut grads)?;
    Ok((sum, grads))
}

fn split_ranges(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.clamp(1, n.max(1));
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn log_path(dir: &Path) -> PathBuf {
    dir.join(LOG_FILE)
}

/// Trains a fresh network. The last `val_count` pairs are held out for
/// validation; the rest are shuffled every epoch with a seeded generator.
///
/// With `out_dir` the log is appended to `train_log.csv` after every epoch,
/// periodic checkpoints are written per `checkpoint_every` and the final
/// parameters go to `model.ckpt`.
pub fn train(
    data: &mut dyn PairSource,
    net_cfg: &UNetConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    tcfg.validate()?;
    let net = UNet::new(net_cfg.clone())?;
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let in_shape = data.input_shape();
    let out_shape = data.target_shape();
    net_cfg.check_input([1, in_shape.2, in_shape.0, in_shape.1])?;
    if out_shape.2 != net_cfg.out_channels || (out_shape.0, out_shape.1) != (in_shape.0, in_shape.1) {
        return Err(Error::Shape(format!(
            "targets {out_shape:?} do not match {} output channels at {}x{}",
            net_cfg.out_channels, in_shape.0, in_shape.1
        )));
    }

    let n_val = tcfg.val_count(n);
    let n_train = n - n_val;
    let mut val_inputs = Vec::with_capacity(n_val);
    let mut val_targets = Vec::with_capacity(n_val);
    for i in n_train..n {
        let (x, y) = data.pair(i)?;
        val_inputs.push(ImageTensor::new(in_shape.0, in_shape.1, in_shape.2, x)?);
        val_targets.push(ImageTensor::new(out_shape.0, out_shape.1, out_shape.2, y)?);
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let p = log_path(dir);
        let mut f = File::create(&p).map_err(Error::io(&p))?;
        writeln!(f, "{LOG_HEADER}").map_err(Error::io(&p))?;
    }

    let mut params = net.init_params::<f32>(tcfg.seed);
    let mut adam = AdamState::new(&params, tcfg.adam());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n_train).collect();
    let groups = if tcfg.deterministic { 1 } else { worker_count() };
    let per_out = out_shape.0 * out_shape.1 * out_shape.2;
    let start = Instant::now();
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut skipped = 0u64;

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (b, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(batch.len());
            let mut ys = Vec::with_capacity(batch.len());
            for &i in batch {
                let (x, y) = data.pair(i)?;
                xs.push(x);
                ys.push(y);
            }
            let denom = (batch.len() * per_out) as f32;
            let ranges = split_ranges(batch.len(), groups);
            let parts = par_map(&ranges, |_, r| -> Result<(f64, Vec<Tensor<f32>>)> {
                let xr: Vec<&[f32]> = xs[r.clone()].iter().map(Vec::as_slice).collect();
                let yr: Vec<&[f32]> = ys[r.clone()].iter().map(Vec::as_slice).collect();
                let x = to_tensor(&xr, in_shape)?;
                let y = to_tensor(&yr, out_shape)?;
                group_grads(&net, &params, &x, &y, denom)
            });
            let mut parts = parts.into_iter();
            let (mut batch_loss, mut grads) = parts.next().expect("at least one group")?;
            for part in parts {
                let (l, g) = part?;
                batch_loss += l;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} batch {b}: training loss is {batch_loss}"
                )));
            }
            loss_sum += batch_loss;
            if adam.step(&mut params, &grads, tcfg.strict)? == StepOutcome::Skipped {
                skipped += 1;
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: parameters became non-finite")));
        }

        let val_psnr = if n_val == 0 {
            f64::NAN
        } else {
            let preds = predict_images(&net, &params, &val_inputs)?;
            let psnrs = preds
                .iter()
                .zip(&val_targets)
                .map(|(p, t)| metrics::psnr(&p.clamped(), t))
                .collect::<Result<Vec<_>>>()?;
            metrics::mean_psnr(&psnrs)
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / (n_train * per_out) as f64,
            val_psnr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            let p = log_path(dir);
            let mut f = OpenOptions::new().append(true).open(&p).map_err(Error::io(&p))?;
            writeln!(f, "{}", entry.csv_line()).map_err(Error::io(&p))?;
            if tcfg.checkpoint_every > 0 && epoch % tcfg.checkpoint_every == 0 {
                Checkpoint::new(net_cfg.clone(), params.clone(), epoch, adam.step)?
                    .save(&dir.join(format!("checkpoint_epoch{epoch:03}.ckpt")))?;
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }

    let checkpoint = Checkpoint::new(net_cfg.clone(), params, tcfg.epochs, adam.step)?;
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainReport {
        checkpoint,
        log,
        steps: adam.step,
        skipped_steps: skipped,
        n_train,
        n_val,
    })
}

const PREDICT_CHUNK: usize = 8;

/// Unclamped network outputs for H×W×C inputs.
pub fn predict_images(net: &UNet, params: &ParameterSet<f32>, inputs: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    let Some(first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let shape = first.shape();
    if inputs.iter().any(|i| i.shape() != shape) {
        return Err(Error::Shape("prediction inputs do not share one shape".into()));
    }
    let (h, w, _) = shape;
    let co = net.config().out_channels;
    let chunks: Vec<&[ImageTensor]> = inputs.chunks(PREDICT_CHUNK).collect();
    let out = par_map(&chunks, |_, chunk| -> Result<Vec<ImageTensor>> {
        let refs: Vec<&[f32]> = chunk.iter().map(|i| i.values.as_slice()).collect();
        let y = net.forward(params, &to_tensor(&refs, shape)?)?;
        (0..chunk.len())
            .map(|s| {
                let mut hwc = vec![0.0f32; h * w * co];
                chw_to_hwc(y.sample(s), co, h, w, &mut hwc);
                ImageTensor::new(h, w, co, hwc)
            })
            .collect()
    });
    let mut all = Vec::with_capacity(inputs.len());
    for part in out {
        all.extend(part?);
    }
    Ok(all)
}

/// Reconstructions clamped to [0, 1], with the number of clamped values.
pub fn predict_batch_counted(ck: &Checkpoint, cis: &[CipherImage]) -> Result<(Vec<ImageTensor>, usize)> {
    let net = ck.network()?;
    let inputs: Vec<ImageTensor> = cis.iter().map(CipherImage::as_image).collect();
    let raw = predict_images(&net, &ck.params, &inputs)?;
    let clamped = raw
        .iter()
        .map(|r| r.values.iter().filter(|v| !(0.0..=1.0).contains(*v)).count())
        .sum();
    Ok((raw.iter().map(ImageTensor::clamped).collect(), clamped))
}

pub fn predict_batch(ck: &Checkpoint, cis: &[CipherImage]) -> Result<Vec<ImageTensor>> {
    Ok(predict_batch_counted(ck, cis)?.0)
}

pub fn predict(ck: &Checkpoint, ci: &CipherImage) -> Result<ImageTensor> {
    let mut v = predict_batch(ck, std::slice::from_ref(ci))?;
    Ok(v.pop().expect("one prediction"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_pairs(n: usize) -> MemoryPairs {
        let imgs: Vec<ImageTensor> = (0..n)
            .map(|i| {
                let v = (0..8 * 8 * 2).map(|j| ((i * 7 + j * 3) % 11) as f32 / 10.0).collect();
                ImageTensor::new(8, 8, 2, v).unwrap()
            })
            .collect();
        let targets = imgs.iter().map(|i| i.channel(0).unwrap()).collect();
        MemoryPairs::new(imgs, targets).unwrap()
    }

    fn net_cfg() -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            out_channels: 1,
            base_width: 2,
            depth: 1,
            kernel_size: 3,
            rescale_input: false,
        }
    }

    #[test]
    fn split_ranges_cover() {
        assert_eq!(split_ranges(10, 3), vec![0..4, 4..7, 7..10]);
        assert_eq!(split_ranges(2, 8), vec![0..1, 1..2]);
        assert_eq!(split_ranges(5, 1), vec![0..5]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.lr, c.epochs), (32, 2e-3, 35));
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("epochs = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert_eq!(c.val_count(100), 5);
        assert_eq!(c.val_count(3), 1);
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            checkpoint_every: 1,
            deterministic: true,
            val_fraction: 0.2,
            ..Default::default()
        };
        let mut seen = 0;
        let rep = train(&mut toy_pairs(10), &net_cfg(), &tcfg, Some(dir.path()), &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        assert_eq!((rep.n_train, rep.n_val, rep.steps), (8, 2, 4));
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(log.starts_with(LOG_HEADER));
        assert!(dir.path().join("checkpoint_epoch002.ckpt").exists());
        assert_eq!(Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap(), rep.checkpoint);
    }

    #[test]
    fn deterministic_runs_repeat() {
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 3,
            deterministic: true,
            ..Default::default()
        };
        let a = train(&mut toy_pairs(12), &net_cfg(), &tcfg, None, &mut |_| {}).unwrap();
        let b = train(&mut toy_pairs(12), &net_cfg(), &tcfg, None, &mut |_| {}).unwrap();
        assert_eq!(a.loss_curve(), b.loss_curve());
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn rejects_mismatched_targets() {
        let cfg = UNetConfig { out_channels: 2, ..net_cfg() };
        let err = train(&mut toy_pairs(4), &cfg, &TrainConfig::default(), None, &mut |_| {});
        assert!(err.is_err());
        let mut bad = toy_pairs(4);
        bad.targets.pop();
        assert!(MemoryPairs::new(bad.inputs.clone(), bad.targets.clone()).is_err());
    }

    #[test]
    fn divergence_aborts() {
        let tcfg = TrainConfig { epochs: 1, lr: 1e30, ..Default::default() };
        let mut pairs = toy_pairs(8);
        let err = train(&mut pairs, &net_cfg(), &tcfg, None, &mut |_| {});
        // an absurd learning rate either blows up the loss or the parameters
        if let Err(e) = err {
            assert!(matches!(e, Error::Diverged(_)), "{e}");
        }
    }

    #[test]
    fn prediction_is_clamped_and_batch_invariant() {
        let net = UNet::new(net_cfg()).unwrap();
        let ck = Checkpoint::new(net_cfg(), net.init_params(9), 0, 0).unwrap();
        let pairs = toy_pairs(5);
        let cis: Vec<CipherImage> = pairs
            .inputs()
            .iter()
            .map(|i| CipherImage {
                height: 8,
                width: 8,
                channels: 2,
                values: i.values.clone(),
                mode: crate::codec::EncodingMode::Uint8,
                noise_sigma: 0.0,
            })
            .collect();
        let all = predict_batch(&ck, &cis).unwrap();
        for (ci, p) in cis.iter().zip(&all) {
            assert_eq!(p.shape(), (8, 8, 1));
            assert!(p.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(&predict(&ck, ci).unwrap(), p);
        }
    }
}
