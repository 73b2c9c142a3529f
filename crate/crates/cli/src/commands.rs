use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cipherimg::blockcipher::KeyMaterial;
use cipherimg::codec::container::{ContainerReader, ContainerWriter, Dtype, Header};
use cipherimg::codec::export::{cipher_channels_rgb, panel, write_png};
use cipherimg::codec::{CipherImage, ImageTensor};
use cipherimg::datakit::{
    materialize, write_toy_dataset, DatasetManifest, ForwardSummary, ImageSource, SourceRef, Stl10Reader, ToySpec,
    STL10_SIDE,
};
use cipherimg::metrics::{self, AggregateReport, ExtReal, MetricsRecord};
use cipherimg::nn::checkpoint::Checkpoint;
use cipherimg::nn::train::{predict_batch_counted, train, ContainerPairs, TrainConfig, FINAL_CHECKPOINT};
use cipherimg::nn::UNetConfig;
use cipherimg::pipeline::{ForwardOperator, ForwardSpec, MeanAccumulator};
use cipherimg::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{
    BaselineArgs, Cli, Command, DatasetCommand, DecryptArgs, EncryptArgs, EvalArgs, ImportArgs, KeygenArgs,
    SynthArgs, TrainArgs,
};

const CHUNK: usize = 256;
const RUN_CONFIG: &str = "run_config.json";

struct Ctx {
    workers: usize,
    deterministic: bool,
}

impl Ctx {
    fn stamp<T: Serialize>(&self, path: &Path, command: &str, args: &T, resolved: Value) -> Result<()> {
        let v = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "workers": self.workers,
            "deterministic": self.deterministic,
            "args": args,
            "resolved": resolved,
        });
        write_json(path, &v)
    }
}

pub fn run(cli: Cli) -> Result<Value> {
    let workers = match (cli.deterministic, cli.workers) {
        (true, _) => Some(1),
        (false, Some(0)) => return Err(Error::InvalidArgument("--workers must be at least 1".into())),
        (false, w) => w,
    };
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let ctx = Ctx {
        workers: rayon::current_num_threads(),
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Keygen(a) => keygen(&ctx, a),
        Command::Dataset(DatasetCommand::Synth(a)) => synth(&ctx, a),
        Command::Dataset(DatasetCommand::ImportStl10(a)) => import_stl10(&ctx, a),
        Command::Encrypt(a) => encrypt(&ctx, a),
        Command::Decrypt(a) => decrypt(&ctx, a),
        Command::BaselineMean(a) => baseline_mean(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json value serializes") + "\n";
    std::fs::write(path, text).map_err(Error::io(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(Error::io(path))
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(&dir.join("manifest.json"))?;
    m.verify(dir)?;
    Ok(m)
}

fn load_encrypted(dir: &Path) -> Result<(DatasetManifest, ForwardSummary)> {
    let m = load_manifest(dir)?;
    let fw = m
        .forward
        .clone()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not encrypted; run `encrypt` first", dir.display())))?;
    Ok((m, fw))
}

fn check_split(split: &str) -> Result<&str> {
    match split {
        "train" | "test" => Ok(split),
        _ => Err(Error::InvalidArgument(format!("split must be train or test, got {split:?}"))),
    }
}

/// Cipher and ground-truth readers for one split of an encrypted dataset.
fn split_readers(m: &DatasetManifest, dir: &Path, split: &str) -> Result<(ContainerReader, ContainerReader)> {
    let cr = ContainerReader::open(&m.file_path(dir, &format!("{split}_cipher"))?)?;
    let pr = ContainerReader::open(&m.file_path(dir, &format!("{split}_plain"))?)?;
    if cr.len() != pr.len() {
        return Err(Error::LengthMismatch(format!(
            "{} cipherimages but {} ground-truth images",
            cr.len(),
            pr.len()
        )));
    }
    Ok((cr, pr))
}

fn read_chunk(cr: &mut ContainerReader, pr: &mut ContainerReader, r: Range<usize>) -> Result<(Vec<CipherImage>, Vec<ImageTensor>)> {
    let cis = r.clone().map(|i| cr.read_cipher(i)).collect::<Result<_>>()?;
    let gts = r.map(|i| pr.read_image(i)).collect::<Result<_>>()?;
    Ok((cis, gts))
}

fn score(first_id: usize, recons: &[ImageTensor], gts: &[ImageTensor]) -> Result<Vec<MetricsRecord>> {
    (0..gts.len())
        .into_par_iter()
        .map(|k| metrics::evaluate(first_id + k, &recons[k], &gts[k]))
        .collect()
}

fn save_metrics(out: &Path, records: &[MetricsRecord]) -> Result<AggregateReport> {
    metrics::save_csv(&out.join("metrics.csv"), records)?;
    let report = metrics::aggregate(records)?;
    metrics::save_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

fn cipher_view(ci: &CipherImage) -> Result<ImageTensor> {
    if ci.channels >= 3 {
        cipher_channels_rgb(ci, 0)
    } else {
        Ok(ci.as_image())
    }
}

/// Writes `[ground truth | cipher | reconstruction]` PNGs for the first
/// `limit` samples of a split.
struct Panels {
    dir: PathBuf,
    split: String,
    limit: usize,
}

impl Panels {
    fn new(out: &Path, split: &str, limit: usize) -> Result<Self> {
        let dir = out.join("panels");
        if limit > 0 {
            create_dir(&dir)?;
        }
        Ok(Self {
            dir,
            split: split.to_string(),
            limit,
        })
    }

    fn add(&self, first_id: usize, gts: &[ImageTensor], cis: Option<&[CipherImage]>, recons: &[ImageTensor]) -> Result<()> {
        for k in 0..gts.len().min(self.limit.saturating_sub(first_id)) {
            let mut row = vec![gts[k].clone()];
            if let Some(cis) = cis {
                row.push(cipher_view(&cis[k])?);
            }
            row.push(recons[k].clone());
            let path = self.dir.join(format!("{}_{:05}.png", self.split, first_id + k));
            write_png(&panel(&row, 2)?, &path)?;
        }
        Ok(())
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Range<usize>> {
    (0..n).step_by(CHUNK).map(move |s| s..(s + CHUNK).min(n))
}

fn keygen(ctx: &Ctx, a: KeygenArgs) -> Result<Value> {
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let km = KeyMaterial::from_seed(a.seed);
    km.save(&a.out)?;
    let fingerprint = km.fingerprint();
    ctx.stamp(&a.out.with_extension("run.json"), "keygen", &a, json!({ "fingerprint": fingerprint }))?;
    Ok(json!({ "command": "keygen", "key": a.out, "fingerprint": fingerprint }))
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<Value> {
    let spec = ToySpec {
        n: a.n,
        height: a.height,
        width: a.width,
        channels: a.channels,
        seed: a.seed,
    };
    let m = write_toy_dataset(&spec, a.n_train, &a.out)?;
    ctx.stamp(&a.out.join(RUN_CONFIG), "dataset synth", &a, json!({ "name": m.name }))?;
    Ok(json!({
        "command": "dataset synth",
        "manifest": a.out.join("manifest.json"),
        "count": m.count,
        "n_train": m.n_train,
    }))
}

fn import_stl10(ctx: &Ctx, a: ImportArgs) -> Result<Value> {
    let input = std::fs::canonicalize(&a.input).map_err(Error::io(&a.input))?;
    let available = Stl10Reader::open(&input)?.len();
    let count = match a.limit {
        Some(l) if l > available => {
            return Err(Error::InvalidArgument(format!("--limit {l} exceeds the {available} images in the file")))
        }
        Some(l) => l,
        None => available,
    };
    let m = DatasetManifest::new(
        "stl10-unlabeled",
        (STL10_SIDE, STL10_SIDE, 3),
        count,
        a.n_train,
        SourceRef::Stl10 { path: input.clone() },
    )?;
    create_dir(&a.out)?;
    m.save(&a.out.join("manifest.json"))?;
    ctx.stamp(&a.out.join(RUN_CONFIG), "dataset import-stl10", &a, json!({ "source": input, "count": count }))?;
    Ok(json!({
        "command": "dataset import-stl10",
        "manifest": a.out.join("manifest.json"),
        "count": count,
        "n_train": m.n_train,
    }))
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (std::fs::canonicalize(a), std::fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn encrypt(ctx: &Ctx, a: EncryptArgs) -> Result<Value> {
    let m = DatasetManifest::load(&a.dataset.join("manifest.json"))?;
    let key = KeyMaterial::load(&a.key)?;
    let spec = ForwardSpec::new(key, a.mode, a.cipher).with_noise(a.sigma, a.seed);
    spec.validate()?;
    create_dir(&a.out)?;
    if same_dir(&a.dataset, &a.out) {
        return Err(Error::InvalidArgument("--out must differ from the dataset directory".into()));
    }
    let start = Instant::now();
    let written = materialize(&m, &a.dataset, &spec, &a.out)?;
    let fw = written.forward.clone().expect("materialize records the forward operator");
    ctx.stamp(&a.out.join(RUN_CONFIG), "encrypt", &a, json!({ "forward": fw }))?;
    let (train, test) = written.splits()?;
    Ok(json!({
        "command": "encrypt",
        "manifest": a.out.join("manifest.json"),
        "n_train": train.len(),
        "n_test": test.len(),
        "key_fingerprint": fw.key_fingerprint,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn summary(command: &str, out: &Path, report: &AggregateReport) -> Value {
    json!({
        "command": command,
        "metrics": out.join("metrics.json"),
        "n_samples": report.n_samples,
        "mean_psnr": report.mean_psnr,
        "mean_ssim": report.mean_ssim,
        "n_neg_inf": report.n_neg_inf,
        "n_pos_inf": report.n_pos_inf,
    })
}

fn decrypt(ctx: &Ctx, a: DecryptArgs) -> Result<Value> {
    let split = check_split(&a.split)?;
    let (m, fw) = load_encrypted(&a.dataset)?;
    let key = KeyMaterial::load(&a.key)?;
    if key.fingerprint() != fw.key_fingerprint && !a.force {
        return Err(Error::InvalidArgument(format!(
            "key fingerprint {} differs from the dataset's {}; pass --force to decrypt anyway",
            key.fingerprint(),
            fw.key_fingerprint
        )));
    }
    let op = ForwardOperator::new(
        ForwardSpec::new(key, fw.encoding_mode, fw.cipher_mode).with_noise(fw.noise_sigma, fw.seed),
    )?;
    let (mut cr, mut pr) = split_readers(&m, &a.dataset, split)?;
    create_dir(&a.out)?;
    ctx.stamp(&a.out.join(RUN_CONFIG), "decrypt", &a, json!({ "forward": fw }))?;

    let (h, w, c) = m.shape();
    let mut rw = ContainerWriter::create(&a.out.join("recon.cimg"), Header::image(h, w, c, Dtype::F32))?;
    let panels = Panels::new(&a.out, split, a.panels)?;
    let mut records = Vec::with_capacity(cr.len());
    for r in chunks(cr.len()) {
        let first = r.start;
        let (cis, gts) = read_chunk(&mut cr, &mut pr, r)?;
        let recons = op.decrypt_all(&cis, a.round)?;
        records.extend(score(first, &recons, &gts)?);
        for img in &recons {
            rw.push_image(img)?;
        }
        panels.add(first, &gts, Some(&cis), &recons)?;
    }
    rw.finish()?;
    let report = save_metrics(&a.out, &records)?;
    Ok(summary("decrypt", &a.out, &report))
}

/// Train and test ground truth: the plain containers of an encrypted dataset,
/// or the source of a plain manifest.
fn ground_truth(m: &DatasetManifest, dir: &Path) -> Result<[(Box<dyn ImageSource>, Range<usize>); 2]> {
    if m.file("train_plain").is_some() {
        let open = |role: &str| -> Result<(Box<dyn ImageSource>, Range<usize>)> {
            let r = ContainerReader::open(&m.file_path(dir, role)?)?;
            let n = r.len();
            Ok((Box::new(r), 0..n))
        };
        Ok([open("train_plain")?, open("test_plain")?])
    } else {
        let (train, test) = m.splits()?;
        Ok([(m.open_source(dir)?, train.indices), (m.open_source(dir)?, test.indices)])
    }
}

fn baseline_mean(ctx: &Ctx, a: BaselineArgs) -> Result<Value> {
    let m = load_manifest(&a.dataset)?;
    let [(mut train_src, train_idx), (mut test_src, test_idx)] = ground_truth(&m, &a.dataset)?;
    create_dir(&a.out)?;
    ctx.stamp(&a.out.join(RUN_CONFIG), "baseline-mean", &a, json!({ "dataset": m.name }))?;

    let mut acc = MeanAccumulator::new();
    for i in train_idx {
        acc.push(&train_src.image(i)?)?;
    }
    let mp = acc.finish()?;
    mp.save(&a.out.join("mean.cimg"))?;

    let panels = Panels::new(&a.out, "test", a.panels)?;
    let n = test_idx.len();
    let mut records = Vec::with_capacity(n);
    for r in chunks(n) {
        let first = r.start;
        let gts: Vec<ImageTensor> = r.map(|k| test_src.image(test_idx.start + k)).collect::<Result<_>>()?;
        let recons = vec![mp.mean_image.clone(); gts.len()];
        records.extend(score(first, &recons, &gts)?);
        panels.add(first, &gts, None, &recons)?;
    }
    let report = save_metrics(&a.out, &records)?;
    let mut s = summary("baseline-mean", &a.out, &report);
    s["n_train"] = json!(mp.n_samples);
    Ok(s)
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<Value> {
    let (m, fw) = load_encrypted(&a.dataset)?;
    let mut pairs = ContainerPairs::open(
        &m.file_path(&a.dataset, "train_cipher")?,
        &m.file_path(&a.dataset, "train_plain")?,
    )?;
    let net_cfg = match &a.net {
        Some(p) => UNetConfig::from_toml(&read_text(p)?)?,
        None => UNetConfig {
            in_channels: m.channels * fw.encoding_mode.bytes_per_value(),
            out_channels: m.channels,
            ..UNetConfig::default()
        },
    };
    net_cfg.validate()?;
    let mut tcfg = match &a.train {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    tcfg.deterministic |= ctx.deterministic;
    tcfg.validate()?;
    create_dir(&a.out)?;
    ctx.stamp(
        &a.out.join(RUN_CONFIG),
        "train",
        &a,
        json!({ "net": net_cfg, "train": tcfg, "forward": fw }),
    )?;

    let epochs = tcfg.epochs;
    let report = train(&mut pairs, &net_cfg, &tcfg, Some(&a.out), &mut |e| {
        eprintln!(
            "epoch {}/{epochs} train_loss {:.6} val_psnr {} ({:.1} s)",
            e.epoch,
            e.train_loss,
            ExtReal(e.val_psnr),
            e.wall_time
        );
    })?;
    let last = report.log.last();
    Ok(json!({
        "command": "train",
        "checkpoint": a.out.join(FINAL_CHECKPOINT),
        "epochs": report.log.len(),
        "steps": report.steps,
        "skipped_steps": report.skipped_steps,
        "n_train": report.n_train,
        "n_val": report.n_val,
        "train_loss": last.map(|e| e.train_loss),
        "val_psnr": last.map(|e| ExtReal(e.val_psnr)),
    }))
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<Value> {
    let split = check_split(&a.split)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (m, fw) = load_encrypted(&a.dataset)?;
    let (mut cr, mut pr) = split_readers(&m, &a.dataset, split)?;
    let n = a.limit.map_or(cr.len(), |l| l.min(cr.len()));
    create_dir(&a.out)?;
    ctx.stamp(&a.out.join(RUN_CONFIG), "eval", &a, json!({ "net": ck.config(), "forward": fw }))?;

    let start = Instant::now();
    let panels = Panels::new(&a.out, split, a.panels)?;
    let mut records = Vec::with_capacity(n);
    let mut clamped = 0;
    for r in chunks(n) {
        let first = r.start;
        let (cis, gts) = read_chunk(&mut cr, &mut pr, r)?;
        let (recons, k) = predict_batch_counted(&ck, &cis)?;
        clamped += k;
        records.extend(score(first, &recons, &gts)?);
        panels.add(first, &gts, Some(&cis), &recons)?;
    }
    let report = save_metrics(&a.out, &records)?;
    write_json(
        &a.out.join("eval_log.json"),
        &json!({
            "checkpoint": a.checkpoint,
            "epoch": ck.meta.epoch,
            "step": ck.meta.step,
            "split": split,
            "n_samples": n,
            "clamped_values": clamped,
            "seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    let mut s = summary("eval", &a.out, &report);
    s["clamped_values"] = json!(clamped);
    Ok(s)
}
