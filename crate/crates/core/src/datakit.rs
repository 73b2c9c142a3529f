//! Dataset ingestion, toy-image synthesis, splitting and materialization.
//!
//! A dataset is described by a JSON manifest. Before encryption it names an
//! image source (an STL-10 binary or an image container) and the train/test
//! boundary; [`materialize`] adds the forward-operator summary and the paired
//! cipherimage/ground-truth containers with their SHA-256 checksums.

use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::container::{tmp_sibling, ContainerReader, ContainerWriter, Dtype, Header};
use crate::codec::{CipherImage, ImageTensor};
use crate::error::{Error, Result};
use crate::pipeline::{ForwardOperator, ForwardSpec};

pub const STL10_SIDE: usize = 96;
pub const STL10_IMAGE_BYTES: usize = STL10_SIDE * STL10_SIDE * 3;
pub const MANIFEST_VERSION: u32 = 1;

/// Random-access image source.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn shape(&self) -> (usize, usize, usize);
    fn image(&mut self, index: usize) -> Result<ImageTensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageSource for Vec<ImageTensor> {
    fn len(&self) -> usize {
        <[ImageTensor]>::len(self)
    }

    fn shape(&self) -> (usize, usize, usize) {
        self.first().map(|i| i.shape()).unwrap_or((0, 0, 0))
    }

    fn image(&mut self, index: usize) -> Result<ImageTensor> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("image {index} out of range")))
    }
}

impl ImageSource for ContainerReader {
    fn len(&self) -> usize {
        ContainerReader::len(self)
    }

    fn shape(&self) -> (usize, usize, usize) {
        let h = self.header();
        (h.height, h.width, h.channels)
    }

    fn image(&mut self, index: usize) -> Result<ImageTensor> {
        self.read_image(index)
    }
}

/// Reader for the STL-10 binary image files (`unlabeled_X.bin` and friends).
///
/// Each image is 27,648 bytes: the red, green and blue planes one after the
/// other, every plane stored column-major.
pub struct Stl10Reader {
    path: PathBuf,
    file: BufReader<File>,
    count: usize,
    buf: Vec<u8>,
}

impl Stl10Reader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io(path))?;
        let len = file.metadata().map_err(Error::io(path))?.len() as usize;
        if len % STL10_IMAGE_BYTES != 0 {
            return Err(Error::format(
                "STL-10 file",
                format!("{} bytes is not a multiple of {STL10_IMAGE_BYTES}", len),
            ));
        }
        Ok(Self {
            path: path.to_path_buf(),
            file: BufReader::with_capacity(1 << 20, file),
            count: len / STL10_IMAGE_BYTES,
            buf: vec![0; STL10_IMAGE_BYTES],
        })
    }

    /// Transposes one raw STL-10 record into a row-major H×W×3 image.
    pub fn decode(raw: &[u8]) -> Result<ImageTensor> {
        if raw.len() != STL10_IMAGE_BYTES {
            return Err(Error::LengthMismatch(format!(
                "STL-10 record needs {STL10_IMAGE_BYTES} bytes, got {}",
                raw.len()
            )));
        }
        let n = STL10_SIDE;
        let mut img = ImageTensor::zeros(n, n, 3);
        for ch in 0..3 {
            let plane = &raw[ch * n * n..(ch + 1) * n * n];
            for col in 0..n {
                for row in 0..n {
                    img.set(row, col, ch, plane[col * n + row] as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }
}

impl ImageSource for Stl10Reader {
    fn len(&self) -> usize {
        self.count
    }

    fn shape(&self) -> (usize, usize, usize) {
        (STL10_SIDE, STL10_SIDE, 3)
    }

    fn image(&mut self, index: usize) -> Result<ImageTensor> {
        if index >= self.count {
            return Err(Error::InvalidArgument(format!(
                "STL-10 image {index} out of range ({} images)",
                self.count
            )));
        }
        self.file
            .seek(SeekFrom::Start((index * STL10_IMAGE_BYTES) as u64))
            .map_err(Error::io(&self.path))?;
        self.file.read_exact(&mut self.buf).map_err(Error::io(&self.path))?;
        Self::decode(&self.buf)
    }
}

/// Decodes a whole STL-10 binary file into memory.
pub fn load_stl10(path: &Path) -> Result<Vec<ImageTensor>> {
    let mut r = Stl10Reader::open(path)?;
    (0..r.len()).map(|i| r.image(i)).collect()
}

/// Parameters of the synthetic toy-image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

fn random_color(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f32> {
    (0..channels).map(|_| rng.random::<f32>()).collect()
}

/// Linear ramp between two colors along a random direction.
struct Ramp {
    from: Vec<f32>,
    to: Vec<f32>,
    dir: (f32, f32),
    offset: f32,
    span: f32,
}

impl Ramp {
    fn random(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize) -> Self {
        let angle = rng.random::<f32>() * std::f32::consts::TAU;
        let dir = (angle.cos(), angle.sin());
        // Projection range of the image corners onto `dir`.
        let corners = [(0.0, 0.0), (h as f32, 0.0), (0.0, w as f32), (h as f32, w as f32)];
        let proj: Vec<f32> = corners.iter().map(|(r, c)| r * dir.0 + c * dir.1).collect();
        let lo = proj.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = proj.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        Self {
            from: random_color(rng, channels),
            to: random_color(rng, channels),
            dir,
            offset: lo,
            span: (hi - lo).max(1.0),
        }
    }

    fn at(&self, row: f32, col: f32, ch: usize) -> f32 {
        let t = ((row * self.dir.0 + col * self.dir.1 - self.offset) / self.span).clamp(0.0, 1.0);
        self.from[ch] * (1.0 - t) + self.to[ch] * t
    }
}

fn toy_image(spec: &ToySpec, index: usize) -> ImageTensor {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let mut img = ImageTensor::zeros(h, w, c);
    if rng.random_bool(0.5) {
        let color = random_color(&mut rng, c);
        for px in img.values.chunks_exact_mut(c) {
            px.copy_from_slice(&color);
        }
    } else {
        let ramp = Ramp::random(&mut rng, c, h, w);
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    img.set(r, col, ch, ramp.at(r as f32 + 0.5, col as f32 + 0.5, ch));
                }
            }
        }
    }

    let n_shapes = rng.random_range(1..=4);
    for _ in 0..n_shapes {
        let kind = rng.random_range(0..3);
        let (hf, wf) = (h as f32, w as f32);
        match kind {
            // rectangle
            0 | 2 => {
                let r0 = rng.random_range(0.0..hf);
                let c0 = rng.random_range(0.0..wf);
                let rh = rng.random_range(0.15..0.6) * hf;
                let cw = rng.random_range(0.15..0.6) * wf;
                let (r1, c1) = (r0 + rh - hf * 0.3, c0 + cw - wf * 0.3);
                let (r0, c0) = (r0 - hf * 0.3, c0 - wf * 0.3);
                let fill: Box<dyn Fn(f32, f32, usize) -> f32> = if kind == 0 {
                    let color = random_color(&mut rng, c);
                    Box::new(move |_, _, ch| color[ch])
                } else {
                    let ramp = Ramp::random(&mut rng, c, h, w);
                    Box::new(move |r, col, ch| ramp.at(r, col, ch))
                };
                for r in 0..h {
                    for col in 0..w {
                        let (y, x) = (r as f32 + 0.5, col as f32 + 0.5);
                        if y >= r0 && y < r1 && x >= c0 && x < c1 {
                            for ch in 0..c {
                                img.set(r, col, ch, fill(y, x, ch));
                            }
                        }
                    }
                }
            }
            // disc
            _ => {
                let color = random_color(&mut rng, c);
                let cy = rng.random_range(0.0..hf);
                let cx = rng.random_range(0.0..wf);
                let rad = rng.random_range(0.1..0.35) * hf.min(wf);
                for r in 0..h {
                    for col in 0..w {
                        let (dy, dx) = (r as f32 + 0.5 - cy, col as f32 + 0.5 - cx);
                        if dy * dy + dx * dx <= rad * rad {
                            for ch in 0..c {
                                img.set(r, col, ch, color[ch]);
                            }
                        }
                    }
                }
            }
        }
    }
    // Quantize so every toy image is byte-representable.
    for v in img.values.iter_mut() {
        *v = crate::codec::quantize_byte(*v) as f32 / 255.0;
    }
    img
}

/// Seeded toy images: a flat or linear-gradient background with one to four
/// rectangles, discs or gradient patches on top. Values are multiples of
/// 1/255 in [0, 1]. Image `i` depends only on `(seed, i)`.
pub fn synth_toy(spec: &ToySpec) -> Vec<ImageTensor> {
    let idx: Vec<usize> = (0..spec.n).collect();
    crate::par_map(&idx, |_, &i| toy_image(spec, i))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceRef {
    /// STL-10 binary image file.
    Stl10 { path: PathBuf },
    /// Image container written by this toolkit.
    Container { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardSummary {
    pub key_fingerprint: String,
    pub cipher_mode: crate::pipeline::CipherMode,
    pub encoding_mode: crate::codec::EncodingMode,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl From<&ForwardSpec> for ForwardSummary {
    fn from(s: &ForwardSpec) -> Self {
        Self {
            key_fingerprint: s.key.fingerprint(),
            cipher_mode: s.cipher_mode,
            encoding_mode: s.mode,
            noise_sigma: s.noise_sigma,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub count: usize,
    /// Images `0..n_train` train, the rest test.
    pub n_train: usize,
    pub source: SourceRef,
    #[serde(default)]
    pub forward: Option<ForwardSummary>,
    #[serde(default)]
    pub files: Vec<FileEntry>,
    /// SHA-256 over the concatenated per-file digests, in `files` order.
    #[serde(default)]
    pub checksum: Option<String>,
}

/// Half-open index range of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitView {
    pub name: &'static str,
    pub indices: Range<usize>,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// File-order split: the first `n_train` images train, the remainder test.
pub fn split(manifest: &DatasetManifest, n_train: usize) -> Result<(SplitView, SplitView)> {
    if n_train == 0 || n_train >= manifest.count {
        return Err(Error::InvalidArgument(format!(
            "n_train must lie in 1..{} (got {n_train})",
            manifest.count
        )));
    }
    Ok((
        SplitView {
            name: "train",
            indices: 0..n_train,
        },
        SplitView {
            name: "test",
            indices: n_train..manifest.count,
        },
    ))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path).map_err(Error::io(path))?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(Error::io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn combined_checksum(files: &[FileEntry]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update(f.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

impl DatasetManifest {
    pub fn new(name: &str, shape: (usize, usize, usize), count: usize, n_train: usize, source: SourceRef) -> Result<Self> {
        let m = Self {
            format_version: MANIFEST_VERSION,
            name: name.to_string(),
            height: shape.0,
            width: shape.1,
            channels: shape.2,
            count,
            n_train,
            source,
            forward: None,
            files: Vec::new(),
            checksum: None,
        };
        split(&m, n_train)?;
        Ok(m)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn splits(&self) -> Result<(SplitView, SplitView)> {
        split(self, self.n_train)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format("manifest", format!("unsupported version {}", m.format_version)));
        }
        Ok(m)
    }

    /// Atomic write (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        let tmp = tmp_sibling(path);
        std::fs::write(&tmp, text).map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    /// Opens the ground-truth source; relative paths resolve against `base`.
    pub fn open_source(&self, base: &Path) -> Result<Box<dyn ImageSource>> {
        let src: Box<dyn ImageSource> = match &self.source {
            SourceRef::Stl10 { path } => Box::new(Stl10Reader::open(&resolve(base, path))?),
            SourceRef::Container { path } => Box::new(ContainerReader::open(&resolve(base, path))?),
        };
        // a manifest may use a prefix of its source
        if src.len() < self.count || src.shape() != self.shape() {
            return Err(Error::format(
                "manifest",
                format!(
                    "source holds {} images of {:?}, manifest says {} of {:?}",
                    src.len(),
                    src.shape(),
                    self.count,
                    self.shape()
                ),
            ));
        }
        Ok(src)
    }

    pub fn file(&self, role: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.role == role)
    }

    pub fn file_path(&self, base: &Path, role: &str) -> Result<PathBuf> {
        self.file(role)
            .map(|f| resolve(base, &f.path))
            .ok_or_else(|| Error::format("manifest", format!("no {role} file (not materialized?)")))
    }

    /// Recomputes every file digest and the combined checksum.
    pub fn verify(&self, base: &Path) -> Result<()> {
        for f in &self.files {
            let got = sha256_file(&resolve(base, &f.path))?;
            if got != f.sha256 {
                return Err(Error::format(
                    "manifest",
                    format!("checksum mismatch for {}", f.path.display()),
                ));
            }
        }
        if let Some(sum) = &self.checksum {
            if *sum != combined_checksum(&self.files) {
                return Err(Error::format("manifest", "combined checksum mismatch"));
            }
        }
        Ok(())
    }
}

/// Writes a synthetic dataset (image container + manifest) into `out_dir`.
pub fn write_toy_dataset(spec: &ToySpec, n_train: usize, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let images = synth_toy(spec);
    let rel = PathBuf::from("images.cimg");
    crate::codec::container::write_images(&out_dir.join(&rel), &images, Dtype::U8)?;
    let m = DatasetManifest::new(
        &format!("toy-{}x{}x{}-seed{}", spec.height, spec.width, spec.channels, spec.seed),
        (spec.height, spec.width, spec.channels),
        spec.n,
        n_train,
        SourceRef::Container { path: rel },
    )?;
    m.save(&out_dir.join("manifest.json"))?;
    Ok(m)
}

const CHUNK: usize = 256;

/// Encrypts both splits and writes `{split}_cipher.cimg` and
/// `{split}_plain.cimg` plus `manifest.json` into `out_dir`.
///
/// Image `i` (global index) gets noise seed `spec.seed ^ i`. Clean
/// cipherimages are stored as bytes, noisy ones as f32. Re-running with the
/// same inputs reproduces every file byte for byte.
pub fn materialize(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    spec: &ForwardSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let op = ForwardOperator::new(spec.clone())?;
    let mut src = manifest.open_source(manifest_dir)?;
    let (train, test) = manifest.splits()?;
    let (h, w, c) = manifest.shape();
    let cipher_dtype = if spec.noise_sigma == 0.0 { Dtype::U8 } else { Dtype::F32 };
    let cipher_header = Header {
        kind: crate::codec::container::Kind::CipherImage,
        mode: Some(spec.mode),
        dtype: cipher_dtype,
        count: 0,
        height: h,
        width: w,
        channels: c * spec.mode.bytes_per_value(),
        noise_sigma: spec.noise_sigma,
    };

    let mut files = Vec::new();
    for view in [&train, &test] {
        let cipher_rel = PathBuf::from(format!("{}_cipher.cimg", view.name));
        let plain_rel = PathBuf::from(format!("{}_plain.cimg", view.name));
        let mut cw = ContainerWriter::create(&out_dir.join(&cipher_rel), cipher_header.clone())?;
        let mut pw = ContainerWriter::create(&out_dir.join(&plain_rel), Header::image(h, w, c, Dtype::U8))?;
        let idx: Vec<usize> = view.indices.clone().collect();
        for chunk in idx.chunks(CHUNK) {
            let imgs: Vec<ImageTensor> = chunk.iter().map(|&i| src.image(i)).collect::<Result<_>>()?;
            let pairs: Vec<(usize, &ImageTensor)> = chunk.iter().copied().zip(&imgs).collect();
            let cis: Vec<Result<CipherImage>> = crate::par_map(&pairs, |_, (i, img)| op.encrypt(img, *i as u64));
            for (ci, img) in cis.into_iter().zip(&imgs) {
                cw.push_cipher(&ci?)?;
                pw.push_image(img)?;
            }
        }
        cw.finish()?;
        pw.finish()?;
        for (role, rel) in [("cipher", cipher_rel), ("plain", plain_rel)] {
            files.push(FileEntry {
                role: format!("{}_{role}", view.name),
                sha256: sha256_file(&out_dir.join(&rel))?,
                path: rel,
            });
        }
    }

    let source = match &manifest.source {
        SourceRef::Stl10 { path } => SourceRef::Stl10 {
            path: absolute(&resolve(manifest_dir, path)),
        },
        SourceRef::Container { path } => SourceRef::Container {
            path: absolute(&resolve(manifest_dir, path)),
        },
    };
    let out = DatasetManifest {
        source,
        forward: Some(ForwardSummary::from(spec)),
        checksum: Some(combined_checksum(&files)),
        files,
        ..manifest.clone()
    };
    out.save(&out_dir.join("manifest.json"))?;
    Ok(out)
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}
