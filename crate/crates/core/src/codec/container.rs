//! Stacked image container files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                          |
//! |--------|------|------------------------------------------------|
//! | 0      | 8    | magic `CIMGSTK\0`                              |
//! | 8      | 4    | format version (u32, currently 1)              |
//! | 12     | 1    | kind: 0 image, 1 cipherimage                   |
//! | 13     | 1    | encoding mode: 0 none, 1 float32, 2 uint8      |
//! | 14     | 1    | payload dtype: 0 f32, 1 u8 (value × 255)       |
//! | 15     | 1    | reserved, 0                                    |
//! | 16     | 8    | record count (u64)                             |
//! | 24     | 4    | height (u32)                                   |
//! | 28     | 4    | width (u32)                                    |
//! | 32     | 4    | channels (u32)                                 |
//! | 36     | 8    | noise sigma (f64)                              |
//! | 44     | ...  | records, each H·W·C values in row-major order  |
//!
//! The u8 dtype stores byte-representable values losslessly at a quarter of
//! the size; writing a value that is not an exact multiple of 1/255 in it is
//! an error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::codec::{CipherImage, EncodingMode, ImageTensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CIMGSTK\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 44;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Image,
    CipherImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub kind: Kind,
    pub mode: Option<EncodingMode>,
    pub dtype: Dtype,
    pub count: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_sigma: f64,
}

impl Header {
    pub fn image(height: usize, width: usize, channels: usize, dtype: Dtype) -> Self {
        Self {
            kind: Kind::Image,
            mode: None,
            dtype,
            count: 0,
            height,
            width,
            channels,
            noise_sigma: 0.0,
        }
    }

    pub fn cipher(ci: &CipherImage, dtype: Dtype) -> Self {
        Self {
            kind: Kind::CipherImage,
            mode: Some(ci.mode),
            dtype,
            count: 0,
            height: ci.height,
            width: ci.width,
            channels: ci.channels,
            noise_sigma: ci.noise_sigma,
        }
    }

    pub fn values_per_record(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn record_bytes(&self) -> u64 {
        (self.values_per_record() * self.dtype.size()) as u64
    }

    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut h = [0u8; HEADER_LEN as usize];
        h[..8].copy_from_slice(MAGIC);
        h[8..12].copy_from_slice(&VERSION.to_le_bytes());
        h[12] = match self.kind {
            Kind::Image => 0,
            Kind::CipherImage => 1,
        };
        h[13] = match self.mode {
            None => 0,
            Some(EncodingMode::Float32) => 1,
            Some(EncodingMode::Uint8) => 2,
        };
        h[14] = match self.dtype {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
        };
        h[16..24].copy_from_slice(&self.count.to_le_bytes());
        h[24..28].copy_from_slice(&(self.height as u32).to_le_bytes());
        h[28..32].copy_from_slice(&(self.width as u32).to_le_bytes());
        h[32..36].copy_from_slice(&(self.channels as u32).to_le_bytes());
        h[36..44].copy_from_slice(&self.noise_sigma.to_le_bytes());
        h
    }

    fn decode(h: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        let bad = |r: &str| Error::format("container header", r.to_string());
        if &h[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(h[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let kind = match h[12] {
            0 => Kind::Image,
            1 => Kind::CipherImage,
            k => return Err(bad(&format!("unknown kind {k}"))),
        };
        let mode = match h[13] {
            0 => None,
            1 => Some(EncodingMode::Float32),
            2 => Some(EncodingMode::Uint8),
            m => return Err(bad(&format!("unknown mode {m}"))),
        };
        let dtype = match h[14] {
            0 => Dtype::F32,
            1 => Dtype::U8,
            d => return Err(bad(&format!("unknown dtype {d}"))),
        };
        if kind == Kind::CipherImage && mode.is_none() {
            return Err(bad("cipherimage container without encoding mode"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap()) as usize;
        Ok(Self {
            kind,
            mode,
            dtype,
            count: u64::from_le_bytes(h[16..24].try_into().unwrap()),
            height: u32_at(24),
            width: u32_at(28),
            channels: u32_at(32),
            noise_sigma: f64::from_le_bytes(h[36..44].try_into().unwrap()),
        })
    }
}

/// Streams records into a temporary file and renames it into place on
/// [`ContainerWriter::finish`].
pub struct ContainerWriter {
    header: Header,
    path: PathBuf,
    tmp_path: PathBuf,
    out: BufWriter<File>,
    scratch: Vec<u8>,
}

impl ContainerWriter {
    pub fn create(path: &Path, mut header: Header) -> Result<Self> {
        header.count = 0;
        let tmp_path = tmp_sibling(path);
        let file = File::create(&tmp_path).map_err(Error::io(&tmp_path))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header.encode()).map_err(Error::io(&tmp_path))?;
        Ok(Self {
            header,
            path: path.to_path_buf(),
            tmp_path,
            out,
            scratch: Vec::new(),
        })
    }

    pub fn push(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.header.values_per_record() {
            return Err(Error::Shape(format!(
                "record has {} values, container expects {}",
                values.len(),
                self.header.values_per_record()
            )));
        }
        self.scratch.clear();
        match self.header.dtype {
            Dtype::F32 => self.scratch.extend(values.iter().flat_map(|v| v.to_le_bytes())),
            Dtype::U8 => {
                for &v in values {
                    let b = crate::codec::quantize_byte(v);
                    if b as f32 / 255.0 != v {
                        return Err(Error::InvalidValue(format!(
                            "{v} is not byte-representable; use the f32 payload"
                        )));
                    }
                    self.scratch.push(b);
                }
            }
        }
        self.out.write_all(&self.scratch).map_err(Error::io(&self.tmp_path))?;
        self.header.count += 1;
        Ok(())
    }

    pub fn push_image(&mut self, img: &ImageTensor) -> Result<()> {
        self.check_shape(img.height, img.width, img.channels)?;
        self.push(&img.values)
    }

    pub fn push_cipher(&mut self, ci: &CipherImage) -> Result<()> {
        self.check_shape(ci.height, ci.width, ci.channels)?;
        if Some(ci.mode) != self.header.mode || ci.noise_sigma != self.header.noise_sigma {
            return Err(Error::InvalidArgument(
                "cipherimage mode/sigma differ from container header".into(),
            ));
        }
        self.push(&ci.values)
    }

    fn check_shape(&self, h: usize, w: usize, c: usize) -> Result<()> {
        let hd = &self.header;
        if (h, w, c) != (hd.height, hd.width, hd.channels) {
            return Err(Error::Shape(format!(
                "{h}x{w}x{c} record in {}x{}x{} container",
                hd.height, hd.width, hd.channels
            )));
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Header> {
        let tmp = self.tmp_path.clone();
        self.out.flush().map_err(Error::io(&tmp))?;
        let mut file = self.out.into_inner().map_err(|e| Error::Io {
            path: tmp.clone(),
            source: e.into_error(),
        })?;
        file.seek(SeekFrom::Start(0)).map_err(Error::io(&tmp))?;
        file.write_all(&self.header.encode()).map_err(Error::io(&tmp))?;
        file.sync_all().map_err(Error::io(&tmp))?;
        drop(file);
        std::fs::rename(&tmp, &self.path).map_err(Error::io(&self.path))?;
        Ok(self.header)
    }
}

pub(crate) fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Random-access reader over a container file.
pub struct ContainerReader {
    header: Header,
    path: PathBuf,
    file: BufReader<File>,
    scratch: Vec<u8>,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io(path))?;
        let len = file.metadata().map_err(Error::io(path))?.len();
        let mut file = BufReader::new(file);
        let mut h = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut h).map_err(Error::io(path))?;
        let header = Header::decode(&h)?;
        let expected = HEADER_LEN + header.count * header.record_bytes();
        if len != expected {
            return Err(Error::format(
                "container",
                format!("{}: {len} bytes on disk, header implies {expected}", path.display()),
            ));
        }
        Ok(Self {
            header,
            path: path.to_path_buf(),
            file,
            scratch: Vec::new(),
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn read_values(&mut self, index: usize) -> Result<Vec<f32>> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "record {index} out of range ({} records)",
                self.len()
            )));
        }
        let rb = self.header.record_bytes();
        self.file
            .seek(SeekFrom::Start(HEADER_LEN + index as u64 * rb))
            .map_err(Error::io(&self.path))?;
        self.scratch.resize(rb as usize, 0);
        self.file.read_exact(&mut self.scratch).map_err(Error::io(&self.path))?;
        Ok(match self.header.dtype {
            Dtype::F32 => self
                .scratch
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::U8 => self.scratch.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn read_image(&mut self, index: usize) -> Result<ImageTensor> {
        let values = self.read_values(index)?;
        let h = &self.header;
        ImageTensor::new(h.height, h.width, h.channels, values)
    }

    pub fn read_cipher(&mut self, index: usize) -> Result<CipherImage> {
        let values = self.read_values(index)?;
        let h = &self.header;
        let mode = h
            .mode
            .ok_or_else(|| Error::format("container", "not a cipherimage container"))?;
        Ok(CipherImage {
            height: h.height,
            width: h.width,
            channels: h.channels,
            values,
            mode,
            noise_sigma: h.noise_sigma,
        })
    }
}

pub fn write_images(path: &Path, images: &[ImageTensor], dtype: Dtype) -> Result<Header> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to write".into()))?;
    let mut w = ContainerWriter::create(
        path,
        Header::image(first.height, first.width, first.channels, dtype),
    )?;
    for img in images {
        w.push_image(img)?;
    }
    w.finish()
}

pub fn read_images(path: &Path) -> Result<Vec<ImageTensor>> {
    let mut r = ContainerReader::open(path)?;
    (0..r.len()).map(|i| r.read_image(i)).collect()
}

pub fn write_cipherimages(path: &Path, images: &[CipherImage], dtype: Dtype) -> Result<Header> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no cipherimages to write".into()))?;
    let mut w = ContainerWriter::create(path, Header::cipher(first, dtype))?;
    for ci in images {
        w.push_cipher(ci)?;
    }
    w.finish()
}

pub fn read_cipherimages(path: &Path) -> Result<Vec<CipherImage>> {
    let mut r = ContainerReader::open(path)?;
    (0..r.len()).map(|i| r.read_cipher(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{add_gaussian, bytes_to_cipherimage};

    #[test]
    fn image_container_roundtrip_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<ImageTensor> = (0..3)
            .map(|k| {
                let v = (0..24).map(|i| ((i * 11 + k * 5) % 256) as f32 / 255.0).collect();
                ImageTensor::new(2, 4, 3, v).unwrap()
            })
            .collect();
        for dtype in [Dtype::U8, Dtype::F32] {
            let p = dir.path().join("imgs.cimg");
            let h = write_images(&p, &imgs, dtype).unwrap();
            assert_eq!(h.count, 3);
            assert_eq!(read_images(&p).unwrap(), imgs);
            let mut r = ContainerReader::open(&p).unwrap();
            assert_eq!(r.read_image(2).unwrap(), imgs[2]);
            assert!(r.read_image(3).is_err());
        }
    }

    #[test]
    fn u8_payload_rejects_unrepresentable_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(1, 1, 1, vec![0.3]).unwrap();
        assert!(write_images(&dir.path().join("x"), &[img], Dtype::U8).is_err());
    }

    #[test]
    fn noisy_cipher_container_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let ci = bytes_to_cipherimage(&[9u8; 48], 2, 2, 3, EncodingMode::Float32).unwrap();
        let noisy = add_gaussian(&ci, 0.01, 1).unwrap();
        let p = dir.path().join("c.cimg");
        write_cipherimages(&p, &[noisy.clone(), noisy.clone()], Dtype::F32).unwrap();
        let back = read_cipherimages(&p).unwrap();
        assert_eq!(back, vec![noisy.clone(), noisy]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cimg");
        write_images(&p, &[ImageTensor::zeros(2, 2, 1)], Dtype::U8).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(ContainerReader::open(&p).is_err());
        bytes[0] = b'X';
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(ContainerReader::open(&p).is_err());
    }
}
