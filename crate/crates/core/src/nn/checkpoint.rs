//! Binary checkpoint: `UNETCKPT`, a u32 version, a length-prefixed JSON
//! header (network config and training position), then every parameter as
//! name, shape and little-endian f32 payload. Integers are little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::container::tmp_sibling;
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::nn::unet::{Param, ParameterSet, UNet, UNetConfig};

pub const MAGIC: &[u8; 8] = b"UNETCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: UNetConfig,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterSet<f32>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

impl Checkpoint {
    pub fn new(config: UNetConfig, params: ParameterSet<f32>, epoch: usize, step: u64) -> Result<Self> {
        UNet::new(config.clone())?.check_params(&params)?;
        Ok(Self {
            meta: CheckpointMeta { config, epoch, step },
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.meta.config
    }

    pub fn network(&self) -> Result<UNet> {
        UNet::new(self.meta.config.clone())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            for d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(r)? as usize;
        if meta_len > 1 << 20 {
            return Err(bad("header too large"));
        }
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta).map_err(|e| bad(e.to_string()))?;
        let net = UNet::new(meta.config.clone())?;
        let count = read_u32(r)? as usize;
        if count != net.param_shapes().len() {
            return Err(bad(format!(
                "{count} parameters stored, config needs {}",
                net.param_shapes().len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (want_name, want_shape) in net.param_shapes() {
            let name_len = read_u32(r)? as usize;
            if name_len > 256 {
                return Err(bad("parameter name too long"));
            }
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = read_u32(r)? as usize;
            }
            if &name != want_name || shape != *want_shape {
                return Err(bad(format!("parameter {name} {shape:?}, expected {want_name} {want_shape:?}")));
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(r, &mut raw)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("parameter {name} has non-finite values")));
            }
            params.push(Param {
                name,
                value: Tensor::from_vec(shape, data)?,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            meta,
            params: ParameterSet { params },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = tmp_sibling(path);
        let file = File::create(&tmp).map_err(Error::io(&tmp))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(Error::io(&tmp))?;
        drop(w);
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io(path))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| bad(format!("truncated: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: 2,
            depth: 1,
            kernel_size: 3,
            rescale_input: false,
        }
    }

    #[test]
    fn roundtrip_and_file() {
        let net = UNet::new(small()).unwrap();
        let ck = Checkpoint::new(small(), net.init_params(5), 3, 40).unwrap();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::read_from(&mut bytes.as_slice()).unwrap(), ck);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let net = UNet::new(small()).unwrap();
        let ck = Checkpoint::new(small(), net.init_params(5), 0, 0).unwrap();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&mut extra.as_slice()).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::read_from(&mut magic.as_slice()).is_err());
        let other = UNetConfig { base_width: 3, ..small() };
        assert!(Checkpoint::new(other, ck.params.clone(), 0, 0).is_err());
    }
}
