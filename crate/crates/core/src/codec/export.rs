//! PNG and PGM/PPM export for visual inspection.
//!
//! Values are clamped to [0, 1] before quantization; NaN renders black.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::codec::{CipherImage, ImageTensor};
use crate::error::{Error, Result};

fn to_u8(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        crate::codec::quantize_byte(v.clamp(0.0, 1.0))
    }
}

fn check_displayable(img: &ImageTensor) -> Result<()> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "only 1- or 3-channel images can be exported, got {}",
            img.channels
        )));
    }
    Ok(())
}

/// Interleaved 8-bit samples (gray or RGB, matching the channel count).
pub fn to_bytes8(img: &ImageTensor) -> Result<Vec<u8>> {
    check_displayable(img)?;
    Ok(img.values.iter().map(|&v| to_u8(v)).collect())
}

/// RGBA bytes for canvas-style consumers; gray is replicated.
pub fn to_rgba8(img: &ImageTensor) -> Result<Vec<u8>> {
    check_displayable(img)?;
    let mut out = Vec::with_capacity(img.height * img.width * 4);
    for px in img.values.chunks_exact(img.channels) {
        match px {
            [g] => out.extend_from_slice(&[to_u8(*g), to_u8(*g), to_u8(*g), 255]),
            [r, g, b] => out.extend_from_slice(&[to_u8(*r), to_u8(*g), to_u8(*b), 255]),
            _ => unreachable!(),
        }
    }
    Ok(out)
}

pub fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let data = to_bytes8(img)?;
    let file = File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = enc.write_header().map_err(to_err)?;
    w.write_image_data(&data).map_err(to_err)?;
    w.finish().map_err(to_err)
}

/// Binary PGM (1 channel) or PPM (3 channels).
pub fn write_pnm(img: &ImageTensor, path: &Path) -> Result<()> {
    let data = to_bytes8(img)?;
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut f = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    write!(f, "{magic}\n{} {}\n255\n", img.width, img.height).map_err(Error::io(path))?;
    f.write_all(&data).map_err(Error::io(path))?;
    f.flush().map_err(Error::io(path))
}

fn to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    check_displayable(img)?;
    if img.channels == 3 {
        return Ok(img.clone());
    }
    let values = img.values.iter().flat_map(|&v| [v, v, v]).collect();
    ImageTensor::new(img.height, img.width, 3, values)
}

/// Three consecutive cipherimage channels starting at `first` shown as RGB.
pub fn cipher_channels_rgb(ci: &CipherImage, first: usize) -> Result<ImageTensor> {
    if first + 3 > ci.channels {
        return Err(Error::InvalidArgument(format!(
            "channels {first}..{} out of range for {} channels",
            first + 3,
            ci.channels
        )));
    }
    let values = ci
        .values
        .chunks_exact(ci.channels)
        .flat_map(|px| px[first..first + 3].iter().copied())
        .collect();
    ImageTensor::new(ci.height, ci.width, 3, values)
}

/// Places images side by side on a white background, top-aligned.
pub fn panel(images: &[ImageTensor], gap: usize) -> Result<ImageTensor> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty panel".into()));
    }
    let height = images.iter().map(|i| i.height).max().unwrap();
    let width = images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
    let mut out = ImageTensor::filled(height, width, 3, 1.0);
    let mut x0 = 0;
    for img in images {
        let rgb = to_rgb(img)?;
        for r in 0..rgb.height {
            for c in 0..rgb.width {
                for ch in 0..3 {
                    out.set(r, x0 + c, ch, rgb.get(r, c, ch));
                }
            }
        }
        x0 += img.width + gap;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{bytes_to_cipherimage, EncodingMode};

    #[test]
    fn pnm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let p = dir.path().join("a.pgm");
        write_pnm(&img, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn png_decodes_back() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(2, 2, 3, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let p = dir.path().join("a.png");
        write_png(&img, &p).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&p).unwrap()));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (2, 2));
        assert_eq!(&buf[..info.buffer_size()], &to_bytes8(&img).unwrap()[..]);
    }

    #[test]
    fn non_finite_and_out_of_range_render_clamped() {
        let img = ImageTensor::new(1, 4, 1, vec![f32::NAN, f32::INFINITY, -2.0, 0.5]).unwrap();
        assert_eq!(to_bytes8(&img).unwrap(), vec![0, 255, 0, 128]);
        assert!(to_bytes8(&ImageTensor::zeros(1, 1, 2)).is_err());
    }

    #[test]
    fn panel_layout() {
        let a = ImageTensor::filled(2, 2, 1, 0.0);
        let b = ImageTensor::filled(3, 1, 3, 0.5);
        let p = panel(&[a, b], 1).unwrap();
        assert_eq!(p.shape(), (3, 4, 3));
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert_eq!(p.get(0, 2, 0), 1.0);
        assert_eq!(p.get(2, 3, 1), 0.5);
        assert_eq!(p.get(2, 0, 0), 1.0);
    }

    #[test]
    fn cipher_channel_view() {
        let ci = bytes_to_cipherimage(&(0..24).collect::<Vec<u8>>(), 1, 2, 3, EncodingMode::Float32).unwrap();
        let v = cipher_channels_rgb(&ci, 3).unwrap();
        assert_eq!(v.values, vec![3.0 / 255.0, 4.0 / 255.0, 5.0 / 255.0, 15.0 / 255.0, 16.0 / 255.0, 17.0 / 255.0]);
        assert!(cipher_channels_rgb(&ci, 10).is_err());
    }
}
