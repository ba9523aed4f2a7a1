//! Frame file formats.
//!
//! HDR frames use a small little-endian container (`.hdrf`):
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `HDRF`                       |
//! | 4      | 4    | version (`u32`, currently 1)       |
//! | 8      | 4    | height `H` (`u32`)                 |
//! | 12     | 4    | width `W` (`u32`)                  |
//! | 16     | 4    | channels `C` (`u32`)               |
//! | 20     | 4·HWC| `f32` samples, row-major `H, W, C` |
//!
//! LDR frames are RGB PNG files at 8 or 16 bits per sample.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const HDRF_MAGIC: &[u8; 4] = b"HDRF";
pub const HDRF_VERSION: u32 = 1;

/// Writes an `[H, W, C]` tensor as `.hdrf` (values rounded to `f32`).
pub fn write_hdrf(path: &Path, pixels: &Tensor) -> Result<()> {
    let [h, w, c] = pixels.shape() else {
        return Err(invalid!("HDR container needs [H, W, C], got {:?}", pixels.shape()));
    };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    let mut buf = Vec::with_capacity(20 + 4 * pixels.numel());
    buf.extend_from_slice(HDRF_MAGIC);
    for v in [HDRF_VERSION, *h as u32, *w as u32, *c as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in pixels.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_hdrf(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != HDRF_MAGIC {
        return Err(Error::format(path, "missing HDRF header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != HDRF_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", word(0))));
    }
    let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = h * w * c;
    if bytes.len() != 20 + 4 * n {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - 20)));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::new([h, w, c], data)
}

/// Writes `[H, W, 3]` values in `[0, 1]` as an RGB PNG with the given bit depth.
pub fn write_png(path: &Path, pixels: &Tensor, bit_depth: u8) -> Result<()> {
    let [h, w, 3] = pixels.shape() else {
        return Err(invalid!("PNG writer needs [H, W, 3], got {:?}", pixels.shape()));
    };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), *w as u32, *h as u32);
    enc.set_color(png::ColorType::Rgb);
    let fmt_err = |e: png::EncodingError| Error::format(path, e.to_string());
    let data: Vec<u8> = match bit_depth {
        8 => {
            enc.set_depth(png::BitDepth::Eight);
            pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
        }
        16 => {
            enc.set_depth(png::BitDepth::Sixteen);
            pixels
                .data()
                .iter()
                .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
                .collect()
        }
        b => return Err(invalid!("unsupported PNG bit depth {b}")),
    };
    let mut writer = enc.write_header().map_err(fmt_err)?;
    writer.write_image_data(&data).map_err(fmt_err)?;
    writer.finish().map_err(fmt_err)
}

/// Reads an RGB PNG into `[H, W, 3]` values `code / (2^bits - 1)`.
pub fn read_png(path: &Path) -> Result<(Tensor, u8)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(BufReader::new(f));
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb {
        return Err(Error::format(path, format!("expected RGB, found {:?}", info.color_type)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let (data, bits): (Vec<f64>, u8) = match info.bit_depth {
        png::BitDepth::Eight => (buf[..h * w * 3].iter().map(|&b| b as f64 / 255.0).collect(), 8),
        png::BitDepth::Sixteen => (
            buf[..h * w * 6]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
                .collect(),
            16,
        ),
        d => return Err(Error::format(path, format!("unsupported bit depth {d:?}"))),
    };
    Ok((Tensor::new([h, w, 3], data)?, bits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hdrf_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.hdrf");
        write_hdrf(&p, &Tensor::full([2, 2, 3], 0.5)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&p, bytes).unwrap();
        let err = read_hdrf(&p).unwrap_err();
        assert!(err.to_string().contains("x.hdrf"), "{err}");
    }

    #[test]
    fn hdrf_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.hdrf");
        let t = Tensor::from_fn([3, 2, 3], |i| i as f64 * 0.25);
        write_hdrf(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"HDRF");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 0.25);
        assert_eq!(read_hdrf(&p).unwrap(), t);
    }

    #[test]
    fn png_codes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::from_fn([4, 5, 3], |i| (i % 256) as f64 / 255.0);
        write_png(&p, &t, 8).unwrap();
        let (back, bits) = read_png(&p).unwrap();
        assert_eq!(bits, 8);
        assert_eq!(back, t);
    }
}
