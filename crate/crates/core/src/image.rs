//! Single-channel float images and their PNG / raw encodings.

use std::io::{BufRead, Seek, Write};

use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("PNG decode failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("PNG encode failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("unsupported image: {0}")]
    Unsupported(String),
}

/// Row-major `H×W` grid of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

fn quantize(v: f64, max: f64) -> u16 {
    (v.clamp(0.0, 1.0) * max).round() as u16
}

/// Encodes `channels` interleaved samples per pixel in `[0, 1]` as an 8- or
/// 16-bit PNG (gray for 1 channel, RGB for 3).
pub fn write_png_samples<W: Write>(
    w: W,
    width: usize,
    height: usize,
    channels: usize,
    samples: &[f64],
    sixteen_bit: bool,
) -> Result<(), ImageError> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(ImageError::Unsupported(format!("{c} channels"))),
    };
    if samples.len() != width * height * channels {
        return Err(ImageError::Unsupported("sample count does not match dimensions".into()));
    }
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    let bytes: Vec<u8> = if sixteen_bit {
        enc.set_depth(png::BitDepth::Sixteen);
        samples.iter().flat_map(|&v| quantize(v, 65535.0).to_be_bytes()).collect()
    } else {
        enc.set_depth(png::BitDepth::Eight);
        samples.iter().map(|&v| quantize(v, 255.0) as u8).collect()
    };
    let mut writer = enc.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

pub fn write_png_gray<W: Write>(w: W, img: &Image, sixteen_bit: bool) -> Result<(), ImageError> {
    write_png_samples(w, img.width, img.height, 1, &img.data, sixteen_bit)
}

/// Gray image replicated into three identical RGB channels.
pub fn write_png_replicated<W: Write>(w: W, img: &Image, sixteen_bit: bool) -> Result<(), ImageError> {
    let rgb: Vec<f64> = img.data.iter().flat_map(|&v| [v, v, v]).collect();
    write_png_samples(w, img.width, img.height, 3, &rgb, sixteen_bit)
}

/// Normal map encoded as `(n + 1) / 2` per channel.
pub fn write_png_normals<W: Write>(
    w: W,
    width: usize,
    height: usize,
    normals: &[Vec3],
    sixteen_bit: bool,
) -> Result<(), ImageError> {
    let rgb: Vec<f64> = normals.iter().flat_map(|n| [(n.x + 1.0) / 2.0, (n.y + 1.0) / 2.0, (n.z + 1.0) / 2.0]).collect();
    write_png_samples(w, width, height, 3, &rgb, sixteen_bit)
}

/// Decoded PNG with samples normalized by the bit-depth maximum.
pub struct DecodedPng {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<f64>,
}

pub fn read_png_samples<R: BufRead + Seek>(r: R) -> Result<DecodedPng, ImageError> {
    let mut dec = png::Decoder::new(r);
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => {
            buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0).collect()
        }
        png::BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
        d => return Err(ImageError::Unsupported(format!("bit depth {d:?}"))),
    };
    Ok(DecodedPng { width: info.width as usize, height: info.height as usize, channels, samples })
}

/// Reads a PNG as a single channel, keeping the first channel of
/// multi-channel files.
pub fn read_png_gray<R: BufRead + Seek>(r: R) -> Result<Image, ImageError> {
    let d = read_png_samples(r)?;
    let data = d.samples.iter().step_by(d.channels).copied().collect();
    Ok(Image { width: d.width, height: d.height, data })
}

pub const RAW_MAGIC: &[u8; 8] = b"PSRAWF32";

/// Raw little-endian `f32` map: magic, `u32` width, height and channel
/// count, then the samples in row-major interleaved order.
pub fn write_raw_f32<W: Write>(
    mut w: W,
    width: usize,
    height: usize,
    channels: usize,
    samples: &[f64],
) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(20 + samples.len() * 4);
    buf.extend_from_slice(RAW_MAGIC);
    for v in [width, height, channels] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &s in samples {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn sixteen_bit_round_trip_is_exact_on_the_grid() {
        let img = Image::from_fn(5, 3, |c, r| ((c * 7 + r * 13) as f64 * 997.0 % 65536.0) / 65535.0);
        let mut buf = Vec::new();
        write_png_gray(&mut buf, &img, true).unwrap();
        let back = read_png_gray(Cursor::new(buf)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn full_scale_sample_reads_as_one() {
        let mut buf = Vec::new();
        write_png_gray(&mut buf, &Image::filled(2, 2, 1.0), true).unwrap();
        assert_eq!(read_png_gray(Cursor::new(buf)).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn replicated_rgb_collapses_to_first_channel() {
        let img = Image::from_fn(4, 4, |c, r| (c + 4 * r) as f64 / 255.0);
        let mut buf = Vec::new();
        write_png_replicated(&mut buf, &img, false).unwrap();
        let back = read_png_gray(Cursor::new(buf)).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_header_layout() {
        let mut buf = Vec::new();
        write_raw_f32(&mut buf, 2, 1, 3, &[0.0; 6]).unwrap();
        assert_eq!(&buf[..8], RAW_MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 20 + 24);
    }
}
