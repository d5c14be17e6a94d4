//! Binary PPM (P6) images and PGM (P5) label maps, 8-bit.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Codec { path: String, source: image::ImageError },
    #[error("{path}: expected {expected}, got {got}")]
    Format {
        path: String,
        expected: &'static str,
        got: String,
    },
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Snap every value to the nearest 8-bit level, so a write/read cycle is
/// lossless.
pub fn quantize(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = from_u8(to_u8(*v));
    }
}

/// Encode a `[3,H,W]` image as P6 bytes.
pub fn encode_ppm(img: &Tensor) -> Vec<u8> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            rgb.push(to_u8(d[c * h * w + p]));
        }
    }
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&rgb, w as u32, h as u32, ExtendedColorType::Rgb8)
        .expect("in-memory PPM encode");
    out
}

/// Encode an `H×W` class map as P5 bytes.
pub fn encode_pgm(label: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(label, w as u32, h as u32, ExtendedColorType::L8)
        .expect("in-memory PGM encode");
    out
}

fn decode(bytes: &[u8], path: &str) -> Result<image::DynamicImage, ImageIoError> {
    image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm)
        .decode()
        .map_err(|source| ImageIoError::Codec {
            path: path.to_string(),
            source,
        })
}

pub fn decode_ppm(bytes: &[u8], path: &str) -> Result<Tensor, ImageIoError> {
    let img = decode(bytes, path)?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(ImageIoError::Format {
                path: path.to_string(),
                expected: "8-bit RGB pixmap",
                got: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = from_u8(raw[p * 3 + c]);
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("shape matches"))
}

pub fn decode_pgm(bytes: &[u8], path: &str) -> Result<(Vec<u8>, usize, usize), ImageIoError> {
    let img = decode(bytes, path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(ImageIoError::Format {
                path: path.to_string(),
                expected: "8-bit graymap",
                got: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok((gray.into_raw(), h, w))
}

pub fn read_ppm(path: &Path) -> Result<Tensor, ImageIoError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| ImageIoError::Io {
        path: p.clone(),
        source,
    })?;
    decode_ppm(&bytes, &p)
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize), ImageIoError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| ImageIoError::Io {
        path: p.clone(),
        source,
    })?;
    decode_pgm(&bytes, &p)
}
