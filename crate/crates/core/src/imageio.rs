//! Linear RGB images with PFM and gamma-encoded PNG input/output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Rgb;

pub const GAMMA: f64 = 2.2;

/// Row-major, top-down linear RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![Rgb::zeros(); width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Rgb) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Image {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Rgb) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().map(|p| p.max()).fold(0.0, f64::max)
    }
}

pub fn encode_gamma(v: f64) -> u8 {
    (v.clamp(0.0, 1.0).powf(1.0 / GAMMA) * 255.0).round() as u8
}

pub fn decode_gamma(v: u8) -> f64 {
    (v as f64 / 255.0).powf(GAMMA)
}

fn write_pfm_raw(path: &Path, width: usize, height: usize, channels: usize, rows: impl Fn(usize) -> Vec<f32>) -> Result<()> {
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut buf = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    // PFM stores scanlines bottom-up.
    for y in (0..height).rev() {
        for v in rows(y) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    write_pfm_raw(path, img.width, img.height, 3, |y| {
        img.data[y * img.width..(y + 1) * img.width]
            .iter()
            .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect()
    })
}

/// Single-channel PFM from a row-major, top-down buffer.
pub fn write_pfm_gray(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    write_pfm_raw(path, width, height, 1, |y| {
        values[y * width..(y + 1) * width].iter().map(|v| *v as f32).collect()
    })
}

/// Reads a color or grayscale PFM; grayscale is replicated to three channels.
pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes).map_err(|m| Error::format(path, m))
}

fn parse_pfm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let channels = match fields[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err("missing PF/Pf magic".into()),
    };
    let width: usize = fields[1].parse().map_err(|_| "bad width")?;
    let height: usize = fields[2].parse().map_err(|_| "bad height")?;
    let scale: f64 = fields[3].parse().map_err(|_| "bad scale")?;
    let little = scale < 0.0;
    let need = width * height * channels * 4;
    let body = bytes.get(pos..pos + need).ok_or("payload shorter than header claims")?;
    let mut img = Image::new(width, height);
    for (i, c) in body.chunks_exact(4 * channels).enumerate() {
        let val = |k: usize| {
            let b: [u8; 4] = c[4 * k..4 * k + 4].try_into().unwrap();
            (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        };
        let x = i % width;
        let y = height - 1 - i / width;
        let p = if channels == 3 {
            Rgb::new(val(0), val(1), val(2))
        } else {
            Rgb::repeat(val(0))
        };
        img.set(x, y, p);
    }
    Ok(img)
}

/// 8-bit sRGB-ish PNG with γ = 2.2 encoding; values are clamped to [0, 1].
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let buf: Vec<u8> = img
        .data
        .iter()
        .flat_map(|p| [encode_gamma(p.x), encode_gamma(p.y), encode_gamma(p.z)])
        .collect();
    image::save_buffer(path, &buf, img.width as u32, img.height as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8-bit PNG and linearizes it with γ = 2.2.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_fn(w as usize, h as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        Rgb::new(decode_gamma(p[0]), decode_gamma(p[1]), decode_gamma(p[2]))
    }))
}

/// Reads a linear image from PFM, or from PNG with γ linearization.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pfm") => read_pfm(path),
        _ => read_png(path),
    }
}

pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[f64]) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|m| (m.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &buf, width as u32, height as u32, image::ColorType::L8)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a mask PNG, thresholding at half intensity.
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok((w as usize, h as usize, data))
}
