//! PFM (little-endian, bottom-to-top rows) and 8-bit PNG images.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use crate::error::{IoError, Result};

/// Row-major top-to-bottom float image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn rgb(width: u32, height: u32, pixels: &[[f64; 3]]) -> Self {
        Self { width, height, channels: 3, data: pixels.iter().flatten().map(|&v| v as f32).collect() }
    }

    pub fn gray(width: u32, height: u32, pixels: &[f64]) -> Self {
        Self { width, height, channels: 1, data: pixels.iter().map(|&v| v as f32).collect() }
    }

    pub fn to_rgb(&self) -> Vec<[f64; 3]> {
        self.data
            .chunks(self.channels)
            .map(|c| if self.channels == 3 { [c[0] as f64, c[1] as f64, c[2] as f64] } else { [c[0] as f64; 3] })
            .collect()
    }
}

pub fn encode_pfm(img: &FloatImage) -> Vec<u8> {
    let tag = if img.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width as usize * img.channels;
    for y in (0..img.height as usize).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, img: &FloatImage) -> Result<()> {
    fs::write(path, encode_pfm(img)).map_err(|e| IoError::io(path, e))
}

pub fn parse_pfm(bytes: &[u8], path: &Path) -> Result<FloatImage> {
    let err = |m: &str| IoError::parse(path, m.to_string());
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
            return Err(err("truncated PFM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad PFM header"))?);
    }
    pos += 1; // single whitespace byte after the scale
    let channels = match fields[0] {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(err("not a PFM file")),
    };
    let width: u32 = fields[1].parse().map_err(|_| err("bad PFM width"))?;
    let height: u32 = fields[2].parse().map_err(|_| err("bad PFM height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| err("bad PFM scale"))?;
    let little = scale < 0.0;
    let row = width as usize * channels;
    let need = row * height as usize * 4;
    let body = bytes.get(pos..pos + need).ok_or_else(|| err("truncated PFM data"))?;
    let mut data = vec![0f32; row * height as usize];
    for (i, c) in body.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (y, x) = (i / row, i % row);
        data[(height as usize - 1 - y) * row + x] = v;
    }
    Ok(FloatImage { width, height, channels, data })
}

pub fn read_pfm(path: &Path) -> Result<FloatImage> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    parse_pfm(&bytes, path)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG, values clamped to `[0, 1]`.
pub fn write_png(path: &Path, width: u32, height: u32, pixels: &[[f64; 3]]) -> Result<()> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = pixels.iter().flatten().map(|&v| to_u8(v)).collect();
    let mut w = enc.write_header().map_err(|e| IoError::parse(path, e.to_string()))?;
    w.write_image_data(&data).map_err(|e| IoError::parse(path, e.to_string()))
}
