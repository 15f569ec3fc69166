//! PNG and PFM readers/writers for renders and condition maps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SemanticClass;
use crate::tensor::Tensor3;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        what: format!("png {}", path.display()),
        message: e.to_string(),
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, palette: Option<Vec<u8>>, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        encoder.set_palette(p);
    }
    let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// 8-bit indexed PNG whose palette maps each class id to its color.
pub fn write_indexed_png(path: impl AsRef<Path>, width: usize, height: usize, indices: &[u8], classes: &[SemanticClass]) -> Result<()> {
    let entries = indices
        .iter()
        .copied()
        .chain(classes.iter().map(|c| c.id))
        .max()
        .unwrap_or(0) as usize
        + 1;
    let mut palette = vec![0u8; entries * 3];
    for c in classes {
        palette[c.id as usize * 3..c.id as usize * 3 + 3].copy_from_slice(&c.color);
    }
    write_png(path.as_ref(), width, height, png::ColorType::Indexed, Some(palette), indices)
}

pub fn write_gray_png(path: impl AsRef<Path>, width: usize, height: usize, values: &[u8]) -> Result<()> {
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, None, values)
}

/// Writes a 3-channel tensor with values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: impl AsRef<Path>, image: &Tensor3) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::shape("3 channels", image.channels));
    }
    let bytes: Vec<u8> = image
        .to_rgb_pixels()
        .iter()
        .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    write_png(path.as_ref(), image.width, image.height, png::ColorType::Rgb, None, &bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PngImage {
    pub width: usize,
    pub height: usize,
    pub color: png::ColorType,
    pub data: Vec<u8>,
    pub palette: Option<Vec<u8>>,
}

/// Reads raw 8-bit PNG samples without palette expansion.
pub fn read_png(path: impl AsRef<Path>) -> Result<PngImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut data = vec![0u8; size];
    let info = reader.next_frame(&mut data).map_err(|e| png_err(path, e))?;
    data.truncate(info.buffer_size());
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    Ok(PngImage {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        data,
        palette,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub classes: Vec<SemanticClass>,
}

pub fn write_palette(path: impl AsRef<Path>, classes: &[SemanticClass]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&Palette {
        classes: classes.to_vec(),
    })
    .expect("palette serialises");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Single-channel PFM, little-endian (scale `-1.0`), rows stored bottom-to-top.
pub fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if values.len() != width * height {
        return Err(Error::shape(width * height, values.len()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        write!(w, "Pf\n{width} {height}\n-1.0\n")?;
        for y in (0..height).rev() {
            for x in 0..width {
                w.write_all(&(values[y * width + x] as f32).to_le_bytes())?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse {
        what: format!("pfm {}", path.display()),
        message: m.to_string(),
    };
    // Header: three whitespace-terminated tokens, the last followed by one byte.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens.len() < 4 || tokens[0] != "Pf" {
        return Err(bad("not a grayscale PFM"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let data = &bytes[pos + 1..];
    if data.len() != width * height * 4 {
        return Err(bad("payload size mismatch"));
    }
    let mut out = vec![0.0f32; width * height];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, x) = (i / width, i % width);
        out[(height - 1 - row) * width + x] = v;
    }
    Ok((width, height, out))
}
