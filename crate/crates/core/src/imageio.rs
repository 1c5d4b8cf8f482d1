//! PNG and PFM reading/writing for frames and render buffers.

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::types::Image;

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an RGB image as 8-bit PNG bytes.
pub fn encode_png_rgb(img: &Image) -> Vec<u8> {
    let buf: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    let rgb = RgbImage::from_raw(img.width as u32, img.height as u32, buf).expect("buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png).expect("in-memory png encode");
    out.into_inner()
}

pub fn encode_png_gray(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let g = GrayImage::from_raw(width as u32, height as u32, values.to_vec()).expect("buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    g.write_to(&mut out, ImageFormat::Png).expect("in-memory png encode");
    out.into_inner()
}

pub fn decode_png_rgb(bytes: &[u8], path: &Path) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("png decode failed: {e}")))?
        .to_rgb8();
    Ok(Image {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    })
}

pub fn decode_png_gray(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("png decode failed: {e}")))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(path, format!("expected 8-bit grayscale png, got {:?}", img.color())));
    }
    let g = img.to_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

/// Single-channel little-endian PFM (`Pf`, scale -1). Rows are stored
/// bottom-to-top as the format requires; `values` is top-to-bottom.
pub fn encode_pfm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1\n").into_bytes();
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let err = |m: String| Error::format(path, m);
    let mut lines = 0;
    let mut header_end = 0;
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'\n' {
            lines += 1;
            if lines == 3 {
                header_end = i + 1;
                break;
            }
        }
    }
    if lines < 3 {
        return Err(err(format!("truncated PFM header (file is {} bytes)", bytes.len())));
    }
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| err("PFM header is not text".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("Pf") {
        return Err(err("not a single-channel PFM (magic must be Pf)".into()));
    }
    let parse = |s: Option<&str>, what: &str| -> Result<f64> {
        s.and_then(|v| v.parse().ok()).ok_or_else(|| err(format!("bad PFM {what}")))
    };
    let width = parse(parts.next(), "width")? as usize;
    let height = parse(parts.next(), "height")? as usize;
    let scale = parse(parts.next(), "scale")?;
    let need = width * height * 4;
    let body = &bytes[header_end..];
    if body.len() < need {
        return Err(err(format!(
            "truncated PFM data: expected {need} bytes after offset {header_end}, file ends at offset {}",
            bytes.len()
        )));
    }
    let mut values = vec![0f32; width * height];
    for row in 0..height {
        let src_row = height - 1 - row;
        for x in 0..width {
            let at = (src_row * width + x) * 4;
            let raw: [u8; 4] = body[at..at + 4].try_into().unwrap();
            values[row * width + x] = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        }
    }
    Ok((width, height, values))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
