//! Minimal writers for the bundle's file formats.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// NPY v1.0, little-endian float32, C order, 2-D.
pub fn write_npy(path: &Path, height: usize, width: usize, data: &[f32]) -> std::io::Result<()> {
    assert_eq!(data.len(), height * width);
    let dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({height}, {width}), }}");
    // magic (6) + version (2) + header length (2), then the dict padded to a multiple of 64
    let unpadded = 10 + dict.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let header = format!("{dict}{}\n", " ".repeat(padding));
    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 4);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)
}

/// Sidecar next to a response-map tensor.
pub fn write_meta(path: &Path, class_id: usize, height: usize, width: usize) -> std::io::Result<()> {
    let text = format!(
        "class_id = {class_id}\nnormalized = true\nheight = {height}\nwidth = {width}\nconfig_digest = \"fixture\"\n"
    );
    std::fs::write(path.with_extension("meta"), text)
}

fn encoder<'a>(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
) -> std::io::Result<png::Encoder<'a, BufWriter<File>>> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    Ok(enc)
}

fn finish(enc: png::Encoder<'_, BufWriter<File>>, data: &[u8]) -> std::io::Result<()> {
    let mut writer = enc.write_header().map_err(std::io::Error::other)?;
    writer.write_image_data(data).map_err(std::io::Error::other)?;
    writer.finish().map_err(std::io::Error::other)?;
    Ok(())
}

pub fn write_rgb_png(path: &Path, height: usize, width: usize, pixels: &[[u8; 3]]) -> std::io::Result<()> {
    let data: Vec<u8> = pixels.iter().flatten().copied().collect();
    finish(encoder(path, width, height, png::ColorType::Rgb)?, &data)
}

pub fn write_gray_png(path: &Path, height: usize, width: usize, data: &[u8]) -> std::io::Result<()> {
    finish(encoder(path, width, height, png::ColorType::Grayscale)?, data)
}

/// The 256-entry VOC color map.
fn voc_palette() -> Vec<u8> {
    let mut out = Vec::with_capacity(256 * 3);
    for i in 0..256usize {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut id = i;
        for shift in (0..8).rev() {
            r |= ((id & 1) as u8) << shift;
            g |= (((id >> 1) & 1) as u8) << shift;
            b |= (((id >> 2) & 1) as u8) << shift;
            id >>= 3;
        }
        out.extend_from_slice(&[r, g, b]);
    }
    out
}

pub fn write_label_png(path: &Path, height: usize, width: usize, data: &[u8]) -> std::io::Result<()> {
    let mut enc = encoder(path, width, height, png::ColorType::Indexed)?;
    enc.set_palette(voc_palette());
    finish(enc, data)
}

pub fn write_text(path: &Path, lines: &[String]) -> std::io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()
}
