//! Reading datasets and persisting artifacts.
//!
//! Layouts:
//! - label maps: 8-bit palette PNG with the VOC palette, 255 = ignore
//! - saliency: 8-bit grayscale PNG, scaled to `[0, 1]`
//! - response maps: NPY v1.0, `<f4`, shape `(H, W)`, plus a TOML sidecar
//!   (`<name>.meta`) holding class id, normalized flag, shape and config digest
//! - dataset list: one image id per line; class file: `<id> <class> <class> ...`

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, LabelMap, ResponseMap, SaliencyMap, IGNORE};

/// Highest class index a VOC label file may hold.
pub const VOC_MAX_CLASS: u8 = 20;

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
];

/// The 256-entry VOC color map (index 255 is the ignore color).
pub fn voc_palette() -> Vec<[u8; 3]> {
    (0..256u32)
        .map(|i| {
            let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
            let mut c = i;
            for j in 0..8 {
                r |= (((c >> 0) & 1) as u8) << (7 - j);
                g |= (((c >> 1) & 1) as u8) << (7 - j);
                b |= (((c >> 2) & 1) as u8) << (7 - j);
                c >>= 3;
            }
            [r, g, b]
        })
        .collect()
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    ImageTensor::from_rgb8(&img.to_rgb8())
}

fn png_reader(path: &Path) -> Result<png::Reader<std::io::BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_8bit_plane(path: &Path, expected: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let mut reader = png_reader(path)?;
    let info = reader.info();
    if info.color_type != expected || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!(
                "expected 8-bit {expected:?} PNG, found {:?} at {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut data = Vec::with_capacity(w * h);
    for row in buf[..frame.buffer_size()].chunks(frame.line_size) {
        data.extend_from_slice(&row[..w]);
    }
    Ok((h, w, data))
}

/// Reads palette indices verbatim. Indices above 20 other than 255 are rejected.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let (h, w, data) = read_8bit_plane(path, png::ColorType::Indexed)?;
    if let Some(&bad) = data.iter().find(|&&v| v > VOC_MAX_CLASS && v != IGNORE) {
        return Err(Error::format(path, format!("label index {bad} is not a VOC class")));
    }
    LabelMap::new(h, w, data)
}

pub fn write_label_png(map: &LabelMap, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), map.width() as u32, map.height() as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(voc_palette().concat());
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(map.data())
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_saliency_png(path: &Path) -> Result<SaliencyMap> {
    let (h, w, data) = read_8bit_plane(path, png::ColorType::Grayscale)?;
    SaliencyMap::new(h, w, data.into_iter().map(|v| v as f32 / 255.0).collect())
}

pub fn write_saliency_png(map: &SaliencyMap, path: &Path) -> Result<()> {
    let raw = map.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(map.width() as u32, map.height() as u32, raw)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

fn npy_header(height: usize, width: usize) -> Vec<u8> {
    let dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({height}, {width}), }}");
    // magic + version + length field + dict + padding + newline, 64-byte aligned
    let unpadded = NPY_MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let header_len = (dict.len() + pad + 1) as u16;
    let mut out = Vec::with_capacity(unpadded + pad);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    out
}

pub fn write_npy(path: &Path, height: usize, width: usize, data: &[f32]) -> Result<()> {
    let mut bytes = npy_header(height, width);
    bytes.reserve(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a 2-D little-endian float32 C-order NPY file.
pub fn read_npy(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |message: String| Error::CorruptHeader {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(corrupt("missing NPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, start) = match (major, minor) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        _ => return Err(corrupt(format!("unsupported NPY version {major}.{minor}"))),
    };
    let header = bytes
        .get(start..start + header_len)
        .ok_or_else(|| corrupt("header runs past end of file".into()))?;
    let header = std::str::from_utf8(header).map_err(|_| corrupt("header is not text".into()))?;
    let descr = dict_value(header, "descr").ok_or_else(|| corrupt("no descr".into()))?;
    if descr.trim_matches(|c| c == '\'' || c == '"') != "<f4" {
        return Err(corrupt(format!("dtype {descr} is not little-endian float32")));
    }
    if dict_value(header, "fortran_order") != Some("False") {
        return Err(corrupt("only C-order arrays are supported".into()));
    }
    let shape = dict_value(header, "shape").ok_or_else(|| corrupt("no shape".into()))?;
    let dims: Vec<usize> = shape
        .trim_matches(|c| c == '(' || c == ')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| corrupt(format!("bad shape {shape}")))?;
    let [height, width] = dims[..] else {
        return Err(corrupt(format!("expected a 2-D array, shape is {shape}")));
    };
    let body = &bytes[start + header_len..];
    if body.len() != height * width * 4 {
        return Err(corrupt(format!(
            "payload has {} bytes, shape ({height}, {width}) needs {}",
            body.len(),
            height * width * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((height, width, data))
}

/// Raw text of the value for `key` in a Python dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pos = header
        .find(&format!("'{key}'"))
        .or_else(|| header.find(&format!("\"{key}\"")))?;
    let rest = header[pos + key.len() + 2..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find(',').or_else(|| rest.find('}'))?
    };
    Some(rest[..end].trim())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMeta {
    pub class_id: usize,
    pub normalized: bool,
    pub height: usize,
    pub width: usize,
    pub config_digest: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn save_response_map(map: &ResponseMap, path: &Path, config_digest: &str) -> Result<()> {
    write_npy(path, map.height(), map.width(), map.data())?;
    let meta = MapMeta {
        class_id: map.class_id(),
        normalized: map.is_normalized(),
        height: map.height(),
        width: map.width(),
        config_digest: config_digest.to_string(),
    };
    let text = toml::to_string(&meta).expect("metadata serializes");
    let meta_path = sidecar_path(path);
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

pub fn load_response_map(path: &Path) -> Result<(ResponseMap, MapMeta)> {
    let (height, width, data) = read_npy(path)?;
    let meta_path = sidecar_path(path);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MapMeta = toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if (meta.height, meta.width) != (height, width) {
        return Err(Error::format(
            path,
            format!(
                "tensor is {height}x{width} but sidecar says {}x{}",
                meta.height, meta.width
            ),
        ));
    }
    let map = ResponseMap::new(meta.class_id, height, width, data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let map = if meta.normalized {
        map.assume_normalized().map_err(|e| Error::format(path, e.to_string()))?
    } else {
        map
    };
    Ok((map, meta))
}

/// Where dataset files live. Images are looked up as `<id>.png`, `<id>.jpg` or `<id>.jpeg`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRoots {
    pub images: PathBuf,
    pub labels: Option<PathBuf>,
    pub saliency: Option<PathBuf>,
    /// Sidecar mapping ids to image-level class names.
    pub classes: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub saliency: Option<PathBuf>,
    /// Zero-based class ids from the class sidecar, when it lists this image.
    pub classes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    /// `(id, reason)` for each entry that was dropped.
    pub rejected: Vec<(String, String)>,
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

fn read_class_file(path: &Path, vocabulary: &[String]) -> Result<BTreeMap<String, Vec<usize>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        let mut classes = parts
            .map(|name| {
                vocabulary
                    .iter()
                    .position(|v| v == name)
                    .ok_or_else(|| Error::UnknownClass(name.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        classes.sort_unstable();
        classes.dedup();
        out.insert(id.to_string(), classes);
    }
    Ok(out)
}

/// Builds a validated index sorted by id. Entries with missing files or
/// duplicate ids are dropped and recorded in the report.
pub fn load_dataset(
    list_file: &Path,
    roots: &DatasetRoots,
    vocabulary: &[String],
) -> Result<(DatasetIndex, LoadReport)> {
    let text = std::fs::read_to_string(list_file).map_err(|e| Error::io(list_file, e))?;
    let class_map = match &roots.classes {
        Some(p) => read_class_file(p, vocabulary)?,
        None => BTreeMap::new(),
    };
    let mut ids: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    ids.sort_unstable();
    let mut report = LoadReport::default();
    let mut entries = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        if i > 0 && ids[i - 1] == id {
            report.rejected.push((id.to_string(), "duplicate id".into()));
            continue;
        }
        let Some(image) = find_image(&roots.images, id) else {
            report.rejected.push((id.to_string(), "image not found".into()));
            continue;
        };
        let optional = |root: &Option<PathBuf>| -> std::result::Result<Option<PathBuf>, String> {
            match root {
                None => Ok(None),
                Some(dir) => {
                    let p = dir.join(format!("{id}.png"));
                    if p.is_file() {
                        Ok(Some(p))
                    } else {
                        Err(format!("{} not found", p.display()))
                    }
                }
            }
        };
        let label = match optional(&roots.labels) {
            Ok(p) => p,
            Err(reason) => {
                report.rejected.push((id.to_string(), reason));
                continue;
            }
        };
        let saliency = match optional(&roots.saliency) {
            Ok(p) => p,
            Err(reason) => {
                report.rejected.push((id.to_string(), reason));
                continue;
            }
        };
        entries.push(DatasetEntry {
            id: id.to_string(),
            image,
            label,
            saliency,
            classes: class_map.get(id).cloned(),
        });
    }
    Ok((DatasetIndex { entries }, report))
}

/// Writes the id list and, for entries that carry classes, the class sidecar.
pub fn save_dataset(index: &DatasetIndex, list_file: &Path, class_file: &Path, vocabulary: &[String]) -> Result<()> {
    let write = |path: &Path, lines: Vec<String>| -> Result<()> {
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for l in lines {
            writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    };
    write(list_file, index.entries.iter().map(|e| e.id.clone()).collect())?;
    let mut lines = Vec::new();
    for e in &index.entries {
        if let Some(classes) = &e.classes {
            let names = classes
                .iter()
                .map(|&c| {
                    vocabulary
                        .get(c)
                        .cloned()
                        .ok_or_else(|| Error::Contract(format!("class id {c} has no name")))
                })
                .collect::<Result<Vec<_>>>()?;
            lines.push(std::iter::once(e.id.clone()).chain(names).collect::<Vec<_>>().join(" "));
        }
    }
    write(class_file, lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_starts_like_voc() {
        let p = voc_palette();
        assert_eq!(p[0], [0, 0, 0]);
        assert_eq!(p[1], [128, 0, 0]);
        assert_eq!(p[15], [192, 128, 128]);
        assert_eq!(p[255], [224, 224, 192]);
    }

    #[test]
    fn npy_header_is_aligned() {
        let h = npy_header(375, 500);
        assert_eq!(h.len() % 64, 0);
        assert_eq!(*h.last().unwrap(), b'\n');
        assert_eq!(dict_value(std::str::from_utf8(&h[10..]).unwrap(), "shape"), Some("(375, 500)"));
    }

    #[test]
    fn dict_value_handles_spacing_and_order() {
        let header = "{'shape': (2,3),'fortran_order':False, 'descr':'<f4'}";
        assert_eq!(dict_value(header, "shape"), Some("(2,3)"));
        assert_eq!(dict_value(header, "fortran_order"), Some("False"));
        assert_eq!(dict_value(header, "descr"), Some("'<f4'"));
    }
}
