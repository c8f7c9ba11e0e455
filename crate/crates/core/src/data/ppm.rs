//! Binary PPM (P6) images and labelled directories.

use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Decoded RGB image, values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::Parse {
                    path: self.path.to_string(),
                    offset: start,
                    msg: format!("{what} out of range"),
                }
            })
    }
}

pub fn parse_ppm(bytes: &[u8], path: &str) -> Result<PpmImage> {
    let mut h = Header { bytes, pos: 0, path };
    if !bytes.starts_with(b"P6") {
        return Err(h.err("missing P6 magic"));
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(h.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(h.err(format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected whitespace after maxval"));
    }
    h.pos += 1;
    let sample = if maxval > 255 { 2 } else { 1 };
    let need = width * height * 3 * sample;
    let body = &bytes[h.pos..];
    if body.len() < need {
        return Err(h.err(format!("pixel data has {} bytes, expected {need}", body.len())));
    }
    let scale = maxval as f32;
    let pixels = if sample == 1 {
        body[..need].iter().map(|&b| (b as f32 / scale).min(1.0)).collect()
    } else {
        body[..need]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 / scale).min(1.0))
            .collect()
    };
    Ok(PpmImage { width, height, pixels })
}

/// Encodes `[H×W×3]` values in `[0, 1]` at maxval 255.
pub fn write_ppm(width: usize, height: usize, pixels: &[f32]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Reads `filename,class_index` rows and the referenced images from `dir`.
/// A header row is accepted when its second field is not an integer.
pub fn load_images(dir: &Path, labels_csv: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read(labels_csv).map_err(|e| Error::io(labels_csv, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_slice());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", labels_csv.display())))?;
        if rec.len() != 2 {
            return Err(Error::Data(format!(
                "{} row {}: expected filename,class_index",
                labels_csv.display(),
                i + 1
            )));
        }
        match rec[1].parse::<usize>() {
            Ok(label) => rows.push((rec[0].to_string(), label)),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::Data(format!(
                    "{} row {}: bad class index `{}`",
                    labels_csv.display(),
                    i + 1,
                    &rec[1]
                )))
            }
        }
    }
    let missing: Vec<&str> = rows
        .iter()
        .filter(|(f, _)| !dir.join(f).is_file())
        .map(|(f, _)| f.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing image files: {}", missing.join(", "))));
    }
    let mut ds = LabeledDataset::default();
    for (file, label) in rows {
        let path = dir.join(&file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let img = parse_ppm(&bytes, &path.display().to_string())?;
        if img.width != img.height {
            return Err(Error::Data(format!("{file}: image is {}x{}, expected square", img.width, img.height)));
        }
        if ds.labels.is_empty() {
            ds.side = img.width;
            ds.channels = 3;
        } else if img.width != ds.side {
            return Err(Error::Data(format!("{file}: side {} differs from {}", img.width, ds.side)));
        }
        ds.pixels.extend(img.pixels);
        ds.labels.push(label);
    }
    Ok(ds)
}
