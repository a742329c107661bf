//! PNG images and the line-oriented dataset manifest.
//!
//! Manifest format (version 1): a header line `# geoflow-manifest v1`, then
//! one sample per line, whitespace separated:
//!
//! ```text
//! <image path> <label 0|1> <x0> <y0> <x1> <y1> ... <x_{K-1}> <y_{K-1}>
//! ```
//!
//! Paths are relative to the manifest's directory unless absolute. The
//! landmark count `K` must be the same on every line. Landmark sidecar
//! files use the same coordinate list without path and label.
//!
//! Raw tensors (flow fields, masks, residuals) use a small binary format,
//! little endian: magic `GEOTENS\0`, u32 version 1, 4 × u32 shape
//! (N, C, H, W), then N·C·H·W f32 values in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkSet, Point};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_HEADER: &str = "# geoflow-manifest v1";
const TENSOR_MAGIC: &[u8; 8] = b"GEOTENS\0";
pub const TENSOR_VERSION: u32 = 1;

/// [−1, 1] → 8-bit, `round((x + 1) / 2 · 255)`.
pub fn quantize(x: f32) -> u8 {
    (((x as f64 + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

pub fn dequantize(v: u8) -> f32 {
    (v as f64 / 255.0 * 2.0 - 1.0) as f32
}

/// Writes item 0 of a N×3×H×W (or N×1×H×W, as grey) tensor as 8-bit PNG.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.c() != 3 && s.c() != 1 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("cannot encode {} channels", s.c()),
        });
    }
    let (h, w) = (s.h(), s.w());
    let mut bytes = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                bytes.push(quantize(image.at(0, c.min(s.c() - 1), i, j)));
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(&bytes).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

/// Reads an 8-bit RGB, RGBA or greyscale PNG into 1×3×H×W in [−1, 1].
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img_err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(img_err(format!("unsupported color type {other:?}"))),
    };
    let line = info.line_size;
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, i, j]| {
        let px = i * line + j * stride;
        let ch = if stride >= 3 { c } else { 0 };
        dequantize(buf[px + ch])
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    pub landmarks: LandmarkSet,
}

fn parse_coords(path: &Path, line_no: usize, fields: &[&str]) -> Result<LandmarkSet> {
    let perr = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    if !fields.len().is_multiple_of(2) {
        return Err(perr(format!("odd number of coordinates ({})", fields.len())));
    }
    let nums = fields
        .iter()
        .map(|f| f.parse::<f64>().map_err(|_| perr(format!("bad coordinate `{f}`"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(LandmarkSet::new(
        nums.chunks(2).map(|p| Point::new(p[0], p[1])).collect(),
    ))
}

fn fmt_coords(out: &mut String, lm: &LandmarkSet) {
    for p in &lm.points {
        out.push_str(&format!(" {} {}", p.x, p.y));
    }
}

/// Loads a manifest, resolving relative paths and checking each image exists.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if i == 0 && trimmed.starts_with("# geoflow-manifest") && trimmed != MANIFEST_HEADER {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("unsupported manifest header `{trimmed}`"),
            });
        }
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        if fields.len() < 2 {
            return Err(perr("expected `path label coords...`".into()));
        }
        let label = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(perr(format!("label `{other}` is not 0 or 1"))),
        };
        let landmarks = parse_coords(path, line_no, &fields[2..])?;
        if let Some(first) = entries.first() {
            if first.landmarks.len() != landmarks.len() {
                return Err(perr(format!(
                    "{} landmarks, earlier lines have {}",
                    landmarks.len(),
                    first.landmarks.len()
                )));
            }
        }
        let image = base.join(fields[0]);
        if !image.is_file() {
            return Err(perr(format!("image {} does not exist", image.display())));
        }
        entries.push(ManifestEntry {
            path: image,
            label,
            landmarks,
        });
    }
    Ok(entries)
}

/// Writes a manifest; entry paths are written as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        out.push_str(&format!("{} {}", e.path.display(), e.label));
        fmt_coords(&mut out, &e.landmarks);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace)
        .collect();
    parse_coords(path, 1, &fields)
}

pub fn write_landmarks(path: &Path, lm: &LandmarkSet) -> Result<()> {
    let mut out = String::new();
    fmt_coords(&mut out, lm);
    out.push('\n');
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.trim_start().as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(28 + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    for d in t.shape().0 {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 28 {
        return Err(Error::Truncated("tensor header"));
    }
    if &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::BadMagic);
    }
    let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes"));
    if word(0) != TENSOR_VERSION {
        return Err(Error::VersionMismatch {
            found: word(0),
            expected: TENSOR_VERSION,
        });
    }
    let shape = Shape([1, 2, 3, 4].map(|k| word(k) as usize));
    let body = &bytes[28..];
    if body.len() != shape.numel() * 4 {
        return Err(Error::Truncated("tensor values"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_bounds() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 128);
        for v in 0..=255u8 {
            assert_eq!(quantize(dequantize(v)), v);
        }
    }

    #[test]
    fn png_roundtrip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::from_fn(Shape::new(1, 3, 5, 7), |[_, c, i, j]| {
            ((c * 31 + i * 7 + j * 3) % 17) as f32 / 8.0 - 1.0
        });
        write_png(&p, &t).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn raw_tensor_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let t = Tensor::from_fn(Shape::new(2, 2, 3, 5), |[b, c, i, j]| (b * 100 + c * 10 + i) as f32 * 0.37 - j as f32);
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Truncated(_))));
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        let lm = LandmarkSet::new(vec![Point::new(1.5, 2.0), Point::new(3.0, 4.25)]);
        let entries = vec![ManifestEntry {
            path: "a.png".into(),
            label: 1,
            landmarks: lm.clone(),
        }];
        let m = dir.path().join("m.txt");
        write_manifest(&m, &entries).unwrap();
        let back = read_manifest(&m).unwrap();
        assert_eq!(back[0].landmarks, lm);
        assert_eq!(back[0].path, dir.path().join("a.png"));

        std::fs::write(&m, "a.png 1 1 2 3 4\na.png 0 1 2\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&m, "missing.png 0 1 2\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(Error::Parse { line: 1, .. })));
    }
}
