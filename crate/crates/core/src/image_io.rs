//! 8-bit PNG and binary PPM (P6) frames as `[3, h, w]` grids in `[0, 1]`.

use std::fs;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::FeatureGrid;
use crate::renderer::{frame_file_name, to_rgb8};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(ImageFormat::Png),
            "ppm" => Some(ImageFormat::Ppm),
            _ => None,
        }
    }
}

fn ingest(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn from_rgb8(w: usize, h: usize, rgb: &[u8]) -> FeatureGrid {
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = f64::from(px[c]) / 255.0;
        }
    }
    FeatureGrid::new(3, h, w, data).expect("positive dims")
}

/// Reads a PNG (any 8-bit-normalizable color type) or a P6 PPM.
pub fn read_image(path: &Path) -> Result<FeatureGrid> {
    let bytes = fs::read(path).map_err(|e| ingest(path, e.to_string()))?;
    match ImageFormat::from_path(path) {
        Some(ImageFormat::Png) => decode_png(path, &bytes),
        Some(ImageFormat::Ppm) => decode_ppm(path, &bytes),
        None => Err(ingest(path, "unsupported extension (expected .png or .ppm)")),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<FeatureGrid> {
    let mut dec = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| ingest(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ingest(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ingest(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 {
        return Err(ingest(path, "empty image"));
    }
    let stride = info.line_size;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(ingest(path, "unexpanded palette")),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(stride).take(h) {
        for px in row[..w * channels].chunks_exact(channels) {
            if channels < 3 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    Ok(from_rgb8(w, h, &rgb))
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<FeatureGrid> {
    // header: magic, width, height, maxval, separated by whitespace/comments
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ingest(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(ingest(path, format!("unsupported PPM magic `{}`", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| ingest(path, format!("bad PPM header field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(ingest(path, "invalid PPM dimensions or maxval"));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bps;
    let body = bytes.get(pos..pos + need).ok_or_else(|| ingest(path, "truncated PPM data"))?;
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let i = (p * 3 + c) * bps;
            let v = if bps == 1 {
                usize::from(body[i])
            } else {
                usize::from(body[i]) << 8 | usize::from(body[i + 1])
            };
            data[c * plane + p] = v as f64 / maxval as f64;
        }
    }
    FeatureGrid::new(3, h, w, data)
}

/// Writes a 3-channel grid, clamped to `[0, 1]` and quantized to 8 bits.
pub fn write_image(path: &Path, img: &FeatureGrid, format: ImageFormat) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Dimension {
            op: "write_image",
            lhs: img.shape().to_vec(),
            rhs: vec![3, img.height, img.width],
        });
    }
    let rgb = to_rgb8(img);
    match format {
        ImageFormat::Png => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
            let mut writer = enc.write_header().map_err(io)?;
            writer.write_image_data(&rgb).map_err(io)?;
            writer.finish().map_err(io)?;
        }
        ImageFormat::Ppm => {
            let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&rgb);
            fs::write(path, out).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Writes rendered frames as `frame_{index:04}_t{time:.4}.{ext}` under `dir`.
pub fn save_frames(dir: &Path, frames: &[FeatureGrid], times: &[f64], format: ImageFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .zip(times)
        .enumerate()
        .map(|(i, (f, &t))| {
            let p = dir.join(frame_file_name(i, t, format.extension()));
            write_image(&p, f, format)?;
            Ok(p)
        })
        .collect()
}
