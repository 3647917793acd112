//! In-memory images plus 8-bit PNG and PFM (portable float map) file I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image, `data[row * width + column]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image<P> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<P>,
}

/// Linear RGB in `[0, 1]`.
pub type RgbImage = Image<[f64; 3]>;
/// Single-channel float image (depth maps, 0–255 intensities).
pub type ScalarImage = Image<f64>;

impl<P: Copy> Image<P> {
    pub fn filled(width: usize, height: usize, value: P) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: P) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_dims<Q>(&self, other: &Image<Q>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<Q>(&self, f: impl Fn(P) -> Q) -> Image<Q> {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&p| f(p)).collect() }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Image { path: path.to_path_buf(), source: other },
    }
}

/// Reads an 8-bit RGB PNG into `[0, 1]` floats.
pub fn read_png_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Ok(Image { width: w as usize, height: h as usize, data })
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    let buf: Vec<u8> = img.data.iter().flat_map(|p| p.map(to_u8)).collect();
    image::save_buffer(path, &buf, img.width as u32, img.height as u32, image::ColorType::Rgb8)
        .map_err(|e| image_err(path, e))
}

/// Reads an 8-bit grayscale PNG; values keep their 0–255 scale.
pub fn read_png_gray(path: &Path) -> Result<ScalarImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Image { width: w as usize, height: h as usize, data: img.pixels().map(|p| p[0] as f64).collect() })
}

/// Writes a 0–255 scale image as 8-bit grayscale PNG (rounded, clamped).
pub fn write_png_gray(path: &Path, img: &ScalarImage) -> Result<()> {
    ensure_parent(path)?;
    let buf: Vec<u8> = img.data.iter().map(|&v| v.clamp(0.0, 255.0).round() as u8).collect();
    image::save_buffer(path, &buf, img.width as u32, img.height as u32, image::ColorType::L8)
        .map_err(|e| image_err(path, e))
}

fn pfm_bytes(width: usize, height: usize, channels: usize, values: impl Fn(usize, usize, usize) -> f64) -> Vec<u8> {
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(width * height * channels * 4);
    // PFM stores rows bottom to top.
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                out.extend_from_slice(&(values(x, y, c) as f32).to_le_bytes());
            }
        }
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pfm_scalar(path: &Path, img: &ScalarImage) -> Result<()> {
    write_bytes(path, &pfm_bytes(img.width, img.height, 1, |x, y, _| img.get(x, y)))
}

pub fn write_pfm_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_bytes(path, &pfm_bytes(img.width, img.height, 3, |x, y, c| img.get(x, y)[c]))
}

struct Pfm {
    width: usize,
    height: usize,
    channels: usize,
    /// Top-to-bottom rows, interleaved channels.
    values: Vec<f64>,
}

fn read_pfm(path: &Path) -> Result<Pfm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format(path, reason);
    // Header: three whitespace-terminated tokens lines (tag, dims, scale).
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match tokens[0] {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("unknown PFM tag")),
    };
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be finite and non-zero"));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    if bytes.len() < pos + 4 * n {
        return Err(bad("raster shorter than header promises"));
    }
    let mut values = vec![0.0; n];
    for y in 0..height {
        let src_row = height - 1 - y;
        for i in 0..width * channels {
            let off = pos + 4 * (src_row * width * channels + i);
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            values[y * width * channels + i] = v as f64;
        }
    }
    Ok(Pfm { width, height, channels, values })
}

pub fn read_pfm_scalar(path: &Path) -> Result<ScalarImage> {
    let p = read_pfm(path)?;
    if p.channels != 1 {
        return Err(Error::format(path, "expected a single-channel PFM"));
    }
    Ok(Image { width: p.width, height: p.height, data: p.values })
}

pub fn read_pfm_rgb(path: &Path) -> Result<RgbImage> {
    let p = read_pfm(path)?;
    if p.channels != 3 {
        return Err(Error::format(path, "expected a 3-channel PFM"));
    }
    let data = p.values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Image { width: p.width, height: p.height, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_preserves_f32_values_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let depth = Image::from_fn(5, 3, |x, y| (x as f64) * 0.25 + (y as f64) * 10.0);
        let p = dir.path().join("d.pfm");
        write_pfm_scalar(&p, &depth).unwrap();
        let back = read_pfm_scalar(&p).unwrap();
        assert_eq!(back, depth);
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n5 3\n-1.0\n"));
        // First stored value is the bottom-left pixel.
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 20.0);

        let normals = Image::from_fn(2, 2, |x, y| [x as f64, y as f64, -0.5]);
        let q = dir.path().join("n.pfm");
        write_pfm_rgb(&q, &normals).unwrap();
        assert_eq!(read_pfm_rgb(&q).unwrap(), normals);
        assert!(read_pfm_scalar(&q).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 3, |x, y| [x as f64 / 255.0, y as f64 * 20.0 / 255.0, 1.0]);
        let p = dir.path().join("a.png");
        write_png_rgb(&p, &img).unwrap();
        assert_eq!(read_png_rgb(&p).unwrap(), img);
        let gray = Image::from_fn(3, 3, |x, y| (x * 100 + y) as f64);
        let g = dir.path().join("g.png");
        write_png_gray(&g, &gray).unwrap();
        assert_eq!(read_png_gray(&g).unwrap(), gray);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_png_gray(Path::new("/nonexistent/x.png")), Err(Error::Io { .. })));
        assert!(matches!(read_pfm_scalar(Path::new("/nonexistent/x.pfm")), Err(Error::Io { .. })));
    }
}
