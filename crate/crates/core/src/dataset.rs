//! On-disk dataset layout.
//!
//! ```text
//! cameras.txt        index width height fx fy cx cy <3x4 camera-to-world, row-major> near far
//! split.txt          one line per view: "<index> train" or "<index> test"
//! meta.txt           "bounds minx miny minz maxx maxy maxz"
//! rgb/%03d.png       8-bit RGB
//! depth/%03d.pfm     ray distance to the first surface, 0 on background
//! normal/%03d.pfm    3-channel unit normals, zero on background
//! edges/%03d.png     optional external edge maps (8-bit gray)
//! ```
//!
//! `split.txt` and `meta.txt` are optional. Without a split every view is a
//! training view; without `meta.txt` the scene bounds must come from config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Camera, Mat3, Pose, Vec3};
use crate::image_io::{read_pfm_rgb, read_pfm_scalar, read_png_rgb, RgbImage, ScalarImage};

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const SPLIT_FILE: &str = "split.txt";
pub const META_FILE: &str = "meta.txt";

pub fn rgb_path(root: &Path, index: usize) -> PathBuf {
    root.join("rgb").join(format!("{index:03}.png"))
}

pub fn depth_path(root: &Path, index: usize) -> PathBuf {
    root.join("depth").join(format!("{index:03}.pfm"))
}

pub fn normal_path(root: &Path, index: usize) -> PathBuf {
    root.join("normal").join(format!("{index:03}.pfm"))
}

pub fn edge_path(root: &Path, index: usize) -> PathBuf {
    root.join("edges").join(format!("{index:03}.png"))
}

/// Serializes cameras, one line each, in index order.
pub fn format_cameras(cameras: &[Camera<f64>]) -> String {
    let mut out = String::new();
    for (i, c) in cameras.iter().enumerate() {
        write!(out, "{i} {} {} {:?} {:?} {:?} {:?}", c.width, c.height, c.fx, c.fy, c.cx, c.cy).unwrap();
        for r in 0..3 {
            for k in 0..3 {
                write!(out, " {:?}", c.pose.rotation.rows[r][k]).unwrap();
            }
            write!(out, " {:?}", c.pose.translation[r]).unwrap();
        }
        writeln!(out, " {:?} {:?}", c.near, c.far).unwrap();
    }
    out
}

pub fn parse_cameras(text: &str, origin: &Path) -> Result<Vec<Camera<f64>>> {
    let mut cameras = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| Error::format(origin, format!("line {}: {why}", line_no + 1));
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 21 {
            return Err(bad(&format!("expected 21 fields, found {}", tokens.len())));
        }
        let index: usize = tokens[0].parse().map_err(|_| bad("bad view index"))?;
        if index != cameras.len() {
            return Err(bad("view indices must be consecutive from 0"));
        }
        let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
        let f: Vec<f64> = tokens[3..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<_>>()?;
        let m = &f[4..16];
        let rotation = Mat3 { rows: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]] };
        let translation = Vec3::new(m[3], m[7], m[11]);
        let camera = Camera::new(width, height, f[0], f[1], f[2], f[3], Pose { rotation, translation }, f[16], f[17])
            .map_err(|e| bad(&e.to_string()))?;
        cameras.push(camera);
    }
    if cameras.is_empty() {
        return Err(Error::format(origin, "no camera records"));
    }
    Ok(cameras)
}

pub fn format_split(train: &[usize], test: &[usize]) -> String {
    let mut rows: Vec<(usize, &str)> =
        train.iter().map(|&i| (i, "train")).chain(test.iter().map(|&i| (i, "test"))).collect();
    rows.sort();
    rows.iter().map(|(i, s)| format!("{i} {s}\n")).collect()
}

pub fn parse_split(text: &str, views: usize, origin: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| Error::format(origin, format!("line {}: {why}", line_no + 1));
        let mut it = line.split_whitespace();
        let index: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad view index"))?;
        if index >= views {
            return Err(bad("view index beyond camera list"));
        }
        match it.next() {
            Some("train") => train.push(index),
            Some("test") => test.push(index),
            _ => return Err(bad("expected 'train' or 'test'")),
        }
    }
    Ok((train, test))
}

pub fn format_meta(bounds: &Aabb<f64>) -> String {
    let (a, b) = (bounds.min, bounds.max);
    format!("bounds {:?} {:?} {:?} {:?} {:?} {:?}\n", a.x, a.y, a.z, b.x, b.y, b.z)
}

pub fn parse_meta(text: &str, origin: &Path) -> Result<Option<Aabb<f64>>> {
    for line in text.lines() {
        let mut it = line.split_whitespace();
        if it.next() != Some("bounds") {
            continue;
        }
        let v: Vec<f64> = it
            .map(|t| t.parse::<f64>().map_err(|_| Error::format(origin, "bad bounds value")))
            .collect::<Result<_>>()?;
        if v.len() != 6 {
            return Err(Error::format(origin, "bounds needs 6 values"));
        }
        let aabb = Aabb::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
            .map_err(|e| Error::format(origin, e.to_string()))?;
        return Ok(Some(aabb));
    }
    Ok(None)
}

/// A dataset directory with its camera records and split loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub cameras: Vec<Camera<f64>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub bounds: Option<Aabb<f64>>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let cam_path = root.join(CAMERAS_FILE);
        let cameras = parse_cameras(&read_text(&cam_path)?, &cam_path)?;
        let (w, h) = (cameras[0].width, cameras[0].height);
        if cameras.iter().any(|c| c.width != w || c.height != h) {
            return Err(Error::Config("all views must share one image size".into()));
        }
        let split_path = root.join(SPLIT_FILE);
        let (train, test) = if split_path.exists() {
            parse_split(&read_text(&split_path)?, cameras.len(), &split_path)?
        } else {
            ((0..cameras.len()).collect(), Vec::new())
        };
        let meta_path = root.join(META_FILE);
        let bounds = if meta_path.exists() { parse_meta(&read_text(&meta_path)?, &meta_path)? } else { None };
        Ok(Self { root: root.to_path_buf(), cameras, train, test, bounds })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.cameras[0].width, self.cameras[0].height)
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    fn check_dims<P>(&self, path: &Path, img: &crate::image_io::Image<P>) -> Result<()> {
        let (w, h) = self.image_size();
        if img.width != w || img.height != h {
            return Err(Error::Config(format!(
                "{} is {}x{}, cameras say {w}x{h}",
                path.display(),
                img.width,
                img.height
            )));
        }
        Ok(())
    }

    pub fn rgb(&self, index: usize) -> Result<RgbImage> {
        let p = rgb_path(&self.root, index);
        let img = read_png_rgb(&p)?;
        self.check_dims(&p, &img)?;
        Ok(img)
    }

    pub fn depth(&self, index: usize) -> Result<ScalarImage> {
        let p = depth_path(&self.root, index);
        let img = read_pfm_scalar(&p)?;
        self.check_dims(&p, &img)?;
        Ok(img)
    }

    pub fn normal(&self, index: usize) -> Result<RgbImage> {
        let p = normal_path(&self.root, index);
        let img = read_pfm_rgb(&p)?;
        self.check_dims(&p, &img)?;
        Ok(img)
    }

    /// Path of an external edge map for `index`, if one is present.
    pub fn external_edges(&self, index: usize) -> Option<PathBuf> {
        let p = edge_path(&self.root, index);
        p.exists().then_some(p)
    }
}
