//! Edge extraction: grayscale conversion, Canny, binarization, 3×3 dilation
//! and the per-pixel edge indicator consumed by the patch losses.
//!
//! Indicator convention: `e = 1` marks a non-edge (regularizable) pixel and
//! `e = 0` marks a pixel inside the dilated edge set.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io::{self, Image, RgbImage, ScalarImage};

/// Intensities on the 0–255 scale.
pub type GrayImage = ScalarImage;

/// Binary map with values in {0, 1}; `1` marks an edge pixel.
pub type BinaryMap = Image<u8>;

/// Canny defaults on the 0–255 intensity scale.
pub const DEFAULT_SIGMA: f64 = 1.4;
pub const DEFAULT_LOW: f64 = 50.0;
pub const DEFAULT_HIGH: f64 = 150.0;
/// Binarization threshold applied to edge strength.
pub const DEFAULT_TAU_E: f64 = 125.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndicatorMap {
    inner: Image<u8>,
}

impl EdgeIndicatorMap {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(value <= 1, "indicator values are 0 or 1");
        Self { inner: Image::filled(width, height, value) }
    }

    /// Wraps a {0,1} image; any other value is an input-domain error.
    pub fn from_image(inner: Image<u8>) -> Result<Self> {
        if inner.data.iter().any(|&v| v > 1) {
            return Err(Error::InputDomain("indicator values must be 0 or 1".into()));
        }
        Ok(Self { inner })
    }

    pub fn width(&self) -> usize {
        self.inner.width
    }

    pub fn height(&self) -> usize {
        self.inner.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.inner.get(x, y)
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        assert!(value <= 1, "indicator values are 0 or 1");
        self.inner.set(x, y, value);
    }

    pub fn as_image(&self) -> &Image<u8> {
        &self.inner
    }

    /// Number of non-edge pixels.
    pub fn count_non_edge(&self) -> usize {
        self.inner.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Rec. 601 luma of an RGB image given in `[0, 1]`, on the 0–255 scale.
pub fn to_grayscale(rgb: &RgbImage) -> GrayImage {
    rgb.map(|[r, g, b]| luma_255(r * 255.0, g * 255.0, b * 255.0))
}

/// Rec. 601 luma of 0–255 channel values.
#[inline]
pub fn luma_255(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Symmetric reflection of an out-of-range index into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as isize;
    let raw: Vec<f64> =
        (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur with reflected borders and radius `⌈3σ⌉`.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let horizontal = Image::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * img.get(reflect(x as isize + k as isize - r, w), y))
            .sum::<f64>()
    });
    Image::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * horizontal.get(x, reflect(y as isize + k as isize - r, h)))
            .sum::<f64>()
    })
}

/// 3×3 Sobel responses `(gx, gy)`; `gy` is positive when intensity grows downward.
pub fn sobel(img: &GrayImage) -> (ScalarImage, ScalarImage) {
    let (w, h) = (img.width, img.height);
    let at = |x: usize, y: usize, dx: isize, dy: isize| {
        img.get(reflect(x as isize + dx, w), reflect(y as isize + dy, h))
    };
    let gx = Image::from_fn(w, h, |x, y| {
        (at(x, y, 1, -1) + 2.0 * at(x, y, 1, 0) + at(x, y, 1, 1))
            - (at(x, y, -1, -1) + 2.0 * at(x, y, -1, 0) + at(x, y, -1, 1))
    });
    let gy = Image::from_fn(w, h, |x, y| {
        (at(x, y, -1, 1) + 2.0 * at(x, y, 0, 1) + at(x, y, 1, 1))
            - (at(x, y, -1, -1) + 2.0 * at(x, y, 0, -1) + at(x, y, 1, -1))
    });
    (gx, gy)
}

/// Magnitudes closer than this relative gap compare as equal during
/// non-maximum suppression, so roundoff never decides which side of a
/// symmetric ridge survives.
const NMS_TIE_REL: f64 = 1e-9;

#[inline]
fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= NMS_TIE_REL * a.abs().max(b.abs())
}

/// Step toward the "forward" neighbor for each of the four direction bins.
fn direction_step(gx: f64, gy: f64) -> (isize, isize) {
    let mut deg = gy.atan2(gx).to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if !(22.5..157.5).contains(&deg) {
        (1, 0)
    } else if deg < 67.5 {
        (1, 1)
    } else if deg < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

/// Canny detector; returns an image whose pixels are 0 or 255.
pub fn canny(gray: &GrayImage, sigma: f64, low: f64, high: f64) -> Result<GrayImage> {
    if !(low > 0.0 && low <= high) {
        return Err(Error::InputDomain(format!("canny thresholds need 0 < low <= high (got {low}, {high})")));
    }
    if sigma < 0.0 {
        return Err(Error::InputDomain("blur sigma must be non-negative".into()));
    }
    let (w, h) = (gray.width, gray.height);
    let blurred = gaussian_blur(gray, sigma);
    let (gx, gy) = sobel(&blurred);
    let mag = Image::from_fn(w, h, |x, y| gx.get(x, y).hypot(gy.get(x, y)));

    let mag_at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag.get(x as usize, y as usize)
        }
    };
    let thin = Image::from_fn(w, h, |x, y| {
        let m = mag.get(x, y);
        if m <= 0.0 {
            return 0.0;
        }
        let (dx, dy) = direction_step(gx.get(x, y), gy.get(x, y));
        let (xi, yi) = (x as isize, y as isize);
        let fwd = mag_at(xi + dx, yi + dy);
        let back = mag_at(xi - dx, yi - dy);
        let keep = (m > back || ties(m, back)) && (m > fwd && !ties(m, fwd));
        if keep {
            m
        } else {
            0.0
        }
    });

    // Double threshold with 8-connected hysteresis.
    let mut out = Image::filled(w, h, 0.0);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if thin.get(x, y) >= high {
                out.set(x, y, 255.0);
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if out.get(nx, ny) == 0.0 && thin.get(nx, ny) >= low {
                    out.set(nx, ny, 255.0);
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    Ok(out)
}

/// `B = 1` where the edge strength reaches `tau_e` (inclusive).
pub fn binarize(edge_strength: &GrayImage, tau_e: f64) -> BinaryMap {
    edge_strength.map(|e| u8::from(e >= tau_e))
}

/// Morphological dilation with a 3×3 all-ones kernel; the neighborhood is
/// clipped at the image border.
pub fn dilate3x3(b: &BinaryMap) -> BinaryMap {
    let (w, h) = (b.width, b.height);
    Image::from_fn(w, h, |x, y| {
        let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let mut v = 0;
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                v |= b.get(xx, yy);
            }
        }
        v
    })
}

/// Complements a dilated edge map into indicators (`e = 1 − B'`).
pub fn to_indicator(dilated: &BinaryMap) -> EdgeIndicatorMap {
    EdgeIndicatorMap { inner: dilated.map(|v| 1 - v.min(1)) }
}

/// Binarize, dilate and complement an edge-strength map.
pub fn indicator_from_strength(edge_strength: &GrayImage, tau_e: f64) -> EdgeIndicatorMap {
    to_indicator(&dilate3x3(&binarize(edge_strength, tau_e)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA, low: DEFAULT_LOW, high: DEFAULT_HIGH }
    }
}

/// Canny edge strength (0/255) of an RGB image.
pub fn canny_strength(rgb: &RgbImage, params: CannyParams) -> Result<GrayImage> {
    canny(&to_grayscale(rgb), params.sigma, params.low, params.high)
}

/// Full in-process pipeline: grayscale → Canny → binarize → dilate → indicator.
pub fn indicator_from_rgb(rgb: &RgbImage, params: CannyParams, tau_e: f64) -> Result<EdgeIndicatorMap> {
    Ok(indicator_from_strength(&canny_strength(rgb, params)?, tau_e))
}

/// Loads a precomputed 8-bit grayscale edge map and converts it to indicators.
///
/// `expected_dims` is the `(width, height)` of the image the map belongs to.
pub fn load_external_edge_map(
    path: &Path,
    tau_e: f64,
    expected_dims: Option<(usize, usize)>,
) -> Result<EdgeIndicatorMap> {
    let strength = image_io::read_png_gray(path)?;
    if let Some((w, h)) = expected_dims {
        if (strength.width, strength.height) != (w, h) {
            return Err(Error::Config(format!(
                "edge map {} is {}x{}, image is {w}x{h}",
                path.display(),
                strength.width,
                strength.height
            )));
        }
    }
    Ok(indicator_from_strength(&strength, tau_e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_ones(b: &BinaryMap) -> usize {
        b.data.iter().filter(|&&v| v == 1).count()
    }

    #[test]
    fn grayscale_luma_weights() {
        let img = Image::from_fn(3, 1, |x, _| match x {
            0 => [1.0, 1.0, 1.0],
            1 => [1.0, 0.0, 0.0],
            _ => [0.2, 0.2, 0.2],
        });
        let g = to_grayscale(&img);
        assert!((g.get(0, 0) - 255.0).abs() < 1e-9);
        assert!((g.get(1, 0) - 76.245).abs() < 1e-9);
        assert!((g.get(2, 0) - 51.0).abs() < 1e-9);
    }

    #[test]
    fn canny_on_constant_image_is_empty() {
        let out = canny(&Image::filled(20, 16, 77.0), 1.4, 50.0, 150.0).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn canny_rejects_inverted_thresholds() {
        let img = Image::filled(8, 8, 0.0);
        assert!(matches!(canny(&img, 1.0, 150.0, 50.0), Err(Error::InputDomain(_))));
        assert!(canny(&img, 1.0, 0.0, 50.0).is_err());
    }

    #[test]
    fn canny_step_gives_one_pixel_line() {
        let img = Image::from_fn(32, 32, |x, _| if x < 16 { 0.0 } else { 255.0 });
        let out = canny(&img, 1.0, 50.0, 150.0).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0 || v == 255.0));
        for y in 0..32 {
            let cols: Vec<usize> = (0..32).filter(|&x| out.get(x, y) == 255.0).collect();
            assert_eq!(cols, vec![16], "row {y}");
        }
    }

    #[test]
    fn binarize_threshold_is_inclusive() {
        let e = Image::from_fn(3, 1, |x, _| [125.0, 124.0, 0.0][x]);
        assert_eq!(binarize(&e, 125.0).data, vec![1, 0, 0]);
        assert_eq!(binarize(&e, 0.0).data, vec![1, 1, 1]);
    }

    #[test]
    fn dilation_examples() {
        let mut b = Image::filled(11, 11, 0u8);
        b.set(5, 5, 1);
        let d = dilate3x3(&b);
        for y in 0..11 {
            for x in 0..11 {
                let inside = (4..=6).contains(&x) && (4..=6).contains(&y);
                assert_eq!(d.get(x, y), u8::from(inside));
            }
        }
        assert_eq!(count_ones(&dilate3x3(&Image::filled(6, 6, 0))), 0);

        let mut two = Image::filled(11, 11, 0u8);
        two.set(4, 5, 1);
        two.set(6, 5, 1);
        let d = dilate3x3(&two);
        assert_eq!(count_ones(&d), 15);
        for y in 4..=6 {
            for x in 3..=7 {
                assert_eq!(d.get(x, y), 1);
            }
        }
    }

    #[test]
    fn dilation_clips_at_border() {
        let mut b = Image::filled(4, 4, 0u8);
        b.set(0, 0, 1);
        assert_eq!(count_ones(&dilate3x3(&b)), 4);
    }

    #[test]
    fn indicator_is_complement() {
        assert_eq!(to_indicator(&Image::filled(3, 2, 0)).count_non_edge(), 6);
        assert_eq!(to_indicator(&Image::filled(3, 2, 1)).count_non_edge(), 0);
        let mixed = Image::from_fn(3, 1, |x, _| (x % 2) as u8);
        assert_eq!(to_indicator(&mixed).as_image().data, vec![1, 0, 1]);
    }

    #[test]
    fn constant_image_pipeline_is_all_non_edge() {
        let rgb = Image::filled(16, 16, [0.3, 0.6, 0.1]);
        let e = indicator_from_rgb(&rgb, CannyParams::default(), DEFAULT_TAU_E).unwrap();
        assert_eq!(e.count_non_edge(), 256);
    }

    #[test]
    fn external_maps() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.png");
        let white = dir.path().join("white.png");
        image_io::write_png_gray(&black, &Image::filled(6, 5, 0.0)).unwrap();
        image_io::write_png_gray(&white, &Image::filled(6, 5, 255.0)).unwrap();
        assert_eq!(load_external_edge_map(&black, 125.0, Some((6, 5))).unwrap().count_non_edge(), 30);
        assert_eq!(load_external_edge_map(&white, 125.0, None).unwrap().count_non_edge(), 0);
        assert!(matches!(load_external_edge_map(&black, 125.0, Some((5, 5))), Err(Error::Config(_))));
        assert!(matches!(
            load_external_edge_map(&dir.path().join("nope.png"), 125.0, None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn saved_strength_map_reloads_to_same_indicator() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Image::from_fn(24, 24, |x, y| if (x / 6 + y / 6) % 2 == 0 { [0.9; 3] } else { [0.1; 3] });
        let strength = canny_strength(&rgb, CannyParams::default()).unwrap();
        let path = dir.path().join("e.png");
        image_io::write_png_gray(&path, &strength).unwrap();
        let reloaded = load_external_edge_map(&path, DEFAULT_TAU_E, Some((24, 24))).unwrap();
        assert_eq!(reloaded, indicator_from_strength(&strength, DEFAULT_TAU_E));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn strength_map() -> impl Strategy<Value = GrayImage> {
            proptest::collection::vec(0u8..=255, 64)
                .prop_map(|v| Image { width: 8, height: 8, data: v.into_iter().map(f64::from).collect() })
        }

        proptest! {
            #[test]
            fn raising_tau_never_reduces_non_edge_count(e in strength_map(), a in 0.0..255.0f64, b in 0.0..255.0f64) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(indicator_from_strength(&e, hi).count_non_edge()
                    >= indicator_from_strength(&e, lo).count_non_edge());
            }

            #[test]
            fn dilation_never_shrinks(e in strength_map(), tau in 0.0..255.0f64) {
                let b = binarize(&e, tau);
                let d = dilate3x3(&b);
                prop_assert!(count_ones(&d) >= count_ones(&b));
                for (x, y) in b.data.iter().zip(&d.data) {
                    prop_assert!(y >= x);
                }
            }
        }
    }
}
