//! Image and depth metrics, held-out evaluation and the ablation harness.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::field::{load_checkpoint, FieldParams, RadianceField};
use crate::geometry::Aabb;
use crate::image_io::{write_pfm_scalar, write_png_rgb, Image, RgbImage, ScalarImage};
use crate::renderer::render_image;
use crate::trainer::{run_training, TrainConfig, TrainSummary};

/// `10·log10(1 / MSE)` over all channels; `f64::INFINITY` for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    assert!(a.same_dims(b), "psnr needs images of equal size");
    let n = (a.data.len() * 3) as f64;
    let se: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]) * (p[c] - q[c])))
        .sum();
    if se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (n / se).log10()
}

/// Displays a PSNR value, spelling out the identical-image sentinel.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "identical".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    /// Odd window side.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over channels and every window position fully inside the
/// image. Images smaller than the window use the largest odd window that fits.
pub fn ssim_with(a: &RgbImage, b: &RgbImage, p: &SsimParams) -> f64 {
    assert!(a.same_dims(b), "ssim needs images of equal size");
    let mut size = p.window.min(a.width).min(a.height);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let g = gaussian_window(size, p.sigma);
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let (ow, oh) = (a.width - size + 1, a.height - size + 1);
    let mut total = 0.0;
    for c in 0..3 {
        for y0 in 0..oh {
            for x0 in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..size {
                    for i in 0..size {
                        let w = g[i] * g[j];
                        let va = a.get(x0 + i, y0 + j)[c];
                        let vb = b.get(x0 + i, y0 + j)[c];
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    total / (3 * ow * oh) as f64
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    ssim_with(a, b, &SsimParams::default())
}

/// Pixels whose 3×3 neighborhood (clipped at the border) spans a depth
/// range above `threshold`.
pub fn discontinuity_mask(depth: &ScalarImage, threshold: f64) -> Image<u8> {
    let (w, h) = (depth.width, depth.height);
    Image::from_fn(w, h, |x, y| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                let d = depth.get(xx, yy);
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
        u8::from(hi - lo > threshold)
    })
}

/// Pixels within Chebyshev distance `radius` of a set mask pixel.
pub fn boundary_band(mask: &Image<u8>, radius: usize) -> Image<u8> {
    let (w, h) = (mask.width, mask.height);
    Image::from_fn(w, h, |x, y| {
        for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
            for xx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                if mask.get(xx, yy) != 0 {
                    return 1;
                }
            }
        }
        0
    })
}

/// Band half-width around discontinuities, pixels.
pub const BOUNDARY_RADIUS: usize = 2;
/// Default discontinuity threshold as a fraction of the scene diagonal.
pub const DISCONTINUITY_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DepthMetrics {
    pub mae: f64,
    /// 0 when the band is empty.
    pub boundary_mae: f64,
    pub valid_pixels: usize,
    pub boundary_pixels: usize,
}

/// MAE over pixels with finite ground truth (background included at depth
/// 0), and over the subset within `BOUNDARY_RADIUS` of `mask`.
pub fn depth_metrics(pred: &ScalarImage, gt: &ScalarImage, mask: &Image<u8>) -> DepthMetrics {
    assert!(pred.same_dims(gt) && gt.same_dims(mask), "depth metrics need images of equal size");
    let band = boundary_band(mask, BOUNDARY_RADIUS);
    let mut m = DepthMetrics::default();
    let (mut sum, mut bsum) = (0.0, 0.0);
    for i in 0..gt.data.len() {
        if !gt.data[i].is_finite() {
            continue;
        }
        let e = (pred.data[i] - gt.data[i]).abs();
        sum += e;
        m.valid_pixels += 1;
        if band.data[i] != 0 {
            bsum += e;
            m.boundary_pixels += 1;
        }
    }
    if m.valid_pixels > 0 {
        m.mae = sum / m.valid_pixels as f64;
    }
    if m.boundary_pixels > 0 {
        m.boundary_mae = bsum / m.boundary_pixels as f64;
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub depth: DepthMetrics,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_depth_mae: f64,
    pub mean_boundary_mae: f64,
    pub render_ms: f64,
}

impl MetricsReport {
    fn from_views(views: Vec<ViewMetrics>, render_ms: f64) -> Self {
        let n = views.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / n;
        Self {
            mean_psnr: mean(&|v| v.psnr),
            mean_ssim: mean(&|v| v.ssim),
            mean_depth_mae: mean(&|v| v.depth.mae),
            mean_boundary_mae: mean(&|v| v.depth.boundary_mae),
            render_ms,
            views,
        }
    }

    /// `key: value` lines, one block per view followed by the means.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.views {
            writeln!(
                s,
                "view: {} psnr: {} ssim: {:.6} depth_mae: {:.6} boundary_depth_mae: {:.6}",
                v.view,
                format_psnr(v.psnr),
                v.ssim,
                v.depth.mae,
                v.depth.boundary_mae
            )
            .unwrap();
        }
        writeln!(s, "mean_psnr: {}", format_psnr(self.mean_psnr)).unwrap();
        writeln!(s, "mean_ssim: {:.6}", self.mean_ssim).unwrap();
        writeln!(s, "mean_depth_mae: {:.6}", self.mean_depth_mae).unwrap();
        writeln!(s, "mean_boundary_depth_mae: {:.6}", self.mean_boundary_mae).unwrap();
        writeln!(s, "render_ms: {:.1}", self.render_ms).unwrap();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train or test)"))),
        }
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub samples_per_ray: usize,
    /// Discontinuity threshold as a fraction of the scene diagonal.
    pub discontinuity_fraction: f64,
    pub ssim: SsimParams,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { samples_per_ray: 128, discontinuity_fraction: DISCONTINUITY_FRACTION, ssim: SsimParams::default() }
    }
}

fn scene_diagonal(data: &Dataset, field_bounds: Option<Aabb<f64>>) -> Result<f64> {
    data.bounds
        .or(field_bounds)
        .map(|b| b.diagonal())
        .ok_or_else(|| Error::Config("scene bounds unknown: dataset has no meta.txt and the field is unbounded".into()))
}

/// Renders every view of `split`, scores it against ground truth, and when
/// `out` is given writes `report.txt` plus `rgb/`, `depth/` renders there.
pub fn evaluate<F: RadianceField<f64> + ?Sized>(
    field: &F,
    data: &Dataset,
    split: Split,
    opts: &EvalOptions,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let diag = scene_diagonal(data, field.bounds())?;
    let views = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    let start = std::time::Instant::now();
    let mut results = Vec::with_capacity(views.len());
    for &view in views {
        let (color, depth, _) = render_image(field, &data.cameras[view], opts.samples_per_ray, false)?;
        let gt_rgb = data.rgb(view)?;
        let gt_depth = data.depth(view)?;
        let mask = discontinuity_mask(&gt_depth, opts.discontinuity_fraction * diag);
        results.push(ViewMetrics {
            view,
            psnr: psnr(&color, &gt_rgb),
            ssim: ssim_with(&color, &gt_rgb, &opts.ssim),
            depth: depth_metrics(&depth, &gt_depth, &mask),
        });
        if let Some(dir) = out {
            write_png_rgb(&dir.join("rgb").join(format!("{view:03}.png")), &color)?;
            write_pfm_scalar(&dir.join("depth").join(format!("{view:03}.pfm")), &depth)?;
        }
    }
    let report = MetricsReport::from_views(results, start.elapsed().as_secs_f64() * 1e3);
    if let Some(dir) = out {
        let p = dir.join("report.txt");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&p, report.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

/// Rejects a field whose bounds disagree with the dataset's scene bounds.
pub fn check_compatible(field: &FieldParams<f64>, data: &Dataset) -> Result<()> {
    if let Some(b) = data.bounds {
        let f = field.layout.bounds();
        if (f.min - b.min).max_abs() > 1e-9 || (f.max - b.max).max_abs() > 1e-9 {
            return Err(Error::Config(format!(
                "checkpoint bounds {:?}..{:?} do not match dataset bounds {:?}..{:?}",
                f.min, f.max, b.min, b.max
            )));
        }
    }
    Ok(())
}

/// Loads a checkpoint and evaluates it on `split`.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data: &Dataset,
    split: Split,
    opts: &EvalOptions,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let field = load_checkpoint(checkpoint)?;
    check_compatible(&field, data)?;
    evaluate(&field, data, split, opts, out)
}

/// One configuration of the loss-term ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gating: bool,
    pub report: MetricsReport,
    pub summary: TrainSummary,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>8} {:>8} {:>7} {:>10} {:>8} {:>12} {:>14} {:>10} {:>9}\n",
            "variant", "lambda2", "lambda3", "gating", "psnr", "ssim", "depth_mae", "boundary_mae", "train_ms", "time_x"
        );
        let base_ms = self.rows.first().map_or(1.0, |r| r.summary.train_ms);
        for r in &self.rows {
            writeln!(
                s,
                "{:<14} {:>8} {:>8} {:>7} {:>10} {:>8.4} {:>12.5} {:>14.5} {:>10.0} {:>9.3}",
                r.name,
                r.lambda2,
                r.lambda3,
                r.gating,
                format_psnr(r.report.mean_psnr),
                r.report.mean_ssim,
                r.report.mean_depth_mae,
                r.report.mean_boundary_mae,
                r.summary.train_ms,
                r.summary.train_ms / base_ms
            )
            .unwrap();
        }
        s
    }
}

/// The ablation rows derived from `cfg`: baseline, +depth, +normal, +both
/// and depth smoothing without edge gating. Enabled terms use the weights
/// in `cfg` (0.1 where `cfg` leaves them at zero).
pub fn ablation_variants(cfg: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let l2 = if cfg.reg.lambda2 > 0.0 { cfg.reg.lambda2 } else { 0.1 };
    let l3 = if cfg.reg.lambda3 > 0.0 { cfg.reg.lambda3 } else { 0.1 };
    [("baseline", 0.0, 0.0, true), ("depth", l2, 0.0, true), ("normal", 0.0, l3, true), ("both", l2, l3, true), ("depth_global", l2, 0.0, false)]
        .into_iter()
        .map(|(name, a, b, gating)| {
            let mut c = cfg.clone();
            c.reg.lambda2 = a;
            c.reg.lambda3 = b;
            c.edges.gating = gating;
            (name.to_string(), c)
        })
        .collect()
}

/// Trains and evaluates every ablation row into `out/<variant>/`, then
/// writes `out/ablation.txt`.
///
/// All rows share the seed, so they sample identical patches and rays; a
/// row whose per-iteration random draw counts differ from the baseline's is
/// an error.
pub fn ablate(
    cfg: &TrainConfig,
    data_dir: &Path,
    out: &Path,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let data = Dataset::open(data_dir)?;
    let mut report = AblationReport::default();
    for (name, c) in ablation_variants(cfg) {
        let dir = out.join(&name);
        let summary = run_training(&c, data_dir, &dir, None, |_| {})?;
        if let Some(base) = report.rows.first() {
            if base.summary.rng_draws != summary.rng_draws {
                return Err(Error::InputDomain(format!("variant {name} drew a different random sequence than the baseline")));
            }
        }
        let field: FieldParams<f64> = load_checkpoint(&summary.checkpoint)?;
        let metrics = evaluate(&field, &data, Split::Test, &c.eval.options(), Some(&dir.join("eval")))?;
        let row = AblationRow {
            name,
            lambda2: c.reg.lambda2,
            lambda3: c.reg.lambda3,
            gating: c.edges.gating,
            report: metrics,
            summary,
        };
        on_row(&row);
        report.rows.push(row);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = out.join("ablation.txt");
    std::fs::write(&p, report.to_table()).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}
