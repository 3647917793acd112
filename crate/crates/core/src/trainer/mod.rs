//! Per-scene optimization: patch batches, Adam with exponential learning-rate
//! decay, regularizer warm-up, metrics logging, checkpoints and resume.
//!
//! Iteration `i` draws all of its randomness from a ChaCha8 stream keyed by
//! `(seed, i)`, so a run can be resumed from any checkpoint and replays the
//! same batches as an uninterrupted run.

pub mod config;
pub mod gradcheck;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::edgemap::{indicator_from_rgb, load_external_edge_map, EdgeIndicatorMap};
use crate::error::{Error, Result};
use crate::field::{load_checkpoint, save_checkpoint, FieldParams};
use crate::geometry::{Aabb, Camera, Vec3};
use crate::image_io::RgbImage;
use crate::reg::{evaluate_batch, sample_patches, BatchStats, LossBreakdown, LossWeights, PatchBatch, PixelSample};
use crate::renderer::prepare_ray;
use crate::scalar::Real;

pub use config::{EdgeSource, FieldKind, Precision, TrainConfig};

pub const METRICS_FILE: &str = "metrics.log";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const STATE_MAGIC: &[u8; 4] = b"ESTA";
pub const STATE_VERSION: u32 = 1;
const METRICS_HEADER: &str = "# iteration loss_color loss_depth loss_normal loss_total lr wall_ms";

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Updates applied so far.
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Real> Adam<T> {
    pub fn new(params: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: vec![T::zero(); params],
            v: vec![T::zero(); params],
            step: 0,
            beta1: T::lit(beta1),
            beta2: T::lit(beta2),
            epsilon: T::lit(epsilon),
        }
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T], lr: T) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Learning rate for 0-based iteration `i` of `total`: exponential from
/// `lr_init` to `lr_final`, linear when either end is zero.
pub fn learning_rate(cfg: &config::TrainerSection, i: u64) -> f64 {
    let s = if cfg.iterations <= 1 { 0.0 } else { i as f64 / (cfg.iterations - 1) as f64 };
    let (a, b) = (cfg.lr_init, cfg.lr_final);
    if a > 0.0 && b > 0.0 {
        a * (b / a).powf(s)
    } else {
        a + (b - a) * s
    }
}

/// λ2 and λ3 scale at 0-based iteration `i`.
pub fn warmup_factor(cfg: &config::TrainerSection, i: u64) -> f64 {
    let ramp = cfg.warmup_fraction * cfg.iterations as f64;
    if ramp <= 0.0 {
        1.0
    } else {
        (i as f64 / ramp).min(1.0)
    }
}

pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Training views with their images and edge indicators.
#[derive(Debug, Clone)]
pub struct TrainingData<T> {
    pub cameras: Vec<Camera<T>>,
    pub images: Vec<RgbImage>,
    pub indicators: Vec<EdgeIndicatorMap>,
    /// Dataset view index of each entry.
    pub views: Vec<usize>,
    pub bounds: Aabb<T>,
}

impl<T: Real> TrainingData<T> {
    pub fn new(
        cameras: Vec<Camera<T>>,
        images: Vec<RgbImage>,
        indicators: Vec<EdgeIndicatorMap>,
        bounds: Aabb<T>,
    ) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Config("no training views".into()));
        }
        if cameras.len() != images.len() || images.len() != indicators.len() {
            return Err(Error::Config("cameras, images and edge maps differ in count".into()));
        }
        for ((c, img), e) in cameras.iter().zip(&images).zip(&indicators) {
            if img.width != c.width || img.height != c.height || e.width() != c.width || e.height() != c.height {
                return Err(Error::Config("image or edge map size does not match its camera".into()));
            }
        }
        let views = (0..cameras.len()).collect();
        Ok(Self { cameras, images, indicators, views, bounds })
    }

    /// Training split of `data`, with edge maps per `cfg.edges`.
    pub fn load(data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let bounds = cfg
            .field
            .explicit_bounds()?
            .or(data.bounds)
            .ok_or_else(|| Error::Config("scene bounds unknown: set field.bounds or provide meta.txt".into()))?;
        let mut cameras = Vec::new();
        let mut images = Vec::new();
        let mut indicators = Vec::new();
        for &view in &data.train {
            let img = data.rgb(view)?;
            let size = Some((img.width, img.height));
            let e = if !cfg.edges.gating {
                EdgeIndicatorMap::filled(img.width, img.height, 1)
            } else {
                match (cfg.edges.source, data.external_edges(view)) {
                    (EdgeSource::External, None) => {
                        return Err(Error::Config(format!("no external edge map for view {view}")));
                    }
                    (EdgeSource::External | EdgeSource::Auto, Some(p)) => {
                        load_external_edge_map(&p, cfg.edges.tau_e, size)?
                    }
                    _ => indicator_from_rgb(&img, cfg.edges.canny(), cfg.edges.tau_e)?,
                }
            };
            cameras.push(data.cameras[view].cast());
            images.push(img);
            indicators.push(e);
        }
        let mut out = Self::new(cameras, images, indicators, bounds.cast())?;
        out.views = data.train.clone();
        Ok(out)
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub field: FieldParams<T>,
    pub adam: Adam<T>,
    /// Completed iterations.
    pub iteration: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(field: FieldParams<T>, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(field.values.len(), cfg.trainer.beta1, cfg.trainer.beta2, cfg.trainer.epsilon);
        Self { field, adam, iteration: 0 }
    }

    /// Freshly initialized field for `cfg` inside `bounds`.
    pub fn initial(cfg: &TrainConfig, bounds: Aabb<f64>) -> Result<Self> {
        let layout = cfg.field.layout(bounds)?;
        let field = match layout {
            crate::field::FieldLayout::Grid(spec) => FieldParams::new_grid(spec, cfg.field.init_density)?,
            crate::field::FieldLayout::Network(spec) => {
                // Stream u64::MAX is never used by an iteration.
                FieldParams::new_network(spec, &mut iteration_rng(cfg.trainer.seed, u64::MAX))?
            }
        };
        Ok(Self::new(field.cast(), cfg))
    }
}

/// Rays, samples and targets for the 4 pixels of each patch.
pub fn build_batch<T: Real, R: rand::Rng>(
    data: &TrainingData<T>,
    patches: &[crate::geometry::PixelPatch],
    samples_per_ray: usize,
    mut jitter: Option<&mut R>,
) -> Result<Vec<PatchBatch<T>>> {
    patches
        .iter()
        .map(|p| {
            let cam = &data.cameras[p.image_index];
            let img = &data.images[p.image_index];
            let mut pixels = Vec::with_capacity(4);
            for &(u, v) in &p.pixels {
                let ray = cam.pixel_to_ray(u, v)?;
                let prepared = prepare_ray(ray, Some(&data.bounds), samples_per_ray, jitter.as_deref_mut())?;
                let c = img.get(u, v);
                pixels.push(PixelSample { ray: prepared, gt_color: Vec3::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2])) });
            }
            let pixels: [PixelSample<T>; 4] = pixels.try_into().expect("four pixels");
            Ok(PatchBatch { pixels, indicators: p.indicators })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T> {
    pub loss: LossBreakdown<T>,
    pub lr: f64,
    /// 32-bit words drawn from the iteration's random stream.
    pub rng_draws: u128,
    pub stats: BatchStats,
}

/// Loss weights in effect at 0-based iteration `i`.
pub fn effective_weights(cfg: &TrainConfig, i: u64) -> LossWeights {
    let f = warmup_factor(&cfg.trainer, i);
    LossWeights { lambda2: cfg.reg.lambda2 * f, lambda3: cfg.reg.lambda3 * f, ..cfg.reg }
}

fn check_finite<T: Real>(iteration: u64, loss: &LossBreakdown<T>, grad: &[T]) -> Result<()> {
    for (name, v) in [("L_c", loss.color), ("L_z", loss.depth), ("L_n", loss.normal), ("L", loss.total)] {
        if !v.is_finite() {
            return Err(Error::Numerical { iteration, term: name.to_string() });
        }
    }
    if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical { iteration, term: format!("gradient[{j}]") });
    }
    Ok(())
}

/// One optimization step: sample, render, differentiate, update.
pub fn train_step<T: Real>(state: &mut TrainState<T>, data: &TrainingData<T>, cfg: &TrainConfig) -> Result<StepOutcome<T>> {
    let i = state.iteration;
    let mut rng = iteration_rng(cfg.trainer.seed, i);
    let patches = sample_patches(&data.indicators, cfg.trainer.patches_per_iter, &mut rng)?;
    let jitter = cfg.renderer.stratified.then_some(&mut rng);
    let batch = build_batch(data, &patches, cfg.renderer.samples_per_ray, jitter)?;
    let rng_draws = rng.get_word_pos();
    let weights = effective_weights(cfg, i);
    let eval = evaluate_batch(&state.field, &batch, &weights, true, cfg.workers());
    let grad = eval.gradient.expect("gradient requested");
    check_finite(i, &eval.loss, &grad)?;
    let lr = learning_rate(&cfg.trainer, i);
    state.adam.update(&mut state.field.values, &grad, T::lit(lr));
    state.iteration += 1;
    Ok(StepOutcome { loss: eval.loss, lr, rng_draws, stats: eval.stats })
}

fn state_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("adam")
}

fn encode_state<T: Real>(state: &TrainState<T>) -> Vec<u8> {
    let p = state.adam.m.len();
    let mut out = Vec::with_capacity(32 + 16 * p);
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&state.adam.step.to_le_bytes());
    out.extend_from_slice(&(p as u64).to_le_bytes());
    for v in state.adam.m.iter().chain(&state.adam.v) {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    out
}

/// Writes the field checkpoint to `path` and the optimizer state beside it
/// (same name, `.adam` extension).
pub fn save_state<T: Real>(path: &Path, state: &TrainState<T>) -> Result<()> {
    save_checkpoint(path, &state.field)?;
    let sp = state_path(path);
    fs::write(&sp, encode_state(state)).map_err(|e| Error::io(&sp, e))
}

pub fn load_state<T: Real>(path: &Path, cfg: &TrainConfig) -> Result<TrainState<T>> {
    let field: FieldParams<T> = load_checkpoint(path)?;
    let sp = state_path(path);
    let bytes = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
    let bad = |m: &str| Error::format(&sp, m);
    if bytes.len() < 32 || &bytes[..4] != STATE_MAGIC {
        return Err(bad("not an optimizer state file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != STATE_VERSION {
        return Err(bad("unsupported optimizer state version"));
    }
    let (iteration, step, p) = (u64_at(8), u64_at(16), u64_at(24) as usize);
    if p != field.values.len() {
        return Err(bad("optimizer state does not match the checkpoint's parameter count"));
    }
    if bytes.len() != 32 + 16 * p {
        return Err(bad("optimizer state has the wrong length"));
    }
    let read = |k: usize| T::lit(f64::from_le_bytes(bytes[32 + 8 * k..40 + 8 * k].try_into().unwrap()));
    let mut adam = Adam::new(p, cfg.trainer.beta1, cfg.trainer.beta2, cfg.trainer.epsilon);
    adam.m = (0..p).map(read).collect();
    adam.v = (p..2 * p).map(read).collect();
    adam.step = step;
    Ok(TrainState { field, adam, iteration })
}

/// What a finished run reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_loss: Option<LossBreakdown<f64>>,
    /// Wall time spent inside training steps.
    pub train_ms: f64,
    /// Random words drawn per iteration, in order.
    pub rng_draws: Vec<u128>,
    pub density_gradient_queries: u64,
    pub checkpoint: PathBuf,
}

fn format_record<T: Real>(iteration: u64, loss: &LossBreakdown<T>, lr: f64, wall_ms: Option<f64>) -> String {
    let f = |v: T| format!("{:.10e}", v.to_f64_lossy());
    let mut s = format!("{iteration} {} {} {} {} {lr:.6e} ", f(loss.color), f(loss.depth), f(loss.normal), f(loss.total));
    match wall_ms {
        Some(ms) => write!(s, "{ms:.3}").unwrap(),
        None => s.push('-'),
    }
    s
}

fn run_typed<T: Real>(
    cfg: &TrainConfig,
    data: &Dataset,
    out: &Path,
    resume: Option<&Path>,
    mut on_record: impl FnMut(&str),
) -> Result<TrainSummary> {
    let train: TrainingData<T> = TrainingData::load(data, cfg)?;
    let mut state: TrainState<T> = match resume {
        Some(p) => {
            let s: TrainState<T> = load_state(p, cfg)?;
            let expected = cfg.field.layout(train.bounds.cast())?;
            if s.field.layout.cast::<f64>() != expected {
                return Err(Error::Config(format!("{} was trained with a different field layout", p.display())));
            }
            s
        }
        None => TrainState::initial(cfg, train.bounds.cast())?,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out.join(METRICS_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{METRICS_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    if resume.is_none() {
        save_state(&out.join("initial.ckpt"), &state)?;
    }

    let t = &cfg.trainer;
    let mut summary = TrainSummary {
        iterations: t.iterations,
        final_loss: None,
        train_ms: 0.0,
        rng_draws: Vec::new(),
        density_gradient_queries: 0,
        checkpoint: out.join(FINAL_CHECKPOINT),
    };
    let started = Instant::now();
    while state.iteration < t.iterations {
        let step_start = Instant::now();
        let step = train_step(&mut state, &train, cfg)?;
        summary.train_ms += step_start.elapsed().as_secs_f64() * 1e3;
        summary.rng_draws.push(step.rng_draws);
        summary.density_gradient_queries += step.stats.density_gradient_queries as u64;
        let done = state.iteration;
        if t.log_every > 0 && done.is_multiple_of(t.log_every) {
            let wall = (!t.deterministic).then(|| started.elapsed().as_secs_f64() * 1e3);
            let line = format_record(done, &step.loss, step.lr, wall);
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            on_record(&line);
        }
        if t.checkpoint_every > 0 && done.is_multiple_of(t.checkpoint_every) && done < t.iterations {
            save_state(&out.join(format!("iter_{done:06}.ckpt")), &state)?;
        }
        summary.final_loss = Some(LossBreakdown {
            color: step.loss.color.to_f64_lossy(),
            depth: step.loss.depth.to_f64_lossy(),
            normal: step.loss.normal.to_f64_lossy(),
            total: step.loss.total.to_f64_lossy(),
        });
    }
    save_state(&summary.checkpoint, &state)?;
    Ok(summary)
}

/// Trains on the dataset in `data_dir`, writing `config.toml`,
/// `metrics.log`, `initial.ckpt` (fresh runs), periodic `iter_NNNNNN.ckpt`
/// and `final.ckpt` (each with an `.adam` optimizer sidecar) into `out`.
///
/// With `resume`, training continues from that checkpoint's iteration.
/// `on_record` sees every metrics line as it is written.
pub fn run_training(
    cfg: &TrainConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    on_record: impl FnMut(&str),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = Dataset::open(data_dir)?;
    match cfg.trainer.precision {
        Precision::F64 => run_typed::<f64>(cfg, &data, out, resume, on_record),
        Precision::F32 => run_typed::<f32>(cfg, &data, out, resume, on_record),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_with_zero_gradient_keeps_parameters() {
        let mut adam = Adam::<f64>::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![0.3, -1.0, 2.5];
        let before = p.clone();
        adam.update(&mut p, &[0.0; 3], 1e-2);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // After bias correction the first step is lr · g / (|g| + ε).
        let mut adam = Adam::<f64>::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, 1.0];
        adam.update(&mut p, &[4.0, -0.5], 0.1);
        assert!((p[0] - (1.0 - 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (1.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn learning_rate_decays_exponentially() {
        let cfg = config::TrainerSection { iterations: 101, lr_init: 1e-2, lr_final: 1e-4, ..Default::default() };
        assert!((learning_rate(&cfg, 0) - 1e-2).abs() < 1e-18);
        assert!((learning_rate(&cfg, 50) - 1e-3).abs() < 1e-15);
        assert!((learning_rate(&cfg, 100) - 1e-4).abs() < 1e-18);
        let zero = config::TrainerSection { lr_init: 0.0, lr_final: 0.0, ..cfg };
        assert_eq!(learning_rate(&zero, 30), 0.0);
    }

    #[test]
    fn warmup_ramps_over_the_first_tenth() {
        let cfg = config::TrainerSection { iterations: 1000, ..Default::default() };
        assert_eq!(warmup_factor(&cfg, 0), 0.0);
        assert_eq!(warmup_factor(&cfg, 50), 0.5);
        assert_eq!(warmup_factor(&cfg, 100), 1.0);
        assert_eq!(warmup_factor(&cfg, 900), 1.0);
    }

    #[test]
    fn iteration_streams_are_independent_of_history() {
        use rand::Rng;
        let a: u64 = iteration_rng(5, 17).gen();
        let mut r = iteration_rng(5, 16);
        let _: u64 = r.gen();
        let b: u64 = iteration_rng(5, 17).gen();
        assert_eq!(a, b);
        assert_ne!(a, iteration_rng(5, 18).gen::<u64>());
    }
}
