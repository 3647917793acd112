//! Central finite-difference check of the loss gradient on random small
//! voxel-grid instances.
//!
//! The error at coordinate `j` is `|a − n| / max(|a|, |n|, floor)` where
//! `floor = 1e-3 · max(max_j |a_j|, |L|)`. Derivatives far below both the
//! largest derivative and the loss itself are compared on that absolute
//! scale instead, since a difference quotient with `h = 1e-6` carries
//! roundoff near `1e-16 · |L| / h` regardless of the derivative's size. A coordinate is skipped when either perturbed
//! evaluation takes a different branch of some `|·|` or `max(·, 0)`.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edgemap::EdgeIndicatorMap;
use crate::error::Result;
use crate::field::{FieldParams, GridSpec};
use crate::geometry::{Aabb, Camera, Pose, Vec3};
use crate::image_io::Image;
use crate::reg::{evaluate_batch, sample_patches, LossWeights, PatchBatch};
use crate::trainer::{build_batch, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Randomly chosen coordinates per instance and term, in addition to
    /// the largest-gradient coordinate.
    pub coords_per_term: usize,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { trials: 20, seed: 1, coords_per_term: 24, step: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped because a perturbation crossed a kink.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub instances: usize,
    pub terms: Vec<TermReport>,
    /// Gradient of a nearly empty field has no NaN or infinity.
    pub empty_field_finite: bool,
    pub elapsed_ms: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("instances: {}\n", self.instances);
        for t in &self.terms {
            s += &format!(
                "term: {} max_rel_error: {:.3e} checked: {} skipped_kink: {}\n",
                t.name, t.max_rel_error, t.checked, t.skipped
            );
        }
        s += &format!("empty_field_finite: {}\nelapsed_ms: {:.1}\n", self.empty_field_finite, self.elapsed_ms);
        s
    }
}

/// One random problem: a grid field, a camera looking into it and a batch.
pub struct Instance {
    pub field: FieldParams<f64>,
    pub batch: Vec<PatchBatch<f64>>,
}

/// Builds instance `index` of the sequence seeded by `seed`.
pub fn random_instance(seed: u64, index: u64, empty: bool) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let res = [rng.gen_range(8..=16), rng.gen_range(8..=16), rng.gen_range(8..=16)];
    let bounds = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0))?;
    let spec = GridSpec::new(res, bounds)?;
    let mut field = FieldParams::new_grid(spec, 0.0)?;
    for v in field.values.chunks_exact_mut(4) {
        v[0] = if empty { -40.0 } else { rng.gen_range(-3.0..2.0) };
        for c in &mut v[1..] {
            *c = rng.gen_range(-2.0..2.0);
        }
    }

    let size = 8;
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let phi = rng.gen_range(-0.6..0.6f64);
    let eye = Vec3::new(phi.cos() * theta.cos(), phi.sin(), phi.cos() * theta.sin()) * 3.0;
    let target = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let pose = Pose::look_at(eye, target, Vec3::new(0.0, 1.0, 0.0))?;
    let f = size as f64 * 1.1;
    let camera = Camera::new(size, size, f, f, size as f64 / 2.0, size as f64 / 2.0, pose, 0.5, 6.0)?;

    let image = Image::from_fn(size, size, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    let mask = Image::from_fn(size, size, |_, _| u8::from(rng.gen_bool(0.75)));
    let indicators = EdgeIndicatorMap::from_image(mask)?;
    let data = TrainingData::new(vec![camera], vec![image], vec![indicators], bounds)?;
    let patches = sample_patches(&data.indicators, rng.gen_range(1..=8), &mut rng)?;
    let k = rng.gen_range(8..=32);
    let batch = build_batch(&data, &patches, k, Some(&mut rng))?;
    Ok(Instance { field, batch })
}

fn term_weights() -> [(&'static str, LossWeights); 4] {
    let base = LossWeights::default();
    [
        ("L_c", LossWeights { lambda1: 1.0, lambda2: 0.0, lambda3: 0.0, ..base }),
        ("L_z", LossWeights { lambda1: 0.0, lambda2: 1.0, lambda3: 0.0, ..base }),
        ("L_n", LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 1.0, ..base }),
        ("L", base),
    ]
}

/// Worst error over `coords` for one instance and weighting.
fn check_term(
    inst: &mut Instance,
    weights: &LossWeights,
    coords: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, usize, usize) {
    let base = evaluate_batch(&inst.field, &inst.batch, weights, true, 1);
    let grad = base.gradient.expect("gradient requested");
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if scale == 0.0 {
        return (0.0, 0, 0);
    }
    let floor = 1e-3 * scale.max(base.loss.total.abs());
    let support: Vec<usize> = (0..grad.len()).filter(|&j| grad[j] != 0.0).collect();
    let argmax = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap();
    let mut chosen = vec![argmax];
    let n = coords.min(support.len());
    chosen.extend(sample(rng, support.len(), n).into_iter().map(|i| support[i]));
    // A few coordinates outside the support must have zero numeric derivative too.
    for _ in 0..4 {
        chosen.push(rng.gen_range(0..grad.len()));
    }

    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for j in chosen {
        let orig = inst.field.values[j];
        inst.field.values[j] = orig + step;
        let plus = evaluate_batch(&inst.field, &inst.batch, weights, false, 1);
        inst.field.values[j] = orig - step;
        let minus = evaluate_batch(&inst.field, &inst.batch, weights, false, 1);
        inst.field.values[j] = orig;
        if plus.activation != base.activation || minus.activation != base.activation {
            skipped += 1;
            continue;
        }
        let numeric = (plus.loss.total - minus.loss.total) / (2.0 * step);
        let a = grad[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
        checked += 1;
    }
    (worst, checked, skipped)
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut terms: Vec<TermReport> = term_weights()
        .iter()
        .map(|(name, _)| TermReport { name, max_rel_error: 0.0, checked: 0, skipped: 0 })
        .collect();
    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    for t in 0..cfg.trials {
        let mut inst = random_instance(cfg.seed, t as u64, false)?;
        for (report, (_, w)) in terms.iter_mut().zip(term_weights()) {
            let (worst, checked, skipped) = check_term(&mut inst, &w, cfg.coords_per_term, cfg.step, &mut pick);
            report.max_rel_error = report.max_rel_error.max(worst);
            report.checked += checked;
            report.skipped += skipped;
        }
    }
    let empty = random_instance(cfg.seed, u64::MAX, true)?;
    let eval = evaluate_batch(&empty.field, &empty.batch, &LossWeights::default(), true, 1);
    let empty_field_finite =
        eval.loss.total.is_finite() && eval.gradient.expect("gradient requested").iter().all(|g| g.is_finite());
    Ok(GradcheckReport {
        instances: cfg.trials,
        terms,
        empty_field_finite,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
