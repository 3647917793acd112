//! Patch sampling and the three loss terms: photometric, edge-gated depth
//! smoothness and edge-gated normal smoothness, combined into a weighted
//! total with an exact gradient through the renderer and field.
//!
//! For a 2×2 patch with indicators `e_i` the depth term is
//!
//! ```text
//! z̄ = Σ e_i z_i / Σ e_i          L = Σ_i max(e_i |z_i − z̄| − τ1, 0)
//! ```
//!
//! and the normal term is the same with `‖n_i − n̄‖²` and `τ2`. Patches whose
//! four pixels are all edges contribute nothing.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edgemap::EdgeIndicatorMap;
use crate::error::{Error, Result};
use crate::field::DifferentiableField;
use crate::geometry::{make_patch, PixelPatch, Ray, Vec3};
use crate::renderer::{render, render_backward_from, RaySamples, RenderResult, RenderUpstream};
use crate::scalar::Real;

/// How the patch terms are normalized over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Summed over patches.
    #[default]
    Sum,
    /// Averaged over patches.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Depth tolerance, world units.
    pub tau1: f64,
    /// Normal tolerance, squared-norm units.
    pub tau2: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.1, lambda3: 0.1, tau1: 1e-4, tau2: 0.0, reduction: Reduction::Sum }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.tau1, self.tau2];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights and tolerances must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Only the photometric term.
    pub fn photometric_only(self) -> Self {
        Self { lambda2: 0.0, lambda3: 0.0, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown<T> {
    pub color: T,
    pub depth: T,
    pub normal: T,
    pub total: T,
}

/// Rendered and ground-truth quantities for the four pixels of one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRender<T> {
    pub color: [Vec3<T>; 4],
    pub depth: [T; 4],
    pub normal: [Vec3<T>; 4],
    pub gt_color: [Vec3<T>; 4],
    pub indicators: [u8; 4],
}

/// One patch term with its derivative with respect to the four inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTerm<T, G> {
    pub loss: T,
    pub grad: [G; 4],
    /// Smallest distance of any `|·|` or `max(·, 0)` argument from its kink.
    pub kink_margin: T,
    /// Which branch each pixel's `max` and `|·|` took: bit `i` marks an
    /// active pixel, bit `4 + i` a positive depth difference.
    pub pattern: u8,
}

/// Sum of squared color errors divided by the ray count.
pub fn photometric_loss<T: Real>(rendered: &[Vec3<T>], gt: &[Vec3<T>]) -> T {
    assert_eq!(rendered.len(), gt.len(), "rendered and ground-truth batches differ in length");
    if rendered.is_empty() {
        return T::zero();
    }
    let sum: T = rendered.iter().zip(gt).map(|(r, g)| (*r - *g).norm_squared()).sum();
    sum / T::of_usize(rendered.len())
}

fn gated_mean<T: Real, V: Copy + std::ops::Add<Output = V> + std::ops::Mul<T, Output = V>>(
    values: &[V; 4],
    e: &[u8; 4],
    zero: V,
) -> Option<(V, T)> {
    let count = e.iter().filter(|&&v| v == 1).count();
    if count == 0 {
        return None;
    }
    let mut acc = zero;
    for i in 0..4 {
        if e[i] == 1 {
            acc = acc + values[i];
        }
    }
    let inv = T::one() / T::of_usize(count);
    Some((acc * inv, inv))
}

/// Depth term of one patch and its gradient in the four depths.
pub fn depth_patch_term<T: Real>(depth: [T; 4], e: [u8; 4], tau1: T) -> PatchTerm<T, T> {
    let mut term = PatchTerm { loss: T::zero(), grad: [T::zero(); 4], kink_margin: T::infinity(), pattern: 0 };
    let Some((mean, inv)) = gated_mean::<T, T>(&depth, &e, T::zero()) else {
        return term;
    };
    for i in 0..4 {
        if e[i] == 0 {
            continue;
        }
        let diff = depth[i] - mean;
        let excess = diff.abs() - tau1;
        term.kink_margin = term.kink_margin.min(diff.abs()).min(excess.abs());
        if diff > T::zero() {
            term.pattern |= 1 << (4 + i);
        }
        if excess > T::zero() {
            term.pattern |= 1 << i;
            term.loss += excess;
            let s = if diff > T::zero() { T::one() } else if diff < T::zero() { -T::one() } else { T::zero() };
            // d|z_i − z̄|/dz_j = s (δ_ij − e_j / Σe)
            for j in 0..4 {
                let own = if i == j { T::one() } else { T::zero() };
                term.grad[j] += s * (own - T::of_usize(e[j] as usize) * inv);
            }
        }
    }
    term
}

/// Normal term of one patch and its gradient in the four normals.
pub fn normal_patch_term<T: Real>(normal: [Vec3<T>; 4], e: [u8; 4], tau2: T) -> PatchTerm<T, Vec3<T>> {
    let mut term = PatchTerm { loss: T::zero(), grad: [Vec3::zero(); 4], kink_margin: T::infinity(), pattern: 0 };
    let Some((mean, inv)) = gated_mean::<T, Vec3<T>>(&normal, &e, Vec3::zero()) else {
        return term;
    };
    for i in 0..4 {
        if e[i] == 0 {
            continue;
        }
        let diff = normal[i] - mean;
        let excess = diff.norm_squared() - tau2;
        if tau2 > T::zero() {
            term.kink_margin = term.kink_margin.min(excess.abs());
        }
        if excess > T::zero() {
            term.pattern |= 1 << i;
            term.loss += excess;
            let two = T::lit(2.0);
            for j in 0..4 {
                let own = if i == j { T::one() } else { T::zero() };
                term.grad[j] += diff * (two * (own - T::of_usize(e[j] as usize) * inv));
            }
        }
    }
    term
}

pub fn depth_reg_loss<T: Real>(patches: &[PatchRender<T>], tau1: T) -> T {
    patches.iter().map(|p| depth_patch_term(p.depth, p.indicators, tau1).loss).sum()
}

pub fn normal_reg_loss<T: Real>(patches: &[PatchRender<T>], tau2: T) -> T {
    patches.iter().map(|p| normal_patch_term(p.normal, p.indicators, tau2).loss).sum()
}

pub fn total_loss<T: Real>(color: T, depth: T, normal: T, weights: &LossWeights) -> LossBreakdown<T> {
    let total = T::lit(weights.lambda1) * color + T::lit(weights.lambda2) * depth + T::lit(weights.lambda3) * normal;
    LossBreakdown { color, depth, normal, total }
}

/// Picks one image uniformly, then `m` top-left corners uniformly over the
/// valid 2×2 positions of that image.
pub fn sample_patches<R: Rng + ?Sized>(edge_maps: &[EdgeIndicatorMap], m: usize, rng: &mut R) -> Result<Vec<PixelPatch>> {
    if m == 0 {
        return Err(Error::InputDomain("need at least one patch per batch".into()));
    }
    if edge_maps.is_empty() {
        return Err(Error::InputDomain("no training images to sample from".into()));
    }
    let image = rng.gen_range(0..edge_maps.len());
    let map = &edge_maps[image];
    if map.width() < 2 || map.height() < 2 {
        return Err(Error::InputDomain("training image smaller than 2x2".into()));
    }
    (0..m)
        .map(|_| {
            let u = rng.gen_range(0..map.width() - 1);
            let v = rng.gen_range(0..map.height() - 1);
            make_patch(map, image, (u, v))
        })
        .collect()
}

/// One pixel's ray, samples and target. `ray` is `None` when the pixel's
/// ray never meets the field, which then renders as empty space.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSample<T> {
    pub ray: Option<(Ray<T>, RaySamples<T>)>,
    pub gt_color: Vec3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch<T> {
    pub pixels: [PixelSample<T>; 4],
    pub indicators: [u8; 4],
}

/// Batch-level bookkeeping that is not part of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub rays: usize,
    pub density_gradient_queries: usize,
    /// Smallest kink margin over every active `|·|` / `max` argument.
    pub kink_margin: f64,
}

/// Result of one forward (and optionally backward) pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEvaluation<T> {
    pub loss: LossBreakdown<T>,
    pub gradient: Option<Vec<T>>,
    pub stats: BatchStats,
    /// Per patch, the depth then the normal term's branch pattern (0 when
    /// the term is not evaluated).
    pub activation: Vec<[u8; 2]>,
}

struct Partial<T> {
    color: T,
    depth: T,
    normal: T,
    gradient: Option<Vec<T>>,
    queries: usize,
    kink: f64,
    activation: Vec<[u8; 2]>,
}

fn render_pixel<T: Real, F: DifferentiableField<T> + ?Sized>(
    field: &F,
    px: &PixelSample<T>,
    with_normals: bool,
) -> RenderResult<T> {
    match &px.ray {
        Some((ray, samples)) => render(field, ray, samples, with_normals),
        None => RenderResult::empty(),
    }
}

fn evaluate_chunk<T: Real, F: DifferentiableField<T> + ?Sized>(
    field: &F,
    patches: &[PatchBatch<T>],
    weights: &LossWeights,
    total_rays: usize,
    patch_scale: T,
    with_gradient: bool,
) -> Partial<T> {
    let use_depth = weights.lambda2 > 0.0;
    let use_normal = weights.lambda3 > 0.0;
    let mut part = Partial {
        color: T::zero(),
        depth: T::zero(),
        normal: T::zero(),
        gradient: with_gradient.then(|| vec![T::zero(); field.param_count()]),
        queries: 0,
        kink: f64::INFINITY,
        activation: Vec::with_capacity(patches.len()),
    };
    let color_scale = T::lit(weights.lambda1) * T::lit(2.0) / T::of_usize(total_rays);
    for patch in patches {
        let renders: Vec<RenderResult<T>> =
            patch.pixels.iter().map(|px| render_pixel(field, px, use_normal)).collect();
        let mut upstream = [RenderUpstream::zero(); 4];
        let mut act = [0u8; 2];
        for (i, r) in renders.iter().enumerate() {
            part.queries += r.density_gradient_queries;
            let err = r.color - patch.pixels[i].gt_color;
            part.color += err.norm_squared();
            if weights.lambda1 > 0.0 {
                upstream[i].color = err * color_scale;
            }
        }
        if use_depth {
            let term = depth_patch_term(
                [renders[0].depth, renders[1].depth, renders[2].depth, renders[3].depth],
                patch.indicators,
                T::lit(weights.tau1),
            );
            part.depth += term.loss;
            act[0] = term.pattern;
            part.kink = part.kink.min(term.kink_margin.to_f64_lossy());
            let s = T::lit(weights.lambda2) * patch_scale;
            for i in 0..4 {
                upstream[i].depth = term.grad[i] * s;
            }
        }
        if use_normal {
            let term = normal_patch_term(
                [renders[0].normal, renders[1].normal, renders[2].normal, renders[3].normal],
                patch.indicators,
                T::lit(weights.tau2),
            );
            part.normal += term.loss;
            act[1] = term.pattern;
            part.kink = part.kink.min(term.kink_margin.to_f64_lossy());
            let s = T::lit(weights.lambda3) * patch_scale;
            for i in 0..4 {
                upstream[i].normal = term.grad[i] * s;
            }
        }
        part.activation.push(act);
        if let Some(grad) = part.gradient.as_mut() {
            for i in 0..4 {
                if let Some((ray, samples)) = &patch.pixels[i].ray {
                    render_backward_from(field, ray, samples, &renders[i], &upstream[i], grad);
                }
            }
        }
    }
    part
}

/// Loss, and gradient when `with_gradient`, of the weighted total over a
/// batch of patches.
///
/// Terms whose weight is zero are not evaluated. Patches are split into
/// `workers` contiguous chunks whose partial results are merged in chunk
/// order, so the output depends on `workers` but not on thread scheduling.
pub fn evaluate_batch<T: Real, F: DifferentiableField<T> + ?Sized>(
    field: &F,
    batch: &[PatchBatch<T>],
    weights: &LossWeights,
    with_gradient: bool,
    workers: usize,
) -> BatchEvaluation<T> {
    let total_rays = (4 * batch.len()).max(1);
    let patch_scale = match weights.reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::one() / T::of_usize(batch.len().max(1)),
    };
    let workers = workers.max(1).min(batch.len().max(1));
    let chunk = batch.len().div_ceil(workers).max(1);
    let partials: Vec<Partial<T>> = if workers == 1 {
        vec![evaluate_chunk(field, batch, weights, total_rays, patch_scale, with_gradient)]
    } else {
        batch
            .par_chunks(chunk)
            .map(|c| evaluate_chunk(field, c, weights, total_rays, patch_scale, with_gradient))
            .collect()
    };
    let mut color = T::zero();
    let mut depth = T::zero();
    let mut normal = T::zero();
    let mut gradient: Option<Vec<T>> = None;
    let mut activation = Vec::with_capacity(batch.len());
    let mut stats = BatchStats { rays: 4 * batch.len(), density_gradient_queries: 0, kink_margin: f64::INFINITY };
    for p in partials {
        color += p.color;
        depth += p.depth;
        normal += p.normal;
        stats.density_gradient_queries += p.queries;
        stats.kink_margin = stats.kink_margin.min(p.kink);
        activation.extend(p.activation);
        if let Some(g) = p.gradient {
            match gradient.as_mut() {
                None => gradient = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            }
        }
    }
    let color = color / T::of_usize(total_rays);
    let loss = total_loss(color, depth * patch_scale, normal * patch_scale, weights);
    BatchEvaluation { loss, gradient, stats, activation }
}

/// Exact gradient of the weighted total loss with respect to Θ.
pub fn loss_backward<T: Real, F: DifferentiableField<T> + ?Sized>(
    field: &F,
    batch: &[PatchBatch<T>],
    weights: &LossWeights,
) -> Vec<T> {
    evaluate_batch(field, batch, weights, true, 1).gradient.expect("gradient requested")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    #[test]
    fn photometric_examples() {
        let a = [v(0.1, 0.2, 0.3), v(0.5, 0.5, 0.5)];
        assert_eq!(photometric_loss(&a, &a), 0.0);
        let l = photometric_loss(&[v(0.6, 0.2, 0.2)], &[v(0.5, 0.2, 0.2)]);
        assert!((l - 0.01).abs() < 1e-15);
        let b = [v(0.0, 0.2, 0.9), v(0.4, 0.1, 0.5)];
        let rev_a = [a[1], a[0]];
        let rev_b = [b[1], b[0]];
        assert_eq!(photometric_loss(&a, &b), photometric_loss(&rev_a, &rev_b));
    }

    #[test]
    fn depth_examples() {
        assert_eq!(depth_patch_term([5.0; 4], [1; 4], 1e-4).loss, 0.0);
        assert_eq!(depth_patch_term([1.0, 7.0, -3.0, 2.0], [0; 4], 0.0).loss, 0.0);
        let t = depth_patch_term([2.0, 4.0, 9.0, 9.0], [1, 1, 0, 0], 0.0);
        assert_eq!(t.loss, 2.0);
        // z̄ = 3: pixel 0 is below, pixel 1 above; the two signs cancel in the mean.
        assert_eq!(t.grad, [-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn normal_examples() {
        let same = [v(0.0, 0.0, 1.0); 4];
        assert_eq!(normal_patch_term(same, [1; 4], 0.0).loss, 0.0);
        let n = [v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0), v(5.0, 5.0, 5.0), v(-1.0, 0.0, 0.0)];
        let t = normal_patch_term(n, [1, 1, 0, 0], 0.0);
        assert!((t.loss - 1.0).abs() < 1e-15);
        assert_eq!(t.grad[2], Vec3::zero());
        assert_eq!(normal_patch_term(n, [1, 1, 0, 0], 0.5).loss, 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights { lambda1: 1.0, lambda2: 0.0, lambda3: 0.0, ..Default::default() };
        assert_eq!(total_loss(2.0, 3.0, 5.0, &w).total, 2.0);
        let w = LossWeights { lambda1: 1.0, lambda2: 0.1, lambda3: 0.1, ..Default::default() };
        assert!((total_loss(2.0f64, 3.0, 5.0, &w).total - 2.8).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).total, 0.0);
    }

    #[test]
    fn weights_reject_negative_values() {
        assert!(LossWeights { tau1: -1e-3, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn patch_sampling() {
        let maps = vec![EdgeIndicatorMap::filled(2, 2, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_patches(&maps, 1, &mut rng).unwrap();
        assert_eq!(p[0].pixels, [(0, 0), (1, 0), (0, 1), (1, 1)]);

        let maps = vec![EdgeIndicatorMap::filled(16, 12, 1), EdgeIndicatorMap::filled(16, 12, 0)];
        let draw = |seed| sample_patches(&maps, 64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = draw(5);
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|p| p.image_index == a[0].image_index));
        assert_eq!(a, draw(5));
        assert!(sample_patches(&maps, 0, &mut rng).is_err());
    }

    fn depths() -> impl Strategy<Value = [f64; 4]> {
        [-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64]
    }

    fn indicators() -> impl Strategy<Value = [u8; 4]> {
        [0u8..=1, 0u8..=1, 0u8..=1, 0u8..=1]
    }

    proptest! {
        #[test]
        fn edge_pixels_do_not_affect_depth_loss(z in depths(), e in indicators(), i in 0usize..4, dz in -10.0..10.0f64) {
            prop_assume!(e[i] == 0);
            let mut moved = z;
            moved[i] += dz;
            prop_assert_eq!(depth_patch_term(z, e, 1e-4).loss, depth_patch_term(moved, e, 1e-4).loss);
            prop_assert_eq!(depth_patch_term(z, e, 1e-4).grad[i], 0.0);
        }

        #[test]
        fn depth_loss_is_positively_homogeneous(z in depths(), e in indicators(), s in 0.1..10.0f64) {
            let scaled = z.map(|v| v * s);
            let a = depth_patch_term(scaled, e, 0.0).loss;
            let b = s * depth_patch_term(z, e, 0.0).loss;
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }

        #[test]
        fn losses_are_permutation_invariant(z in depths(), e in indicators()) {
            let perm = [2usize, 0, 3, 1];
            let zp = perm.map(|i| z[i]);
            let ep = perm.map(|i| e[i]);
            let a = depth_patch_term(z, e, 1e-3).loss;
            let b = depth_patch_term(zp, ep, 1e-3).loss;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
            let n = z.map(|v| Vec3::new(v, -v * 0.5, 1.0));
            let np = perm.map(|i| n[i]);
            let a = normal_patch_term(n, e, 0.0).loss;
            let b = normal_patch_term(np, ep, 0.0).loss;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }
    }
}
