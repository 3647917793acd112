//! Quadrature volume rendering of color, depth and expected normal, plus the
//! exact adjoint of the quadrature.
//!
//! With samples `t_1 < … < t_K` and `δ_k = t_{k+1} − t_k` (`δ_K` closes
//! against `t_far`):
//!
//! ```text
//! α_k = 1 − exp(−σ_k δ_k)     T_k = Π_{j<k} (1 − α_j)     w_k = T_k α_k
//! C = Σ w_k c_k     z = Σ w_k t_k     n = Σ w_k n_k,  n_k = −∇σ_k / ‖∇σ_k‖
//! ```
//!
//! Depth and normal are not renormalized by the accumulated opacity.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{DifferentiableField, FieldOutput, RadianceField};
use crate::geometry::{Aabb, Camera, Ray, Vec3};
use crate::image_io::{Image, RgbImage, ScalarImage};
use crate::scalar::Real;

/// Below this gradient norm a sample contributes a zero normal.
pub const NORMAL_EPS: f64 = 1e-12;

/// Ordered sample distances along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples<T> {
    pub t: Vec<T>,
    /// Upper integration bound closing the last segment.
    pub t_far: T,
}

impl<T: Real> RaySamples<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Segment lengths `δ_k`.
    pub fn deltas(&self) -> Vec<T> {
        let k = self.t.len();
        (0..k).map(|i| if i + 1 < k { self.t[i + 1] - self.t[i] } else { self.t_far - self.t[i] }).collect()
    }

    /// Checks `t_near ≤ t_1 < … < t_K ≤ t_far`.
    pub fn validate(&self, t_near: T) -> Result<()> {
        let ok = self.t.first().is_none_or(|&t| t >= t_near)
            && self.t.windows(2).all(|w| w[0] < w[1])
            && self.t.last().is_none_or(|&t| t <= self.t_far);
        if ok {
            Ok(())
        } else {
            Err(Error::InputDomain("sample distances must be strictly increasing within the ray bounds".into()))
        }
    }
}

/// Distances for `k` samples over `[t_near, t_far]`: bin midpoints when
/// `jitter` is `None`, otherwise one uniform draw per equal-width bin.
///
/// A stratified call always consumes exactly `k` draws.
pub fn sample_interval<T: Real, R: Rng + ?Sized>(
    t_near: T,
    t_far: T,
    k: usize,
    jitter: Option<&mut R>,
) -> Result<RaySamples<T>> {
    if k < 2 {
        return Err(Error::InputDomain(format!("need at least 2 samples per ray, got {k}")));
    }
    let width = (t_far - t_near) / T::of_usize(k);
    let t = match jitter {
        None => (0..k).map(|i| t_near + (T::of_usize(i) + T::lit(0.5)) * width).collect(),
        Some(rng) => (0..k)
            .map(|i| {
                let u: f64 = rng.gen();
                t_near + (T::of_usize(i) + T::lit(u)) * width
            })
            .collect(),
    };
    Ok(RaySamples { t, t_far })
}

pub fn sample_ray<T: Real, R: Rng + ?Sized>(ray: &Ray<T>, k: usize, jitter: Option<&mut R>) -> Result<RaySamples<T>> {
    sample_interval(ray.t_near, ray.t_far, k, jitter)
}

/// Tightens a ray's bounds to its overlap with `bounds`; `None` when they
/// do not meet.
pub fn clip_to_bounds<T: Real>(ray: &Ray<T>, bounds: &Aabb<T>) -> Option<Ray<T>> {
    let (t0, t1) = bounds.ray_interval(ray.origin, ray.direction)?;
    let (lo, hi) = (t0.max(ray.t_near), t1.min(ray.t_far));
    (lo < hi).then_some(Ray { t_near: lo, t_far: hi, ..*ray })
}

/// Clips `ray` to `bounds` (when given) and places `k` samples on what
/// remains. `None` when the ray misses the bounds; no draws are consumed then.
pub fn prepare_ray<T: Real, R: Rng + ?Sized>(
    ray: Ray<T>,
    bounds: Option<&Aabb<T>>,
    k: usize,
    jitter: Option<&mut R>,
) -> Result<Option<(Ray<T>, RaySamples<T>)>> {
    let ray = match bounds {
        Some(b) => match clip_to_bounds(&ray, b) {
            Some(r) => r,
            None => return Ok(None),
        },
        None => ray,
    };
    let samples = sample_ray(&ray, k, jitter)?;
    Ok(Some((ray, samples)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult<T> {
    pub color: Vec3<T>,
    pub depth: T,
    /// Composited, not normalized.
    pub normal: Vec3<T>,
    pub weights: Vec<T>,
    /// `T_k` for each sample.
    pub transmittance: Vec<T>,
    pub residual_transmittance: T,
    pub opacity: T,
    /// Field outputs at each sample.
    pub outputs: Vec<FieldOutput<T>>,
    /// `∇σ` at each sample when normals were requested.
    pub density_gradients: Option<Vec<Vec3<T>>>,
    /// How many spatial density gradients were evaluated.
    pub density_gradient_queries: usize,
}

impl<T: Real> RenderResult<T> {
    /// Result for a ray that never meets the field.
    pub fn empty() -> Self {
        Self {
            color: Vec3::zero(),
            depth: T::zero(),
            normal: Vec3::zero(),
            weights: Vec::new(),
            transmittance: Vec::new(),
            residual_transmittance: T::one(),
            opacity: T::zero(),
            outputs: Vec::new(),
            density_gradients: None,
            density_gradient_queries: 0,
        }
    }
}

/// Per-ray adjoints of the rendered quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderUpstream<T> {
    pub color: Vec3<T>,
    pub depth: T,
    pub normal: Vec3<T>,
}

impl<T: Real> RenderUpstream<T> {
    pub fn zero() -> Self {
        Self { color: Vec3::zero(), depth: T::zero(), normal: Vec3::zero() }
    }
}

#[inline]
fn unit_normal<T: Real>(grad: Vec3<T>) -> Vec3<T> {
    let n = grad.norm();
    if n < T::lit(NORMAL_EPS) {
        Vec3::zero()
    } else {
        -grad * (T::one() / n)
    }
}

/// Composites `field` along `ray` at the given samples.
pub fn render<T: Real, F: RadianceField<T> + ?Sized>(
    field: &F,
    ray: &Ray<T>,
    samples: &RaySamples<T>,
    with_normals: bool,
) -> RenderResult<T> {
    let k = samples.len();
    let deltas = samples.deltas();
    let mut out = RenderResult {
        weights: Vec::with_capacity(k),
        transmittance: Vec::with_capacity(k),
        outputs: Vec::with_capacity(k),
        density_gradients: with_normals.then(|| Vec::with_capacity(k)),
        ..RenderResult::empty()
    };
    let mut trans = T::one();
    for i in 0..k {
        let t = samples.t[i];
        let (o, g) = field.query_full(ray.at(t), ray.direction, with_normals);
        let optical = o.density * deltas[i];
        let alpha = -(-optical).exp_m1();
        let w = trans * alpha;
        out.color += o.color * w;
        out.depth += w * t;
        if let (Some(g), Some(store)) = (g, out.density_gradients.as_mut()) {
            out.normal += unit_normal(g) * w;
            store.push(g);
            out.density_gradient_queries += 1;
        }
        out.weights.push(w);
        out.transmittance.push(trans);
        out.outputs.push(o);
        trans *= (-optical).exp();
        // Subnormal transmittance is flushed so arithmetic stays at full speed.
        if trans < T::min_positive_value() {
            trans = T::zero();
        }
    }
    out.residual_transmittance = trans;
    out.opacity = out.weights.iter().copied().sum();
    out
}

/// Accumulates the parameter gradient of `upstream · (C, z, n)` given a
/// forward result for the same ray and samples.
pub fn render_backward_from<T: Real, F: DifferentiableField<T> + ?Sized>(
    field: &F,
    ray: &Ray<T>,
    samples: &RaySamples<T>,
    forward: &RenderResult<T>,
    upstream: &RenderUpstream<T>,
    grad: &mut [T],
) {
    let k = samples.len();
    if k == 0 {
        return;
    }
    let deltas = samples.deltas();
    let normals_wanted = upstream.normal != Vec3::zero();
    let grads = if normals_wanted { forward.density_gradients.as_deref() } else { None };
    // dL/dw_k for each sample.
    let dw: Vec<T> = (0..k)
        .map(|i| {
            let mut g = upstream.color.dot(forward.outputs[i].color) + upstream.depth * samples.t[i];
            if let Some(gs) = grads {
                g += upstream.normal.dot(unit_normal(gs[i]));
            }
            g
        })
        .collect();
    // suffix = Σ_{j>i} dw_j w_j
    let mut suffix = T::zero();
    for i in (0..k).rev() {
        let w = forward.weights[i];
        let next_trans =
            if i + 1 < k { forward.transmittance[i + 1] } else { forward.residual_transmittance };
        let d_sigma = deltas[i] * (next_trans * dw[i] - suffix);
        suffix += dw[i] * w;

        let dc = upstream.color * w;
        let up = [dc.x, dc.y, dc.z, d_sigma];
        let d_grad = grads.and_then(|gs| {
            let g = gs[i];
            let norm = g.norm();
            if norm < T::lit(NORMAL_EPS) || w == T::zero() {
                return None;
            }
            let v = upstream.normal * w;
            let hat = g * (T::one() / norm);
            Some(-(v - hat * v.dot(hat)) * (T::one() / norm))
        });
        if up.iter().all(|&u| u == T::zero()) && d_grad.is_none() {
            continue;
        }
        field.backward_full(ray.at(samples.t[i]), ray.direction, up, d_grad, grad);
    }
}

/// Forward pass followed by the exact adjoint.
pub fn render_backward<T: Real, F: DifferentiableField<T> + ?Sized>(
    field: &F,
    ray: &Ray<T>,
    samples: &RaySamples<T>,
    upstream: &RenderUpstream<T>,
    grad: &mut [T],
) {
    let forward = render(field, ray, samples, upstream.normal != Vec3::zero());
    render_backward_from(field, ray, samples, &forward, upstream, grad);
}

/// Color, depth and normal images of `field` seen from `camera` with `k`
/// midpoint samples per ray. Normals are left at zero unless `with_normals`.
pub fn render_image<T: Real, F: RadianceField<T> + ?Sized>(
    field: &F,
    camera: &Camera<T>,
    k: usize,
    with_normals: bool,
) -> Result<(RgbImage, ScalarImage, RgbImage)> {
    let (w, h) = (camera.width, camera.height);
    let bounds = field.bounds();
    let rows: Vec<Vec<RenderResult<T>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let ray = camera.pixel_to_ray(u, v)?;
                    Ok(match prepare_ray::<T, rand_chacha::ChaCha8Rng>(ray, bounds.as_ref(), k, None)? {
                        Some((ray, samples)) => render(field, &ray, &samples, with_normals),
                        None => RenderResult::empty(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let to3 = |v: Vec3<T>| [v.x.to_f64_lossy(), v.y.to_f64_lossy(), v.z.to_f64_lossy()];
    let color = Image::from_fn(w, h, |u, v| to3(rows[v][u].color));
    let depth = Image::from_fn(w, h, |u, v| rows[v][u].depth.to_f64_lossy());
    let normal = Image::from_fn(w, h, |u, v| to3(rows[v][u].normal));
    Ok((color, depth, normal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldLayout, FieldParams, GridSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Field whose density and color depend only on the world z coordinate.
    struct Profile<S, C> {
        sigma: S,
        color: C,
    }

    impl<S: Fn(f64) -> f64 + Sync, C: Fn(f64) -> f64 + Sync> RadianceField<f64> for Profile<S, C> {
        fn query(&self, x: Vec3<f64>, _d: Vec3<f64>) -> FieldOutput<f64> {
            FieldOutput { density: (self.sigma)(x.z), color: Vec3::splat((self.color)(x.z)) }
        }
        fn density_spatial_gradient(&self, _x: Vec3<f64>) -> Vec3<f64> {
            Vec3::zero()
        }
    }

    fn z_ray(near: f64, far: f64) -> Ray<f64> {
        Ray::new(Vec3::zero(), Vec3::new(0.0, 0.0, 1.0), near, far).unwrap()
    }

    #[test]
    fn midpoint_samples() {
        let s = sample_interval::<f64, ChaCha8Rng>(0.0, 1.0, 4, None).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.deltas(), vec![0.25, 0.25, 0.25, 0.125]);
        assert!(sample_interval::<f64, ChaCha8Rng>(0.0, 1.0, 1, None).is_err());
    }

    #[test]
    fn stratified_samples_stay_in_bins_and_repeat_with_seed() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_interval(2.0, 6.0, 16, Some(&mut rng)).unwrap()
        };
        let a = draw(9);
        for (i, &t) in a.t.iter().enumerate() {
            assert!(t >= 2.0 + 0.25 * i as f64 && t <= 2.0 + 0.25 * (i + 1) as f64);
        }
        assert_eq!(a, draw(9));
        assert_ne!(a, draw(10));
        a.validate(2.0).unwrap();
    }

    #[test]
    fn empty_scene_renders_black_with_full_transmittance() {
        let f = Profile { sigma: |_| 0.0, color: |_| 0.7 };
        let ray = z_ray(0.0, 1.0);
        let s = sample_interval::<f64, ChaCha8Rng>(0.0, 1.0, 8, None).unwrap();
        let r = render(&f, &ray, &s, false);
        assert_eq!((r.color, r.depth, r.residual_transmittance), (Vec3::zero(), 0.0, 1.0));
    }

    #[test]
    fn single_sample_with_half_opacity() {
        let f = Profile { sigma: |_| 2f64.ln(), color: |_| 0.8 };
        let s = RaySamples { t: vec![0.0], t_far: 1.0 };
        let r = render(&f, &z_ray(0.0, 1.0), &s, false);
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        assert!((r.color.x - 0.4).abs() < 1e-15);
        assert!((r.residual_transmittance - 0.5).abs() < 1e-15);
    }

    #[test]
    fn opaque_slab_depth() {
        let f = Profile { sigma: |z| if z >= 0.6 { 1e4 } else { 0.0 }, color: |_| 1.0 };
        let s = sample_interval::<f64, ChaCha8Rng>(0.0, 1.0, 256, None).unwrap();
        let r = render(&f, &z_ray(0.0, 1.0), &s, false);
        assert!(r.opacity > 0.999);
        assert!((r.depth - 0.6).abs() <= 1.0 / 256.0);
    }

    #[test]
    fn clipping_restricts_bounds() {
        let b = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)).unwrap();
        let ray = Ray::new(Vec3::new(0.0, 0.0, -3.0), Vec3::new(0.0, 0.0, 1.0), 0.5, 10.0).unwrap();
        let c = clip_to_bounds(&ray, &b).unwrap();
        assert_eq!((c.t_near, c.t_far), (2.0, 4.0));
        let short = Ray { t_far: 1.5, ..ray };
        assert!(clip_to_bounds(&short, &b).is_none());
    }

    fn random_grid(seed: u64) -> FieldParams<f64> {
        let spec = GridSpec::new([16, 16, 16], Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..spec.param_count()).map(|_| rng.gen_range(-1.5..2.5)).collect();
        FieldParams::from_values(FieldLayout::Grid(spec), values).unwrap()
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> Ray<f64> {
        let origin = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), -2.0);
        let target = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), 1.0);
        Ray::new(origin, (target - origin).normalize(), 1.2, 3.2).unwrap()
    }

    #[test]
    fn backward_matches_finite_differences_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let f = random_grid(trial);
            let ray = random_ray(&mut rng);
            let s = sample_ray(&ray, 32, Some(&mut rng)).unwrap();
            let up = RenderUpstream {
                color: Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                depth: rng.gen_range(-1.0..1.0),
                normal: Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            };
            let objective = |p: &FieldParams<f64>| {
                let r = render(p, &ray, &s, true);
                up.color.dot(r.color) + up.depth * r.depth + up.normal.dot(r.normal)
            };
            let mut grad = vec![0.0; f.values.len()];
            render_backward(&f, &ray, &s, &up, &mut grad);
            let dir: Vec<f64> = (0..grad.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = 1e-6;
            let shifted = |sgn: f64| {
                let mut p = f.clone();
                for (v, d) in p.values.iter_mut().zip(&dir) {
                    *v += sgn * h * d;
                }
                objective(&p)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let an: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() / an.abs().max(1e-9) < 1e-5, "trial {trial}: fd {fd} an {an}");
        }
    }

    #[test]
    fn backward_is_local_and_linear_in_upstream() {
        let f = random_grid(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ray = random_ray(&mut rng);
        let s = sample_ray::<f64, ChaCha8Rng>(&ray, 32, None).unwrap();
        let mut zero = vec![0.0; f.values.len()];
        render_backward(&f, &ray, &s, &RenderUpstream::zero(), &mut zero);
        assert!(zero.iter().all(|&g| g == 0.0));

        let up = RenderUpstream { color: Vec3::splat(1.0), depth: 0.5, normal: Vec3::new(0.2, 0.1, -0.3) };
        let mut grad = vec![0.0; f.values.len()];
        render_backward(&f, &ray, &s, &up, &mut grad);
        let FieldLayout::Grid(spec) = &f.layout else { unreachable!() };
        // Vertices farther than one cell from every sample receive nothing.
        let cell = 2.0 / 15.0;
        for k in 0..16 {
            for j in 0..16 {
                for i in 0..16 {
                    let p = spec.vertex_position(i, j, k);
                    let near = s.t.iter().any(|&t| (ray.at(t) - p).max_abs() < cell + 1e-12);
                    if !near {
                        let o = spec.vertex_offset(i, j, k);
                        assert!(grad[o..o + 4].iter().all(|&g| g == 0.0));
                    }
                }
            }
        }
    }
}
