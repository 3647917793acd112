//! Analytic Lambertian ray tracer over boxes and spheres, used to write
//! sparse-view datasets with exact color, depth, normal and camera ground
//! truth.
//!
//! Shading is `clamp(I0 · α(x) · max(n · l, 0) + ambient, 0, 1)`. Shadows and
//! interreflection are not modeled.

use std::path::Path;

use crate::dataset::{self, depth_path, normal_path, rgb_path};
use crate::error::{Error, Result};
use crate::field::{FieldOutput, RadianceField};
use crate::geometry::{Aabb, Camera, Pose, Ray, Vec3};
use crate::image_io::{write_pfm_rgb, write_pfm_scalar, write_png_rgb, Image, RgbImage, ScalarImage};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Albedo {
    Constant(Vec3<f64>),
    /// 3D checkerboard with cubes of side `size`.
    Checker { a: Vec3<f64>, b: Vec3<f64>, size: f64 },
}

impl Albedo {
    pub fn at(&self, p: Vec3<f64>) -> Vec3<f64> {
        match *self {
            Albedo::Constant(c) => c,
            Albedo::Checker { a, b, size } => {
                let cell = (p.x / size).floor() + (p.y / size).floor() + (p.z / size).floor();
                if (cell as i64).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box(Aabb<f64>),
    Sphere { center: Vec3<f64>, radius: f64 },
}

impl Shape {
    /// Interval of the full line `origin + t·dir` (unit `dir`) inside the shape.
    pub fn line_interval(&self, origin: Vec3<f64>, dir: Vec3<f64>) -> Option<(f64, f64)> {
        match *self {
            Shape::Box(b) => b.ray_interval(origin, dir),
            Shape::Sphere { center, radius } => {
                // t² + 2bt + c = 0 with the root pair computed without cancellation.
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let q = -(b + b.signum() * disc.sqrt());
                if q == 0.0 {
                    return Some((0.0, 0.0));
                }
                let (r1, r2) = (q, c / q);
                Some((r1.min(r2), r1.max(r2)))
            }
        }
    }

    pub fn contains(&self, p: Vec3<f64>) -> bool {
        match *self {
            Shape::Box(b) => b.contains(p),
            Shape::Sphere { center, radius } => (p - center).norm_squared() <= radius * radius,
        }
    }

    /// Outward geometric normal at a surface point.
    pub fn normal_at(&self, p: Vec3<f64>) -> Vec3<f64> {
        match *self {
            Shape::Sphere { center, .. } => (p - center).normalize(),
            Shape::Box(b) => {
                // Face whose plane is closest to p; ties resolve to the lower axis.
                let mut best = (f64::INFINITY, Vec3::zero());
                for a in 0..3 {
                    let mut n = [0.0; 3];
                    let d_lo = (p[a] - b.min[a]).abs();
                    let d_hi = (p[a] - b.max[a]).abs();
                    let (d, s) = if d_lo < d_hi { (d_lo, -1.0) } else { (d_hi, 1.0) };
                    if d < best.0 {
                        n[a] = s;
                        best = (d, Vec3::from_array(n));
                    }
                }
                best.1
            }
        }
    }

    fn bounds(&self) -> Aabb<f64> {
        match *self {
            Shape::Box(b) => b,
            Shape::Sphere { center, radius } => Aabb { min: center - Vec3::splat(radius), max: center + Vec3::splat(radius) },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: Albedo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    /// Unit direction towards the light.
    pub light: Vec3<f64>,
    pub intensity: f64,
    pub ambient: f64,
    pub background: Vec3<f64>,
    pub bounds: Aabb<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceResult {
    pub color: Vec3<f64>,
    /// Ray distance to the hit, 0 on a miss.
    pub depth: f64,
    /// Unit normal, zero on a miss.
    pub normal: Vec3<f64>,
    pub hit: bool,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity > 0.0) {
            return Err(Error::InputDomain("light intensity must be positive".into()));
        }
        if (self.light.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InputDomain("light direction must be unit length".into()));
        }
        for p in &self.primitives {
            let b = p.shape.bounds();
            let eps = 1e-12;
            let inside = |v: Vec3<f64>| {
                (0..3).all(|a| v[a] >= self.bounds.min[a] - eps && v[a] <= self.bounds.max[a] + eps)
            };
            if !inside(b.min) || !inside(b.max) {
                return Err(Error::InputDomain("primitive extends outside the scene bounds".into()));
            }
        }
        Ok(())
    }

    pub fn shade(&self, albedo: &Albedo, p: Vec3<f64>, n: Vec3<f64>) -> Vec3<f64> {
        let lambert = n.dot(self.light).max(0.0);
        (albedo.at(p) * (self.intensity * lambert)).map(|c| (c + self.ambient).clamp(0.0, 1.0))
    }

    /// Nearest primitive entered by the line at or after `t_min` (and at or
    /// before `t_max`), with the entry distance.
    fn first_entry(&self, origin: Vec3<f64>, dir: Vec3<f64>, t_min: f64, t_max: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t0, t1)) = p.shape.line_interval(origin, dir) {
                if t0 >= t_min && t0 <= t_max && t1 >= t0 && best.is_none_or(|(_, t)| t0 < t) {
                    best = Some((i, t0));
                }
            }
        }
        best
    }

    /// First surface hit inside `[ray.t_near, ray.t_far]`.
    pub fn trace(&self, ray: &Ray<f64>) -> TraceResult {
        match self.first_entry(ray.origin, ray.direction, ray.t_near, ray.t_far) {
            None => TraceResult { color: self.background, depth: 0.0, normal: Vec3::zero(), hit: false },
            Some((i, t)) => {
                let prim = &self.primitives[i];
                let p = ray.at(t);
                let n = prim.shape.normal_at(p);
                TraceResult { color: self.shade(&prim.albedo, p, n), depth: t, normal: n, hit: true }
            }
        }
    }

    /// Color, depth and normal images seen by `camera`.
    pub fn render_view(&self, camera: &Camera<f64>) -> (RgbImage, ScalarImage, RgbImage) {
        let (w, h) = (camera.width, camera.height);
        let mut rgb = Image::filled(w, h, [0.0; 3]);
        let mut depth = Image::filled(w, h, 0.0);
        let mut normal = Image::filled(w, h, [0.0; 3]);
        for v in 0..h {
            for u in 0..w {
                let ray = camera.pixel_to_ray(u, v).expect("pixel inside image");
                let r = self.trace(&ray);
                rgb.set(u, v, r.color.to_array());
                depth.set(u, v, r.depth);
                normal.set(u, v, r.normal.to_array());
            }
        }
        (rgb, depth, normal)
    }
}

/// Named built-in scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    BoxOnTable,
    TwoObject,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" | "box-on-table" => Ok(SceneKind::BoxOnTable),
            "two-object" => Ok(SceneKind::TwoObject),
            other => Err(Error::Config(format!("unknown scene '{other}' (expected box or two-object)"))),
        }
    }
}

fn rgb(r: f64, g: f64, b: f64) -> Vec3<f64> {
    Vec3::new(r, g, b)
}

fn aabb(min: [f64; 3], max: [f64; 3]) -> Aabb<f64> {
    Aabb { min: Vec3::from_array(min), max: Vec3::from_array(max) }
}

/// Textured box and a sphere resting on a slab table. World y is up.
pub fn box_on_table() -> SyntheticScene {
    let table = Primitive { shape: Shape::Box(aabb([-1.6, -0.2, -1.6], [1.6, 0.0, 1.6])), albedo: Albedo::Constant(rgb(0.8, 0.76, 0.62)) };
    // Checker cubes are offset so that no visible face lies on a cell boundary.
    let crate_box = Primitive {
        shape: Shape::Box(aabb([-0.9, 0.0, -0.5], [-0.1, 0.8, 0.3])),
        albedo: Albedo::Checker { a: rgb(0.85, 0.2, 0.15), b: rgb(0.95, 0.9, 0.65), size: 0.23 },
    };
    let ball = Primitive {
        shape: Shape::Sphere { center: Vec3::new(0.6, 0.3, 0.25), radius: 0.3 },
        albedo: Albedo::Constant(rgb(0.15, 0.3, 0.85)),
    };
    SyntheticScene {
        primitives: vec![table, crate_box, ball],
        light: Vec3::new(0.4, 1.0, 0.5).normalize(),
        intensity: 0.85,
        ambient: 0.15,
        background: Vec3::zero(),
        bounds: aabb([-1.6, -0.2, -1.6], [1.6, 1.0, 1.6]),
    }
}

/// Two free-standing objects without a ground plane.
pub fn two_object() -> SyntheticScene {
    let left = Primitive {
        shape: Shape::Box(aabb([-0.8, -0.4, -0.4], [-0.05, 0.4, 0.35])),
        albedo: Albedo::Checker { a: rgb(0.2, 0.7, 0.25), b: rgb(0.9, 0.9, 0.85), size: 0.27 },
    };
    let right = Primitive {
        shape: Shape::Sphere { center: Vec3::new(0.5, 0.0, 0.0), radius: 0.42 },
        albedo: Albedo::Constant(rgb(0.9, 0.45, 0.1)),
    };
    SyntheticScene {
        primitives: vec![left, right],
        light: Vec3::new(0.3, 1.0, 0.6).normalize(),
        intensity: 0.85,
        ambient: 0.15,
        background: Vec3::zero(),
        bounds: aabb([-1.0, -0.6, -0.6], [1.0, 0.6, 0.6]),
    }
}

pub fn scene(kind: SceneKind) -> SyntheticScene {
    match kind {
        SceneKind::BoxOnTable => box_on_table(),
        SceneKind::TwoObject => two_object(),
    }
}

/// Cameras on a horizontal arc around `target`, all looking at it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub size: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub radius: f64,
    pub elevation_deg: f64,
    pub azimuth_start_deg: f64,
    pub azimuth_end_deg: f64,
    pub target: Vec3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            size: 128,
            fov_deg: 36.0,
            radius: 3.6,
            elevation_deg: 70.0,
            azimuth_start_deg: -60.0,
            azimuth_end_deg: 60.0,
            target: Vec3::new(0.0, 0.2, 0.0),
            near: 1.0,
            far: 7.0,
        }
    }
}

impl CameraRig {
    /// `views` cameras evenly spaced along the arc.
    pub fn cameras(&self, views: usize) -> Result<Vec<Camera<f64>>> {
        if views == 0 {
            return Err(Error::InputDomain("need at least one view".into()));
        }
        if self.size < 2 {
            return Err(Error::InputDomain("image size must be at least 2".into()));
        }
        let f = 0.5 * self.size as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        let c = 0.5 * self.size as f64;
        let el = self.elevation_deg.to_radians();
        (0..views)
            .map(|i| {
                let s = if views == 1 { 0.5 } else { i as f64 / (views - 1) as f64 };
                let az = (self.azimuth_start_deg + s * (self.azimuth_end_deg - self.azimuth_start_deg)).to_radians();
                let eye = self.target
                    + Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * self.radius;
                let pose = Pose::look_at(eye, self.target, Vec3::new(0.0, 1.0, 0.0))?;
                Camera::new(self.size, self.size, f, f, c, c, pose, self.near, self.far)
            })
            .collect()
    }
}

/// Training views spread evenly over `0..views`; the rest are held out.
pub fn split_views(views: usize, train: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if train == 0 || train > views {
        return Err(Error::InputDomain(format!("cannot pick {train} training views out of {views}")));
    }
    let picked: Vec<usize> = if train == 1 {
        vec![views / 2]
    } else {
        (0..train).map(|i| ((i * (views - 1)) as f64 / (train - 1) as f64).round() as usize).collect()
    };
    let test = (0..views).filter(|i| !picked.contains(i)).collect();
    Ok((picked, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSpec {
    pub rig: CameraRig,
    pub train_views: usize,
    pub test_views: usize,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self { rig: CameraRig::default(), train_views: 3, test_views: 5 }
    }
}

/// Cameras and split of a dataset, without touching the disk.
pub fn plan_dataset(spec: &GenerateSpec) -> Result<(Vec<Camera<f64>>, Vec<usize>, Vec<usize>)> {
    let views = spec.train_views + spec.test_views;
    let cameras = spec.rig.cameras(views)?;
    let (train, test) = split_views(views, spec.train_views)?;
    Ok((cameras, train, test))
}

/// Writes a full dataset for `scene` to `out`. Returns the camera count.
pub fn generate_dataset(scene: &SyntheticScene, spec: &GenerateSpec, out: &Path) -> Result<usize> {
    scene.validate()?;
    let (cameras, train, test) = plan_dataset(spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(dataset::CAMERAS_FILE, dataset::format_cameras(&cameras))?;
    write(dataset::SPLIT_FILE, dataset::format_split(&train, &test))?;
    write(dataset::META_FILE, dataset::format_meta(&scene.bounds))?;
    for (i, cam) in cameras.iter().enumerate() {
        let (rgb, depth, normal) = scene.render_view(cam);
        write_png_rgb(&rgb_path(out, i), &rgb)?;
        write_pfm_scalar(&depth_path(out, i), &depth)?;
        write_pfm_rgb(&normal_path(out, i), &normal)?;
    }
    Ok(cameras.len())
}

/// Radiance field built directly from a scene.
///
/// Density is `sigma` wherever the segment from `x` back along `-d` of length
/// `sweep` meets a primitive, and 0 elsewhere. With `sweep = 0` this is the
/// plain indicator of the primitives' union. A sweep of one sample spacing
/// makes every ray that the tracer sees hit register at its first sample past
/// the surface, including rays whose chord through a silhouette is shorter
/// than the spacing. Color is the shading at the point where the line through
/// `x` first enters that primitive, so an opaque first sample reproduces the
/// traced color.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneField {
    pub scene: SyntheticScene,
    pub sigma: f64,
    pub sweep: f64,
}

impl SceneField {
    pub fn new(scene: SyntheticScene, sigma: f64, sweep: f64) -> Self {
        Self { scene, sigma, sweep }
    }

    fn eval(&self, x: Vec3<f64>, d: Vec3<f64>) -> FieldOutput<f64> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.scene.primitives.iter().enumerate() {
            let Some((t0, t1)) = p.shape.line_interval(x, d) else { continue };
            let touches = if self.sweep > 0.0 { t0 <= 0.0 && t1 >= -self.sweep } else { p.shape.contains(x) };
            if touches && best.is_none_or(|(_, t)| t0 < t) {
                best = Some((i, t0));
            }
        }
        match best {
            None => FieldOutput::empty(),
            Some((i, t0)) => {
                let prim = &self.scene.primitives[i];
                let p = x + d * t0;
                let color = self.scene.shade(&prim.albedo, p, prim.shape.normal_at(p));
                FieldOutput { color, density: self.sigma }
            }
        }
    }
}

impl<T: Real> RadianceField<T> for SceneField {
    fn query(&self, x: Vec3<T>, d: Vec3<T>) -> FieldOutput<T> {
        let out = self.eval(x.cast(), d.cast());
        FieldOutput { color: out.color.cast(), density: T::lit(out.density) }
    }

    /// Piecewise constant, so zero almost everywhere.
    fn density_spatial_gradient(&self, _x: Vec3<T>) -> Vec3<T> {
        Vec3::zero()
    }

    fn bounds(&self) -> Option<Aabb<T>> {
        let b = self.scene.bounds;
        // Swept density reaches `sweep` beyond the primitives.
        let pad = Vec3::splat(self.sweep);
        Some(Aabb { min: (b.min - pad).cast(), max: (b.max + pad).cast() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray<f64> {
        Ray::new(Vec3::from_array(o), Vec3::from_array(d).normalize(), 0.0, 100.0).unwrap()
    }

    fn plane_scene(albedo: f64) -> SyntheticScene {
        SyntheticScene {
            primitives: vec![Primitive {
                shape: Shape::Box(aabb([-1.0, -1.0, 2.0], [1.0, 1.0, 3.0])),
                albedo: Albedo::Constant(Vec3::splat(albedo)),
            }],
            light: Vec3::new(0.0, 0.0, -1.0),
            intensity: 1.0,
            ambient: 0.0,
            background: Vec3::new(0.1, 0.2, 0.3),
            bounds: aabb([-1.0, -1.0, 2.0], [1.0, 1.0, 3.0]),
        }
    }

    #[test]
    fn miss_returns_background() {
        let s = plane_scene(0.5);
        let r = s.trace(&ray([0.0, 0.0, 0.0], [0.0, 1.0, 0.0]));
        assert!(!r.hit);
        assert_eq!(r.color, s.background);
        assert_eq!((r.depth, r.normal), (0.0, Vec3::zero()));
    }

    #[test]
    fn face_on_lambertian_plane() {
        let r = plane_scene(0.5).trace(&ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]));
        assert!(r.hit);
        assert_eq!(r.color, Vec3::splat(0.5));
        assert_eq!(r.depth, 2.0);
        assert_eq!(r.normal, Vec3::new(0.0, 0.0, -1.0));
    }

    fn bisect_entry(shape: &Shape, r: &Ray<f64>, mut lo: f64, mut hi: f64) -> f64 {
        // lo outside, hi inside.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if shape.contains(r.at(mid)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn sphere_root_matches_bisection() {
        let shape = Shape::Sphere { center: Vec3::new(0.3, -0.2, 4.0), radius: 0.9 };
        let s = SyntheticScene {
            primitives: vec![Primitive { shape, albedo: Albedo::Constant(Vec3::splat(1.0)) }],
            ..plane_scene(1.0)
        };
        for (dx, dy) in [(0.0, 0.0), (0.1, -0.05), (0.2, 0.1), (-0.05, -0.2)] {
            let r = ray([0.0, 0.0, 0.0], [0.3 + dx, -0.2 + dy, 4.0]);
            let hit = s.trace(&r);
            assert!(hit.hit);
            let oracle = bisect_entry(&shape, &r, 0.0, hit.depth + 0.5);
            assert!((hit.depth - oracle).abs() < 1e-9, "{} vs {oracle}", hit.depth);
            assert!((hit.normal.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn default_scenes_are_valid() {
        box_on_table().validate().unwrap();
        two_object().validate().unwrap();
    }

    #[test]
    fn split_spreads_training_views() {
        assert_eq!(split_views(8, 3).unwrap(), (vec![0, 4, 7], vec![1, 2, 3, 5, 6]));
        assert_eq!(split_views(5, 1).unwrap().0, vec![2]);
        assert!(split_views(3, 4).is_err());
    }

    #[test]
    fn checker_alternates_across_cells() {
        let a = Albedo::Checker { a: Vec3::splat(1.0), b: Vec3::zero(), size: 0.5 };
        assert_eq!(a.at(Vec3::new(0.1, 0.1, 0.1)), Vec3::splat(1.0));
        assert_eq!(a.at(Vec3::new(0.6, 0.1, 0.1)), Vec3::zero());
        assert_eq!(a.at(Vec3::new(-0.1, 0.1, 0.1)), Vec3::zero());
    }

    #[test]
    fn scene_field_is_empty_outside_and_dense_inside() {
        let f = SceneField::new(plane_scene(0.5), 1e5, 0.0);
        let d = Vec3::new(0.0, 0.0, 1.0);
        let out: FieldOutput<f64> = f.query(Vec3::new(0.0, 0.0, 1.0), d);
        assert_eq!(out.density, 0.0);
        let out: FieldOutput<f64> = f.query(Vec3::new(0.0, 0.0, 2.5), d);
        assert_eq!(out.density, 1e5);
        assert_eq!(out.color, Vec3::splat(0.5));
    }
}
