//! Cameras, rays and pixel-patch addressing.
//!
//! Camera frames follow the right-down-forward convention: image x grows to
//! the right, image y grows downward and the camera looks along its local +z.
//! Pixel `(u, v)` is sampled through its center `(u + 0.5, v + 0.5)`.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub, SubAssign};

use crate::edgemap::EdgeIndicatorMap;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    #[inline]
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn splat(v: T) -> Self {
        Self::new(v, v, v)
    }

    #[inline]
    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction; the zero vector maps to itself.
    #[inline]
    pub fn normalize(self) -> Self {
        let n = self.norm();
        if n > T::zero() {
            self * (T::one() / n)
        } else {
            self
        }
    }

    #[inline]
    pub fn mul_elem(self, o: Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn map(self, f: impl Fn(T) -> T) -> Self {
        Self::new(f(self.x), f(self.y), f(self.z))
    }

    #[inline]
    pub fn max_abs(self) -> T {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> SubAssign for Vec3<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        self.x -= o.x;
        self.y -= o.y;
        self.z -= o.z;
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    #[inline]
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T> {
    pub rows: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { rows: [[o, z, z], [z, o, z], [z, z, o]] }
    }

    /// Builds a matrix whose columns are `a`, `b`, `c`.
    pub fn from_columns(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Self {
        Self { rows: [[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]] }
    }

    pub fn transpose(&self) -> Self {
        let r = &self.rows;
        Self {
            rows: [
                [r[0][0], r[1][0], r[2][0]],
                [r[0][1], r[1][1], r[2][1]],
                [r[0][2], r[1][2], r[2][2]],
            ],
        }
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let r = &self.rows;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut rows = [[T::zero(); 3]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.rows[i][k] * o.rows[k][j]).sum();
            }
        }
        Self { rows }
    }

    pub fn determinant(&self) -> T {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn cast<U: Real>(&self) -> Mat3<U> {
        let mut rows = [[U::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rows[i][j] = U::lit(self.rows[i][j].to_f64_lossy());
            }
        }
        Mat3 { rows }
    }
}

/// Axis-aligned box `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Vec3<T>, max: Vec3<T>) -> Result<Self> {
        if !(max.x > min.x && max.y > min.y && max.z > min.z) {
            return Err(Error::InputDomain(format!(
                "bounding box needs positive extent on every axis (min {min:?}, max {max:?})"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> T {
        self.extent().norm()
    }

    pub fn center(&self) -> Vec3<T> {
        (self.min + self.max) * T::lit(0.5)
    }

    #[inline]
    pub fn contains(&self, p: Vec3<T>) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Parametric interval `[t0, t1]` where `origin + t·dir` lies inside the box.
    pub fn ray_interval(&self, origin: Vec3<T>, dir: Vec3<T>) -> Option<(T, T)> {
        let mut t0 = T::neg_infinity();
        let mut t1 = T::infinity();
        for a in 0..3 {
            let (o, d) = (origin[a], dir[a]);
            let (lo, hi) = (self.min[a], self.max[a]);
            if d == T::zero() {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = T::one() / d;
            let (mut ta, mut tb) = ((lo - o) * inv, (hi - o) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }

    pub fn cast<U: Real>(&self) -> Aabb<U> {
        Aabb { min: self.min.cast(), max: self.max.cast() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    /// Unit length.
    pub direction: Vec3<T>,
    pub t_near: T,
    pub t_far: T,
}

impl<T: Real> Ray<T> {
    pub fn new(origin: Vec3<T>, direction: Vec3<T>, t_near: T, t_far: T) -> Result<Self> {
        if (direction.norm() - T::one()).abs() > T::lit(1e-6) {
            return Err(Error::InputDomain("ray direction must be unit length".into()));
        }
        if !(t_near < t_far) {
            return Err(Error::InputDomain("ray needs t_near < t_far".into()));
        }
        Ok(Self { origin, direction, t_near, t_far })
    }

    #[inline]
    pub fn at(&self, t: T) -> Vec3<T> {
        self.origin + self.direction * t
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zero() }
    }

    /// Pose at `eye` looking at `target`, with `up` giving the world's upward direction.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(up);
        if right.norm() < T::lit(1e-9) {
            return Err(Error::InputDomain("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(right);
        Ok(Self { rotation: Mat3::from_columns(right, down, forward), translation: eye })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera<T> {
    pub width: usize,
    pub height: usize,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub pose: Pose<T>,
    pub near: T,
    pub far: T,
}

impl<T: Real> Camera<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        pose: Pose<T>,
        near: T,
        far: T,
    ) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InputDomain(format!("camera must be at least 2x2, got {width}x{height}")));
        }
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(Error::InputDomain("focal lengths must be positive".into()));
        }
        if !(T::zero() < near && near < far) {
            return Err(Error::InputDomain("camera needs 0 < near < far".into()));
        }
        let r = pose.rotation;
        let residual = r.transpose().mul_mat(&r);
        let id = Mat3::<T>::identity();
        let mut worst = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((residual.rows[i][j] - id.rows[i][j]).abs());
            }
        }
        let tol = T::lit(1e-9).max(T::epsilon() * T::lit(64.0));
        if worst > tol || (r.determinant() - T::one()).abs() > tol {
            return Err(Error::InputDomain("camera rotation is not a proper orthonormal matrix".into()));
        }
        Ok(Self { width, height, fx, fy, cx, cy, pose, near, far })
    }

    pub fn position(&self) -> Vec3<T> {
        self.pose.translation
    }

    /// Ray through the center of pixel column `u`, row `v`.
    pub fn pixel_to_ray(&self, u: usize, v: usize) -> Result<Ray<T>> {
        if u >= self.width || v >= self.height {
            return Err(Error::InputDomain(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.ray_through(T::of_usize(u) + T::lit(0.5), T::of_usize(v) + T::lit(0.5)))
    }

    /// Ray through continuous image coordinates `(px, py)`.
    pub fn ray_through(&self, px: T, py: T) -> Ray<T> {
        let local = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, T::one());
        let direction = self.pose.rotation.mul_vec(local).normalize();
        Ray { origin: self.pose.translation, direction, t_near: self.near, t_far: self.far }
    }

    /// Continuous image coordinates of a world point, with its camera-space depth.
    pub fn project(&self, p: Vec3<T>) -> (T, T, T) {
        let local = self.pose.rotation.transpose().mul_vec(p - self.pose.translation);
        (self.fx * local.x / local.z + self.cx, self.fy * local.y / local.z + self.cy, local.z)
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            width: self.width,
            height: self.height,
            fx: U::lit(self.fx.to_f64_lossy()),
            fy: U::lit(self.fy.to_f64_lossy()),
            cx: U::lit(self.cx.to_f64_lossy()),
            cy: U::lit(self.cy.to_f64_lossy()),
            pose: Pose { rotation: self.pose.rotation.cast(), translation: self.pose.translation.cast() },
            near: U::lit(self.near.to_f64_lossy()),
            far: U::lit(self.far.to_f64_lossy()),
        }
    }
}

/// A 2×2 pixel block in one training image, with its edge indicators.
///
/// Members are ordered top-left, top-right, bottom-left, bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelPatch {
    pub image_index: usize,
    /// `(column, row)` of each member.
    pub pixels: [(usize, usize); 4],
    /// 1 marks a regularizable non-edge pixel, 0 an edge pixel.
    pub indicators: [u8; 4],
}

impl PixelPatch {
    pub fn top_left(&self) -> (usize, usize) {
        self.pixels[0]
    }
}

/// Builds the 2×2 patch whose top-left member is `top_left = (column, row)`.
pub fn make_patch(
    edge_map: &EdgeIndicatorMap,
    image_index: usize,
    top_left: (usize, usize),
) -> Result<PixelPatch> {
    let (u, v) = top_left;
    if u + 1 >= edge_map.width() || v + 1 >= edge_map.height() {
        return Err(Error::InputDomain(format!(
            "2x2 patch at ({u}, {v}) exceeds {}x{} image",
            edge_map.width(),
            edge_map.height()
        )));
    }
    let pixels = [(u, v), (u + 1, v), (u, v + 1), (u + 1, v + 1)];
    let indicators = pixels.map(|(x, y)| edge_map.get(x, y));
    Ok(PixelPatch { image_index, pixels, indicators })
}
