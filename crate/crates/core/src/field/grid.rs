//! Dense voxel grid with trilinear interpolation.
//!
//! Each vertex stores four raw values `[σ, r, g, b]`; density is
//! `softplus(raw σ)` and color is `sigmoid(raw rgb)`.

use crate::error::{Error, Result};
use crate::field::FieldOutput;
use crate::geometry::{Aabb, Vec3};
use crate::scalar::{sigmoid, softplus, Real};

pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec<T> {
    /// Vertex count per axis (x, y, z).
    pub resolution: [usize; 3],
    pub bounds: Aabb<T>,
}

/// The eight corners of the cell containing a point, with their weights.
struct Cell<T> {
    /// Offset of each corner's first channel in the parameter vector.
    offsets: [usize; 8],
    weights: [T; 8],
    /// World-space gradient of each corner weight.
    weight_grads: [Vec3<T>; 8],
}

impl<T: Real> GridSpec<T> {
    pub fn new(resolution: [usize; 3], bounds: Aabb<T>) -> Result<Self> {
        let s = Self { resolution, bounds };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&n| n < 2) {
            return Err(Error::InputDomain(format!("grid resolution {:?} must be >= 2 per axis", self.resolution)));
        }
        Aabb::new(self.bounds.min, self.bounds.max)?;
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.vertex_count() * CHANNELS
    }

    /// Offset of vertex `(i, j, k)`'s first channel.
    #[inline]
    pub fn vertex_offset(&self, i: usize, j: usize, k: usize) -> usize {
        let [nx, ny, _] = self.resolution;
        ((k * ny + j) * nx + i) * CHANNELS
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        let e = self.bounds.extent();
        let [nx, ny, nz] = self.resolution;
        let frac = |idx: usize, n: usize| T::of_usize(idx) / T::of_usize(n - 1);
        self.bounds.min + Vec3::new(e.x * frac(i, nx), e.y * frac(j, ny), e.z * frac(k, nz))
    }

    #[inline]
    fn locate(&self, x: Vec3<T>) -> Option<Cell<T>> {
        if !self.bounds.contains(x) {
            return None;
        }
        let ext = self.bounds.extent();
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        let mut scale = [T::zero(); 3];
        for a in 0..3 {
            let cells = self.resolution[a] - 1;
            scale[a] = T::of_usize(cells) / ext[a];
            let f = (x[a] - self.bounds.min[a]) * scale[a];
            let i = f.floor().to_usize().unwrap_or(0).min(cells - 1);
            base[a] = i;
            frac[a] = f - T::of_usize(i);
        }
        let mut offsets = [0; 8];
        let mut weights = [T::zero(); 8];
        let mut weight_grads = [Vec3::zero(); 8];
        for c in 0..8 {
            let (ox, oy, oz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let w1 = |o: usize, f: T| if o == 1 { f } else { T::one() - f };
            let d1 = |o: usize| if o == 1 { T::one() } else { -T::one() };
            let (wx, wy, wz) = (w1(ox, frac[0]), w1(oy, frac[1]), w1(oz, frac[2]));
            offsets[c] = self.vertex_offset(base[0] + ox, base[1] + oy, base[2] + oz);
            weights[c] = wx * wy * wz;
            weight_grads[c] =
                Vec3::new(d1(ox) * scale[0] * wy * wz, d1(oy) * scale[1] * wx * wz, d1(oz) * scale[2] * wx * wy);
        }
        Some(Cell { offsets, weights, weight_grads })
    }

    #[inline]
    fn raw(cell: &Cell<T>, values: &[T]) -> [T; CHANNELS] {
        let mut raw = [T::zero(); CHANNELS];
        for c in 0..8 {
            let w = cell.weights[c];
            let v = &values[cell.offsets[c]..cell.offsets[c] + CHANNELS];
            for ch in 0..CHANNELS {
                raw[ch] += w * v[ch];
            }
        }
        raw
    }

    #[inline]
    fn raw_density_gradient(cell: &Cell<T>, values: &[T]) -> Vec3<T> {
        let mut g = Vec3::zero();
        for c in 0..8 {
            g += cell.weight_grads[c] * values[cell.offsets[c]];
        }
        g
    }

    pub fn query(&self, values: &[T], x: Vec3<T>) -> FieldOutput<T> {
        self.query_full(values, x, false).0
    }

    pub fn density_gradient(&self, values: &[T], x: Vec3<T>) -> Vec3<T> {
        self.query_full(values, x, true).1.unwrap_or_else(Vec3::zero)
    }

    pub fn query_full(&self, values: &[T], x: Vec3<T>, with_gradient: bool) -> (FieldOutput<T>, Option<Vec3<T>>) {
        let Some(cell) = self.locate(x) else {
            return (FieldOutput::empty(), with_gradient.then(Vec3::zero));
        };
        let raw = Self::raw(&cell, values);
        let out = FieldOutput {
            density: softplus(raw[0]),
            color: Vec3::new(sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])),
        };
        let grad = with_gradient.then(|| Self::raw_density_gradient(&cell, values) * sigmoid(raw[0]));
        (out, grad)
    }

    /// Accumulates the parameter gradient of
    /// `upstream · [r, g, b, σ] + upstream_gradient · ∇σ`.
    pub fn backward(
        &self,
        values: &[T],
        x: Vec3<T>,
        upstream: [T; 4],
        upstream_gradient: Option<Vec3<T>>,
        grad: &mut [T],
    ) {
        let Some(cell) = self.locate(x) else { return };
        let raw = Self::raw(&cell, values);
        let s = sigmoid(raw[0]);
        // Adjoint of each raw channel from the output term.
        let mut draw = [upstream[3] * s, T::zero(), T::zero(), T::zero()];
        for ch in 1..CHANNELS {
            let c = sigmoid(raw[ch]);
            draw[ch] = upstream[ch - 1] * c * (T::one() - c);
        }
        let gradient_term = upstream_gradient.map(|g| {
            let g_dot_raw = g.dot(Self::raw_density_gradient(&cell, values));
            (g, s * (T::one() - s) * g_dot_raw)
        });
        for c in 0..8 {
            let o = cell.offsets[c];
            let w = cell.weights[c];
            for ch in 0..CHANNELS {
                grad[o + ch] += w * draw[ch];
            }
            if let Some((g, curvature)) = gradient_term {
                grad[o] += curvature * w + s * g.dot(cell.weight_grads[c]);
            }
        }
    }
}
