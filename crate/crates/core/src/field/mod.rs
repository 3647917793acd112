//! Radiance fields: `(x, d) → (c, σ)` with parameter gradients and the
//! spatial density gradient used for normals.

mod checkpoint;
mod grid;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grid::GridSpec;
pub use network::NetworkSpec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::scalar::Real;

/// Raw density every grid vertex starts from (nearly transparent).
pub const GRID_INIT_DENSITY: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput<T> {
    /// RGB in `[0, 1]`.
    pub color: Vec3<T>,
    /// Non-negative density per world unit.
    pub density: T,
}

impl<T: Real> FieldOutput<T> {
    pub fn empty() -> Self {
        Self { color: Vec3::zero(), density: T::zero() }
    }
}

/// Anything that can be volume rendered.
pub trait RadianceField<T: Real>: Sync {
    fn query(&self, x: Vec3<T>, d: Vec3<T>) -> FieldOutput<T>;

    /// `∇σ(x)`; zero outside the field's support.
    fn density_spatial_gradient(&self, x: Vec3<T>) -> Vec3<T>;

    /// Region outside of which the field is empty, if bounded.
    fn bounds(&self) -> Option<Aabb<T>> {
        None
    }

    /// Output and, when `with_gradient`, `∇σ` at the same point.
    fn query_full(&self, x: Vec3<T>, d: Vec3<T>, with_gradient: bool) -> (FieldOutput<T>, Option<Vec3<T>>) {
        let out = self.query(x, d);
        (out, with_gradient.then(|| self.density_spatial_gradient(x)))
    }
}

/// A field with a flat parameter vector and exact reverse-mode derivatives.
pub trait DifferentiableField<T: Real>: RadianceField<T> {
    fn param_count(&self) -> usize;

    /// Accumulates `∂(upstream · [r, g, b, σ])/∂Θ` into `grad`.
    fn query_with_param_gradient(&self, x: Vec3<T>, d: Vec3<T>, upstream: [T; 4], grad: &mut [T]);

    /// Accumulates `∂(upstream · ∇σ(x))/∂Θ` into `grad`.
    fn density_gradient_param_backward(&self, x: Vec3<T>, upstream: Vec3<T>, grad: &mut [T]);

    /// Both backward contributions at one point.
    fn backward_full(
        &self,
        x: Vec3<T>,
        d: Vec3<T>,
        upstream: [T; 4],
        upstream_gradient: Option<Vec3<T>>,
        grad: &mut [T],
    ) {
        self.query_with_param_gradient(x, d, upstream, grad);
        if let Some(g) = upstream_gradient {
            self.density_gradient_param_backward(x, g, grad);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldLayout<T> {
    Grid(GridSpec<T>),
    Network(NetworkSpec<T>),
}

impl<T: Real> FieldLayout<T> {
    pub fn bounds(&self) -> Aabb<T> {
        match self {
            FieldLayout::Grid(g) => g.bounds,
            FieldLayout::Network(n) => n.bounds,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            FieldLayout::Grid(g) => g.param_count(),
            FieldLayout::Network(n) => n.param_count(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            FieldLayout::Grid(_) => "grid",
            FieldLayout::Network(_) => "network",
        }
    }

    pub fn cast<U: Real>(&self) -> FieldLayout<U> {
        match self {
            FieldLayout::Grid(g) => FieldLayout::Grid(GridSpec { resolution: g.resolution, bounds: g.bounds.cast() }),
            FieldLayout::Network(n) => FieldLayout::Network(NetworkSpec {
                hidden_layers: n.hidden_layers,
                hidden_width: n.hidden_width,
                num_freqs: n.num_freqs,
                use_directions: n.use_directions,
                bounds: n.bounds.cast(),
            }),
        }
    }
}

/// Parameter vector Θ together with the representation that interprets it.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<T> {
    pub layout: FieldLayout<T>,
    pub values: Vec<T>,
}

impl<T: Real> FieldParams<T> {
    /// Wraps an existing parameter vector after checking its length.
    pub fn from_values(layout: FieldLayout<T>, values: Vec<T>) -> Result<Self> {
        match &layout {
            FieldLayout::Grid(g) => g.validate()?,
            FieldLayout::Network(n) => n.validate()?,
        }
        let expect = layout.param_count();
        if values.len() != expect {
            return Err(Error::InputDomain(format!(
                "{} field expects {expect} parameters, got {}",
                layout.tag(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    /// Voxel grid with raw density `init_density` and mid-gray color everywhere.
    pub fn new_grid(spec: GridSpec<T>, init_density: T) -> Result<Self> {
        spec.validate()?;
        let mut values = vec![T::zero(); spec.param_count()];
        for v in values.chunks_exact_mut(4) {
            v[0] = init_density;
        }
        Ok(Self { layout: FieldLayout::Grid(spec), values })
    }

    /// Coordinate network with Glorot-uniform weights and zero biases.
    pub fn new_network<R: Rng>(spec: NetworkSpec<T>, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let values = spec.init_values(rng);
        Ok(Self { layout: FieldLayout::Network(spec), values })
    }

    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        FieldParams { layout: self.layout.cast(), values: self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }
}

impl<T: Real> RadianceField<T> for FieldParams<T> {
    fn query(&self, x: Vec3<T>, d: Vec3<T>) -> FieldOutput<T> {
        match &self.layout {
            FieldLayout::Grid(g) => g.query(&self.values, x),
            FieldLayout::Network(n) => n.query(&self.values, x, d),
        }
    }

    fn density_spatial_gradient(&self, x: Vec3<T>) -> Vec3<T> {
        match &self.layout {
            FieldLayout::Grid(g) => g.density_gradient(&self.values, x),
            FieldLayout::Network(n) => n.density_gradient(&self.values, x),
        }
    }

    fn bounds(&self) -> Option<Aabb<T>> {
        Some(self.layout.bounds())
    }

    fn query_full(&self, x: Vec3<T>, d: Vec3<T>, with_gradient: bool) -> (FieldOutput<T>, Option<Vec3<T>>) {
        match &self.layout {
            FieldLayout::Grid(g) => g.query_full(&self.values, x, with_gradient),
            FieldLayout::Network(n) => {
                (n.query(&self.values, x, d), with_gradient.then(|| n.density_gradient(&self.values, x)))
            }
        }
    }
}

impl<T: Real> DifferentiableField<T> for FieldParams<T> {
    fn param_count(&self) -> usize {
        self.values.len()
    }

    fn query_with_param_gradient(&self, x: Vec3<T>, d: Vec3<T>, upstream: [T; 4], grad: &mut [T]) {
        match &self.layout {
            FieldLayout::Grid(g) => g.backward(&self.values, x, upstream, None, grad),
            FieldLayout::Network(n) => n.backward(&self.values, x, d, upstream, grad),
        }
    }

    fn density_gradient_param_backward(&self, x: Vec3<T>, upstream: Vec3<T>, grad: &mut [T]) {
        match &self.layout {
            FieldLayout::Grid(g) => g.backward(&self.values, x, [T::zero(); 4], Some(upstream), grad),
            FieldLayout::Network(n) => n.density_gradient_backward(&self.values, x, upstream, grad),
        }
    }

    fn backward_full(
        &self,
        x: Vec3<T>,
        d: Vec3<T>,
        upstream: [T; 4],
        upstream_gradient: Option<Vec3<T>>,
        grad: &mut [T],
    ) {
        match &self.layout {
            FieldLayout::Grid(g) => g.backward(&self.values, x, upstream, upstream_gradient, grad),
            FieldLayout::Network(n) => {
                n.backward(&self.values, x, d, upstream, grad);
                if let Some(u) = upstream_gradient {
                    n.density_gradient_backward(&self.values, x, u, grad);
                }
            }
        }
    }
}
