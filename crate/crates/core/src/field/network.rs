//! Small coordinate network: frequency positional encoding of the
//! normalized position, a ReLU trunk, a density head and a color head that
//! optionally sees an encoding of the view direction.
//!
//! Normals come from central differences of the density with step
//! `1e-3 × scene diagonal`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{FieldOutput, GRID_INIT_DENSITY};
use crate::geometry::{Aabb, Vec3};
use crate::scalar::{sigmoid, softplus, Real};

/// Frequency bands used for the view-direction encoding.
pub const DIRECTION_FREQS: usize = 2;

/// Finite-difference step for normals, relative to the bounds' diagonal.
pub const NORMAL_STEP_REL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<T> {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Frequency bands of the position encoding.
    pub num_freqs: usize,
    pub use_directions: bool,
    /// Positions are normalized to `[-1, 1]` over this box; outside it the field is empty.
    pub bounds: Aabb<T>,
}

/// Offsets of one dense layer inside the parameter vector.
#[derive(Debug, Clone, Copy)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

impl Dense {
    fn end(&self) -> usize {
        self.bias + self.outputs
    }
}

struct Layout {
    trunk: Vec<Dense>,
    density: Dense,
    color: Dense,
}

/// Forward activations kept for the backward pass.
struct Tape<T> {
    /// `acts[0]` is the encoded input, `acts[l]` the post-ReLU output of trunk layer `l`.
    acts: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    dir_features: Vec<T>,
    raw_density: T,
    raw_color: [T; 3],
}

impl<T: Real> NetworkSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::InputDomain("network needs at least one hidden layer of positive width".into()));
        }
        Aabb::new(self.bounds.min, self.bounds.max)?;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        3 + 6 * self.num_freqs
    }

    pub fn direction_dim(&self) -> usize {
        if self.use_directions {
            3 + 6 * DIRECTION_FREQS
        } else {
            0
        }
    }

    fn layout(&self) -> Layout {
        let mut next = 0;
        let mut dense = |inputs: usize, outputs: usize| {
            let d = Dense { inputs, outputs, weights: next, bias: next + inputs * outputs };
            next = d.end();
            d
        };
        let w = self.hidden_width;
        let mut trunk = vec![dense(self.input_dim(), w)];
        for _ in 1..self.hidden_layers {
            trunk.push(dense(w, w));
        }
        let density = dense(w, 1);
        let color = dense(w + self.direction_dim(), 3);
        Layout { trunk, density, color }
    }

    pub fn param_count(&self) -> usize {
        self.layout().color.end()
    }

    pub fn normal_step(&self) -> T {
        T::lit(NORMAL_STEP_REL) * self.bounds.diagonal()
    }

    pub(crate) fn init_values<R: Rng>(&self, rng: &mut R) -> Vec<T> {
        let layout = self.layout();
        let mut values = vec![T::zero(); layout.color.end()];
        let mut fill = |d: &Dense| {
            let s = (6.0 / (d.inputs + d.outputs) as f64).sqrt();
            for v in &mut values[d.weights..d.bias] {
                *v = T::lit(rng.gen_range(-s..s));
            }
        };
        for d in &layout.trunk {
            fill(d);
        }
        fill(&layout.density);
        fill(&layout.color);
        values[layout.density.bias] = T::lit(GRID_INIT_DENSITY);
        values
    }

    fn encode(v: Vec3<T>, freqs: usize, out: &mut Vec<T>) {
        out.extend_from_slice(&v.to_array());
        let mut scale = T::PI();
        for _ in 0..freqs {
            for a in 0..3 {
                let arg = scale * v[a];
                out.push(arg.sin());
                out.push(arg.cos());
            }
            scale = scale + scale;
        }
    }

    fn normalized(&self, x: Vec3<T>) -> Vec3<T> {
        let e = self.bounds.extent();
        let two = T::lit(2.0);
        Vec3::new(
            two * (x.x - self.bounds.min.x) / e.x - T::one(),
            two * (x.y - self.bounds.min.y) / e.y - T::one(),
            two * (x.z - self.bounds.min.z) / e.z - T::one(),
        )
    }

    fn affine(values: &[T], d: &Dense, input: &[T], out: &mut Vec<T>) {
        out.clear();
        for o in 0..d.outputs {
            let row = &values[d.weights + o * d.inputs..d.weights + (o + 1) * d.inputs];
            let mut acc = values[d.bias + o];
            for (w, a) in row.iter().zip(input) {
                acc += *w * *a;
            }
            out.push(acc);
        }
    }

    fn forward(&self, values: &[T], x: Vec3<T>, d: Vec3<T>, need_color: bool) -> Tape<T> {
        let layout = self.layout();
        let mut input = Vec::with_capacity(self.input_dim());
        Self::encode(self.normalized(x), self.num_freqs, &mut input);
        let mut acts = vec![input];
        let mut pre = Vec::with_capacity(layout.trunk.len());
        for dense in &layout.trunk {
            let mut z = Vec::with_capacity(dense.outputs);
            Self::affine(values, dense, acts.last().unwrap(), &mut z);
            acts.push(z.iter().map(|&v| v.max(T::zero())).collect());
            pre.push(z);
        }
        let hidden = acts.last().unwrap();
        let mut raw = Vec::with_capacity(3);
        Self::affine(values, &layout.density, hidden, &mut raw);
        let raw_density = raw[0];
        let mut dir_features = Vec::new();
        let mut raw_color = [T::zero(); 3];
        if need_color {
            if self.use_directions {
                Self::encode(d, DIRECTION_FREQS, &mut dir_features);
            }
            let mut head_in = hidden.clone();
            head_in.extend_from_slice(&dir_features);
            Self::affine(values, &layout.color, &head_in, &mut raw);
            raw_color = [raw[0], raw[1], raw[2]];
        }
        Tape { acts, pre, dir_features, raw_density, raw_color }
    }

    pub fn query(&self, values: &[T], x: Vec3<T>, d: Vec3<T>) -> FieldOutput<T> {
        if !self.bounds.contains(x) {
            return FieldOutput::empty();
        }
        let t = self.forward(values, x, d, true);
        FieldOutput { density: softplus(t.raw_density), color: Vec3::from_array(t.raw_color.map(sigmoid)) }
    }

    fn density(&self, values: &[T], x: Vec3<T>) -> T {
        if !self.bounds.contains(x) {
            return T::zero();
        }
        softplus(self.forward(values, x, Vec3::zero(), false).raw_density)
    }

    pub fn density_gradient(&self, values: &[T], x: Vec3<T>) -> Vec3<T> {
        if !self.bounds.contains(x) {
            return Vec3::zero();
        }
        let h = self.normal_step();
        let inv = T::one() / (h + h);
        let mut g = [T::zero(); 3];
        for (a, ga) in g.iter_mut().enumerate() {
            let mut e = [T::zero(); 3];
            e[a] = h;
            let e = Vec3::from_array(e);
            *ga = (self.density(values, x + e) - self.density(values, x - e)) * inv;
        }
        Vec3::from_array(g)
    }

    pub fn backward(&self, values: &[T], x: Vec3<T>, d: Vec3<T>, upstream: [T; 4], grad: &mut [T]) {
        if !self.bounds.contains(x) {
            return;
        }
        let need_color = upstream[..3].iter().any(|&u| u != T::zero());
        let layout = self.layout();
        let tape = self.forward(values, x, d, need_color);
        let w = self.hidden_width;
        let mut d_hidden = vec![T::zero(); w];

        let d_raw_density = upstream[3] * sigmoid(tape.raw_density);
        let hidden = tape.acts.last().unwrap();
        {
            let dn = &layout.density;
            for j in 0..w {
                grad[dn.weights + j] += d_raw_density * hidden[j];
                d_hidden[j] += d_raw_density * values[dn.weights + j];
            }
            grad[dn.bias] += d_raw_density;
        }
        if need_color {
            let dc = &layout.color;
            for i in 0..3 {
                let c = sigmoid(tape.raw_color[i]);
                let dr = upstream[i] * c * (T::one() - c);
                let row = dc.weights + i * dc.inputs;
                for j in 0..w {
                    grad[row + j] += dr * hidden[j];
                    d_hidden[j] += dr * values[row + j];
                }
                for (k, f) in tape.dir_features.iter().enumerate() {
                    grad[row + w + k] += dr * *f;
                }
                grad[dc.bias + i] += dr;
            }
        }

        let mut d_out = d_hidden;
        for (l, dense) in layout.trunk.iter().enumerate().rev() {
            let input = &tape.acts[l];
            let dz: Vec<T> =
                d_out.iter().zip(&tape.pre[l]).map(|(&g, &z)| if z > T::zero() { g } else { T::zero() }).collect();
            let mut d_in = vec![T::zero(); dense.inputs];
            for (o, &g) in dz.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let row = dense.weights + o * dense.inputs;
                for (j, &a) in input.iter().enumerate() {
                    grad[row + j] += g * a;
                    d_in[j] += g * values[row + j];
                }
                grad[dense.bias + o] += g;
            }
            d_out = d_in;
        }
    }

    /// Adjoint of the central-difference stencil in [`Self::density_gradient`].
    pub fn density_gradient_backward(&self, values: &[T], x: Vec3<T>, upstream: Vec3<T>, grad: &mut [T]) {
        if !self.bounds.contains(x) {
            return;
        }
        let h = self.normal_step();
        let inv = T::one() / (h + h);
        let zero = Vec3::zero();
        for a in 0..3 {
            let u = upstream[a] * inv;
            if u == T::zero() {
                continue;
            }
            let mut e = [T::zero(); 3];
            e[a] = h;
            let e = Vec3::from_array(e);
            for (p, s) in [(x + e, u), (x - e, -u)] {
                if self.bounds.contains(p) {
                    self.backward(values, p, zero, [T::zero(), T::zero(), T::zero(), s], grad);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{DifferentiableField, FieldLayout, FieldParams, RadianceField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(use_directions: bool) -> NetworkSpec<f64> {
        NetworkSpec {
            hidden_layers: 3,
            hidden_width: 16,
            num_freqs: 3,
            use_directions,
            bounds: Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)).unwrap(),
        }
    }

    #[test]
    fn parameter_count_matches_layout() {
        let s = spec(true);
        let din = 3 + 18;
        let ddir = 3 + 12;
        let expect = (din * 16 + 16) + 2 * (16 * 16 + 16) + (16 + 1) + (3 * (16 + ddir) + 3);
        assert_eq!(s.param_count(), expect);
        let f = FieldParams::new_network(s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.param_count(), expect);
    }

    #[test]
    fn outputs_respect_ranges_and_bounds() {
        let f = FieldParams::new_network(spec(false), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = f.query(Vec3::new(0.2, -0.3, 0.5), Vec3::new(0.0, 0.0, 1.0));
        assert!(out.density >= 0.0);
        assert!(out.color.to_array().iter().all(|c| (0.0..=1.0).contains(c)));
        assert_eq!(f.query(Vec3::splat(1.5), Vec3::new(0.0, 0.0, 1.0)), FieldOutput::empty());
    }

    #[test]
    fn param_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..6 {
            let f = FieldParams::new_network(spec(trial % 2 == 0), &mut rng).unwrap();
            let x = Vec3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
            let d = Vec3::new(0.6, 0.0, 0.8);
            let up = [0.3, -0.7, 0.2, 1.1];
            let upg = Vec3::new(0.5, -0.2, 0.9);
            let objective = |p: &FieldParams<f64>| {
                let o = p.query(x, d);
                let g = p.density_spatial_gradient(x);
                up[0] * o.color.x + up[1] * o.color.y + up[2] * o.color.z + up[3] * o.density + upg.dot(g)
            };
            let mut grad = vec![0.0; f.param_count()];
            f.backward_full(x, d, up, Some(upg), &mut grad);
            let dir: Vec<f64> = (0..f.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = 1e-6;
            let shifted = |s: f64| {
                let mut p = f.clone();
                for (v, dv) in p.values.iter_mut().zip(&dir) {
                    *v += s * dv;
                }
                objective(&p)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let analytic: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-9);
            assert!(rel < 1e-5, "trial {trial}: fd {fd} analytic {analytic}");
        }
    }

    #[test]
    fn density_gradient_uses_central_stencil() {
        let f = FieldParams::new_network(spec(false), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let FieldLayout::Network(s) = &f.layout else { unreachable!() };
        let h = s.normal_step();
        assert!((h - 1e-3 * 12f64.sqrt()).abs() < 1e-15);
        let x = Vec3::new(0.1, 0.2, -0.3);
        let g = f.density_spatial_gradient(x);
        let d = Vec3::new(0.0, 0.0, 1.0);
        let fd_y = (f.query(x + Vec3::new(0.0, h, 0.0), d).density - f.query(x - Vec3::new(0.0, h, 0.0), d).density)
            / (2.0 * h);
        assert!((g.y - fd_y).abs() < 1e-12);
    }
}
