//! Training configuration, read from TOML with one table per module:
//!
//! ```toml
//! [trainer]
//! iterations = 5000
//! seed = 7
//!
//! [renderer]
//! samples_per_ray = 64
//!
//! [field]
//! kind = "grid"
//! resolution = [48, 48, 48]
//!
//! [reg]
//! lambda2 = 0.1
//!
//! [edges]
//! tau_e = 125.0
//! ```
//!
//! Every key is optional and falls back to its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::edgemap::CannyParams;
use crate::error::{Error, Result};
use crate::eval::SsimParams;
use crate::field::{FieldLayout, GridSpec, NetworkSpec, GRID_INIT_DENSITY};
use crate::geometry::{Aabb, Vec3};
use crate::reg::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub iterations: u64,
    /// Patches per iteration (`M`); each patch contributes 4 rays.
    pub patches_per_iter: usize,
    pub seed: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Fraction of the run over which λ2 and λ3 ramp up linearly from 0.
    pub warmup_fraction: f64,
    /// Write a metrics record every this many iterations (0 disables).
    pub log_every: u64,
    /// Write a numbered checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
    /// Worker count for batch evaluation; results depend on it only
    /// through the fixed chunking.
    pub workers: usize,
    /// Pin the worker count to 1 and drop wall-clock values from the log.
    pub deterministic: bool,
    pub precision: Precision,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            iterations: 5000,
            patches_per_iter: 256,
            seed: 0,
            lr_init: 2e-3,
            lr_final: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_fraction: 0.1,
            log_every: 100,
            checkpoint_every: 0,
            workers: 1,
            deterministic: false,
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererSection {
    /// `K`.
    pub samples_per_ray: usize,
    /// Jitter samples within their bins during training.
    pub stratified: bool,
}

impl Default for RendererSection {
    fn default() -> Self {
        Self { samples_per_ray: 64, stratified: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    #[default]
    Grid,
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub kind: FieldKind,
    pub resolution: [usize; 3],
    pub init_density: f64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub num_freqs: usize,
    pub use_directions: bool,
    /// `[minx, miny, minz, maxx, maxy, maxz]`; defaults to the dataset's bounds.
    pub bounds: Option<[f64; 6]>,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self {
            kind: FieldKind::Grid,
            resolution: [48, 48, 48],
            init_density: GRID_INIT_DENSITY,
            hidden_layers: 3,
            hidden_width: 64,
            num_freqs: 6,
            use_directions: true,
            bounds: None,
        }
    }
}

impl FieldSection {
    pub fn layout(&self, bounds: Aabb<f64>) -> Result<FieldLayout<f64>> {
        Ok(match self.kind {
            FieldKind::Grid => FieldLayout::Grid(GridSpec::new(self.resolution, bounds)?),
            FieldKind::Network => {
                let spec = NetworkSpec {
                    hidden_layers: self.hidden_layers,
                    hidden_width: self.hidden_width,
                    num_freqs: self.num_freqs,
                    use_directions: self.use_directions,
                    bounds,
                };
                spec.validate()?;
                FieldLayout::Network(spec)
            }
        })
    }

    pub fn explicit_bounds(&self) -> Result<Option<Aabb<f64>>> {
        self.bounds
            .map(|b| Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5])))
            .transpose()
            .map_err(|e| Error::Config(format!("field.bounds: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EdgeSource {
    /// External maps from `edges/` when present, Canny otherwise.
    #[default]
    Auto,
    Canny,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgesSection {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
    pub tau_e: f64,
    pub source: EdgeSource,
    /// With `false` every pixel counts as non-edge (global smoothing).
    pub gating: bool,
}

impl Default for EdgesSection {
    fn default() -> Self {
        let c = CannyParams::default();
        Self { sigma: c.sigma, low: c.low, high: c.high, tau_e: 125.0, source: EdgeSource::Auto, gating: true }
    }
}

impl EdgesSection {
    pub fn canny(&self) -> CannyParams {
        CannyParams { sigma: self.sigma, low: self.low, high: self.high }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples_per_ray: usize,
    pub discontinuity_fraction: f64,
    pub ssim: SsimParams,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = crate::eval::EvalOptions::default();
        Self { samples_per_ray: d.samples_per_ray, discontinuity_fraction: d.discontinuity_fraction, ssim: d.ssim }
    }
}

impl EvalSection {
    pub fn options(&self) -> crate::eval::EvalOptions {
        crate::eval::EvalOptions {
            samples_per_ray: self.samples_per_ray,
            discontinuity_fraction: self.discontinuity_fraction,
            ssim: self.ssim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub trainer: TrainerSection,
    pub renderer: RendererSection,
    pub field: FieldSection,
    pub reg: LossWeights,
    pub edges: EdgesSection,
    pub eval: EvalSection,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(t.lr_init >= 0.0 && t.lr_final >= 0.0 && t.lr_init.is_finite() && t.lr_final.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(t.epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if !(0.0..=1.0).contains(&t.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if t.patches_per_iter == 0 {
            return bad("patches_per_iter must be at least 1");
        }
        if self.renderer.samples_per_ray < 2 {
            return bad("samples_per_ray must be at least 2");
        }
        if self.eval.samples_per_ray < 2 {
            return bad("eval.samples_per_ray must be at least 2");
        }
        if !(self.edges.sigma > 0.0 && self.edges.low <= self.edges.high) {
            return bad("edges: need sigma > 0 and low <= high");
        }
        self.reg.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.field.explicit_bounds()?;
        Ok(())
    }

    /// Worker count after the deterministic override.
    pub fn workers(&self) -> usize {
        if self.trainer.deterministic {
            1
        } else {
            self.trainer.workers.max(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = TrainConfig::from_toml("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.reg, LossWeights::default());
        assert_eq!(cfg.edges.tau_e, 125.0);
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = TrainConfig::default();
        cfg.trainer.iterations = 12;
        cfg.field.kind = FieldKind::Network;
        cfg.field.bounds = Some([-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        cfg.reg.lambda3 = 0.0;
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [
            "[reg]\ntau1 = -1.0",
            "[trainer]\nbeta1 = 1.0",
            "[renderer]\nsamples_per_ray = 1",
            "[trainer]\nunknown_key = 3",
            "[field]\nbounds = [0, 0, 0, 0, 1, 1]",
        ] {
            assert!(matches!(TrainConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }
}
