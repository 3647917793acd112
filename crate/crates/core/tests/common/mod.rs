#![allow(dead_code)]

use std::path::Path;

use edgefield::geometry::{Aabb, Vec3};
use edgefield::synthgen::{self, Albedo, CameraRig, GenerateSpec, Primitive, Shape, SyntheticScene};
use edgefield::trainer::TrainConfig;

pub fn small_spec(size: usize) -> GenerateSpec {
    GenerateSpec { rig: CameraRig { size, ..CameraRig::default() }, train_views: 3, test_views: 2 }
}

/// Default scene at `size`×`size` written to `dir`.
pub fn small_dataset(dir: &Path, size: usize) {
    synthgen::generate_dataset(&synthgen::box_on_table(), &small_spec(size), dir).unwrap();
}

/// A single wide slab that fills most of every view.
pub fn slab_scene() -> SyntheticScene {
    let b = Aabb::new(Vec3::new(-1.5, -0.2, -1.5), Vec3::new(1.5, 0.2, 1.5)).unwrap();
    SyntheticScene {
        primitives: vec![Primitive {
            shape: Shape::Box(b),
            albedo: Albedo::Checker { a: Vec3::new(0.9, 0.3, 0.2), b: Vec3::new(0.2, 0.5, 0.9), size: 0.5 },
        }],
        light: Vec3::new(0.3, 1.0, 0.2).normalize(),
        intensity: 0.8,
        ambient: 0.1,
        background: Vec3::zero(),
        bounds: b,
    }
}

/// Short, cheap training configuration.
pub fn tiny_config(iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.trainer.iterations = iterations;
    cfg.trainer.patches_per_iter = 16;
    cfg.trainer.lr_init = 0.1;
    cfg.trainer.lr_final = 0.01;
    cfg.trainer.log_every = 1;
    cfg.trainer.deterministic = true;
    cfg.renderer.samples_per_ray = 16;
    cfg.field.resolution = [8, 8, 8];
    cfg.eval.samples_per_ray = 16;
    cfg
}

/// Column `col` of every record in a metrics log.
pub fn log_column(text: &str, col: usize) -> Vec<f64> {
    text.lines().filter(|l| !l.starts_with('#')).map(|l| l.split_whitespace().nth(col).unwrap().parse().unwrap()).collect()
}
