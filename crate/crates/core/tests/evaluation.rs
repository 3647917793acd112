mod common;

use common::small_dataset;
use edgefield::dataset::Dataset;
use edgefield::eval::{check_compatible, evaluate, EvalOptions, Split};
use edgefield::field::{FieldParams, GridSpec};
use edgefield::geometry::{Aabb, Vec3};
use edgefield::synthgen::{box_on_table, SceneField};
use edgefield::Error;

fn empty_grid(bounds: Aabb<f64>) -> FieldParams<f64> {
    FieldParams::new_grid(GridSpec::new([4, 4, 4], bounds).unwrap(), -1e3).unwrap()
}

#[test]
fn empty_field_scores_like_an_all_background_image() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 24);
    let data = Dataset::open(dir.path()).unwrap();
    let field = empty_grid(data.bounds.unwrap());
    let opts = EvalOptions { samples_per_ray: 16, ..Default::default() };
    let report = evaluate(&field, &data, Split::Test, &opts, None).unwrap();

    let bg = box_on_table().background;
    for v in &report.views {
        let gt = data.rgb(v.view).unwrap();
        let n = (gt.data.len() * 3) as f64;
        let mse: f64 = gt.data.iter().flat_map(|p| (0..3).map(move |c| (p[c] - bg[c]).powi(2))).sum::<f64>() / n;
        let expected = 10.0 * (1.0 / mse).log10();
        assert!((v.psnr - expected).abs() < 1e-9, "view {}: {} vs {expected}", v.view, v.psnr);
    }
}

#[test]
fn scene_field_matches_the_tracer_above_forty_db() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 32);
    let data = Dataset::open(dir.path()).unwrap();
    let k = 256;
    let cam = &data.cameras[0];
    let field = SceneField::new(box_on_table(), 1e6, 1.01 * (cam.far - cam.near) / k as f64);
    let out = dir.path().join("eval");
    let opts = EvalOptions { samples_per_ray: k, ..Default::default() };
    let report = evaluate(&field, &data, Split::Test, &opts, Some(&out)).unwrap();
    assert_eq!(report.views.len(), data.test.len());
    for v in &report.views {
        assert!(v.psnr > 40.0, "view {}: {}", v.view, v.psnr);
    }

    let text = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("view: ")).count(), data.test.len());
    assert!(text.contains("mean_psnr: "));
    for &view in &data.test {
        assert!(out.join("rgb").join(format!("{view:03}.png")).exists());
        assert!(out.join("depth").join(format!("{view:03}.pfm")).exists());
    }
}

#[test]
fn evaluation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 16);
    let data = Dataset::open(dir.path()).unwrap();
    let mut field = empty_grid(data.bounds.unwrap());
    for (i, v) in field.values.iter_mut().enumerate() {
        *v = ((i * 7919) % 13) as f64 / 4.0 - 1.5;
    }
    let opts = EvalOptions { samples_per_ray: 16, ..Default::default() };
    let a = evaluate(&field, &data, Split::Train, &opts, None).unwrap();
    let b = evaluate(&field, &data, Split::Train, &opts, None).unwrap();
    assert_eq!(a.views, b.views);
    for v in &a.views {
        assert!((-1.0..=1.0).contains(&v.ssim));
        assert!(v.depth.mae >= 0.0 && v.depth.boundary_mae >= 0.0);
    }
}

#[test]
fn mismatched_checkpoint_bounds_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 16);
    let data = Dataset::open(dir.path()).unwrap();
    let other = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)).unwrap();
    assert!(matches!(check_compatible(&empty_grid(other), &data), Err(Error::Config(_))));
    check_compatible(&empty_grid(data.bounds.unwrap()), &data).unwrap();
}
