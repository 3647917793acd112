use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use edgefield::dataset::{self, Dataset};
use edgefield::edgemap::{self, CannyParams};
use edgefield::eval::{self, EvalOptions, Split};
use edgefield::field::{load_checkpoint, FieldParams};
use edgefield::geometry::{Camera, Mat3, Pose, Vec3};
use edgefield::image_io::{read_png_gray, read_png_rgb, write_pfm_rgb, write_pfm_scalar, write_png_gray, write_png_rgb};
use edgefield::renderer::render_image;
use edgefield::synthgen::{self, CameraRig, GenerateSpec, SceneKind};
use edgefield::trainer::gradcheck::{gradcheck, GradcheckConfig};
use edgefield::trainer::{run_training, TrainConfig};
use edgefield::{Error, Result};

/// Worst relative gradient error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "edgefield", version, about = "Edge-guided radiance field reconstruction from sparse views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EdgeMethod {
    Canny,
    External,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Gen {
        #[arg(long, default_value = "box")]
        scene: SceneKind,
        #[arg(long, default_value_t = 3)]
        views_train: usize,
        #[arg(long, default_value_t = 5)]
        views_test: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute edge maps and edge indicators.
    ///
    /// `--input` is a dataset directory (its `rgb/` or, for `external`,
    /// `edges/` images are used) or a plain directory of PNG files.
    /// Writes `strength/NAME.png` (0/255) and `indicator/NAME.png` (e · 255).
    Edges {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "canny")]
        method: EdgeMethod,
        #[arg(long, default_value_t = edgemap::DEFAULT_TAU_E)]
        tau_e: f64,
        #[arg(long, default_value_t = edgemap::DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = edgemap::DEFAULT_LOW)]
        low: f64,
        #[arg(long, default_value_t = edgemap::DEFAULT_HIGH)]
        high: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a field on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render color, depth and normals from a checkpoint.
    ///
    /// `--pose` is a view index of the dataset, or a file holding either a
    /// camera record in `cameras.txt` format or 12 numbers of a row-major
    /// 3×4 camera-to-world matrix (intrinsics then come from view 0).
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pose: String,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Evaluation settings are taken from this training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        coords: usize,
    },
    /// Train and evaluate the loss-term ablation rows.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn gen(scene: SceneKind, train: usize, test: usize, size: usize, out: &Path) -> Result<()> {
    let spec = GenerateSpec { rig: CameraRig { size, ..CameraRig::default() }, train_views: train, test_views: test };
    let n = synthgen::generate_dataset(&synthgen::scene(scene), &spec, out)?;
    println!("wrote {n} views to {}", out.display());
    Ok(())
}

/// `(name, path)` of every input image for the edge pass.
fn edge_inputs(input: &Path, method: EdgeMethod) -> Result<Vec<(String, PathBuf)>> {
    if input.join(dataset::CAMERAS_FILE).exists() {
        let data = Dataset::open(input)?;
        return (0..data.views())
            .map(|i| {
                let path = match method {
                    EdgeMethod::Canny => dataset::rgb_path(input, i),
                    EdgeMethod::External => data
                        .external_edges(i)
                        .ok_or_else(|| Error::Config(format!("dataset has no edge map for view {i}")))?,
                };
                Ok((format!("{i:03}"), path))
            })
            .collect();
    }
    let entries = std::fs::read_dir(input).map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
    let mut files: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", input.display())));
    }
    Ok(files)
}

fn edges(input: &Path, method: EdgeMethod, tau_e: f64, params: CannyParams, out: &Path) -> Result<()> {
    if !(params.sigma > 0.0 && params.low <= params.high) {
        return Err(Error::Config("edges: need sigma > 0 and low <= high".into()));
    }
    let inputs = edge_inputs(input, method)?;
    for (name, path) in &inputs {
        let strength = match method {
            EdgeMethod::Canny => edgemap::canny_strength(&read_png_rgb(path)?, params)?,
            EdgeMethod::External => read_png_gray(path)?,
        };
        let e = edgemap::indicator_from_strength(&strength, tau_e);
        write_png_gray(&out.join("strength").join(format!("{name}.png")), &strength)?;
        write_png_gray(&out.join("indicator").join(format!("{name}.png")), &e.as_image().map(|v| v as f64 * 255.0))?;
    }
    println!("wrote {} edge maps to {}", inputs.len(), out.display());
    Ok(())
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    deterministic: bool,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
    cfg.trainer.deterministic |= deterministic;
    let summary = run_training(&cfg, data, out, resume, |line| println!("{line}"))?;
    println!("final checkpoint: {}", summary.checkpoint.display());
    Ok(())
}

fn parse_pose(spec: &str, data: &Dataset) -> Result<Camera<f64>> {
    if let Ok(i) = spec.parse::<usize>() {
        return data
            .cameras
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("pose index {i} out of range (dataset has {} views)", data.views())));
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("pose file {spec}: {e}")))?;
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() == 21 {
        let line = format!("0 {}", tokens[1..].join(" "));
        return Ok(dataset::parse_cameras(&line, path)?[0]);
    }
    if tokens.len() != 12 {
        return Err(Error::Config(format!("pose file {spec}: expected 12 or 21 numbers, found {}", tokens.len())));
    }
    let m: Vec<f64> = tokens
        .iter()
        .map(|t| t.parse().map_err(|_| Error::Config(format!("pose file {spec}: bad number '{t}'"))))
        .collect::<Result<_>>()?;
    let rotation = Mat3 { rows: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]] };
    let pose = Pose { rotation, translation: Vec3::new(m[3], m[7], m[11]) };
    let c = &data.cameras[0];
    Camera::new(c.width, c.height, c.fx, c.fy, c.cx, c.cy, pose, c.near, c.far)
        .map_err(|e| Error::Config(format!("pose file {spec}: {e}")))
}

fn render(checkpoint: &Path, data: &Path, pose: &str, samples: usize, out: &Path) -> Result<()> {
    if samples < 2 {
        return Err(Error::Config("samples must be at least 2".into()));
    }
    let data = Dataset::open(data)?;
    let camera = parse_pose(pose, &data)?;
    let field: FieldParams<f64> = load_checkpoint(checkpoint)?;
    eval::check_compatible(&field, &data)?;
    let (rgb, depth, normal) = render_image(&field, &camera, samples, true)?;
    write_png_rgb(&out.join("rgb.png"), &rgb)?;
    write_pfm_scalar(&out.join("depth.pfm"), &depth)?;
    write_pfm_rgb(&out.join("normal.pfm"), &normal)?;
    println!("wrote rgb.png, depth.pfm, normal.pfm to {}", out.display());
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    config: Option<&Path>,
    samples: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let mut opts: EvalOptions = load_config(config)?.eval.options();
    if let Some(k) = samples {
        if k < 2 {
            return Err(Error::Config("samples must be at least 2".into()));
        }
        opts.samples_per_ray = k;
    }
    let data = Dataset::open(data)?;
    let report = eval::evaluate_checkpoint(checkpoint, &data, split, &opts, out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn run_gradcheck(trials: usize, seed: u64, coords: usize) -> Result<()> {
    let report = gradcheck(&GradcheckConfig { trials, seed, coords_per_term: coords, ..Default::default() })?;
    print!("{}", report.to_text());
    let worst = report.worst();
    if !report.empty_field_finite || !(worst < GRADCHECK_TOLERANCE) {
        return Err(Error::Numerical { iteration: 0, term: format!("gradient check (worst relative error {worst:.3e})") });
    }
    Ok(())
}

fn ablate(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
    let report = eval::ablate(&cfg, data, out, |row| {
        println!(
            "{}: psnr {} depth_mae {:.5} train_ms {:.0}",
            row.name,
            eval::format_psnr(row.report.mean_psnr),
            row.report.mean_depth_mae,
            row.summary.train_ms
        )
    })?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { scene, views_train, views_test, size, out } => gen(scene, views_train, views_test, size, &out),
        Command::Edges { input, method, tau_e, sigma, low, high, out } => {
            edges(&input, method, tau_e, CannyParams { sigma, low, high }, &out)
        }
        Command::Train { config, data, out, seed, deterministic, resume } => {
            train(config.as_deref(), &data, &out, seed, deterministic, resume.as_deref())
        }
        Command::Render { checkpoint, data, pose, samples, out } => render(&checkpoint, &data, &pose, samples, &out),
        Command::Eval { checkpoint, data, split, config, samples, out } => {
            evaluate(&checkpoint, &data, split, config.as_deref(), samples, out.as_deref())
        }
        Command::Gradcheck { trials, seed, coords } => run_gradcheck(trials, seed, coords),
        Command::Ablate { config, data, out, seed } => ablate(config.as_deref(), &data, &out, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
