//! Command-line front end: every pipeline stage and utility as a
//! subcommand. Exit codes: 0 success, 1 domain errors, 2 usage errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use voxsplat_core::camera::{align_eval_robust, align_test_time_scale, read_trajectory, write_trajectory};
use voxsplat_core::fitter::{self, FitConfig};
use voxsplat_core::gaussian::lift_views;
use voxsplat_core::io::{
    generate_synthetic, load_bundle, load_gaussians_ply, save_bundle, save_gaussians_ply,
    save_png, write_tensor, SyntheticSpec,
};
use voxsplat_core::metrics::{self, EvalReport};
use voxsplat_core::pipeline::{self, PipelineConfig};
use voxsplat_core::render::{render, RenderOptions};
use voxsplat_core::sampler::{self, SamplingSpec};
use voxsplat_core::{voxel, Camera, Error, ImageRgb, Result};

#[derive(Parser)]
#[command(
    name = "voxsplat",
    about = "Differentiable Gaussian-splat reconstruction from per-view depth and attribute predictions",
    disable_help_subcommand = true
)]
struct Cli {
    /// Cap the worker thread count (default: one per core)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic capture bundle with known scene and cameras
    Synth {
        /// Generator settings as a JSON file (defaults when absent)
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Override the generator seed
        #[arg(long)]
        seed: Option<u64>,
        /// Bundle directory to create
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Lift a bundle's per-view predictions into pixel-wise Gaussians
    Lift {
        /// Input capture bundle directory
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        /// Output scene file (.ply)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Merge a Gaussian scene on a voxel grid of edge length epsilon
    Voxelize {
        /// Input scene file (.ply)
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Voxel edge length in world units
        #[arg(long)]
        epsilon: f64,
        /// Output scene file (.ply)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Render a scene from a bundle's cameras (PNG images + depth tensors)
    Render {
        /// Scene file (.ply)
        #[arg(long, value_name = "FILE")]
        scene: PathBuf,
        /// Capture bundle providing cameras and background
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Post-optimize a scene against a bundle's images
    Fit {
        /// Scene file (.ply)
        #[arg(long, value_name = "FILE")]
        scene: PathBuf,
        /// Capture bundle providing images, cameras, and background
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        /// Fit settings as a JSON file (defaults when absent)
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Output directory (scene.ply, cameras.txt, trace.csv)
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Compare two bundles: image, depth, and pose metrics as JSON
    Eval {
        /// Predicted capture bundle directory
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Reference capture bundle directory
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        /// Optional scene file whose primitive count goes into the report
        #[arg(long, value_name = "FILE")]
        scene: Option<PathBuf>,
        /// Write the JSON report here instead of standard output
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Align a predicted camera trajectory to a reference
    Align {
        /// Predicted trajectory file
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        /// Reference trajectory file
        #[arg(long, value_name = "FILE")]
        gt: PathBuf,
        /// robust: similarity alignment; scale: median translation rescale
        #[arg(long, value_enum, default_value_t = AlignMode::Robust)]
        mode: AlignMode,
        /// Write the aligned trajectory here
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Choose evaluation views from a bundle's trajectory
    SampleViews {
        /// Capture bundle directory
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        /// Sampling settings as a JSON file
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Override the sampling seed
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here instead of standard output
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Sweep view counts and report merged-primitive growth as CSV
    CountReport {
        /// Capture bundle directory
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        /// Voxel edge length in world units
        #[arg(long)]
        epsilon: f64,
        /// Strictly increasing view counts, e.g. 1,2,4,8
        #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
        views: Vec<usize>,
        /// Write the CSV here instead of standard output
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run the full flow: lift, voxel merge, render, score, optional fit
    Reconstruct {
        /// Run settings as a JSON file (pipeline settings + paths)
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Input bundle directory (overrides the config)
        #[arg(long, value_name = "DIR")]
        bundle: Option<PathBuf>,
        /// Override the pipeline seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (scene.ply, cameras.txt, metrics.json)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlignMode {
    Robust,
    Scale,
}

/// A whole run in one strict JSON file: pipeline settings plus paths.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    pipeline: PipelineConfig,
    /// Input capture bundle directory.
    #[serde(default)]
    bundle: Option<PathBuf>,
    /// Output directory.
    #[serde(default)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // a second pool in the same process is fine to ignore; the cap is
        // best-effort and tests may run several commands in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut cause = std::error::Error::source(&e);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            ExitCode::from(1)
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// JSON report: to `out` when given, standard output otherwise.
fn emit<T: Serialize>(out: Option<&Path>, report: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::parse("<report>", e.to_string()))?;
    match out {
        Some(path) => write_text(path, &(text + "\n")),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn emit_raw(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, seed, out } => cmd_synth(config.as_deref(), seed, &out),
        Command::Lift { bundle, out } => cmd_lift(&bundle, &out),
        Command::Voxelize { input, epsilon, out } => cmd_voxelize(&input, epsilon, &out),
        Command::Render { scene, bundle, out } => cmd_render(&scene, &bundle, &out),
        Command::Fit { scene, bundle, config, out } => {
            cmd_fit(&scene, &bundle, config.as_deref(), &out)
        }
        Command::Eval { pred, gt, scene, out } => {
            cmd_eval(&pred, &gt, scene.as_deref(), out.as_deref())
        }
        Command::Align { pred, gt, mode, out } => cmd_align(&pred, &gt, mode, out.as_deref()),
        Command::SampleViews { bundle, config, seed, out } => {
            cmd_sample_views(&bundle, &config, seed, out.as_deref())
        }
        Command::CountReport { bundle, epsilon, views, out } => {
            cmd_count_report(&bundle, epsilon, &views, out.as_deref())
        }
        Command::Reconstruct { config, bundle, seed, out } => {
            cmd_reconstruct(&config, bundle.as_deref(), seed, out.as_deref())
        }
    }
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: SyntheticSpec = match config {
        Some(path) => read_json(path)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (truth, bundle) = generate_synthetic(&spec)?;
    save_bundle(&bundle, out)?;
    save_gaussians_ply(&truth, &out.join("scene_gt.ply"))?;
    emit(
        None,
        &serde_json::json!({
            "name": bundle.name,
            "views": bundle.n_views(),
            "width": bundle.width(),
            "height": bundle.height(),
            "truth_gaussians": truth.len(),
        }),
    )
}

fn cmd_lift(bundle_dir: &Path, out: &Path) -> Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    let cams = pipeline::bundle_cameras(&bundle)?;
    let depths: Vec<_> = bundle.views.iter().map(|v| v.depth.clone()).collect();
    let attrs: Vec<_> = bundle.views.iter().map(|v| v.attributes.clone()).collect();
    let lifted = lift_views(&cams, &depths, &attrs)?;
    save_gaussians_ply(&lifted, out)?;
    emit(None, &serde_json::json!({ "gaussians": lifted.len() }))
}

fn cmd_voxelize(input: &Path, epsilon: f64, out: &Path) -> Result<()> {
    let set = load_gaussians_ply(input)?;
    let grid = voxel::build(&set, epsilon)?;
    let merged = voxel::aggregate(&set, &grid)?;
    save_gaussians_ply(&merged, out)?;
    emit(
        None,
        &serde_json::json!({
            "input_gaussians": set.len(),
            "merged_gaussians": merged.len(),
            "epsilon": epsilon,
        }),
    )
}

fn cmd_render(scene: &Path, bundle_dir: &Path, out: &Path) -> Result<()> {
    let set = load_gaussians_ply(scene)?;
    let bundle = load_bundle(bundle_dir)?;
    let cams = pipeline::bundle_cameras(&bundle)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let opts = RenderOptions::default();
    let mut psnr_sum = 0.0;
    for (i, cam) in cams.iter().enumerate() {
        let buf = render(&set, cam, &bundle.background, &opts)?;
        let img = buf.rgb_image();
        save_png(&out.join(format!("view_{i:03}.png")), &img)?;
        write_tensor(
            &out.join(format!("depth_{i:03}.f32")),
            &[buf.height, buf.width],
            &buf.depth,
        )?;
        psnr_sum += metrics::psnr(&img, &bundle.views[i].image)?;
    }
    emit(
        None,
        &serde_json::json!({
            "views": cams.len(),
            "gaussians": set.len(),
            "mean_psnr_vs_bundle": psnr_sum / cams.len() as f64,
        }),
    )
}

fn cmd_fit(scene: &Path, bundle_dir: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let set = load_gaussians_ply(scene)?;
    let bundle = load_bundle(bundle_dir)?;
    let cams = pipeline::bundle_cameras(&bundle)?;
    let cfg: FitConfig = match config {
        Some(path) => read_json(path)?,
        None => FitConfig::default(),
    };
    let targets: Vec<ImageRgb> = bundle.views.iter().map(|v| v.image.clone()).collect();
    let outcome = fitter::fit(&set, &cams, &targets, &bundle.background, &cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_gaussians_ply(&outcome.gaussians, &out.join("scene.ply"))?;
    write_trajectory(&out.join("cameras.txt"), &outcome.cameras)?;
    let mut csv = String::from("step,total,mse,dssim\n");
    for r in &outcome.trace {
        csv.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.mse, r.dssim));
    }
    write_text(&out.join("trace.csv"), &csv)?;
    emit(
        None,
        &serde_json::json!({
            "steps": outcome.trace.len(),
            "gaussians": outcome.gaussians.len(),
            "initial_total": outcome.trace.first().map(|r| r.total),
            "final_total": outcome.trace.last().map(|r| r.total),
        }),
    )
}

fn cmd_eval(pred: &Path, gt: &Path, scene: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let pred_bundle = load_bundle(pred)?;
    let gt_bundle = load_bundle(gt)?;
    if pred_bundle.n_views() != gt_bundle.n_views()
        || pred_bundle.width() != gt_bundle.width()
        || pred_bundle.height() != gt_bundle.height()
    {
        return Err(Error::Dimension(format!(
            "bundles disagree: {} views {}x{} vs {} views {}x{}",
            pred_bundle.n_views(),
            pred_bundle.width(),
            pred_bundle.height(),
            gt_bundle.n_views(),
            gt_bundle.width(),
            gt_bundle.height()
        )));
    }
    let nv = pred_bundle.n_views() as f64;
    let mut psnr = 0.0;
    let mut ssim = 0.0;
    let mut depth_pred = Vec::new();
    let mut depth_gt = Vec::new();
    let mut depth_valid = Vec::new();
    for (p, g) in pred_bundle.views.iter().zip(&gt_bundle.views) {
        psnr += metrics::psnr(&p.image, &g.image)? / nv;
        ssim += metrics::ssim(&p.image, &g.image)? / nv;
        depth_pred.extend_from_slice(&p.depth.depth);
        depth_gt.extend_from_slice(&g.depth.depth);
        depth_valid.extend(
            p.depth.valid.iter().zip(&g.depth.valid).map(|(&a, &b)| a && b),
        );
    }
    let absrel = metrics::depth_absrel(&depth_pred, &depth_gt, &depth_valid)?;
    let delta1 = metrics::depth_delta1(&depth_pred, &depth_gt, &depth_valid)?;
    let auc = match (
        pipeline::bundle_cameras(&pred_bundle),
        pipeline::bundle_cameras(&gt_bundle),
    ) {
        (Ok(pc), Ok(gc)) => {
            let report = metrics::pose_auc(&pc, &gc, &[5.0, 10.0, 20.0])?;
            EvalReport::auc_map(&report)
        }
        _ => BTreeMap::new(),
    };
    let n_gaussians = match scene {
        Some(path) => load_gaussians_ply(path)?.len(),
        None => 0,
    };
    let report = EvalReport {
        psnr,
        ssim,
        absrel,
        delta1,
        auc,
        n_views: pred_bundle.n_views(),
        n_gaussians,
    };
    emit(out, &report)
}

fn rotation_angle_deg(a: &Camera, b: &Camera) -> f64 {
    let rel = a.rotation().transpose() * b.rotation();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

fn cmd_align(pred: &Path, gt: &Path, mode: AlignMode, out: Option<&Path>) -> Result<()> {
    let pred_cams = read_trajectory(pred)?;
    let gt_cams = read_trajectory(gt)?;
    match mode {
        AlignMode::Robust => {
            let aligned = align_eval_robust(&pred_cams, &gt_cams)?;
            let n = aligned.len() as f64;
            let mut rot = 0.0;
            let mut trans = 0.0;
            for (a, g) in aligned.iter().zip(&gt_cams) {
                rot += rotation_angle_deg(a, g) / n;
                trans += (a.t - g.t).norm() / n;
            }
            if let Some(path) = out {
                write_trajectory(path, &aligned)?;
            }
            emit(
                None,
                &serde_json::json!({
                    "mode": "robust",
                    "views": aligned.len(),
                    "mean_rotation_deg": rot,
                    "mean_translation": trans,
                }),
            )
        }
        AlignMode::Scale => {
            let scale = align_test_time_scale(&gt_cams, &pred_cams)?;
            if let Some(path) = out {
                let mut rescaled = pred_cams.clone();
                for cam in rescaled.iter_mut() {
                    cam.t *= scale;
                }
                write_trajectory(path, &rescaled)?;
            }
            emit(
                None,
                &serde_json::json!({ "mode": "scale", "views": pred_cams.len(), "scale": scale }),
            )
        }
    }
}

fn cmd_sample_views(
    bundle_dir: &Path,
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    let cams = pipeline::bundle_cameras(&bundle)?;
    let mut spec: SamplingSpec = read_json(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let indices = sampler::sample(&spec, &cams)?;
    emit(
        out,
        &serde_json::json!({
            "strategy": spec.strategy,
            "total_views": cams.len(),
            "indices": indices,
        }),
    )
}

fn cmd_count_report(
    bundle_dir: &Path,
    epsilon: f64,
    views: &[usize],
    out: Option<&Path>,
) -> Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    let rows = pipeline::count_report(&bundle, epsilon, views)?;
    emit_raw(out, &pipeline::count_report_csv(&rows))
}

#[derive(Serialize)]
struct ReconstructReport<'a> {
    gaussians: usize,
    views: usize,
    losses: &'a voxsplat_core::LossReport,
    #[serde(serialize_with = "serialize_db_slice")]
    per_view_psnr: &'a [f64],
    mean_psnr: f64,
    fit_steps: usize,
}

fn serialize_db_slice<S: serde::Serializer>(
    v: &&[f64],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v.iter() {
        if x.is_infinite() && *x > 0.0 {
            seq.serialize_element("+inf")?;
        } else {
            seq.serialize_element(x)?;
        }
    }
    seq.end()
}

fn cmd_reconstruct(
    config: &Path,
    bundle_flag: Option<&Path>,
    seed: Option<u64>,
    out_flag: Option<&Path>,
) -> Result<()> {
    let mut run: RunConfig = read_json(config)?;
    if let Some(s) = seed {
        run.pipeline.seed = s;
    }
    let bundle_dir = bundle_flag
        .map(Path::to_path_buf)
        .or(run.bundle)
        .ok_or_else(|| {
            Error::InvalidConfig("no bundle directory: pass --bundle or set it in the config".into())
        })?;
    let out = out_flag.map(Path::to_path_buf).or(run.out);
    let bundle = load_bundle(&bundle_dir)?;
    let rec = pipeline::reconstruct(&bundle, &run.pipeline)?;

    let mut per_view_psnr = Vec::with_capacity(rec.renders.len());
    for (buf, view) in rec.renders.iter().zip(&bundle.views) {
        per_view_psnr.push(metrics::psnr(&buf.rgb_image(), &view.image)?);
    }
    let mean_psnr = per_view_psnr.iter().sum::<f64>() / per_view_psnr.len() as f64;
    let report = ReconstructReport {
        gaussians: rec.gaussians.len(),
        views: bundle.n_views(),
        losses: &rec.losses,
        per_view_psnr: &per_view_psnr,
        mean_psnr,
        fit_steps: rec.trace.len(),
    };
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_gaussians_ply(&rec.gaussians, &dir.join("scene.ply"))?;
            write_trajectory(&dir.join("cameras.txt"), &rec.cameras)?;
            emit(Some(&dir.join("metrics.json")), &report)
        }
        None => emit(None, &report),
    }
}
