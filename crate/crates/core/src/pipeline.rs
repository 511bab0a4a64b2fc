//! End-to-end orchestration: lift per-view predictions to pixel-wise
//! Gaussians, merge them in a voxel grid, render every view, score the
//! losses against the capture (and pseudo-labels when present), and
//! optionally run post-optimization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffers::ImageRgb;
use crate::camera::{encode_pose, Camera};
use crate::error::{Error, Result};
use crate::fitter::{self, FitConfig, TraceRow};
use crate::gaussian::{lift_views, GaussianSet};
use crate::io::CaptureBundle;
use crate::loss::{self, LossReport, LossTerms, LossWeights};
use crate::math::Vec3;
use crate::render::{render, RenderBuffers, RenderOptions};
use crate::voxel;

fn default_epsilon() -> f64 {
    0.05
}
fn default_sh_degree() -> usize {
    1
}

/// Configuration of a full reconstruction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Voxel edge length in world units; 0 disables the merge entirely.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weights: LossWeights,
    /// Post-optimization; absent = reconstruct only.
    #[serde(default)]
    pub fit: Option<FitConfig>,
    #[serde(default = "default_sh_degree")]
    pub sh_degree: usize,
    /// Compositing background; absent inherits the bundle's.
    #[serde(default)]
    pub background: Option<[f64; 3]>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        crate::sh::check_degree(self.sh_degree)?;
        self.weights.validate()?;
        if let Some(fit) = &self.fit {
            fit.validate()?;
        }
        if let Some(bg) = &self.background {
            if bg.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("background color must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn background_vec(&self, bundle: &CaptureBundle) -> Vec3 {
        match self.background {
            Some([r, g, b]) => Vec3::new(r, g, b),
            None => bundle.background,
        }
    }
}

/// Everything a reconstruction run produces. All fields describe the same
/// final scene state: when a fit stage ran, the renders and losses are
/// recomputed afterwards so they match the returned Gaussians and cameras.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub gaussians: GaussianSet,
    pub cameras: Vec<Camera>,
    pub losses: LossReport,
    pub renders: Vec<RenderBuffers>,
    /// Per-step loss trace of the fit stage; empty when no fit ran.
    pub trace: Vec<TraceRow>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::stage(name, e))
}

/// Extract the working camera trajectory: ground truth when present,
/// otherwise the pseudo trajectory.
pub fn bundle_cameras(bundle: &CaptureBundle) -> Result<Vec<Camera>> {
    bundle
        .cameras_gt
        .clone()
        .or_else(|| bundle.cameras_pseudo.clone())
        .ok_or_else(|| Error::InvalidConfig("bundle carries no camera trajectory".into()))
}

fn render_views(
    set: &GaussianSet,
    cameras: &[Camera],
    background: &Vec3,
) -> Result<Vec<RenderBuffers>> {
    let opts = RenderOptions::default();
    cameras.par_iter().map(|cam| render(set, cam, background, &opts)).collect()
}

fn score(
    bundle: &CaptureBundle,
    cameras: &[Camera],
    renders: &[RenderBuffers],
    weights: &LossWeights,
) -> Result<LossReport> {
    let nv = bundle.n_views() as f64;
    let mut terms = LossTerms::default();
    for (view, buf) in bundle.views.iter().zip(renders) {
        let rendered = buf.rgb_image();
        terms.rgb += loss::loss_rgb(&rendered, &view.image, weights.lambda1)?.value / nv;
        let geo =
            loss::loss_geometry(&view.depth, &buf.depth, &buf.alpha, weights.top_quantile)?;
        terms.geometry += geo.value / nv;
        terms.mask_coverage += geo.coverage / nv;
        if let Some(pseudo) = &view.pseudo_depth {
            let distill =
                loss::loss_depth_distill(pseudo, &buf.depth, &buf.alpha, weights.top_quantile)?;
            terms.depth_distill += distill.value / nv;
        }
    }
    if let Some(pseudo_cams) = &bundle.cameras_pseudo {
        let pred = cameras.iter().map(encode_pose).collect::<Result<Vec<_>>>()?;
        let pseudo = pseudo_cams.iter().map(encode_pose).collect::<Result<Vec<_>>>()?;
        terms.pose = loss::loss_pose(&pred, &pseudo, weights.huber_delta)?.value;
    }
    Ok(loss::loss_total(&terms, weights))
}

/// Run the full flow: lift → voxel merge → render → losses → optional fit.
///
/// Cameras come from the bundle (ground truth preferred, pseudo otherwise).
/// Errors are annotated with the stage that raised them:
/// lift | voxelize | render | loss | fit.
pub fn reconstruct(bundle: &CaptureBundle, cfg: &PipelineConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    bundle.validate()?;
    if bundle.sh_degree() != cfg.sh_degree {
        return Err(Error::InvalidConfig(format!(
            "config expects spherical-harmonic degree {}, bundle carries {}",
            cfg.sh_degree,
            bundle.sh_degree()
        )));
    }
    let background = cfg.background_vec(bundle);
    let mut cameras = bundle_cameras(bundle)?;

    let depths: Vec<_> = bundle.views.iter().map(|v| v.depth.clone()).collect();
    let attrs: Vec<_> = bundle.views.iter().map(|v| v.attributes.clone()).collect();
    let lifted = stage("lift", lift_views(&cameras, &depths, &attrs))?;

    let mut gaussians = if cfg.epsilon > 0.0 {
        stage(
            "voxelize",
            voxel::build(&lifted, cfg.epsilon).and_then(|grid| voxel::aggregate(&lifted, &grid)),
        )?
    } else {
        lifted
    };

    let mut renders = stage("render", render_views(&gaussians, &cameras, &background))?;
    let mut losses = stage("loss", score(bundle, &cameras, &renders, &cfg.weights))?;

    let mut trace = Vec::new();
    if let Some(fit_cfg) = &cfg.fit {
        let targets: Vec<ImageRgb> = bundle.views.iter().map(|v| v.image.clone()).collect();
        let outcome = stage(
            "fit",
            fitter::fit(&gaussians, &cameras, &targets, &background, fit_cfg),
        )?;
        gaussians = outcome.gaussians;
        cameras = outcome.cameras;
        trace = outcome.trace;
        renders = stage("render", render_views(&gaussians, &cameras, &background))?;
        losses = stage("loss", score(bundle, &cameras, &renders, &cfg.weights))?;
    }

    Ok(Reconstruction { gaussians, cameras, losses, renders, trace })
}

/// One row of the view-count sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CountRow {
    pub views: usize,
    pub count: usize,
    pub peak_bytes: usize,
}

fn set_bytes(set: &GaussianSet) -> usize {
    8 * (3 * set.len() // positions
        + set.len() // logit opacities
        + 4 * set.len() // raw quaternions
        + 3 * set.len() // log scales
        + set.sh.len()
        + set.len()) // confidences
}

/// Merged-primitive counts over a monotone view-count sweep of one capture.
/// `peak_bytes` estimates the merge stage's working set: the lifted set,
/// the voxel-grid index structures, and the merged set together.
pub fn count_report(
    bundle: &CaptureBundle,
    epsilon: f64,
    view_counts: &[usize],
) -> Result<Vec<CountRow>> {
    if view_counts.is_empty() {
        return Err(Error::InvalidConfig("view-count sweep is empty".into()));
    }
    if view_counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig(
            "view-count sweep must be strictly increasing".into(),
        ));
    }
    let last = *view_counts.last().unwrap();
    if view_counts[0] == 0 || last > bundle.n_views() {
        return Err(Error::InvalidConfig(format!(
            "view counts must lie in [1, {}]",
            bundle.n_views()
        )));
    }
    bundle.validate()?;
    let cameras = bundle_cameras(bundle)?;

    let mut rows = Vec::with_capacity(view_counts.len());
    for &v in view_counts {
        let depths: Vec<_> = bundle.views[..v].iter().map(|x| x.depth.clone()).collect();
        let attrs: Vec<_> = bundle.views[..v].iter().map(|x| x.attributes.clone()).collect();
        let lifted = stage("lift", lift_views(&cameras[..v], &depths, &attrs))?;
        let (count, peak_bytes) = if epsilon > 0.0 {
            let grid = stage("voxelize", voxel::build(&lifted, epsilon))?;
            let merged = stage("voxelize", voxel::aggregate(&lifted, &grid))?;
            let grid_bytes = 8 * (3 * grid.coords.len()
                + grid.voxel_of.len()
                + grid.weights.len()
                + grid.sign.len())
                + std::mem::size_of_val(grid.voxels.as_slice());
            (merged.len(), set_bytes(&lifted) + grid_bytes + set_bytes(&merged))
        } else {
            (lifted.len(), set_bytes(&lifted))
        };
        rows.push(CountRow { views: v, count, peak_bytes });
    }
    Ok(rows)
}

/// Render a count report as CSV with a header row.
pub fn count_report_csv(rows: &[CountRow]) -> String {
    let mut out = String::from("views,count,peak_bytes\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.views, r.count, r.peak_bytes));
    }
    out
}
