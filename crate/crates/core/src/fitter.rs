//! Post-optimization: prune low-opacity Gaussians once, then jointly refine
//! Gaussian parameters and camera poses against the input views with
//! per-group adaptive-moment gradient descent (full batch over views).

use serde::{Deserialize, Serialize};

use crate::buffers::ImageRgb;
use crate::camera::{decode_pose, encode_pose, Camera, PoseEncoding};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianGrads, GaussianSet};
use crate::math::{sigmoid, Vec3};
use crate::render::{render_backward, render_with_cache, RenderOptions, RenderUpstream};
use crate::ssim::dssim_with_grad;

fn default_steps() -> usize {
    1000
}
fn default_lr_position() -> f64 {
    1.6e-4
}
fn default_lr_scale() -> f64 {
    5e-3
}
fn default_lr_rotation() -> f64 {
    1e-3
}
fn default_lr_opacity() -> f64 {
    5e-2
}
fn default_lr_color() -> f64 {
    2.5e-3
}
fn default_lr_camera() -> f64 {
    5e-3
}
fn default_prune_opacity() -> f64 {
    0.01
}
fn default_ssim_weight() -> f64 {
    0.2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps_adam() -> f64 {
    1e-8
}

/// Configuration of the post-optimization stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr_position")]
    pub lr_position: f64,
    #[serde(default = "default_lr_scale")]
    pub lr_scale: f64,
    #[serde(default = "default_lr_rotation")]
    pub lr_rotation: f64,
    #[serde(default = "default_lr_opacity")]
    pub lr_opacity: f64,
    #[serde(default = "default_lr_color")]
    pub lr_color: f64,
    #[serde(default = "default_lr_camera")]
    pub lr_camera: f64,
    /// Gaussians whose activated opacity falls below this are dropped once,
    /// before the first step.
    #[serde(default = "default_prune_opacity")]
    pub prune_opacity: f64,
    /// Weight of the structural-dissimilarity term in the objective.
    #[serde(default = "default_ssim_weight")]
    pub ssim_weight: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps_adam")]
    pub eps_adam: f64,
    /// Emit a checkpoint every this many steps (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        // zero learning rates are deliberately legal: they freeze a group,
        // and an all-zero configuration must be the identity
        for (name, lr) in [
            ("lr_position", self.lr_position),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_opacity", self.lr_opacity),
            ("lr_color", self.lr_color),
            ("lr_camera", self.lr_camera),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {lr}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return Err(Error::InvalidConfig(format!(
                "prune_opacity must lie in [0, 1), got {}",
                self.prune_opacity
            )));
        }
        if !self.ssim_weight.is_finite() || self.ssim_weight < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "ssim_weight must be finite and >= 0, got {}",
                self.ssim_weight
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps_adam.is_finite() && self.eps_adam > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eps_adam must be finite and > 0, got {}",
                self.eps_adam
            )));
        }
        Ok(())
    }
}

/// One row of the per-step loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub dssim: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub gaussians: GaussianSet,
    pub cameras: Vec<Camera>,
    pub trace: Vec<TraceRow>,
}

/// Keep exactly the Gaussians whose activated opacity is at least
/// `threshold`, preserving order.
pub fn prune(set: &GaussianSet, threshold: f64) -> Result<GaussianSet> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!(
            "prune threshold must lie in [0, 1), got {threshold}"
        )));
    }
    set.validate()?;
    let nc3 = 3 * set.n_coeffs();
    let mut out = GaussianSet::empty(set.sh_degree)?;
    for i in 0..set.len() {
        if sigmoid(set.logit_opacity[i]) >= threshold {
            out.positions.push(set.positions[i]);
            out.logit_opacity.push(set.logit_opacity[i]);
            out.raw_quaternion.push(set.raw_quaternion[i]);
            out.log_scale.push(set.log_scale[i]);
            out.sh.extend_from_slice(&set.sh[i * nc3..(i + 1) * nc3]);
            out.confidence.push(set.confidence[i]);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyScene);
    }
    Ok(out)
}

/// First/second-moment state for one flat parameter group.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

struct AdamStep {
    beta1: f64,
    beta2: f64,
    eps: f64,
    bias1: f64,
    bias2: f64,
}

impl AdamStep {
    fn new(cfg: &FitConfig, t: usize) -> Self {
        AdamStep {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
            bias1: 1.0 - cfg.beta1.powi(t as i32),
            bias2: 1.0 - cfg.beta2.powi(t as i32),
        }
    }

    #[inline]
    fn update(&self, theta: &mut f64, grad: f64, slot: usize, mo: &mut Moments, lr: f64) {
        let m = &mut mo.m[slot];
        let v = &mut mo.v[slot];
        *m = self.beta1 * *m + (1.0 - self.beta1) * grad;
        *v = self.beta2 * *v + (1.0 - self.beta2) * grad * grad;
        let m_hat = *m / self.bias1;
        let v_hat = *v / self.bias2;
        *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

fn check_inputs(cams: &[Camera], targets: &[ImageRgb]) -> Result<()> {
    if cams.is_empty() || cams.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} cameras and {} target images",
            cams.len(),
            targets.len()
        )));
    }
    for (i, (cam, img)) in cams.iter().zip(targets).enumerate() {
        if img.width != cam.width || img.height != cam.height
            || img.data.len() != img.width * img.height
        {
            return Err(Error::Dimension(format!(
                "target {i} is {}x{} ({} px), camera expects {}x{}",
                img.width,
                img.height,
                img.data.len(),
                cam.width,
                cam.height
            )));
        }
    }
    Ok(())
}

/// `fit` with a checkpoint sink invoked every `cfg.checkpoint_every` steps.
pub fn fit_with_checkpoints(
    set: &GaussianSet,
    cams: &[Camera],
    targets: &[ImageRgb],
    background: &Vec3,
    cfg: &FitConfig,
    mut checkpoint: impl FnMut(usize, &GaussianSet, &[Camera]) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    set.validate()?;
    check_inputs(cams, targets)?;
    if cfg.steps == 0 {
        return Ok(FitOutcome {
            gaussians: set.clone(),
            cameras: cams.to_vec(),
            trace: Vec::new(),
        });
    }

    let mut g = prune(set, cfg.prune_opacity)?;
    let mut cameras = cams.to_vec();
    // camera parameters live as pose encodings; index 0 is the gauge
    // anchor and never touched
    let mut encs: Vec<[f64; 9]> = cameras
        .iter()
        .map(|c| encode_pose(c).map(|e| e.to_array()))
        .collect::<Result<_>>()?;

    let n = g.len();
    let nc3 = 3 * g.n_coeffs();
    let mut mo_pos = Moments::new(3 * n);
    let mut mo_scale = Moments::new(3 * n);
    let mut mo_rot = Moments::new(4 * n);
    let mut mo_op = Moments::new(n);
    let mut mo_sh = Moments::new(nc3 * n);
    let mut mo_cam = Moments::new(9 * cameras.len());

    let opts = RenderOptions::default();
    let n_views = cameras.len() as f64;
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut acc = GaussianGrads::zeros(n, g.sh_degree);
        let mut cam_grads = vec![[0.0f64; 9]; cameras.len()];
        let mut mse_total = 0.0;
        let mut dssim_total = 0.0;

        for (vi, cam) in cameras.iter().enumerate() {
            let (buf, cache) = render_with_cache(&g, cam, background, &opts)?;
            let rendered =
                ImageRgb { width: buf.width, height: buf.height, data: buf.rgb };
            let target = &targets[vi];
            let n_samples = (3 * rendered.data.len()) as f64;
            let mut mse_v = 0.0;
            let mut upstream = RenderUpstream::zeros(rendered.width, rendered.height);
            for i in 0..rendered.data.len() {
                let diff = rendered.data[i] - target.data[i];
                mse_v += diff.norm_squared();
                upstream.d_rgb[i] = 2.0 * diff / (n_samples * n_views);
            }
            mse_v /= n_samples;
            let (dssim_v, d_dssim) = dssim_with_grad(&rendered, target)?;
            for i in 0..upstream.d_rgb.len() {
                upstream.d_rgb[i] += cfg.ssim_weight * d_dssim[i] / n_views;
            }
            mse_total += mse_v / n_views;
            dssim_total += dssim_v / n_views;

            let grads = render_backward(&g, &cache, &upstream)?;
            acc.add_assign(&grads.gaussians);
            cam_grads[vi] = grads.pose.encoding_grad(cam);
        }

        let total = mse_total + cfg.ssim_weight * dssim_total;
        if !total.is_finite() {
            let term = if !mse_total.is_finite() { "mse" } else { "dssim" };
            return Err(Error::NonFiniteLoss { step, term: term.into() });
        }
        trace.push(TraceRow { step, total, mse: mse_total, dssim: dssim_total });

        let adam = AdamStep::new(cfg, step + 1);
        for i in 0..n {
            for k in 0..3 {
                adam.update(
                    &mut g.positions[i][k],
                    acc.positions[i][k],
                    3 * i + k,
                    &mut mo_pos,
                    cfg.lr_position,
                );
                adam.update(
                    &mut g.log_scale[i][k],
                    acc.log_scale[i][k],
                    3 * i + k,
                    &mut mo_scale,
                    cfg.lr_scale,
                );
            }
            for k in 0..4 {
                adam.update(
                    &mut g.raw_quaternion[i][k],
                    acc.raw_quaternion[i][k],
                    4 * i + k,
                    &mut mo_rot,
                    cfg.lr_rotation,
                );
            }
            adam.update(&mut g.logit_opacity[i], acc.logit_opacity[i], i, &mut mo_op, cfg.lr_opacity);
            for k in 0..nc3 {
                adam.update(
                    &mut g.sh[i * nc3 + k],
                    acc.sh[i * nc3 + k],
                    i * nc3 + k,
                    &mut mo_sh,
                    cfg.lr_color,
                );
            }
        }

        for ci in 1..cameras.len() {
            for k in 0..9 {
                adam.update(&mut encs[ci][k], cam_grads[ci][k], 9 * ci + k, &mut mo_cam, cfg.lr_camera);
            }
            // keep the stored quaternion unit-norm and canonically signed;
            // a sign flip must flip the first moments with it or momentum
            // would keep pushing against the relabeled parameters
            let norm = (0..4).map(|k| encs[ci][k] * encs[ci][k]).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 1e-12) {
                return Err(Error::NonFiniteLoss {
                    step,
                    term: format!("camera {ci} quaternion norm"),
                });
            }
            for k in 0..4 {
                encs[ci][k] /= norm;
            }
            if encs[ci][0] < 0.0 {
                for k in 0..4 {
                    encs[ci][k] = -encs[ci][k];
                    mo_cam.m[9 * ci + k] = -mo_cam.m[9 * ci + k];
                }
            }
            let enc = PoseEncoding::from_array(&encs[ci]);
            cameras[ci] = decode_pose(&enc, cameras[ci].width, cameras[ci].height)?;
        }

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            checkpoint(step + 1, &g, &cameras)?;
        }
    }

    g.validate()?;
    Ok(FitOutcome { gaussians: g, cameras, trace })
}

/// Prune, then refine Gaussians and all cameras but the first against the
/// target views. Objective per step: mean-over-views MSE plus
/// `ssim_weight` times mean structural dissimilarity.
pub fn fit(
    set: &GaussianSet,
    cams: &[Camera],
    targets: &[ImageRgb],
    background: &Vec3,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    fit_with_checkpoints(set, cams, targets, background, cfg, |_, _, _| Ok(()))
}
