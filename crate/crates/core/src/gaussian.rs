//! Gaussian primitive storage in pre-activation parameter space, the
//! activation functions with their derivatives, and lifting of per-view
//! depth + attribute predictions into pixel-wise Gaussians.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{quat_normalize, quat_to_rot, quat_to_rot_grad, sigmoid, Mat3, Vec3};
use crate::sh;

/// Column-major store of N Gaussians. Parameters are kept raw (logit
/// opacity, log scale, unnormalized quaternion) so that unconstrained
/// gradient steps and linear voxel aggregation stay in the valid domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<Vec3>,
    pub logit_opacity: Vec<f64>,
    pub raw_quaternion: Vec<[f64; 4]>,
    pub log_scale: Vec<Vec3>,
    /// Flat SH coefficients, `sh[g * 3 * nc + ch * nc + j]` (channel-major
    /// per Gaussian, matching the on-disk layout).
    pub sh: Vec<f64>,
    pub confidence: Vec<f64>,
    pub sh_degree: usize,
}

impl GaussianSet {
    pub fn empty(sh_degree: usize) -> Result<Self> {
        sh::check_degree(sh_degree)?;
        Ok(GaussianSet {
            positions: Vec::new(),
            logit_opacity: Vec::new(),
            raw_quaternion: Vec::new(),
            log_scale: Vec::new(),
            sh: Vec::new(),
            confidence: Vec::new(),
            sh_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_coeffs(&self) -> usize {
        sh::n_coeffs(self.sh_degree)
    }

    /// Check the shared-length and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        sh::check_degree(self.sh_degree)?;
        let n = self.len();
        let nc = self.n_coeffs();
        if self.logit_opacity.len() != n
            || self.raw_quaternion.len() != n
            || self.log_scale.len() != n
            || self.confidence.len() != n
            || self.sh.len() != n * 3 * nc
        {
            return Err(Error::Dimension(format!(
                "gaussian arrays disagree on N={n}: opacity {}, quat {}, scale {}, conf {}, sh {} (expected {})",
                self.logit_opacity.len(),
                self.raw_quaternion.len(),
                self.log_scale.len(),
                self.confidence.len(),
                self.sh.len(),
                n * 3 * nc
            )));
        }
        let finite = self.positions.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.logit_opacity.iter().all(|v| v.is_finite())
            && self.raw_quaternion.iter().all(|q| q.iter().all(|v| v.is_finite()))
            && self.log_scale.iter().all(|s| s.iter().all(|v| v.is_finite()))
            && self.sh.iter().all(|v| v.is_finite())
            && self.confidence.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Dimension("non-finite gaussian parameter".into()));
        }
        for q in &self.raw_quaternion {
            if !(crate::math::quat_norm(q) > 1e-12) {
                return Err(Error::Dimension("zero-norm quaternion".into()));
            }
        }
        Ok(())
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.logit_opacity[i])
    }

    pub fn scale(&self, i: usize) -> Vec3 {
        self.log_scale[i].map(f64::exp)
    }

    pub fn unit_quaternion(&self, i: usize) -> [f64; 4] {
        quat_normalize(&self.raw_quaternion[i])
    }

    pub fn sh_slice(&self, i: usize) -> &[f64] {
        let nc3 = 3 * self.n_coeffs();
        &self.sh[i * nc3..(i + 1) * nc3]
    }

    pub fn covariance(&self, i: usize) -> Mat3 {
        covariance_from_params(&self.raw_quaternion[i], &self.log_scale[i])
    }

    /// Keep only the Gaussians selected by the predicate; preserves order.
    pub fn retain(&mut self, keep: impl Fn(usize) -> bool) {
        let nc3 = 3 * self.n_coeffs();
        let mut w = 0;
        for i in 0..self.len() {
            if keep(i) {
                self.positions[w] = self.positions[i];
                self.logit_opacity[w] = self.logit_opacity[i];
                self.raw_quaternion[w] = self.raw_quaternion[i];
                self.log_scale[w] = self.log_scale[i];
                self.confidence[w] = self.confidence[i];
                self.sh.copy_within(i * nc3..(i + 1) * nc3, w * nc3);
                w += 1;
            }
        }
        self.positions.truncate(w);
        self.logit_opacity.truncate(w);
        self.raw_quaternion.truncate(w);
        self.log_scale.truncate(w);
        self.confidence.truncate(w);
        self.sh.truncate(w * nc3);
    }

    pub fn append(&mut self, other: &GaussianSet) -> Result<()> {
        if other.sh_degree != self.sh_degree {
            return Err(Error::Dimension(format!(
                "sh degree mismatch on append: {} vs {}",
                self.sh_degree, other.sh_degree
            )));
        }
        self.positions.extend_from_slice(&other.positions);
        self.logit_opacity.extend_from_slice(&other.logit_opacity);
        self.raw_quaternion.extend_from_slice(&other.raw_quaternion);
        self.log_scale.extend_from_slice(&other.log_scale);
        self.sh.extend_from_slice(&other.sh);
        self.confidence.extend_from_slice(&other.confidence);
        Ok(())
    }

    /// Approximate in-memory footprint, used by the scaling report.
    pub fn byte_size(&self) -> usize {
        self.positions.len() * 24
            + self.logit_opacity.len() * 8
            + self.raw_quaternion.len() * 32
            + self.log_scale.len() * 24
            + self.sh.len() * 8
            + self.confidence.len() * 8
    }
}

/// Gradient accumulator shaped like a `GaussianSet`.
#[derive(Debug, Clone)]
pub struct GaussianGrads {
    pub positions: Vec<Vec3>,
    pub logit_opacity: Vec<f64>,
    pub raw_quaternion: Vec<[f64; 4]>,
    pub log_scale: Vec<Vec3>,
    pub sh: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl GaussianGrads {
    pub fn zeros(n: usize, sh_degree: usize) -> Self {
        GaussianGrads {
            positions: vec![Vec3::zeros(); n],
            logit_opacity: vec![0.0; n],
            raw_quaternion: vec![[0.0; 4]; n],
            log_scale: vec![Vec3::zeros(); n],
            sh: vec![0.0; n * 3 * sh::n_coeffs(sh_degree)],
            confidence: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        for i in 0..self.positions.len() {
            self.positions[i] += other.positions[i];
            self.logit_opacity[i] += other.logit_opacity[i];
            for k in 0..4 {
                self.raw_quaternion[i][k] += other.raw_quaternion[i][k];
            }
            self.log_scale[i] += other.log_scale[i];
            self.confidence[i] += other.confidence[i];
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b;
        }
    }
}

/// Per-view dense attribute maps, the ingested stand-in for the prediction
/// head outputs. Layouts mirror `GaussianSet` per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMaps {
    pub width: usize,
    pub height: usize,
    pub sh_degree: usize,
    pub logit_opacity: Vec<f64>,
    pub raw_quaternion: Vec<[f64; 4]>,
    pub log_scale: Vec<Vec3>,
    /// `sh[px * 3 * nc + ch * nc + j]`
    pub sh: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl AttributeMaps {
    pub fn validate(&self) -> Result<()> {
        sh::check_degree(self.sh_degree)?;
        let n = self.width * self.height;
        let nc = sh::n_coeffs(self.sh_degree);
        if self.logit_opacity.len() != n
            || self.raw_quaternion.len() != n
            || self.log_scale.len() != n
            || self.confidence.len() != n
            || self.sh.len() != n * 3 * nc
        {
            return Err(Error::Dimension(format!(
                "attribute maps disagree with {}x{} image",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn constant(width: usize, height: usize, sh_degree: usize) -> Self {
        let n = width * height;
        AttributeMaps {
            width,
            height,
            sh_degree,
            logit_opacity: vec![0.0; n],
            raw_quaternion: vec![[1.0, 0.0, 0.0, 0.0]; n],
            log_scale: vec![Vec3::zeros(); n],
            sh: vec![0.0; n * 3 * sh::n_coeffs(sh_degree)],
            confidence: vec![0.0; n],
        }
    }
}

/// Per-view depth prediction with confidence and validity. Invalid pixels
/// never produce Gaussians and are excluded from the geometry losses.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        let n = width * height;
        DepthMap {
            width,
            height,
            depth: vec![fill; n],
            confidence: vec![1.0; n],
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.depth.len() != n || self.confidence.len() != n || self.valid.len() != n {
            return Err(Error::Dimension(format!(
                "depth map arrays disagree with {}x{} image",
                self.width, self.height
            )));
        }
        for i in 0..n {
            if self.valid[i] && !(self.depth[i] > 0.0 && self.depth[i].is_finite()) {
                return Err(Error::Dimension(format!(
                    "valid pixel {} has non-positive depth {}",
                    i, self.depth[i]
                )));
            }
        }
        Ok(())
    }
}

/// Σ = R diag(exp(s))² Rᵀ from a raw quaternion and log scales, formed as
/// M Mᵀ with M = R diag(exp(s)) so the result is bitwise symmetric.
pub fn covariance_from_params(raw_q: &[f64; 4], log_scale: &Vec3) -> Mat3 {
    let r = quat_to_rot(&quat_normalize(raw_q));
    let m = r * Mat3::from_diagonal(&log_scale.map(f64::exp));
    m * m.transpose()
}

/// Backward of `covariance_from_params` for a symmetric upstream gradient.
pub fn covariance_backward(
    raw_q: &[f64; 4],
    log_scale: &Vec3,
    d_sigma: &Mat3,
) -> ([f64; 4], Vec3) {
    let u = quat_normalize(raw_q);
    let r = quat_to_rot(&u);
    let g = 0.5 * (d_sigma + d_sigma.transpose()); // symmetrize defensively
    let d = Mat3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));

    // dL/dR = (G + Gᵀ) R D = 2 G R D for symmetric G
    let d_r = 2.0 * g * r * d;
    let rg = quat_to_rot_grad(&u);
    let jn = crate::math::normalize_jacobian4(raw_q);
    let mut d_q = [0.0; 4];
    for raw in 0..4 {
        let mut acc = 0.0;
        for unit in 0..4 {
            acc += rg[unit].component_mul(&d_r).sum() * jn[(unit, raw)];
        }
        d_q[raw] = acc;
    }

    // dL/d log_s_k = (Rᵀ G R)_kk · 2 exp(2 s_k)
    let rtgr = r.transpose() * g * r;
    let d_ls = Vec3::new(
        rtgr[(0, 0)] * 2.0 * (2.0 * log_scale.x).exp(),
        rtgr[(1, 1)] * 2.0 * (2.0 * log_scale.y).exp(),
        rtgr[(2, 2)] * 2.0 * (2.0 * log_scale.z).exp(),
    );
    (d_q, d_ls)
}

/// Lift per-view predictions into one Gaussian per valid pixel. Views are
/// processed independently and concatenated in view order; within a view
/// pixels are row-major, so the output order is deterministic.
pub fn lift_views(
    cams: &[Camera],
    depths: &[DepthMap],
    attrs: &[AttributeMaps],
) -> Result<GaussianSet> {
    if cams.len() != depths.len() || cams.len() != attrs.len() {
        return Err(Error::Dimension(format!(
            "view counts disagree: {} cameras, {} depth maps, {} attribute maps",
            cams.len(),
            depths.len(),
            attrs.len()
        )));
    }
    if cams.is_empty() {
        return Err(Error::EmptyScene);
    }
    let degree = attrs[0].sh_degree;
    for (i, ((cam, dm), am)) in cams.iter().zip(depths).zip(attrs).enumerate() {
        dm.validate()?;
        am.validate()?;
        if dm.width != cam.width || dm.height != cam.height {
            return Err(Error::Dimension(format!(
                "view {i}: depth map {}x{} vs camera {}x{}",
                dm.width, dm.height, cam.width, cam.height
            )));
        }
        if am.width != cam.width || am.height != cam.height {
            return Err(Error::Dimension(format!(
                "view {i}: attribute maps {}x{} vs camera {}x{}",
                am.width, am.height, cam.width, cam.height
            )));
        }
        if am.sh_degree != degree {
            return Err(Error::Dimension(format!(
                "view {i}: sh degree {} differs from view 0 ({})",
                am.sh_degree, degree
            )));
        }
    }

    let parts: Vec<GaussianSet> = cams
        .par_iter()
        .zip(depths)
        .zip(attrs)
        .map(|((cam, dm), am)| {
            let nc = sh::n_coeffs(degree);
            let mut set = GaussianSet::empty(degree).expect("degree validated above");
            for y in 0..dm.height {
                for x in 0..dm.width {
                    let i = y * dm.width + x;
                    if !dm.valid[i] || !(dm.depth[i] > 0.0) {
                        continue;
                    }
                    set.positions.push(cam.backproject_pixel(x as f64, y as f64, dm.depth[i]));
                    set.logit_opacity.push(am.logit_opacity[i]);
                    set.raw_quaternion.push(am.raw_quaternion[i]);
                    set.log_scale.push(am.log_scale[i]);
                    set.sh.extend_from_slice(&am.sh[i * 3 * nc..(i + 1) * 3 * nc]);
                    set.confidence.push(am.confidence[i]);
                }
            }
            set
        })
        .collect();

    let mut out = GaussianSet::empty(degree)?;
    for part in &parts {
        out.append(part)?;
    }
    if out.is_empty() {
        return Err(Error::EmptyScene);
    }
    out.validate()?;
    Ok(out)
}
