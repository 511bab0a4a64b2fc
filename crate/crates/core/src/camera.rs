//! Pinhole camera model, 9-scalar pose encoding, projection/back-projection
//! with analytic Jacobians, and the two trajectory alignment procedures.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::DepthMap;
use crate::math::{
    normalize_jacobian4, quat_canonical, quat_norm, quat_normalize, quat_to_rot,
    quat_to_rot_grad, rot_to_quat, Mat3, Vec2, Vec3,
};

/// Pinhole camera. The rotation quaternion maps camera coordinates to world
/// coordinates and `t` is the camera center in world units, so
/// `x_world = R x_cam + t` and `x_cam = R^T (x_world - t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Unit quaternion, scalar-first, canonical sign (scalar >= 0).
    pub q: [f64; 4],
    /// Camera center in world coordinates.
    pub t: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        q: [f64; 4],
        t: Vec3,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!("empty image size {width}x{height}")));
        }
        for (name, v) in [("fx", fx), ("fy", fy), ("cx", cx), ("cy", cy)] {
            if !v.is_finite() {
                return Err(Error::InvalidCamera(format!("non-finite {name}")));
            }
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidCamera(format!("focal lengths must be > 0, got ({fx}, {fy})")));
        }
        if cx <= 0.0 || cx >= width as f64 || cy <= 0.0 || cy >= height as f64 {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        if !t.iter().all(|v| v.is_finite()) || !q.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite pose".into()));
        }
        let n = quat_norm(&q);
        if !(n > 1e-6) {
            return Err(Error::InvalidCamera(format!("quaternion norm {n} too small")));
        }
        // renormalize only when needed so already-unit quaternions survive
        // file round-trips bitwise
        let q = if (n - 1.0).abs() > 1e-12 { quat_normalize(&q) } else { q };
        let q = quat_canonical(&q);
        Ok(Camera { width, height, fx, fy, cx, cy, q, t })
    }

    /// World-from-camera rotation matrix.
    pub fn rotation(&self) -> Mat3 {
        quat_to_rot(&self.q)
    }

    pub fn cam_from_world(&self, p_world: &Vec3) -> Vec3 {
        self.rotation().transpose() * (p_world - self.t)
    }

    pub fn world_from_cam(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation() * p_cam + self.t
    }

    /// Project a world point. Returns `(pixel, depth)` where depth is the
    /// camera-space z. Points with z <= 1e-8 are behind the camera and
    /// reported as `None` (culled, not an error).
    pub fn project(&self, p_world: &Vec3) -> Option<(Vec2, f64)> {
        let p = self.cam_from_world(p_world);
        if p.z <= 1e-8 {
            return None;
        }
        let px = Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy);
        Some((px, p.z))
    }

    /// Back-project one pixel at a given depth into world space. Pixel index
    /// (x, y) maps to the continuous image coordinate (x, y) exactly.
    pub fn backproject_pixel(&self, x: f64, y: f64, depth: f64) -> Vec3 {
        let ray = Vec3::new(
            (x - self.cx) / self.fx * depth,
            (y - self.cy) / self.fy * depth,
            depth,
        );
        self.world_from_cam(&ray)
    }

    /// `backproject_pixel` plus analytic derivatives with respect to the
    /// depth value and the 9 pose-encoding scalars (raw quaternion,
    /// translation, normalized focals).
    pub fn backproject_pixel_grad(&self, x: f64, y: f64, depth: f64) -> (Vec3, BackprojectJacobian) {
        let r = self.rotation();
        let ux = (x - self.cx) / self.fx;
        let uy = (y - self.cy) / self.fy;
        let ray = Vec3::new(ux * depth, uy * depth, depth);
        let world = r * ray + self.t;

        let d_depth = r * Vec3::new(ux, uy, 1.0);

        // focal derivatives, chained to the normalized encoding f = (fx/w, fy/h)
        let d_fx = r * Vec3::new(-ux * depth / self.fx, 0.0, 0.0);
        let d_fy = r * Vec3::new(0.0, -uy * depth / self.fy, 0.0);
        let d_f = [d_fx * self.width as f64, d_fy * self.height as f64];

        // quaternion derivatives through the normalization map (the encoding
        // carries a free 4-vector that is renormalized on decode)
        let rg = quat_to_rot_grad(&self.q);
        let jn = normalize_jacobian4(&self.q);
        let mut d_q = [Vec3::zeros(); 4];
        for raw in 0..4 {
            let mut acc = Vec3::zeros();
            for unit in 0..4 {
                acc += rg[unit] * ray * jn[(unit, raw)];
            }
            d_q[raw] = acc;
        }

        (world, BackprojectJacobian { d_depth, d_q, d_t: Mat3::identity(), d_f })
    }

    /// Back-project every valid pixel of a depth map, row-major order.
    /// Non-positive depth at a valid pixel is treated as invalid and skipped.
    pub fn backproject(&self, depth: &DepthMap) -> Result<Vec<Vec3>> {
        if depth.width != self.width || depth.height != self.height {
            return Err(Error::Dimension(format!(
                "depth map {}x{} does not match camera image {}x{}",
                depth.width, depth.height, self.width, self.height
            )));
        }
        let mut out = Vec::new();
        for y in 0..depth.height {
            for x in 0..depth.width {
                let i = y * depth.width + x;
                if depth.valid[i] && depth.depth[i] > 0.0 {
                    out.push(self.backproject_pixel(x as f64, y as f64, depth.depth[i]));
                }
            }
        }
        Ok(out)
    }

    pub fn center(&self) -> Vec3 {
        self.t
    }
}

/// Derivatives of a back-projected point.
#[derive(Debug, Clone)]
pub struct BackprojectJacobian {
    pub d_depth: Vec3,
    pub d_q: [Vec3; 4],
    pub d_t: Mat3,
    pub d_f: [Vec3; 2],
}

/// 9-scalar camera pose encoding: unit quaternion (scalar-first, canonical
/// sign), camera center, and focals normalized by image size. The principal
/// point is fixed at the image center and not part of the encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEncoding {
    pub q: [f64; 4],
    pub t: Vec3,
    pub f: [f64; 2],
}

impl PoseEncoding {
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.q[0], self.q[1], self.q[2], self.q[3], self.t.x, self.t.y, self.t.z,
            self.f[0], self.f[1],
        ]
    }

    pub fn from_array(a: &[f64; 9]) -> Self {
        PoseEncoding {
            q: [a[0], a[1], a[2], a[3]],
            t: Vec3::new(a[4], a[5], a[6]),
            f: [a[7], a[8]],
        }
    }
}

pub fn encode_pose(cam: &Camera) -> Result<PoseEncoding> {
    let enc = PoseEncoding {
        q: cam.q,
        t: cam.t,
        f: [cam.fx / cam.width as f64, cam.fy / cam.height as f64],
    };
    if !enc.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidCamera("non-finite field in pose encoding".into()));
    }
    Ok(enc)
}

/// Inverse of `encode_pose`. The quaternion is renormalized when its norm is
/// within 1e-3 of unit; larger deviations are rejected.
pub fn decode_pose(p: &PoseEncoding, width: usize, height: usize) -> Result<Camera> {
    if !p.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidEncoding("non-finite component".into()));
    }
    let n = quat_norm(&p.q);
    if (n - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidEncoding(format!("quaternion norm {n} deviates from 1 by > 1e-3")));
    }
    if p.f[0] <= 0.0 || p.f[1] <= 0.0 {
        return Err(Error::InvalidEncoding(format!(
            "normalized focals must be > 0, got ({}, {})",
            p.f[0], p.f[1]
        )));
    }
    Camera::new(
        width,
        height,
        p.f[0] * width as f64,
        p.f[1] * height as f64,
        width as f64 / 2.0,
        height as f64 / 2.0,
        p.q,
        p.t,
    )
}

/// Ratio s/ŝ of mean camera-center distances to the respective first camera,
/// where `joint[..context.len()]` are the poses predicted for the context
/// views. Multiplying the joint translations by the result re-expresses them
/// in the context's metric scale.
pub fn align_test_time_scale(context: &[Camera], joint: &[Camera]) -> Result<f64> {
    if context.len() < 2 {
        return Err(Error::DegenerateScale("need at least 2 context cameras".into()));
    }
    if joint.len() < context.len() {
        return Err(Error::Dimension(format!(
            "joint list has {} cameras, context expects at least {}",
            joint.len(),
            context.len()
        )));
    }
    let mean_dist = |cams: &[Camera], n: usize| -> f64 {
        let c0 = cams[0].center();
        let sum: f64 = cams[1..n].iter().map(|c| (c.center() - c0).norm()).sum();
        sum / (n - 1) as f64
    };
    let s = mean_dist(context, context.len());
    let s_hat = mean_dist(joint, context.len());
    if s_hat < 1e-12 {
        return Err(Error::DegenerateScale(format!("mean predicted distance {s_hat} below 1e-12")));
    }
    Ok(s / s_hat)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Robust evaluation alignment: predicted poses are re-expressed relative to
/// the first predicted camera, translations rescaled by the ratio of median
/// center distances, and the whole set re-anchored at the first ground-truth
/// pose (so `pred == gt` maps to itself regardless of where gt sits).
pub fn align_eval_robust(pred: &[Camera], gt: &[Camera]) -> Result<Vec<Camera>> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "pose lists differ in length: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InsufficientViews(format!(
            "alignment needs at least 2 cameras, got {}",
            pred.len()
        )));
    }
    let p0 = &pred[0];
    let g0 = &gt[0];
    let rp0 = p0.rotation();
    let rg0 = g0.rotation();

    let pred_d: Vec<f64> = pred[1..].iter().map(|c| (c.center() - p0.center()).norm()).collect();
    let gt_d: Vec<f64> = gt[1..].iter().map(|c| (c.center() - g0.center()).norm()).collect();
    let med_pred = median(pred_d);
    if med_pred < 1e-12 {
        return Err(Error::DegenerateScale(format!(
            "median predicted camera distance {med_pred} below 1e-12"
        )));
    }
    let scale = median(gt_d) / med_pred;

    pred.iter()
        .map(|c| {
            let rel_r = rp0.transpose() * c.rotation();
            let rel_c = rp0.transpose() * (c.center() - p0.center());
            let r = rg0 * rel_r;
            let center = g0.center() + rg0 * (scale * rel_c);
            Camera::new(c.width, c.height, c.fx, c.fy, c.cx, c.cy, rot_to_quat(&r), center)
        })
        .collect()
}

fn format_f64(v: f64) -> String {
    // shortest round-trip decimal; Display for f64 guarantees exact re-parse
    format!("{v}")
}

pub fn write_trajectory(path: &Path, cams: &[Camera]) -> Result<()> {
    let mut out = String::new();
    for c in cams {
        let fields: Vec<String> = [c.fx, c.fy, c.cx, c.cy]
            .iter()
            .chain(c.q.iter())
            .chain(c.t.iter())
            .map(|v| format_f64(*v))
            .collect();
        out.push_str(&format!("{} {} {}\n", c.width, c.height, fields.join(" ")));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cams = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 13 {
            return Err(Error::parse(
                path,
                format!("line {}: expected 13 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let mut nums = [0.0f64; 11];
        let width: usize = fields[0]
            .parse()
            .map_err(|e| Error::parse(path, format!("line {}: width: {e}", lineno + 1)))?;
        let height: usize = fields[1]
            .parse()
            .map_err(|e| Error::parse(path, format!("line {}: height: {e}", lineno + 1)))?;
        for (i, s) in fields[2..].iter().enumerate() {
            nums[i] = s
                .parse()
                .map_err(|e| Error::parse(path, format!("line {}: field {}: {e}", lineno + 1, i + 3)))?;
        }
        let cam = Camera::new(
            width,
            height,
            nums[0],
            nums[1],
            nums[2],
            nums[3],
            [nums[4], nums[5], nums[6], nums[7]],
            Vec3::new(nums[8], nums[9], nums[10]),
        )
        .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        cams.push(cam);
    }
    Ok(cams)
}
