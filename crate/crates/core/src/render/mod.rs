//! Software tile-based differentiable rasterizer. Forward produces RGB,
//! expected depth and accumulated alpha; the backward pass (see `backward`)
//! returns analytic gradients for every Gaussian pre-activation parameter
//! and for the camera pose encoding.

mod backward;

pub use backward::{render_backward, PoseGrad, RenderGradients, RenderUpstream};

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::math::{sigmoid, Mat2, Mat3, Vec2, Vec3};
use crate::sh;

/// Contributions are truncated beyond this squared Mahalanobis distance (3σ).
pub(crate) const MAX_MAHALANOBIS_SQ: f64 = 9.0;
/// ... and below this per-splat alpha.
pub(crate) const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Expected depth is normalized by alpha floored at this value.
pub(crate) const ALPHA_FLOOR: f64 = 1e-8;
/// Diagonal regularization of the projected 2D covariance, in pixels².
pub(crate) const COV2D_REG: f64 = 0.3;

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    /// Near plane in world units; Gaussians at or behind it are culled.
    pub near: f64,
    pub tile_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { near: 0.01, tile_size: 16 }
    }
}

#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<Vec3>,
    /// Alpha-normalized expected depth; 0 where nothing rendered.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderBuffers {
    pub fn rgb_image(&self) -> crate::buffers::ImageRgb {
        crate::buffers::ImageRgb {
            width: self.width,
            height: self.height,
            data: self.rgb.clone(),
        }
    }
}

/// One projected Gaussian, cached for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ProjSplat {
    pub id: usize,
    pub mean: Vec2,
    pub conic: Mat2,
    pub z: f64,
    pub opacity: f64,
    /// Clamped render color.
    pub color: Vec3,
    /// Pre-clamp SH evaluation (offset included).
    pub color_raw: Vec3,
    pub p_cam: Vec3,
    /// μ − camera center and its norm; view_dir is the normalized version.
    pub view_vec: Vec3,
    pub view_dir: Vec3,
    pub basis: [f64; 16],
    pub radius: f64,
}

/// Forward cache: projected splats plus per-tile depth-sorted lists.
pub struct SplatIntermediate {
    pub(crate) cam: Camera,
    pub(crate) background: Vec3,
    pub(crate) options: RenderOptions,
    pub(crate) n_gaussians: usize,
    pub(crate) sh_degree: usize,
    pub(crate) splats: Vec<ProjSplat>,
    pub(crate) tiles_x: usize,
    pub(crate) tile_lists: Vec<Vec<u32>>,
    /// Per pixel, the Gaussian id contributing the largest T·α (−1 if none).
    /// Auxiliary output used by the synthetic data generator.
    pub dominant: Vec<i64>,
}

impl SplatIntermediate {
    pub fn n_projected(&self) -> usize {
        self.splats.len()
    }
}

/// EWA projection of one Gaussian: 2D mean, regularized 2D covariance and
/// camera depth. `None` when the center is at or behind the near plane.
pub fn project_gaussian(
    cam: &Camera,
    position: &Vec3,
    sigma: &Mat3,
    near: f64,
) -> Option<(Vec2, Mat2, f64)> {
    let w = cam.rotation().transpose(); // world-to-camera
    let p = w * (position - cam.t);
    if p.z <= near {
        return None;
    }
    let mean = Vec2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    let j = perspective_jacobian(cam, &p);
    let u = j * w;
    let mut cov = u * sigma * u.transpose();
    cov[(0, 0)] += COV2D_REG;
    cov[(1, 1)] += COV2D_REG;
    // symmetrize: u * sigma * u^T is symmetric up to rounding
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    Some((mean, cov, p.z))
}

/// ∂(pixel)/∂(camera-space point) for the pinhole projection.
pub(crate) fn perspective_jacobian(cam: &Camera, p: &Vec3) -> nalgebra::Matrix2x3<f64> {
    nalgebra::Matrix2x3::new(
        cam.fx / p.z,
        0.0,
        -cam.fx * p.x / (p.z * p.z),
        0.0,
        cam.fy / p.z,
        -cam.fy * p.y / (p.z * p.z),
    )
}

fn project_all(set: &GaussianSet, cam: &Camera, opts: &RenderOptions) -> Vec<ProjSplat> {
    let nc = set.n_coeffs();
    (0..set.len())
        .into_par_iter()
        .filter_map(|i| {
            let sigma = set.covariance(i);
            let (mean, cov2d, z) = project_gaussian(cam, &set.positions[i], &sigma, opts.near)?;
            let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
            if !(det > 0.0) {
                return None;
            }
            let conic = Mat2::new(
                cov2d[(1, 1)] / det,
                -cov2d[(0, 1)] / det,
                -cov2d[(1, 0)] / det,
                cov2d[(0, 0)] / det,
            );
            // 3σ radius from the larger eigenvalue
            let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = 3.0 * lambda_max.sqrt();
            if mean.x + radius < 0.0
                || mean.x - radius > (cam.width - 1) as f64
                || mean.y + radius < 0.0
                || mean.y - radius > (cam.height - 1) as f64
            {
                return None;
            }

            let view_vec = set.positions[i] - cam.t;
            let n = view_vec.norm();
            if !(n > 1e-12) {
                return None;
            }
            let view_dir = view_vec / n;
            let basis = sh::basis(set.sh_degree, &view_dir);
            let coeffs = set.sh_slice(i);
            let mut color_raw = Vec3::zeros();
            for ch in 0..3 {
                let mut acc = 0.5;
                for j in 0..nc {
                    acc += basis[j] * coeffs[ch * nc + j];
                }
                color_raw[ch] = acc;
            }
            let color = color_raw.map(|v| v.clamp(0.0, 1.0));

            let w = cam.rotation().transpose();
            Some(ProjSplat {
                id: i,
                mean,
                conic,
                z,
                opacity: sigmoid(set.logit_opacity[i]),
                color,
                color_raw,
                p_cam: w * (set.positions[i] - cam.t),
                view_vec,
                view_dir,
                basis,
                radius,
            })
        })
        .collect()
}

fn build_tile_lists(
    splats: &[ProjSplat],
    width: usize,
    height: usize,
    tile: usize,
) -> (usize, usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let x0 = (((s.mean.x - s.radius) / tile as f64).floor().max(0.0)) as usize;
        let y0 = (((s.mean.y - s.radius) / tile as f64).floor().max(0.0)) as usize;
        let x1 = (((s.mean.x + s.radius) / tile as f64).floor()) as usize;
        let y1 = (((s.mean.y + s.radius) / tile as f64).floor()) as usize;
        for ty in y0..=y1.min(tiles_y - 1) {
            for tx in x0..=x1.min(tiles_x - 1) {
                lists[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    // front-to-back: ascending camera depth, ties by Gaussian id
    lists.par_iter_mut().for_each(|list| {
        list.sort_unstable_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.z.partial_cmp(&sb.z).unwrap().then(sa.id.cmp(&sb.id))
        });
    });
    (tiles_x, tiles_y, lists)
}

struct TileOut {
    rgb: Vec<Vec3>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    dominant: Vec<i64>,
}

/// Render and keep the projection cache for a subsequent backward pass.
pub fn render_with_cache(
    set: &GaussianSet,
    cam: &Camera,
    background: &Vec3,
    opts: &RenderOptions,
) -> Result<(RenderBuffers, SplatIntermediate)> {
    if !background.iter().all(|v| v.is_finite()) {
        return Err(Error::Dimension("non-finite background color".into()));
    }
    set.validate()?;
    let tile = opts.tile_size.max(1);
    let splats = project_all(set, cam, opts);
    let (tiles_x, tiles_y, tile_lists) = build_tile_lists(&splats, cam.width, cam.height, tile);

    let tile_outputs: Vec<TileOut> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let tx = t % tiles_x;
            let ty = t / tiles_x;
            let x0 = tx * tile;
            let y0 = ty * tile;
            let x1 = (x0 + tile).min(cam.width);
            let y1 = (y0 + tile).min(cam.height);
            let npix = (x1 - x0) * (y1 - y0);
            let mut out = TileOut {
                rgb: vec![*background; npix],
                depth: vec![0.0; npix],
                alpha: vec![0.0; npix],
                dominant: vec![-1; npix],
            };
            let list = &tile_lists[t];
            let mut p = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = Vec2::new(x as f64, y as f64);
                    let mut t_trans = 1.0f64;
                    let mut rgb = Vec3::zeros();
                    let mut acc_alpha = 0.0;
                    let mut raw_depth = 0.0;
                    let mut best_w = 0.0;
                    let mut best_id = -1i64;
                    for &k in list {
                        let s = &splats[k as usize];
                        let d = px - s.mean;
                        let q = s.conic[(0, 0)] * d.x * d.x
                            + 2.0 * s.conic[(0, 1)] * d.x * d.y
                            + s.conic[(1, 1)] * d.y * d.y;
                        if q > MAX_MAHALANOBIS_SQ {
                            continue;
                        }
                        let alpha = s.opacity * (-0.5 * q).exp();
                        if alpha < MIN_ALPHA {
                            continue;
                        }
                        let w = t_trans * alpha;
                        rgb += w * s.color;
                        raw_depth += w * s.z;
                        acc_alpha += w;
                        if w > best_w {
                            best_w = w;
                            best_id = s.id as i64;
                        }
                        t_trans *= 1.0 - alpha;
                    }
                    out.rgb[p] = rgb + t_trans * background;
                    out.alpha[p] = acc_alpha;
                    out.depth[p] = raw_depth / acc_alpha.max(ALPHA_FLOOR);
                    out.dominant[p] = best_id;
                    p += 1;
                }
            }
            out
        })
        .collect();

    // merge in tile order; tiles own disjoint pixel rectangles
    let mut buf = RenderBuffers {
        width: cam.width,
        height: cam.height,
        rgb: vec![Vec3::zeros(); cam.width * cam.height],
        depth: vec![0.0; cam.width * cam.height],
        alpha: vec![0.0; cam.width * cam.height],
    };
    let mut dominant = vec![-1i64; cam.width * cam.height];
    for (t, out) in tile_outputs.iter().enumerate() {
        let tx = t % tiles_x;
        let ty = t / tiles_x;
        let x0 = tx * tile;
        let y0 = ty * tile;
        let x1 = (x0 + tile).min(cam.width);
        let y1 = (y0 + tile).min(cam.height);
        let mut p = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * cam.width + x;
                buf.rgb[i] = out.rgb[p];
                buf.depth[i] = out.depth[p];
                buf.alpha[i] = out.alpha[p];
                dominant[i] = out.dominant[p];
                p += 1;
            }
        }
    }

    let cache = SplatIntermediate {
        cam: cam.clone(),
        background: *background,
        options: *opts,
        n_gaussians: set.len(),
        sh_degree: set.sh_degree,
        splats,
        tiles_x,
        tile_lists,
        dominant,
    };
    Ok((buf, cache))
}

/// Render without keeping the cache.
pub fn render(
    set: &GaussianSet,
    cam: &Camera,
    background: &Vec3,
    opts: &RenderOptions,
) -> Result<RenderBuffers> {
    render_with_cache(set, cam, background, opts).map(|(b, _)| b)
}
