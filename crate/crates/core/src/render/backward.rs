//! Analytic backward pass of the tile rasterizer.
//!
//! Phase 1 revisits every tile, replays the per-pixel front-to-back walk
//! recorded by the forward cache and turns upstream image gradients into
//! per-splat screen-space gradients (2D mean, conic, opacity, color, depth)
//! via a reverse transmittance scan. Phase 2 chains those through the EWA
//! projection, spherical harmonics and activations to the pre-activation
//! Gaussian parameters and the camera pose.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{covariance_backward, GaussianGrads, GaussianSet};
use crate::math::{normalize_jacobian3, quat_to_rot_grad, Mat2, Vec2, Vec3};
use crate::sh;

use super::{
    perspective_jacobian, ProjSplat, SplatIntermediate, ALPHA_FLOOR, MAX_MAHALANOBIS_SQ, MIN_ALPHA,
};

/// Upstream gradients of a scalar loss w.r.t. the rendered buffers.
#[derive(Debug, Clone)]
pub struct RenderUpstream {
    pub d_rgb: Vec<Vec3>,
    pub d_depth: Vec<f64>,
    pub d_alpha: Vec<f64>,
}

impl RenderUpstream {
    pub fn zeros(width: usize, height: usize) -> Self {
        RenderUpstream {
            d_rgb: vec![Vec3::zeros(); width * height],
            d_depth: vec![0.0; width * height],
            d_alpha: vec![0.0; width * height],
        }
    }
}

/// Gradient w.r.t. the rendering camera. Rotation is reported in the
/// ambient 4-space of the unit quaternion; `encoding_grad` projects it
/// onto the 9-component pose encoding.
#[derive(Debug, Clone, Copy, Default)]
pub struct PoseGrad {
    pub d_unit_quaternion: [f64; 4],
    pub d_center: Vec3,
    pub d_fx: f64,
    pub d_fy: f64,
}

impl PoseGrad {
    /// Chain onto the pose encoding: quaternion gradient tangent to the
    /// unit sphere, center passed through, focals rescaled to the
    /// resolution-normalized components.
    pub fn encoding_grad(&self, cam: &Camera) -> [f64; 9] {
        let q = cam.q;
        let dot: f64 = (0..4).map(|k| q[k] * self.d_unit_quaternion[k]).sum();
        let mut g = [0.0; 9];
        for k in 0..4 {
            g[k] = self.d_unit_quaternion[k] - dot * q[k];
        }
        g[4] = self.d_center.x;
        g[5] = self.d_center.y;
        g[6] = self.d_center.z;
        g[7] = self.d_fx * cam.width as f64;
        g[8] = self.d_fy * cam.height as f64;
        g
    }
}

#[derive(Debug, Clone)]
pub struct RenderGradients {
    pub gaussians: GaussianGrads,
    pub pose: PoseGrad,
}

/// Screen-space gradient of one projected splat.
#[derive(Clone, Copy)]
struct Splat2DGrad {
    d_mean: Vec2,
    d_conic: Mat2,
    d_opacity: f64,
    d_color: Vec3,
    d_z: f64,
}

impl Splat2DGrad {
    fn zeros() -> Self {
        Splat2DGrad {
            d_mean: Vec2::zeros(),
            d_conic: Mat2::zeros(),
            d_opacity: 0.0,
            d_color: Vec3::zeros(),
            d_z: 0.0,
        }
    }

    fn add(&mut self, o: &Splat2DGrad) {
        self.d_mean += o.d_mean;
        self.d_conic += o.d_conic;
        self.d_opacity += o.d_opacity;
        self.d_color += o.d_color;
        self.d_z += o.d_z;
    }
}

/// One recorded contribution during the pixel replay.
struct Contribution {
    /// Index into the tile list.
    slot: usize,
    alpha: f64,
    /// Gaussian falloff exp(−q/2), so alpha = opacity · falloff.
    falloff: f64,
    /// Transmittance in front of this contribution.
    t_before: f64,
    d: Vec2,
}

fn tile_backward(
    cache: &SplatIntermediate,
    upstream: &RenderUpstream,
    t: usize,
) -> Vec<Splat2DGrad> {
    let tile = cache.options.tile_size.max(1);
    let cam = &cache.cam;
    let tx = t % cache.tiles_x;
    let ty = t / cache.tiles_x;
    let x0 = tx * tile;
    let y0 = ty * tile;
    let x1 = (x0 + tile).min(cam.width);
    let y1 = (y0 + tile).min(cam.height);
    let list = &cache.tile_lists[t];
    let mut local = vec![Splat2DGrad::zeros(); list.len()];
    let mut contribs: Vec<Contribution> = Vec::with_capacity(list.len());

    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * cam.width + x;
            let gr = upstream.d_rgb[i];
            let gd = upstream.d_depth[i];
            let ga = upstream.d_alpha[i];
            if gr == Vec3::zeros() && gd == 0.0 && ga == 0.0 {
                continue;
            }
            // replay the forward walk, recording each contribution
            contribs.clear();
            let px = Vec2::new(x as f64, y as f64);
            let mut t_trans = 1.0f64;
            let mut a_sum = 0.0;
            let mut raw_depth = 0.0;
            for (slot, &k) in list.iter().enumerate() {
                let s = &cache.splats[k as usize];
                let d = px - s.mean;
                let q = s.conic[(0, 0)] * d.x * d.x
                    + 2.0 * s.conic[(0, 1)] * d.x * d.y
                    + s.conic[(1, 1)] * d.y * d.y;
                if q > MAX_MAHALANOBIS_SQ {
                    continue;
                }
                let falloff = (-0.5 * q).exp();
                let alpha = s.opacity * falloff;
                if alpha < MIN_ALPHA {
                    continue;
                }
                a_sum += t_trans * alpha;
                raw_depth += t_trans * alpha * s.z;
                contribs.push(Contribution { slot, alpha, falloff, t_before: t_trans, d });
                t_trans *= 1.0 - alpha;
            }

            // expected depth = raw / max(alpha, floor)
            let denom = a_sum.max(ALPHA_FLOOR);
            let d_raw = gd / denom;
            let ga_total =
                ga + if a_sum > ALPHA_FLOOR { -gd * raw_depth / (denom * denom) } else { 0.0 };

            // reverse transmittance scan; T_final multiplies the background
            let mut g_t = gr.dot(&cache.background);
            for c in contribs.iter().rev() {
                let s = &cache.splats[list[c.slot] as usize];
                let weight = c.t_before * c.alpha;
                // direct coefficient of (T·α) in the loss
                let coeff = gr.dot(&s.color) + d_raw * s.z + ga_total;
                let d_alpha = c.t_before * coeff - g_t * c.t_before;
                g_t = c.alpha * coeff + g_t * (1.0 - c.alpha);

                let acc = &mut local[c.slot];
                acc.d_color += weight * gr;
                acc.d_z += d_raw * weight;
                acc.d_opacity += d_alpha * c.falloff;
                // α = opacity·exp(−q/2) ⇒ ∂L/∂q = −α·∂L/∂α / 2
                let d_q = -0.5 * d_alpha * c.alpha;
                let conic_d = s.conic * c.d;
                acc.d_mean += d_q * -2.0 * conic_d;
                acc.d_conic += d_q * (c.d * c.d.transpose());
            }
        }
    }
    local
}

/// Per-splat parameter gradients plus this splat's camera contribution.
struct SplatParamGrad {
    id: usize,
    d_position: Vec3,
    d_logit_opacity: f64,
    d_raw_quaternion: [f64; 4],
    d_log_scale: Vec3,
    d_sh: Vec<f64>,
    d_cam_q: [f64; 4],
    d_cam_t: Vec3,
    d_fx: f64,
    d_fy: f64,
}

fn splat_backward(
    set: &GaussianSet,
    cache: &SplatIntermediate,
    s: &ProjSplat,
    g: &Splat2DGrad,
) -> SplatParamGrad {
    let cam = &cache.cam;
    let nc = set.n_coeffs();
    let w = cam.rotation().transpose();
    let p = s.p_cam;
    let jp = perspective_jacobian(cam, &p);

    // conic = cov2d⁻¹ ⇒ ∂L/∂cov2d = −conic·G·conic
    let d_cov2d = -(s.conic * g.d_conic * s.conic);
    // cov2d = U·Σ·Uᵀ + reg·I with U = J·W
    let u = jp * w;
    let sigma = set.covariance(s.id);
    let d_sigma = u.transpose() * d_cov2d * u;
    let d_u = 2.0 * d_cov2d * u * sigma;
    let d_j = d_u * w.transpose();
    let mut d_w = jp.transpose() * d_u;

    // J entries depend on focals and the camera-space point
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = p.z * p.z;
    let z3 = z2 * p.z;
    let mut d_p = Vec3::new(
        d_j[(0, 2)] * (-fx / z2),
        d_j[(1, 2)] * (-fy / z2),
        d_j[(0, 0)] * (-fx / z2)
            + d_j[(0, 2)] * (2.0 * fx * p.x / z3)
            + d_j[(1, 1)] * (-fy / z2)
            + d_j[(1, 2)] * (2.0 * fy * p.y / z3),
    );
    let mut d_fx = d_j[(0, 0)] / p.z + d_j[(0, 2)] * (-p.x / z2);
    let mut d_fy = d_j[(1, 1)] / p.z + d_j[(1, 2)] * (-p.y / z2);

    // pixel mean path
    d_p += jp.transpose() * g.d_mean;
    d_fx += g.d_mean.x * (p.x / p.z);
    d_fy += g.d_mean.y * (p.y / p.z);

    // expected-depth path reads camera-space z directly
    d_p.z += g.d_z;

    // p = W·(μ − t)
    let mut d_position = w.transpose() * d_p;
    let mut d_cam_t = -(w.transpose() * d_p);
    d_w += d_p * (set.positions[s.id] - cam.t).transpose();

    // color path: clamp gate, SH coefficients, view direction
    let coeffs = set.sh_slice(s.id);
    let gb = sh::basis_grad(set.sh_degree, &s.view_dir);
    let mut d_sh = vec![0.0; 3 * nc];
    let mut d_dir = Vec3::zeros();
    for ch in 0..3 {
        let open = s.color_raw[ch] > 0.0 && s.color_raw[ch] < 1.0;
        if !open {
            continue;
        }
        let graw = g.d_color[ch];
        for j in 0..nc {
            d_sh[ch * nc + j] = graw * s.basis[j];
            d_dir += graw * coeffs[ch * nc + j] * gb[j];
        }
    }
    let d_view = normalize_jacobian3(&s.view_vec) * d_dir;
    d_position += d_view;
    d_cam_t -= d_view;

    // activations
    let d_logit_opacity = g.d_opacity * s.opacity * (1.0 - s.opacity);
    let (d_raw_quaternion, d_log_scale) =
        covariance_backward(&set.raw_quaternion[s.id], &set.log_scale[s.id], &d_sigma);

    // camera rotation: W = Rᵀ so ∂L/∂R = (∂L/∂W)ᵀ, then ambient quaternion
    let d_r = d_w.transpose();
    let dr_dq = quat_to_rot_grad(&cam.q);
    let mut d_cam_q = [0.0; 4];
    for k in 0..4 {
        d_cam_q[k] = d_r.component_mul(&dr_dq[k]).sum();
    }

    SplatParamGrad {
        id: s.id,
        d_position,
        d_logit_opacity,
        d_raw_quaternion,
        d_log_scale,
        d_sh,
        d_cam_q,
        d_cam_t,
        d_fx,
        d_fy,
    }
}

/// Backpropagate image-space gradients through the cached forward pass.
///
/// Gradients are exact for the implemented forward computation (including
/// its truncations, which behave as constant gates) and deterministic
/// across thread counts. Confidence receives zero gradient here: it only
/// participates in voxel aggregation, not in rendering.
pub fn render_backward(
    set: &GaussianSet,
    cache: &SplatIntermediate,
    upstream: &RenderUpstream,
) -> Result<RenderGradients> {
    if set.len() != cache.n_gaussians || set.sh_degree != cache.sh_degree {
        return Err(Error::StaleState(format!(
            "cache built for {} Gaussians (degree {}), set has {} (degree {})",
            cache.n_gaussians, cache.sh_degree, set.len(), set.sh_degree
        )));
    }
    let npix = cache.cam.width * cache.cam.height;
    if upstream.d_rgb.len() != npix
        || upstream.d_depth.len() != npix
        || upstream.d_alpha.len() != npix
    {
        return Err(Error::Dimension(format!(
            "upstream gradients disagree with {}x{} render",
            cache.cam.width, cache.cam.height
        )));
    }

    // phase 1: screen-space gradients, tile-parallel, merged in tile order
    let locals: Vec<Vec<Splat2DGrad>> = (0..cache.tile_lists.len())
        .into_par_iter()
        .map(|t| tile_backward(cache, upstream, t))
        .collect();
    let mut screen = vec![Splat2DGrad::zeros(); cache.splats.len()];
    for (t, local) in locals.iter().enumerate() {
        for (slot, &k) in cache.tile_lists[t].iter().enumerate() {
            screen[k as usize].add(&local[slot]);
        }
    }

    // phase 2: chain every projected splat to its parameters
    let per_splat: Vec<SplatParamGrad> = cache
        .splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(s, g)| splat_backward(set, cache, s, g))
        .collect();

    let mut grads = GaussianGrads::zeros(set.len(), set.sh_degree);
    let mut pose = PoseGrad::default();
    for pg in &per_splat {
        grads.positions[pg.id] += pg.d_position;
        grads.logit_opacity[pg.id] += pg.d_logit_opacity;
        for k in 0..4 {
            grads.raw_quaternion[pg.id][k] += pg.d_raw_quaternion[k];
        }
        grads.log_scale[pg.id] += pg.d_log_scale;
        let nc = set.n_coeffs();
        for (j, v) in pg.d_sh.iter().enumerate() {
            grads.sh[pg.id * 3 * nc + j] += v;
        }
        for k in 0..4 {
            pose.d_unit_quaternion[k] += pg.d_cam_q[k];
        }
        pose.d_center += pg.d_cam_t;
        pose.d_fx += pg.d_fx;
        pose.d_fy += pg.d_fy;
    }
    Ok(RenderGradients { gaussians: grads, pose })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{decode_pose, encode_pose};
    use crate::render::tests::look_at_origin_cam;
    use crate::render::{render_with_cache, RenderOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// FD agreement: relative 1e-4 away from zero, small absolute floor for
    /// the finite-difference noise floor near zero.
    fn fd_close(analytic: f64, numeric: f64) -> bool {
        let scale = analytic.abs().max(numeric.abs());
        (analytic - numeric).abs() <= (1e-4 * scale).max(1e-7)
    }

    fn test_scene(n: usize, seed: u64) -> (GaussianSet, Camera) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let cam = look_at_origin_cam(Vec3::new(0.35, -0.25, -2.4), 32, 32, 28.0);
        let mut set = GaussianSet::empty(1).unwrap();
        for _ in 0..n {
            let mut g = GaussianSet::empty(1).unwrap();
            g.positions.push(Vec3::new(
                rng.gen_range(-0.45..0.45),
                rng.gen_range(-0.45..0.45),
                rng.gen_range(-0.45..0.45),
            ));
            g.logit_opacity.push(rng.gen_range(-1.5..2.5));
            g.raw_quaternion.push([
                rng.gen_range(0.3..1.0),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
            ]);
            g.log_scale.push(Vec3::new(
                rng.gen_range(-2.6..-1.6),
                rng.gen_range(-2.6..-1.6),
                rng.gen_range(-2.6..-1.6),
            ));
            // colors kept strictly inside (0,1) so the clamp gate stays open
            for ch in 0..3 {
                let _ = ch;
                g.sh.push(rng.gen_range(-0.8..0.8)); // dc
                for _ in 0..3 {
                    g.sh.push(rng.gen_range(-0.08..0.08));
                }
            }
            g.confidence.push(rng.gen_range(-1.0..1.0));
            set.append(&g).unwrap();
        }
        (set, cam)
    }

    /// Random upstream weights, zeroed on pixels where any splat sits near a
    /// truncation boundary (Mahalanobis cutoff or minimum alpha), where the
    /// forward pass is intentionally non-smooth.
    fn masked_upstream(cache: &SplatIntermediate, seed: u64) -> RenderUpstream {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let cam = &cache.cam;
        let mut up = RenderUpstream::zeros(cam.width, cam.height);
        let tile = cache.options.tile_size;
        for y in 0..cam.height {
            for x in 0..cam.width {
                let i = y * cam.width + x;
                let t = (y / tile) * cache.tiles_x + x / tile;
                let mut safe = true;
                for &k in &cache.tile_lists[t] {
                    let s = &cache.splats[k as usize];
                    let d = Vec2::new(x as f64, y as f64) - s.mean;
                    let q = s.conic[(0, 0)] * d.x * d.x
                        + 2.0 * s.conic[(0, 1)] * d.x * d.y
                        + s.conic[(1, 1)] * d.y * d.y;
                    let alpha = s.opacity * (-0.5 * q).exp();
                    if (8.0..10.0).contains(&q)
                        || (0.7 * MIN_ALPHA..1.4 * MIN_ALPHA).contains(&alpha)
                    {
                        safe = false;
                        break;
                    }
                }
                let w_rgb = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let w_d = rng.gen_range(-0.3..0.3);
                let w_a = rng.gen_range(-1.0..1.0);
                if safe {
                    up.d_rgb[i] = w_rgb;
                    up.d_depth[i] = w_d;
                    up.d_alpha[i] = w_a;
                }
            }
        }
        up
    }

    fn scalar_loss(
        set: &GaussianSet,
        cam: &Camera,
        bg: &Vec3,
        up: &RenderUpstream,
        opts: &RenderOptions,
    ) -> f64 {
        let buf = crate::render::render(set, cam, bg, opts).unwrap();
        let mut l = 0.0;
        for i in 0..buf.rgb.len() {
            l += up.d_rgb[i].dot(&buf.rgb[i]) + up.d_depth[i] * buf.depth[i]
                + up.d_alpha[i] * buf.alpha[i];
        }
        l
    }

    #[test]
    fn finite_difference_gaussian_parameters() {
        let (set, cam) = test_scene(8, 60);
        let bg = Vec3::new(0.15, 0.25, 0.1);
        let opts = RenderOptions::default();
        let (_, cache) = render_with_cache(&set, &cam, &bg, &opts).unwrap();
        assert_eq!(cache.n_projected(), 8, "all splats should be visible");
        let up = masked_upstream(&cache, 61);
        let grads = render_backward(&set, &cache, &up).unwrap().gaussians;

        let h = 1e-5;
        let mut checked = 0usize;
        let nc = set.n_coeffs();
        for i in 0..set.len() {
            for a in 0..3 {
                let mut s2 = set.clone();
                s2.positions[i][a] += h;
                let lp = scalar_loss(&s2, &cam, &bg, &up, &opts);
                s2.positions[i][a] -= 2.0 * h;
                let lm = scalar_loss(&s2, &cam, &bg, &up, &opts);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    fd_close(grads.positions[i][a], fd),
                    "position[{i}][{a}]: analytic {} vs fd {fd}",
                    grads.positions[i][a]
                );
                checked += 1;
            }
            {
                let mut s2 = set.clone();
                s2.logit_opacity[i] += h;
                let lp = scalar_loss(&s2, &cam, &bg, &up, &opts);
                s2.logit_opacity[i] -= 2.0 * h;
                let lm = scalar_loss(&s2, &cam, &bg, &up, &opts);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    fd_close(grads.logit_opacity[i], fd),
                    "logit_opacity[{i}]: analytic {} vs fd {fd}",
                    grads.logit_opacity[i]
                );
                checked += 1;
            }
            for k in 0..4 {
                let mut s2 = set.clone();
                s2.raw_quaternion[i][k] += h;
                let lp = scalar_loss(&s2, &cam, &bg, &up, &opts);
                s2.raw_quaternion[i][k] -= 2.0 * h;
                let lm = scalar_loss(&s2, &cam, &bg, &up, &opts);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    fd_close(grads.raw_quaternion[i][k], fd),
                    "raw_quaternion[{i}][{k}]: analytic {} vs fd {fd}",
                    grads.raw_quaternion[i][k]
                );
                checked += 1;
            }
            for a in 0..3 {
                let mut s2 = set.clone();
                s2.log_scale[i][a] += h;
                let lp = scalar_loss(&s2, &cam, &bg, &up, &opts);
                s2.log_scale[i][a] -= 2.0 * h;
                let lm = scalar_loss(&s2, &cam, &bg, &up, &opts);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    fd_close(grads.log_scale[i][a], fd),
                    "log_scale[{i}][{a}]: analytic {} vs fd {fd}",
                    grads.log_scale[i][a]
                );
                checked += 1;
            }
            for j in 0..3 * nc {
                let mut s2 = set.clone();
                s2.sh[i * 3 * nc + j] += h;
                let lp = scalar_loss(&s2, &cam, &bg, &up, &opts);
                s2.sh[i * 3 * nc + j] -= 2.0 * h;
                let lm = scalar_loss(&s2, &cam, &bg, &up, &opts);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    fd_close(grads.sh[i * 3 * nc + j], fd),
                    "sh[{i}][{j}]: analytic {} vs fd {fd}",
                    grads.sh[i * 3 * nc + j]
                );
                checked += 1;
            }
            {
                // confidence does not enter rendering at all
                assert_eq!(grads.confidence[i], 0.0);
                let mut s2 = set.clone();
                s2.confidence[i] += 10.0;
                let lp = scalar_loss(&s2, &cam, &bg, &up, &opts);
                assert_eq!(lp, scalar_loss(&set, &cam, &bg, &up, &opts));
            }
        }
        assert_eq!(checked, 8 * (3 + 1 + 4 + 3 + 12));
    }

    #[test]
    fn finite_difference_camera_pose() {
        let (set, cam) = test_scene(8, 62);
        let bg = Vec3::new(0.05, 0.05, 0.3);
        let opts = RenderOptions::default();
        let (_, cache) = render_with_cache(&set, &cam, &bg, &opts).unwrap();
        let up = masked_upstream(&cache, 63);
        let pose = render_backward(&set, &cache, &up).unwrap().pose;
        let analytic = pose.encoding_grad(&cam);

        let enc = encode_pose(&cam).unwrap().to_array();
        let h = 1e-6;
        for k in 0..9 {
            let mut ap = enc;
            ap[k] += h;
            let camp =
                decode_pose(&crate::camera::PoseEncoding::from_array(&ap), cam.width, cam.height)
                    .unwrap();
            let lp = scalar_loss(&set, &camp, &bg, &up, &opts);
            let mut am = enc;
            am[k] -= h;
            let camm =
                decode_pose(&crate::camera::PoseEncoding::from_array(&am), cam.width, cam.height)
                    .unwrap();
            let lm = scalar_loss(&set, &camm, &bg, &up, &opts);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                fd_close(analytic[k], fd),
                "encoding[{k}]: analytic {} vs fd {fd}",
                analytic[k]
            );
        }
    }

    #[test]
    fn out_of_range_color_gets_no_sh_gradient() {
        let cam = look_at_origin_cam(Vec3::new(0.0, 0.0, -2.0), 33, 33, 40.0);
        let pos = cam.backproject_pixel(16.0, 16.0, 2.0);
        // dc pushes red far beyond 1 → clamped → gradient gated to zero
        let mut set = GaussianSet::empty(0).unwrap();
        set.positions.push(pos);
        set.logit_opacity.push(2.0);
        set.raw_quaternion.push([1.0, 0.0, 0.0, 0.0]);
        set.log_scale.push(Vec3::new(-2.0, -2.0, -2.0));
        set.sh.extend_from_slice(&[8.0, 0.0, 0.0]); // raw red ≈ 2.76, g/b = 0.5
        set.confidence.push(0.0);
        let (_, cache) =
            render_with_cache(&set, &cam, &Vec3::zeros(), &RenderOptions::default()).unwrap();
        let mut up = RenderUpstream::zeros(33, 33);
        for p in up.d_rgb.iter_mut() {
            *p = Vec3::new(1.0, 1.0, 1.0);
        }
        let grads = render_backward(&set, &cache, &up).unwrap().gaussians;
        assert_eq!(grads.sh[0], 0.0, "clamped channel must be gated");
        assert!(grads.sh[1] != 0.0 && grads.sh[2] != 0.0, "open channels keep gradients");
    }

    #[test]
    fn backward_deterministic_across_thread_counts() {
        let (set, cam) = test_scene(30, 64);
        let bg = Vec3::new(0.2, 0.2, 0.2);
        let opts = RenderOptions::default();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let (_, cache) = render_with_cache(&set, &cam, &bg, &opts).unwrap();
                let up = masked_upstream(&cache, 65);
                render_backward(&set, &cache, &up).unwrap()
            })
        };
        let a = run(1);
        let b = run(5);
        assert_eq!(a.gaussians.positions, b.gaussians.positions);
        assert_eq!(a.gaussians.logit_opacity, b.gaussians.logit_opacity);
        assert_eq!(a.gaussians.raw_quaternion, b.gaussians.raw_quaternion);
        assert_eq!(a.gaussians.log_scale, b.gaussians.log_scale);
        assert_eq!(a.gaussians.sh, b.gaussians.sh);
        assert_eq!(a.pose.d_unit_quaternion, b.pose.d_unit_quaternion);
        assert_eq!(a.pose.d_center, b.pose.d_center);
        assert_eq!((a.pose.d_fx, a.pose.d_fy), (b.pose.d_fx, b.pose.d_fy));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mut set, cam) = test_scene(4, 66);
        let bg = Vec3::zeros();
        let (_, cache) = render_with_cache(&set, &cam, &bg, &RenderOptions::default()).unwrap();
        let extra = test_scene(1, 67).0;
        set.append(&extra).unwrap();
        let up = RenderUpstream::zeros(cam.width, cam.height);
        match render_backward(&set, &cache, &up) {
            Err(Error::StaleState(_)) => {}
            other => panic!("expected StaleState, got {other:?}"),
        }
    }

    #[test]
    fn upstream_shape_is_checked() {
        let (set, cam) = test_scene(2, 68);
        let (_, cache) =
            render_with_cache(&set, &cam, &Vec3::zeros(), &RenderOptions::default()).unwrap();
        let up = RenderUpstream::zeros(8, 8);
        assert!(matches!(render_backward(&set, &cache, &up), Err(Error::Dimension(_))));
    }
}
