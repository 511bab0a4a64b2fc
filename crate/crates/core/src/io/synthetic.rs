//! Desk-scale synthetic oracle: a random Gaussian scene plus a capture
//! bundle whose images, depths, and attribute maps are produced by our own
//! renderer, standing in for real captures and an upstream predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{decode_pose, encode_pose, Camera};
use crate::error::{Error, Result};
use crate::gaussian::{AttributeMaps, DepthMap, GaussianSet};
use crate::io::bundle::{CaptureBundle, ViewRecord};
use crate::math::{quat_normalize, rot_to_quat, Mat3, Vec3};
use crate::render::{render_with_cache, RenderOptions};
use crate::sh;

fn default_n_gaussians() -> usize {
    256
}
fn default_n_views() -> usize {
    8
}
fn default_size() -> usize {
    64
}
fn default_sh_degree() -> usize {
    1
}

/// Parameters of the synthetic scene generator. All noise levels default to
/// zero, which makes every pseudo/noisy field a bitwise copy of the truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_n_gaussians")]
    pub n_gaussians: usize,
    #[serde(default = "default_n_views")]
    pub n_views: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_sh_degree")]
    pub sh_degree: usize,
    #[serde(default)]
    pub seed: u64,
    /// Std-dev of additive Gaussian noise on per-pixel attributes and
    /// multiplicative lognormal noise on per-pixel depth — simulates an
    /// imperfect upstream predictor.
    #[serde(default)]
    pub attr_noise: f64,
    /// Std-dev of Gaussian noise on the 9 pose-encoding components of the
    /// pseudo cameras.
    #[serde(default)]
    pub pose_noise: f64,
    /// Lognormal σ of the pseudo-depth maps.
    #[serde(default)]
    pub depth_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians == 0 || self.n_views == 0 {
            return Err(Error::InvalidConfig(
                "need at least one Gaussian and one view".into(),
            ));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} is too small to be useful",
                self.width, self.height
            )));
        }
        sh::check_degree(self.sh_degree)?;
        for (name, v) in [
            ("attr_noise", self.attr_noise),
            ("pose_noise", self.pose_noise),
            ("depth_noise", self.depth_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Truncate to the f32 grid so the value survives tensor round trips bitwise.
fn t32(v: f64) -> f64 {
    v as f32 as f64
}

/// Snap to the 8-bit grid the PNG encoder uses.
fn t8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Random scene built as a handful of dense "surfel" clusters: domed disks
/// tiled by small near-isotropic Gaussians (sunflower layout, spacing ≈
/// one pixel footprint at the ring-camera distance). Dense pixel-scale
/// primitives are the fixed point of the render → per-pixel lift → render
/// loop, which is what makes the self-consistency oracle attainable; a
/// scene of large soft blobs would be re-lifted as one full-size blob per
/// covered pixel and render far fatter than the original.
fn random_scene(spec: &SyntheticSpec, rng: &mut ChaCha12Rng) -> GaussianSet {
    const GOLDEN_ANGLE: f64 = 2.399963229728653;
    use rand::seq::SliceRandom;
    let nc = sh::n_coeffs(spec.sh_degree);
    let mut set = GaussianSet::empty(spec.sh_degree).unwrap();
    let n_clusters = (spec.n_gaussians / 64).clamp(1, 8);
    // well-separated cluster anchors: shuffled corners of an inner cube.
    // Separation keeps ray/surface intersections unimodal, which the lift
    // validity test below relies on.
    let mut anchors: Vec<Vec3> = (0..8)
        .map(|k| {
            Vec3::new(
                if k & 1 == 0 { -0.26 } else { 0.26 },
                if k & 2 == 0 { -0.26 } else { 0.26 },
                if k & 4 == 0 { -0.26 } else { 0.26 },
            )
        })
        .collect();
    anchors.shuffle(rng);
    for c in 0..n_clusters {
        let m = spec.n_gaussians / n_clusters
            + if c < spec.n_gaussians % n_clusters { 1 } else { 0 };
        if m == 0 {
            continue;
        }
        let center = anchors[c]
            + Vec3::new(
                rng.gen_range(-0.03..0.03),
                rng.gen_range(-0.03..0.03),
                rng.gen_range(-0.03..0.03),
            );
        let radius = rng.gen_range(0.12..0.17);
        let normal = loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() > 0.1 {
                break v.normalize();
            }
        };
        let hint = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let t1 = normal.cross(&hint).normalize();
        let t2 = normal.cross(&t1);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        // equal-area sunflower spacing; dot size tracks it so neighbors
        // overlap enough for the composite to saturate
        let spacing = radius * (std::f64::consts::PI / m as f64).sqrt();
        let base_color = Vec3::new(
            rng.gen_range(-0.9..0.9),
            rng.gen_range(-0.9..0.9),
            rng.gen_range(-0.9..0.9),
        );
        // smooth per-channel color gradients across the disk; high-frequency
        // per-dot speckle would not survive resampling onto pixel rays
        let grad1 = Vec3::new(
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
        );
        let grad2 = Vec3::new(
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
        );
        for k in 0..m {
            let r = radius * (((k as f64) + 0.5) / m as f64).sqrt();
            let theta = phase + k as f64 * GOLDEN_ANGLE;
            let dome = 0.25 * radius * (1.0 - (r / radius).powi(2));
            let jitter = 0.1 * spacing;
            let p = center
                + t1 * (r * theta.cos())
                + t2 * (r * theta.sin())
                + normal * dome
                + Vec3::new(
                    rng.gen_range(-jitter..jitter),
                    rng.gen_range(-jitter..jitter),
                    rng.gen_range(-jitter..jitter),
                );
            set.positions.push(Vec3::new(
                t32(p.x.clamp(-0.5, 0.5)),
                t32(p.y.clamp(-0.5, 0.5)),
                t32(p.z.clamp(-0.5, 0.5)),
            ));
            set.logit_opacity.push(t32(rng.gen_range(2.6..4.2)));
            set.raw_quaternion.push([
                t32(rng.gen_range(0.4..1.0)),
                t32(rng.gen_range(-0.5..0.5)),
                t32(rng.gen_range(-0.5..0.5)),
                t32(rng.gen_range(-0.5..0.5)),
            ]);
            let ls = (0.8 * spacing).ln();
            set.log_scale.push(Vec3::new(
                t32(ls + rng.gen_range(-0.15..0.15)),
                t32(ls + rng.gen_range(-0.15..0.15)),
                t32(ls + rng.gen_range(-0.15..0.15)),
            ));
            let (u1, u2) = (r * theta.cos(), r * theta.sin());
            for ch in 0..3 {
                // DC kept well inside the (0,1) clamp window
                let dc = (base_color[ch] + grad1[ch] * u1 + grad2[ch] * u2
                    + rng.gen_range(-0.04..0.04))
                .clamp(-1.15, 1.15);
                set.sh.push(t32(dc));
                for _ in 1..nc {
                    set.sh.push(t32(rng.gen_range(-0.06..0.06)));
                }
            }
            set.confidence.push(t32(rng.gen_range(0.0..2.0)));
        }
    }
    set
}

/// Cameras on a ring of radius 2.2 around the centroid, all facing it.
fn ring_cameras(spec: &SyntheticSpec, centroid: Vec3) -> Vec<Camera> {
    let radius = 2.2;
    let focal = t32(1.6 * spec.width as f64);
    (0..spec.n_views)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / spec.n_views as f64;
            // small elevation wobble keeps the trajectory non-planar
            let eye = centroid
                + Vec3::new(
                    radius * angle.cos(),
                    0.35 + 0.15 * (3.0 * angle).sin(),
                    radius * angle.sin(),
                );
            let z = (centroid - eye).normalize();
            let up = Vec3::y();
            let x = up.cross(&z).normalize();
            let y = z.cross(&x);
            let r = Mat3::from_columns(&[x, y, z]);
            Camera::new(
                spec.width,
                spec.height,
                focal,
                focal,
                spec.width as f64 / 2.0,
                spec.height as f64 / 2.0,
                rot_to_quat(&r),
                eye,
            )
            .unwrap()
        })
        .collect()
}

fn perturb_cameras(cams: &[Camera], sigma: f64, rng: &mut ChaCha12Rng) -> Result<Vec<Camera>> {
    if sigma == 0.0 {
        return Ok(cams.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    cams.iter()
        .map(|cam| {
            let mut enc = encode_pose(cam)?;
            let mut arr = enc.to_array();
            for v in arr.iter_mut() {
                *v += normal.sample(rng);
            }
            enc = crate::camera::PoseEncoding::from_array(&arr);
            enc.q = quat_normalize(&enc.q);
            decode_pose(&enc, cam.width, cam.height)
        })
        .collect()
}

fn perturb_depth(dm: &DepthMap, sigma: f64, rng: &mut ChaCha12Rng) -> DepthMap {
    if sigma == 0.0 {
        return dm.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let mut out = dm.clone();
    for i in 0..out.len() {
        if out.valid[i] {
            out.depth[i] = t32(out.depth[i] * normal.sample(rng).exp());
        }
    }
    out
}

/// Generate a ground-truth scene plus a capture bundle rendered from it.
///
/// The bundle plays the role of upstream predictor output: images and
/// depths come from the renderer, attribute maps copy the front-most
/// (largest-contribution) Gaussian at each pixel, pseudo-labels are the
/// truth plus seeded noise. Everything is deterministic per seed and
/// already on the storage grids (f32 tensors, 8-bit images), so saving and
/// reloading the bundle reproduces it bitwise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(GaussianSet, CaptureBundle)> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let scene = random_scene(spec, &mut rng);
    scene.validate()?;
    let centroid =
        scene.positions.iter().fold(Vec3::zeros(), |a, p| a + p) / scene.positions.len() as f64;
    let cameras = ring_cameras(spec, centroid);
    let background = Vec3::new(0.46, 0.46, 0.5);
    let options = RenderOptions::default();
    let nc = sh::n_coeffs(spec.sh_degree);
    let (w, h) = (spec.width, spec.height);

    // deterministic per-view noise streams, independent of render order
    let view_seeds: Vec<u64> = (0..spec.n_views).map(|_| rng.gen()).collect();
    let pose_rng_seed: u64 = rng.gen();

    let mut views = Vec::with_capacity(spec.n_views);
    for (vi, cam) in cameras.iter().enumerate() {
        let (buffers, cache) = render_with_cache(&scene, cam, &background, &options)?;
        let image = crate::buffers::ImageRgb {
            width: w,
            height: h,
            data: buffers.rgb.iter().map(|p| Vec3::new(t8(p.x), t8(p.y), t8(p.z))).collect(),
        };

        let mut depth = DepthMap::new(w, h, 1.0);
        let mut attrs = AttributeMaps::constant(w, h, spec.sh_degree);
        for i in 0..w * h {
            let a = buffers.alpha[i];
            let g = cache.dominant[i];
            // Lift only surface-certain pixels: (a) high alpha — moderate
            // alpha can come entirely from rim-dot tails overlapping
            // laterally off the surface; (b) expected depth close to the
            // front dot's own depth — a large gap means the ray crossed
            // two surfaces and the alpha-weighted depth lies between them.
            // Gaussians lifted at such pixels float off the geometry and
            // pollute every other view.
            let unimodal = g >= 0 && {
                let gi = g as usize;
                let z_dot = cam.cam_from_world(&scene.positions[gi]).z;
                let sigma = scene.log_scale[gi].map(f64::exp).max();
                (buffers.depth[i] - z_dot).abs() <= 2.5 * sigma
            };
            let valid = a >= 0.85 && unimodal;
            depth.valid[i] = valid;
            depth.depth[i] = if valid { t32(buffers.depth[i]) } else { 0.0 };
            depth.confidence[i] = t32(a);
            if g >= 0 {
                let g = g as usize;
                // the front dot's opacity, attenuated by how much of the
                // pixel the surface actually covers — a rim pixel must lift
                // a translucent Gaussian or the re-rendered rim hardens
                let alpha_front = crate::math::sigmoid(scene.logit_opacity[g]);
                let a_px = alpha_front.min(a).clamp(1e-4, 1.0 - 1e-4);
                attrs.logit_opacity[i] = t32(crate::math::logit(a_px));
                attrs.raw_quaternion[i] = scene.raw_quaternion[g];
                attrs.log_scale[i] = scene.log_scale[g];
                for k in 0..3 * nc {
                    attrs.sh[i * 3 * nc + k] = scene.sh[g * 3 * nc + k];
                }
                attrs.confidence[i] = scene.confidence[g];
            } else {
                attrs.logit_opacity[i] = -6.0;
                attrs.confidence[i] = -10.0;
            }
        }

        let mut view_rng = ChaCha12Rng::seed_from_u64(view_seeds[vi]);
        if spec.attr_noise > 0.0 {
            let normal = Normal::new(0.0, spec.attr_noise).expect("validated sigma");
            for i in 0..w * h {
                attrs.logit_opacity[i] =
                    t32(attrs.logit_opacity[i] + normal.sample(&mut view_rng));
                for k in 0..4 {
                    attrs.raw_quaternion[i][k] =
                        t32(attrs.raw_quaternion[i][k] + normal.sample(&mut view_rng));
                }
                for k in 0..3 {
                    attrs.log_scale[i][k] =
                        t32(attrs.log_scale[i][k] + normal.sample(&mut view_rng));
                }
                for k in 0..3 * nc {
                    let idx = i * 3 * nc + k;
                    attrs.sh[idx] = t32(attrs.sh[idx] + normal.sample(&mut view_rng));
                }
                if depth.valid[i] {
                    depth.depth[i] = t32(depth.depth[i] * normal.sample(&mut view_rng).exp());
                }
            }
        }
        let pseudo_depth = Some(perturb_depth(&depth, spec.depth_noise, &mut view_rng));
        views.push(ViewRecord { image, depth, attributes: attrs, pseudo_depth });
    }

    let mut pose_rng = ChaCha12Rng::seed_from_u64(pose_rng_seed);
    let cameras_pseudo = perturb_cameras(&cameras, spec.pose_noise, &mut pose_rng)?;

    let bundle = CaptureBundle {
        name: format!("synthetic-{}", spec.seed),
        units: "scene units (unit cube extent)".into(),
        background,
        views,
        cameras_gt: Some(cameras),
        cameras_pseudo: Some(cameras_pseudo),
    };
    bundle.validate()?;
    Ok((scene, bundle))
}
