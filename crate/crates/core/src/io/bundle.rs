//! Capture-bundle persistence.
//!
//! Layout under a scene directory:
//!
//! ```text
//! scene/
//!   meta.json
//!   cameras_gt.txt          (optional)
//!   cameras_pseudo.txt      (optional)
//!   views/{i}/image.png
//!   views/{i}/depth.f32 + depth.json
//!   views/{i}/depth_conf.f32
//!   views/{i}/attr_logit_opacity.f32
//!   views/{i}/attr_raw_quaternion.f32
//!   views/{i}/attr_log_scale.f32
//!   views/{i}/attr_sh.f32
//!   views/{i}/attr_confidence.f32
//!   views/{i}/pseudo_depth.f32        (optional)
//!   views/{i}/pseudo_depth_conf.f32   (optional, defaults to 1)
//! ```
//!
//! Tensors are raw f32 little-endian with JSON sidecars (see `tensor`).
//! Depth validity is encoded in the payload: invalid pixels are written as
//! 0 and any non-positive or non-finite value loads as invalid.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffers::ImageRgb;
use crate::camera::{read_trajectory, write_trajectory, Camera};
use crate::error::{Error, Result};
use crate::gaussian::{AttributeMaps, DepthMap};
use crate::io::tensor::{read_tensor_expect, write_tensor};
use crate::math::Vec3;
use crate::sh;

/// One captured (or synthesized) view with its predictor outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub image: ImageRgb,
    pub depth: DepthMap,
    pub attributes: AttributeMaps,
    /// Teacher depth, when distillation labels exist.
    pub pseudo_depth: Option<DepthMap>,
}

/// A full multi-view capture with optional pose labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureBundle {
    pub name: String,
    /// Free-form note about the metric scale of the scene.
    pub units: String,
    /// Background color the views were composited over.
    pub background: Vec3,
    pub views: Vec<ViewRecord>,
    pub cameras_gt: Option<Vec<Camera>>,
    pub cameras_pseudo: Option<Vec<Camera>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    name: String,
    units: String,
    n_views: usize,
    width: usize,
    height: usize,
    sh_degree: usize,
    background: [f64; 3],
}

impl CaptureBundle {
    pub fn width(&self) -> usize {
        self.views[0].image.width
    }

    pub fn height(&self) -> usize {
        self.views[0].image.height
    }

    pub fn sh_degree(&self) -> usize {
        self.views[0].attributes.sh_degree
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Dimension("bundle has no views".into()));
        }
        let (w, h, deg) = (self.width(), self.height(), self.sh_degree());
        for (i, v) in self.views.iter().enumerate() {
            let shapes_ok = v.image.width == w
                && v.image.height == h
                && v.image.data.len() == w * h
                && v.depth.width == w
                && v.depth.height == h
                && v.attributes.width == w
                && v.attributes.height == h
                && v.attributes.sh_degree == deg;
            if !shapes_ok {
                return Err(Error::Dimension(format!("view {i} disagrees with {w}x{h} bundle")));
            }
            v.depth.validate()?;
            v.attributes.validate()?;
            if let Some(pd) = &v.pseudo_depth {
                if pd.width != w || pd.height != h {
                    return Err(Error::Dimension(format!(
                        "view {i} pseudo depth disagrees with {w}x{h} bundle"
                    )));
                }
                pd.validate()?;
            }
        }
        for (cams, label) in [
            (&self.cameras_gt, "ground-truth"),
            (&self.cameras_pseudo, "pseudo"),
        ] {
            if let Some(cams) = cams {
                if cams.len() != self.views.len() {
                    return Err(Error::Dimension(format!(
                        "{label} trajectory has {} cameras for {} views",
                        cams.len(),
                        self.views.len()
                    )));
                }
                for (i, c) in cams.iter().enumerate() {
                    if c.width != w || c.height != h {
                        return Err(Error::Dimension(format!(
                            "{label} camera {i} is {}x{}, bundle is {w}x{h}",
                            c.width, c.height,
                        )));
                    }
                }
            }
        }
        if !self.background.iter().all(|v| v.is_finite()) {
            return Err(Error::Dimension("non-finite background".into()));
        }
        Ok(())
    }
}

fn view_dir(root: &Path, i: usize) -> PathBuf {
    root.join("views").join(i.to_string())
}

/// Write an image as 8-bit PNG, clamping to [0, 1] and rounding to the
/// 255-step grid.
pub fn save_png(path: &Path, image: &ImageRgb) -> Result<()> {
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for (i, p) in image.data.iter().enumerate() {
        let x = (i % image.width) as u32;
        let y = (i / image.width) as u32;
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        buf.put_pixel(x, y, image::Rgb([q(p.x), q(p.y), q(p.z)]));
    }
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other.to_string()),
    })
}

/// Read an 8-bit PNG back into unit-range floats.
pub fn load_png(path: &Path) -> Result<ImageRgb> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::parse(path, other.to_string()),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            data.push(Vec3::new(
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ));
        }
    }
    Ok(ImageRgb { width: w, height: h, data })
}

fn save_depth(dir: &Path, stem: &str, dm: &DepthMap) -> Result<()> {
    let payload: Vec<f64> =
        (0..dm.len()).map(|i| if dm.valid[i] { dm.depth[i] } else { 0.0 }).collect();
    write_tensor(&dir.join(format!("{stem}.f32")), &[dm.height, dm.width], &payload)?;
    write_tensor(
        &dir.join(format!("{stem}_conf.f32")),
        &[dm.height, dm.width],
        &dm.confidence,
    )
}

fn load_depth(dir: &Path, stem: &str, w: usize, h: usize) -> Result<DepthMap> {
    let depth = read_tensor_expect(&dir.join(format!("{stem}.f32")), &[h, w])?;
    let conf_path = dir.join(format!("{stem}_conf.f32"));
    let confidence = if conf_path.exists() {
        read_tensor_expect(&conf_path, &[h, w])?
    } else {
        vec![1.0; w * h]
    };
    let valid = depth.iter().map(|&d| d.is_finite() && d > 0.0).collect();
    Ok(DepthMap { width: w, height: h, depth, confidence, valid })
}

/// Write a validated bundle under `root` (created if needed).
pub fn save_bundle(bundle: &CaptureBundle, root: &Path) -> Result<()> {
    bundle.validate()?;
    std::fs::create_dir_all(root.join("views")).map_err(|e| Error::io(root, e))?;
    let (w, h) = (bundle.width(), bundle.height());
    let meta = BundleMeta {
        name: bundle.name.clone(),
        units: bundle.units.clone(),
        n_views: bundle.n_views(),
        width: w,
        height: h,
        sh_degree: bundle.sh_degree(),
        background: [bundle.background.x, bundle.background.y, bundle.background.z],
    };
    let meta_path = root.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::parse(&meta_path, e.to_string()))?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

    if let Some(cams) = &bundle.cameras_gt {
        write_trajectory(&root.join("cameras_gt.txt"), cams)?;
    }
    if let Some(cams) = &bundle.cameras_pseudo {
        write_trajectory(&root.join("cameras_pseudo.txt"), cams)?;
    }

    bundle
        .views
        .par_iter()
        .enumerate()
        .try_for_each(|(i, v)| -> Result<()> {
            let dir = view_dir(root, i);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_png(&dir.join("image.png"), &v.image)?;
            save_depth(&dir, "depth", &v.depth)?;
            let a = &v.attributes;
            write_tensor(&dir.join("attr_logit_opacity.f32"), &[h, w], &a.logit_opacity)?;
            let quat_flat: Vec<f64> =
                a.raw_quaternion.iter().flat_map(|q| q.iter().copied()).collect();
            write_tensor(&dir.join("attr_raw_quaternion.f32"), &[h, w, 4], &quat_flat)?;
            let scale_flat: Vec<f64> =
                a.log_scale.iter().flat_map(|s| [s.x, s.y, s.z]).collect();
            write_tensor(&dir.join("attr_log_scale.f32"), &[h, w, 3], &scale_flat)?;
            let nc = sh::n_coeffs(a.sh_degree);
            write_tensor(&dir.join("attr_sh.f32"), &[h, w, 3 * nc], &a.sh)?;
            write_tensor(&dir.join("attr_confidence.f32"), &[h, w], &a.confidence)?;
            if let Some(pd) = &v.pseudo_depth {
                save_depth(&dir, "pseudo_depth", pd)?;
            }
            Ok(())
        })
}

/// Load and validate a bundle; optional files simply yield absent fields.
pub fn load_bundle(root: &Path) -> Result<CaptureBundle> {
    let meta_path = root.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta =
        serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?;
    if meta.n_views == 0 {
        return Err(Error::parse(&meta_path, "bundle has no views"));
    }
    sh::check_degree(meta.sh_degree)?;
    let (w, h) = (meta.width, meta.height);
    let nc = sh::n_coeffs(meta.sh_degree);

    let views: Vec<ViewRecord> = (0..meta.n_views)
        .into_par_iter()
        .map(|i| -> Result<ViewRecord> {
            let dir = view_dir(root, i);
            let image = load_png(&dir.join("image.png"))?;
            if image.width != w || image.height != h {
                return Err(Error::parse(
                    dir.join("image.png"),
                    format!("image is {}x{}, bundle is {w}x{h}", image.width, image.height),
                ));
            }
            let depth = load_depth(&dir, "depth", w, h)?;
            let logit_opacity = read_tensor_expect(&dir.join("attr_logit_opacity.f32"), &[h, w])?;
            let quat_flat = read_tensor_expect(&dir.join("attr_raw_quaternion.f32"), &[h, w, 4])?;
            let raw_quaternion =
                quat_flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            let scale_flat = read_tensor_expect(&dir.join("attr_log_scale.f32"), &[h, w, 3])?;
            let log_scale = scale_flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            let sh = read_tensor_expect(&dir.join("attr_sh.f32"), &[h, w, 3 * nc])?;
            let confidence = read_tensor_expect(&dir.join("attr_confidence.f32"), &[h, w])?;
            let attributes = AttributeMaps {
                width: w,
                height: h,
                sh_degree: meta.sh_degree,
                logit_opacity,
                raw_quaternion,
                log_scale,
                sh,
                confidence,
            };
            let pseudo_depth = if dir.join("pseudo_depth.f32").exists() {
                Some(load_depth(&dir, "pseudo_depth", w, h)?)
            } else {
                None
            };
            Ok(ViewRecord { image, depth, attributes, pseudo_depth })
        })
        .collect::<Result<_>>()?;

    let read_cams = |name: &str| -> Result<Option<Vec<Camera>>> {
        let path = root.join(name);
        if path.exists() {
            Ok(Some(read_trajectory(&path)?))
        } else {
            Ok(None)
        }
    };
    let bundle = CaptureBundle {
        name: meta.name,
        units: meta.units,
        background: Vec3::new(meta.background[0], meta.background[1], meta.background[2]),
        views,
        cameras_gt: read_cams("cameras_gt.txt")?,
        cameras_pseudo: read_cams("cameras_pseudo.txt")?,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Bundle with every float already on the f32 grid (bitwise round trip).
    pub(crate) fn f32_random_bundle(n_views: usize, w: usize, h: usize, seed: u64) -> CaptureBundle {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let t = |v: f64| v as f32 as f64;
        let degree = 1;
        let nc = sh::n_coeffs(degree);
        let views = (0..n_views)
            .map(|_| {
                let image = ImageRgb {
                    width: w,
                    height: h,
                    data: (0..w * h)
                        .map(|_| {
                            // PNG stores 8-bit: use exactly representable values
                            Vec3::new(
                                rng.gen_range(0..=255u8) as f64 / 255.0,
                                rng.gen_range(0..=255u8) as f64 / 255.0,
                                rng.gen_range(0..=255u8) as f64 / 255.0,
                            )
                        })
                        .collect(),
                };
                let valid: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.9)).collect();
                let depth = DepthMap {
                    width: w,
                    height: h,
                    depth: valid
                        .iter()
                        .map(|&v| if v { t(rng.gen_range(0.5..4.0)) } else { 0.0 })
                        .collect(),
                    confidence: (0..w * h).map(|_| t(rng.gen_range(0.0..1.0))).collect(),
                    valid,
                };
                let attributes = AttributeMaps {
                    width: w,
                    height: h,
                    sh_degree: degree,
                    logit_opacity: (0..w * h).map(|_| t(rng.gen_range(-2.0..4.0))).collect(),
                    raw_quaternion: (0..w * h)
                        .map(|_| {
                            [
                                t(rng.gen_range(0.2..1.0)),
                                t(rng.gen_range(-1.0..1.0)),
                                t(rng.gen_range(-1.0..1.0)),
                                t(rng.gen_range(-1.0..1.0)),
                            ]
                        })
                        .collect(),
                    log_scale: (0..w * h)
                        .map(|_| {
                            Vec3::new(
                                t(rng.gen_range(-3.0..-1.0)),
                                t(rng.gen_range(-3.0..-1.0)),
                                t(rng.gen_range(-3.0..-1.0)),
                            )
                        })
                        .collect(),
                    sh: (0..w * h * 3 * nc).map(|_| t(rng.gen_range(-1.0..1.0))).collect(),
                    confidence: (0..w * h).map(|_| t(rng.gen_range(-1.0..1.0))).collect(),
                };
                let pseudo_depth = Some(DepthMap {
                    width: w,
                    height: h,
                    depth: depth.depth.clone(),
                    confidence: depth.confidence.clone(),
                    valid: depth.valid.clone(),
                });
                ViewRecord { image, depth, attributes, pseudo_depth }
            })
            .collect();
        let cams: Vec<Camera> = (0..n_views)
            .map(|i| {
                Camera::new(
                    w,
                    h,
                    t(rng.gen_range(20.0..60.0)),
                    t(rng.gen_range(20.0..60.0)),
                    w as f64 / 2.0,
                    h as f64 / 2.0,
                    [1.0, 0.0, 0.0, 0.0],
                    Vec3::new(i as f64, 0.0, -2.0),
                )
                .unwrap()
            })
            .collect();
        CaptureBundle {
            name: "random".into(),
            units: "meters".into(),
            background: Vec3::new(0.0, 0.0, 0.0),
            views,
            cameras_gt: Some(cams.clone()),
            cameras_pseudo: Some(cams),
        }
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = f32_random_bundle(3, 12, 10, 100);
        save_bundle(&bundle, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, bundle);
    }

    #[test]
    fn minimal_bundle_loads_without_optional_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = f32_random_bundle(2, 8, 8, 101);
        bundle.cameras_gt = None;
        bundle.cameras_pseudo = None;
        for v in bundle.views.iter_mut() {
            v.pseudo_depth = None;
        }
        save_bundle(&bundle, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, bundle);
        assert!(back.cameras_gt.is_none());
        assert!(back.views[0].pseudo_depth.is_none());
    }

    #[test]
    fn corrupted_header_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = f32_random_bundle(1, 8, 8, 102);
        save_bundle(&bundle, dir.path()).unwrap();
        let victim = dir.path().join("views/0/depth.json");
        std::fs::write(&victim, "{broken").unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Parse { path, .. }) => {
                assert!(path.to_string_lossy().contains("depth.json"), "{path:?}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_required_tensor_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = f32_random_bundle(1, 8, 8, 103);
        save_bundle(&bundle, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("views/0/attr_sh.f32")).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn meta_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = f32_random_bundle(2, 8, 8, 104);
        save_bundle(&bundle, dir.path()).unwrap();
        // claim a different resolution in meta.json
        let meta_path = dir.path().join("meta.json");
        let text = std::fs::read_to_string(&meta_path).unwrap();
        std::fs::write(&meta_path, text.replace("\"width\": 8", "\"width\": 9")).unwrap();
        assert!(load_bundle(dir.path()).is_err());
    }

    #[test]
    fn png_quantization_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageRgb {
            width: 4,
            height: 3,
            data: (0..12)
                .map(|i| {
                    Vec3::new(
                        (i * 20 % 256) as f64 / 255.0,
                        (i * 37 % 256) as f64 / 255.0,
                        (i * 11 % 256) as f64 / 255.0,
                    )
                })
                .collect(),
        };
        let path = dir.path().join("img.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back, img, "8-bit grid values survive a PNG round trip");
        // second generation identical
        save_png(&path, &back).unwrap();
        assert_eq!(load_png(&path).unwrap(), back);
    }
}
