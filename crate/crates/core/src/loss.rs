//! Training objective: photometric loss, confidence-masked geometry and
//! depth-distillation losses, pose-distillation Huber loss, and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::buffers::{check_same_shape, ImageRgb};
use crate::camera::PoseEncoding;
use crate::error::{Error, Result};
use crate::gaussian::DepthMap;
use crate::math::Vec3;
use crate::ssim;

fn default_lambda1() -> f64 {
    0.05
}
fn default_lambda2() -> f64 {
    0.1
}
fn default_lambda3() -> f64 {
    10.0
}
fn default_lambda4() -> f64 {
    1.0
}
fn default_top_quantile() -> f64 {
    0.3
}
fn default_huber_delta() -> f64 {
    0.1
}

/// Loss term weights. Defaults follow the reference configuration:
/// structural weight 0.05, geometry 0.1, pose 10.0, depth distillation 1.0,
/// top 30% confidence quantile, Huber transition at 0.1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default = "default_lambda3")]
    pub lambda3: f64,
    #[serde(default = "default_lambda4")]
    pub lambda4: f64,
    #[serde(default = "default_top_quantile")]
    pub top_quantile: f64,
    #[serde(default = "default_huber_delta")]
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            lambda3: default_lambda3(),
            lambda4: default_lambda4(),
            top_quantile: default_top_quantile(),
            huber_delta: default_huber_delta(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("huber_delta", self.huber_delta),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.top_quantile > 0.0 && self.top_quantile <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "top_quantile must be in (0, 1], got {}",
                self.top_quantile
            )));
        }
        Ok(())
    }
}

/// Per-term values and the weighted total of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub rgb: f64,
    pub geometry: f64,
    pub pose: f64,
    pub depth_distill: f64,
    pub total: f64,
    /// Fraction of pixels supervised by the geometry mask.
    pub mask_coverage: f64,
}

/// Pixels belonging to the top `quantile` of `confidence`: exactly
/// ⌈quantile·n⌉ pixels, ties at the boundary broken by lower pixel index.
pub fn top_quantile_mask(confidence: &[f64], quantile: f64) -> Result<Vec<bool>> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "top_quantile must be in (0, 1], got {quantile}"
        )));
    }
    let n = confidence.len();
    let k = (quantile * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        confidence[b].partial_cmp(&confidence[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut mask = vec![false; n];
    for &i in order.iter().take(k.min(n)) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Photometric loss value and its gradient on the rendered image.
#[derive(Debug, Clone)]
pub struct RgbLoss {
    pub value: f64,
    pub d_rendered: Vec<Vec3>,
}

/// MSE plus `lambda1` times the structural dissimilarity (1−SSIM)/2, the
/// built-in stand-in for a feature-based perceptual term.
pub fn loss_rgb(rendered: &ImageRgb, target: &ImageRgb, lambda1: f64) -> Result<RgbLoss> {
    check_same_shape(rendered, target, "rgb loss inputs")?;
    let n = rendered.data.len();
    let norm = 1.0 / (3.0 * n as f64);
    let mut mse = 0.0;
    let mut grad = vec![Vec3::zeros(); n];
    for i in 0..n {
        let diff = rendered.data[i] - target.data[i];
        mse += diff.norm_squared();
        grad[i] = 2.0 * norm * diff;
    }
    mse *= norm;
    let mut value = mse;
    if lambda1 != 0.0 {
        let (dssim, dgrad) = ssim::dssim_with_grad(rendered, target)?;
        value += lambda1 * dssim;
        for (g, d) in grad.iter_mut().zip(&dgrad) {
            *g += lambda1 * d;
        }
    }
    Ok(RgbLoss { value, d_rendered: grad })
}

/// Masked depth-consistency loss with gradients on both depth sources.
#[derive(Debug, Clone)]
pub struct GeometryLoss {
    pub value: f64,
    /// Fraction of pixels inside the final mask.
    pub coverage: f64,
    /// Set when the mask came out empty (loss defined as 0).
    pub empty_mask: bool,
    pub d_rendered: Vec<f64>,
    pub d_decoded: Vec<f64>,
    pub mask: Vec<bool>,
}

fn masked_mse(
    reference: &DepthMap,
    rendered_depth: &[f64],
    rendered_alpha: &[f64],
    top_quantile: f64,
) -> Result<GeometryLoss> {
    let n = reference.width * reference.height;
    if rendered_depth.len() != n || rendered_alpha.len() != n {
        return Err(Error::Dimension(format!(
            "rendered depth/alpha disagree with {}x{} depth map",
            reference.width, reference.height
        )));
    }
    reference.validate()?;
    let mut mask = top_quantile_mask(&reference.confidence, top_quantile)?;
    for i in 0..n {
        mask[i] = mask[i] && reference.valid[i] && rendered_alpha[i] >= 0.5;
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut out = GeometryLoss {
        value: 0.0,
        coverage: count as f64 / n as f64,
        empty_mask: count == 0,
        d_rendered: vec![0.0; n],
        d_decoded: vec![0.0; n],
        mask,
    };
    if count == 0 {
        return Ok(out);
    }
    let norm = 1.0 / count as f64;
    let mut acc = 0.0;
    for i in 0..n {
        if !out.mask[i] {
            continue;
        }
        let diff = rendered_depth[i] - reference.depth[i];
        acc += diff * diff;
        out.d_rendered[i] = 2.0 * norm * diff;
        out.d_decoded[i] = -2.0 * norm * diff;
    }
    out.value = acc * norm;
    Ok(out)
}

/// Consistency between rendered expected depth and the depth the Gaussians
/// were decoded from. Mask: top confidence quantile of the decoded depth,
/// intersected with its validity map and rendered alpha ≥ 0.5.
pub fn loss_geometry(
    decoded_depth: &DepthMap,
    rendered_depth: &[f64],
    rendered_alpha: &[f64],
    top_quantile: f64,
) -> Result<GeometryLoss> {
    masked_mse(decoded_depth, rendered_depth, rendered_alpha, top_quantile)
}

/// Distillation from a frozen pseudo ground-truth depth map. Same mask
/// construction as `loss_geometry` but from the pseudo depth's confidence;
/// the pseudo depth itself receives no gradient.
pub fn loss_depth_distill(
    pseudo_depth: &DepthMap,
    rendered_depth: &[f64],
    rendered_alpha: &[f64],
    top_quantile: f64,
) -> Result<GeometryLoss> {
    let mut out = masked_mse(pseudo_depth, rendered_depth, rendered_alpha, top_quantile)?;
    out.d_decoded.iter_mut().for_each(|g| *g = 0.0);
    Ok(out)
}

/// Huber penalty value and derivative: ½x² inside |x| ≤ δ, δ(|x|−½δ) outside.
fn huber(x: f64, delta: f64) -> (f64, f64) {
    if x.abs() <= delta {
        (0.5 * x * x, x)
    } else {
        (delta * (x.abs() - 0.5 * delta), delta * x.signum())
    }
}

/// Pose-distillation loss and gradient on the predicted encodings.
#[derive(Debug, Clone)]
pub struct PoseLoss {
    pub value: f64,
    pub d_pred: Vec<[f64; 9]>,
}

/// Mean over views of the component-wise Huber penalty between predicted
/// and pseudo ground-truth pose encodings (summed over the 9 components).
pub fn loss_pose(pred: &[PoseEncoding], pseudo: &[PoseEncoding], delta: f64) -> Result<PoseLoss> {
    if pred.len() != pseudo.len() {
        return Err(Error::Dimension(format!(
            "pose lists disagree: {} predicted vs {} pseudo",
            pred.len(),
            pseudo.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Dimension("pose loss needs at least one view".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidConfig(format!("huber_delta must be > 0, got {delta}")));
    }
    let nv = pred.len() as f64;
    let mut value = 0.0;
    let mut d_pred = vec![[0.0; 9]; pred.len()];
    for (v, (p, t)) in pred.iter().zip(pseudo).enumerate() {
        let pa = p.to_array();
        let ta = t.to_array();
        for k in 0..9 {
            let (l, dl_dx) = huber(ta[k] - pa[k], delta);
            value += l / nv;
            // x = t − p ⇒ ∂l/∂p = −l'(x)
            d_pred[v][k] = -dl_dx / nv;
        }
    }
    Ok(PoseLoss { value, d_pred })
}

/// Precomputed loss terms to be combined by `loss_total`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub rgb: f64,
    pub geometry: f64,
    pub pose: f64,
    pub depth_distill: f64,
    pub mask_coverage: f64,
}

/// Weighted sum: rgb + λ2·geometry + λ3·pose + λ4·depth_distill.
pub fn loss_total(terms: &LossTerms, weights: &LossWeights) -> LossReport {
    LossReport {
        rgb: terms.rgb,
        geometry: terms.geometry,
        pose: terms.pose,
        depth_distill: terms.depth_distill,
        total: terms.rgb
            + weights.lambda2 * terms.geometry
            + weights.lambda3 * terms.pose
            + weights.lambda4 * terms.depth_distill,
        mask_coverage: terms.mask_coverage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::assert_close;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(rng: &mut ChaCha12Rng, w: usize, h: usize) -> ImageRgb {
        ImageRgb {
            width: w,
            height: h,
            data: (0..w * h)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(0.05..0.95),
                        rng.gen_range(0.05..0.95),
                        rng.gen_range(0.05..0.95),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn weights_default_and_validation() {
        let w = LossWeights::default();
        assert_eq!(
            (w.lambda1, w.lambda2, w.lambda3, w.lambda4),
            (0.05, 0.1, 10.0, 1.0)
        );
        assert_eq!((w.top_quantile, w.huber_delta), (0.3, 0.1));
        w.validate().unwrap();

        let parsed: LossWeights = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, w);
        let parsed: LossWeights = serde_json::from_str(r#"{"lambda3": 2.5}"#).unwrap();
        assert_eq!(parsed.lambda3, 2.5);
        assert_eq!(parsed.lambda1, 0.05);
        assert!(serde_json::from_str::<LossWeights>(r#"{"lambda9": 1.0}"#).is_err());

        let mut bad = w;
        bad.lambda2 = -0.1;
        assert!(bad.validate().is_err());
        bad = w;
        bad.top_quantile = 0.0;
        assert!(bad.validate().is_err());
        bad.top_quantile = 1.0;
        bad.validate().unwrap();
    }

    #[test]
    fn rgb_loss_identity_and_offset() {
        let mut rng = ChaCha12Rng::seed_from_u64(70);
        let img = random_image(&mut rng, 16, 14);
        let l = loss_rgb(&img, &img, 0.05).unwrap();
        assert_eq!(l.value, 0.0);
        // at the SSIM maximum the gradient vanishes analytically; allow fp dust
        assert!(l.d_rendered.iter().all(|g| g.norm() < 1e-12));

        // constant offset of 0.1 with lambda1 = 0 → pure MSE = 0.01
        let mut target = img.clone();
        for p in target.data.iter_mut() {
            *p += Vec3::new(0.1, 0.1, 0.1);
        }
        let l = loss_rgb(&img, &target, 0.0).unwrap();
        assert_close!(l.value, 0.01, 1e-12);
    }

    #[test]
    fn rgb_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        let a = random_image(&mut rng, 13, 12);
        let b = random_image(&mut rng, 13, 12);
        let l = loss_rgb(&a, &b, 0.05).unwrap();
        let h = 1e-6;
        for &(i, ch) in &[(0usize, 0usize), (40, 1), (90, 2), (155, 0), (13 * 12 - 1, 2)] {
            let mut ap = a.clone();
            ap.data[i][ch] += h;
            let lp = loss_rgb(&ap, &b, 0.05).unwrap().value;
            let mut am = a.clone();
            am.data[i][ch] -= h;
            let lm = loss_rgb(&am, &b, 0.05).unwrap().value;
            let fd = (lp - lm) / (2.0 * h);
            assert_close!(l.d_rendered[i][ch], fd, 1e-4);
        }
    }

    #[test]
    fn rgb_loss_rejects_shape_mismatch() {
        let a = ImageRgb { width: 4, height: 4, data: vec![Vec3::zeros(); 16] };
        let b = ImageRgb { width: 4, height: 5, data: vec![Vec3::zeros(); 20] };
        assert!(matches!(loss_rgb(&a, &b, 0.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn quantile_mask_counts_and_tie_breaks() {
        // 10 distinct confidences, q = 0.3 → exactly 3 supervised
        let conf: Vec<f64> = vec![0.1, 0.9, 0.3, 0.8, 0.2, 0.7, 0.05, 0.6, 0.4, 0.5];
        let mask = top_quantile_mask(&conf, 0.3).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3);
        assert!(mask[1] && mask[3] && mask[5]);

        // all-equal confidences: ties broken by pixel index
        let mask = top_quantile_mask(&vec![1.0; 10], 0.3).unwrap();
        assert_eq!(mask, [true, true, true, false, false, false, false, false, false, false]);

        // q = 1 keeps everything
        let mask = top_quantile_mask(&conf, 1.0).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn quantile_mask_invariant_to_positive_scaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(72);
        let conf: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let base = top_quantile_mask(&conf, 0.3).unwrap();
        for scale in [0.001, 0.7, 13.0] {
            let scaled: Vec<f64> = conf.iter().map(|c| c * scale).collect();
            assert_eq!(top_quantile_mask(&scaled, 0.3).unwrap(), base);
        }
    }

    #[test]
    fn geometry_loss_identity_offset_and_counting() {
        let mut dm = DepthMap::new(5, 2, 2.0);
        let rendered = vec![2.0; 10];
        let alpha = vec![1.0; 10];
        let l = loss_geometry(&dm, &rendered, &alpha, 1.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.coverage, 1.0);
        assert!(!l.empty_mask);

        // uniform confidence, rendered = decoded + 1 on all valid pixels → 1.0
        let rendered: Vec<f64> = vec![3.0; 10];
        let l = loss_geometry(&dm, &rendered, &alpha, 1.0).unwrap();
        assert_close!(l.value, 1.0, 1e-12);

        // distinct confidences, q = 0.3 on 10 pixels → exactly 3 supervised
        for (i, c) in dm.confidence.iter_mut().enumerate() {
            *c = i as f64 * 0.1;
        }
        let l = loss_geometry(&dm, &rendered, &alpha, 0.3).unwrap();
        assert_eq!(l.mask.iter().filter(|&&m| m).count(), 3);
        assert_close!(l.coverage, 0.3, 1e-12);
        assert!(l.mask[7] && l.mask[8] && l.mask[9]);
    }

    #[test]
    fn geometry_mask_respects_validity_and_alpha() {
        let mut dm = DepthMap::new(4, 1, 1.0);
        dm.valid[0] = false;
        let rendered = vec![1.5; 4];
        let alpha = vec![1.0, 1.0, 0.4, 1.0]; // pixel 2 under-rendered
        let l = loss_geometry(&dm, &rendered, &alpha, 1.0).unwrap();
        assert_eq!(l.mask, vec![false, true, false, true]);
        assert_close!(l.value, 0.25, 1e-12);
        assert_eq!(l.d_rendered[0], 0.0);
        assert_eq!(l.d_rendered[2], 0.0);
        assert!(l.d_rendered[1] != 0.0);

        // empty mask → zero loss, zero coverage, warning flag
        let l = loss_geometry(&dm, &rendered, &vec![0.0; 4], 1.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.coverage, 0.0);
        assert!(l.empty_mask);
        assert!(l.d_rendered.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn geometry_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(73);
        let mut dm = DepthMap::new(6, 5, 1.0);
        for d in dm.depth.iter_mut() {
            *d = rng.gen_range(0.5..3.0);
        }
        for c in dm.confidence.iter_mut() {
            *c = rng.gen_range(0.0..1.0);
        }
        let rendered: Vec<f64> = (0..30).map(|_| rng.gen_range(0.5..3.0)).collect();
        let alpha: Vec<f64> = (0..30).map(|_| rng.gen_range(0.6..1.0)).collect();
        let l = loss_geometry(&dm, &rendered, &alpha, 0.4).unwrap();
        let h = 1e-6;
        for i in [0usize, 7, 13, 29] {
            let mut rp = rendered.clone();
            rp[i] += h;
            let lp = loss_geometry(&dm, &rp, &alpha, 0.4).unwrap().value;
            rp[i] -= 2.0 * h;
            let lm = loss_geometry(&dm, &rp, &alpha, 0.4).unwrap().value;
            assert_close!(l.d_rendered[i], (lp - lm) / (2.0 * h), 1e-4);

            let mut dp = dm.clone();
            dp.depth[i] += h;
            let lp = loss_geometry(&dp, &rendered, &alpha, 0.4).unwrap().value;
            dp.depth[i] -= 2.0 * h;
            let lm = loss_geometry(&dp, &rendered, &alpha, 0.4).unwrap().value;
            assert_close!(l.d_decoded[i], (lp - lm) / (2.0 * h), 1e-4);
        }
    }

    #[test]
    fn depth_distill_masks_and_freezes_pseudo() {
        let mut dm = DepthMap::new(4, 2, 2.0);
        for (i, c) in dm.confidence.iter_mut().enumerate() {
            *c = i as f64;
        }
        let rendered = vec![2.5; 8];
        let alpha = vec![1.0; 8];
        // constant offset 0.5 on full mask → 0.25
        let l = loss_depth_distill(&dm, &rendered, &alpha, 1.0).unwrap();
        assert_close!(l.value, 0.25, 1e-12);
        assert!(l.d_decoded.iter().all(|&g| g == 0.0), "pseudo depth is frozen");

        let l = loss_depth_distill(&dm, &rendered, &alpha, 0.5).unwrap();
        let masked = l.mask.iter().filter(|&&m| m).count();
        assert_eq!(masked, 4);
        for i in 0..8 {
            if l.mask[i] {
                assert!(l.d_rendered[i] != 0.0);
            } else {
                assert_eq!(l.d_rendered[i], 0.0, "unmasked gradient must be exactly 0");
            }
        }
    }

    #[test]
    fn pose_loss_branches_and_gradient() {
        let base = PoseEncoding::from_array(&[1.0, 0.0, 0.0, 0.0, 0.5, -0.2, 1.0, 0.8, 0.8]);
        let l = loss_pose(&[base], &[base], 0.1).unwrap();
        assert_eq!(l.value, 0.0);

        // quadratic branch: one component off by 0.01 → ½·0.0001 = 5e-5
        let mut off = base.to_array();
        off[4] += 0.01;
        let l = loss_pose(&[PoseEncoding::from_array(&off)], &[base], 0.1).unwrap();
        assert_close!(l.value, 5e-5, 1e-12);

        // linear branch: off by 1.0 → 0.1·(1 − 0.05) = 0.095
        let mut off = base.to_array();
        off[5] += 1.0;
        let l = loss_pose(&[PoseEncoding::from_array(&off)], &[base], 0.1).unwrap();
        assert_close!(l.value, 0.095, 1e-12);

        // averaged over views
        let l2 = loss_pose(
            &[PoseEncoding::from_array(&off), base],
            &[base, base],
            0.1,
        )
        .unwrap();
        assert_close!(l2.value, 0.095 / 2.0, 1e-12);

        // finite differences across both branches
        let mut rng = ChaCha12Rng::seed_from_u64(74);
        let pred: Vec<PoseEncoding> = (0..3)
            .map(|_| {
                let mut a = base.to_array();
                for v in a.iter_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
                PoseEncoding::from_array(&a)
            })
            .collect();
        let l = loss_pose(&pred, &[base, base, base], 0.1).unwrap();
        let h = 1e-7;
        for v in 0..3 {
            for k in 0..9 {
                let mut pp = pred.clone();
                let mut a = pp[v].to_array();
                a[k] += h;
                pp[v] = PoseEncoding::from_array(&a);
                let lp = loss_pose(&pp, &[base, base, base], 0.1).unwrap().value;
                a[k] -= 2.0 * h;
                pp[v] = PoseEncoding::from_array(&a);
                let lm = loss_pose(&pp, &[base, base, base], 0.1).unwrap().value;
                assert_close!(l.d_pred[v][k], (lp - lm) / (2.0 * h), 1e-4);
            }
        }

        assert!(matches!(loss_pose(&[base], &[base, base], 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn huber_is_continuous_and_smooth_at_delta() {
        let delta = 0.1;
        for sign in [-1.0, 1.0] {
            let x = sign * delta;
            let (below, _) = huber(x - sign * 1e-9, delta);
            let (above, _) = huber(x + sign * 1e-9, delta);
            assert!((below - above).abs() < 1e-9, "value jump at |x|=δ");
            let (_, d_below) = huber(x - sign * 1e-9, delta);
            let (_, d_above) = huber(x + sign * 1e-9, delta);
            assert!((d_below - d_above).abs() < 1e-8, "derivative jump at |x|=δ");
        }
    }

    #[test]
    fn total_combines_terms_with_weights() {
        let zero = loss_total(&LossTerms::default(), &LossWeights::default());
        assert_eq!(zero.total, 0.0);

        let terms = LossTerms {
            rgb: 0.1,
            geometry: 0.2,
            pose: 0.01,
            depth_distill: 0.05,
            mask_coverage: 0.7,
        };
        let report = loss_total(&terms, &LossWeights::default());
        assert_close!(report.total, 0.27, 1e-12);
        assert_eq!(report.mask_coverage, 0.7);
        // the report satisfies its own linear identity
        let recomputed = report.rgb + 0.1 * report.geometry + 10.0 * report.pose + report.depth_distill;
        assert!((report.total - recomputed).abs() < 1e-9);

        let mut w = LossWeights::default();
        w.lambda2 = 0.0;
        w.lambda3 = 0.0;
        w.lambda4 = 0.0;
        assert_eq!(loss_total(&terms, &w).total, terms.rgb);
    }
}
