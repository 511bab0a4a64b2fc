//! Evaluation metrics: PSNR / SSIM for images, AbsRel / δ₁ for depth, and
//! area-under-curve over relative-pose errors for camera trajectories.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use crate::buffers::{check_same_shape, ImageRgb};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::ssim;

/// Thresholds (degrees) reported by the standard evaluation.
pub const AUC_THRESHOLDS: [f64; 4] = [5.0, 10.0, 20.0, 30.0];

/// Peak signal-to-noise ratio in dB for unit dynamic range. Identical
/// images yield `f64::INFINITY`.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_same_shape(a, b, "psnr inputs")?;
    let mut acc = 0.0;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        acc += (pa - pb).norm_squared();
    }
    let mse = acc / (3.0 * a.data.len() as f64);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean structural similarity; see the `ssim` module for the windowed
/// definition (11×11 Gaussian, σ = 1.5, K1 = 0.01, K2 = 0.03, L = 1).
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    ssim::ssim(a, b)
}

/// Mean absolute relative depth error over the valid mask: ⟨|pred−gt|/gt⟩.
pub fn depth_absrel(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    check_depth_args(pred, gt, valid)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        if !(gt[i] > 0.0) {
            return Err(Error::UndefinedMetric(format!(
                "absrel needs positive ground-truth depth, got {} at pixel {i}",
                gt[i]
            )));
        }
        acc += (pred[i] - gt[i]).abs() / gt[i];
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("absrel over an empty mask".into()));
    }
    Ok(acc / count as f64)
}

/// Fraction of valid pixels with max(pred/gt, gt/pred) strictly below 1.25.
pub fn depth_delta1(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    check_depth_args(pred, gt, valid)?;
    let mut hits = 0usize;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        if !(gt[i] > 0.0) || !(pred[i] > 0.0) {
            return Err(Error::UndefinedMetric(format!(
                "delta1 needs positive depths, got pred {} / gt {} at pixel {i}",
                pred[i], gt[i]
            )));
        }
        let ratio = (pred[i] / gt[i]).max(gt[i] / pred[i]);
        if ratio < 1.25 {
            hits += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("delta1 over an empty mask".into()));
    }
    Ok(hits as f64 / count as f64)
}

fn check_depth_args(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::Dimension(format!(
            "depth metric arguments disagree: pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    Ok(())
}

/// Relative-pose accuracy AUC at several angular thresholds.
#[derive(Debug, Clone, Serialize)]
pub struct PoseAucReport {
    /// Thresholds in degrees, ascending.
    pub thresholds: Vec<f64>,
    /// AUC values aligned with `thresholds`, each in [0, 1].
    pub auc: Vec<f64>,
    /// max(rotation°, translation-direction°) per unordered pair (i < j,
    /// lexicographic order).
    pub pair_errors: Vec<f64>,
}

fn rotation_angle_deg(r: &crate::math::Mat3) -> f64 {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

fn angle_between_deg(a: &Vec3, b: &Vec3) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    // direction undefined at (numerically) zero baseline → error contributes 0
    if na < 1e-9 || nb < 1e-9 {
        return 0.0;
    }
    ((a.dot(b)) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// All-pairs relative-pose errors and exact step-function AUC.
///
/// For each unordered camera pair the rotation error is the angle of
/// R̂_ij·R_ijᵀ and the translation error is the angle between the relative
/// translation directions expressed in camera i; the pair error is the max
/// of the two. AUC at threshold τ integrates the cumulative accuracy curve
/// of the sorted pair errors over [0, τ], normalized by τ.
pub fn pose_auc(pred: &[Camera], gt: &[Camera], thresholds: &[f64]) -> Result<PoseAucReport> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "trajectory lengths disagree: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InsufficientViews(format!(
            "pose AUC needs at least 2 cameras, got {}",
            pred.len()
        )));
    }
    for (k, &t) in thresholds.iter().enumerate() {
        if !(t > 0.0) {
            return Err(Error::InvalidConfig(format!("threshold {k} must be > 0, got {t}")));
        }
    }

    let n = pred.len();
    let mut pair_errors = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let rel = |cams: &[Camera]| {
                let ri = cams[i].rotation();
                let rot = ri.transpose() * cams[j].rotation();
                let t = ri.transpose() * (cams[j].t - cams[i].t);
                (rot, t)
            };
            let (rp, tp) = rel(pred);
            let (rg, tg) = rel(gt);
            let rot_err = rotation_angle_deg(&(rp * rg.transpose()));
            let trans_err = angle_between_deg(&tp, &tg);
            pair_errors.push(rot_err.max(trans_err));
        }
    }

    let mut sorted = pair_errors.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p = sorted.len() as f64;
    let auc = thresholds
        .iter()
        .map(|&tau| {
            // exact integral of the step accuracy curve: between consecutive
            // sorted errors the accuracy is constant at k/P
            let mut area = 0.0;
            let mut prev = 0.0;
            for (k, &e) in sorted.iter().enumerate() {
                let upper = e.min(tau);
                if upper > prev {
                    area += (upper - prev) * k as f64 / p;
                }
                prev = prev.max(upper);
                if e >= tau {
                    break;
                }
            }
            if tau > prev {
                let below = sorted.iter().filter(|&&e| e <= tau).count() as f64;
                area += (tau - prev) * below / p;
            }
            area / tau
        })
        .collect();

    Ok(PoseAucReport { thresholds: thresholds.to_vec(), auc, pair_errors })
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("+inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Aggregate evaluation emitted as JSON by the command-line `eval`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Mean PSNR over evaluation views; "+inf" when every pixel matches.
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub absrel: f64,
    pub delta1: f64,
    /// Keyed by integer threshold in degrees.
    pub auc: BTreeMap<String, f64>,
    pub n_views: usize,
    pub n_gaussians: usize,
}

impl EvalReport {
    pub fn auc_map(report: &PoseAucReport) -> BTreeMap<String, f64> {
        report
            .thresholds
            .iter()
            .zip(&report.auc)
            .map(|(t, v)| (format!("{}", *t as i64), *v))
            .collect()
    }
}
