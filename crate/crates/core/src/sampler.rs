//! Training-view sampling strategies and the dense/sparse evaluation splits.
//!
//! All samplers draw from a seeded counter-based generator (ChaCha12) so a
//! run config fully determines the selected views on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};

/// How to choose training views from a capture sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uniform without replacement anywhere in the sequence.
    ObjectRandom,
    /// Two endpoints separated by a bounded temporal gap plus interior frames.
    SequentialGap,
    /// Frames close to a randomly chosen reference camera center.
    PoseDistance,
}

fn default_count() -> usize {
    2
}
fn default_min_gap() -> usize {
    1
}
fn default_max_gap() -> usize {
    1
}
fn default_threshold() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    pub strategy: Strategy,
    #[serde(default = "default_count")]
    pub count: usize,
    /// Sequential strategy only.
    #[serde(default = "default_min_gap")]
    pub min_gap: usize,
    #[serde(default = "default_max_gap")]
    pub max_gap: usize,
    /// Pose-distance strategy only.
    #[serde(default = "default_threshold")]
    pub distance_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::InvalidConfig("sampling count must be ≥ 1".into()));
        }
        if self.min_gap > self.max_gap {
            return Err(Error::InvalidConfig(format!(
                "min_gap {} exceeds max_gap {}",
                self.min_gap, self.max_gap
            )));
        }
        if self.distance_threshold.is_nan() || self.distance_threshold < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "distance_threshold must be ≥ 0, got {}",
                self.distance_threshold
            )));
        }
        Ok(())
    }
}

/// Dispatch a sampling spec against a camera list.
pub fn sample(spec: &SamplingSpec, cams: &[Camera]) -> Result<Vec<usize>> {
    spec.validate()?;
    match spec.strategy {
        Strategy::ObjectRandom => sample_object_random(cams.len(), spec.count, spec.seed),
        Strategy::SequentialGap => {
            sample_sequential_gap(cams.len(), spec.count, spec.min_gap, spec.max_gap, spec.seed)
        }
        Strategy::PoseDistance => {
            sample_pose_distance(cams, spec.count, spec.distance_threshold, spec.seed)
        }
    }
}

/// Uniform sample of `count` distinct indices from `0..n_total`, ascending.
pub fn sample_object_random(n_total: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > n_total {
        return Err(Error::InsufficientViews(format!(
            "cannot sample {count} views from {n_total}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n_total, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Endpoints at a random temporal gap g ∈ [min_gap, max_gap] plus
/// `count − 2` interior frames sampled strictly between them.
pub fn sample_sequential_gap(
    n_total: usize,
    count: usize,
    min_gap: usize,
    max_gap: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if count < 2 {
        return Err(Error::InsufficientViews(
            "sequential sampling needs count ≥ 2 for both endpoints".into(),
        ));
    }
    if min_gap > max_gap || min_gap < count - 1 || max_gap >= n_total {
        return Err(Error::InsufficientViews(format!(
            "infeasible gap bounds [{min_gap}, {max_gap}] for count {count} of {n_total} views"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let g = rng.gen_range(min_gap..=max_gap);
    let s = rng.gen_range(0..=(n_total - 1 - g));
    let mut idx = vec![s, s + g];
    // interior candidates are (s, s+g) exclusive: g−1 frames
    let interior = rand::seq::index::sample(&mut rng, g - 1, count - 2);
    idx.extend(interior.iter().map(|k| s + 1 + k));
    idx.sort_unstable();
    Ok(idx)
}

/// Frames whose camera centers lie within `threshold` of a randomly chosen
/// reference. References are tried in random order until one admits `count`
/// eligible frames (the reference itself is eligible at distance 0).
pub fn sample_pose_distance(
    cams: &[Camera],
    count: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if count > cams.len() {
        return Err(Error::InsufficientViews(format!(
            "cannot sample {count} views from {}",
            cams.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut refs: Vec<usize> = (0..cams.len()).collect();
    refs.shuffle(&mut rng);
    for r in refs {
        let eligible: Vec<usize> = (0..cams.len())
            .filter(|&i| (cams[i].t - cams[r].t).norm() <= threshold)
            .collect();
        if eligible.len() < count {
            continue;
        }
        let picks = rand::seq::index::sample(&mut rng, eligible.len(), count);
        let mut idx: Vec<usize> = picks.iter().map(|k| eligible[k]).collect();
        idx.sort_unstable();
        return Ok(idx);
    }
    Err(Error::InsufficientViews(format!(
        "no reference has {count} frames within distance {threshold}"
    )))
}

/// Evaluation split density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Every 8th frame becomes a target view.
    Dense,
    /// Every 2nd frame becomes a target view.
    Sparse,
}

/// Partition `0..n_total` into (context, target) index lists.
pub fn split_eval(n_total: usize, mode: SplitMode) -> Result<(Vec<usize>, Vec<usize>)> {
    let period = match mode {
        SplitMode::Dense => 8,
        SplitMode::Sparse => 2,
    };
    if n_total < period {
        return Err(Error::InsufficientViews(format!(
            "{mode:?} split needs at least {period} views, got {n_total}"
        )));
    }
    let mut context = Vec::new();
    let mut target = Vec::new();
    for i in 0..n_total {
        if i % period == 0 {
            target.push(i);
        } else {
            context.push(i);
        }
    }
    Ok((context, target))
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::math::Vec3;
    use proptest::prelude::*;

    fn line_cameras(centers: &[Vec3]) -> Vec<Camera> {
        centers
            .iter()
            .map(|c| {
                Camera::new(32, 32, 30.0, 30.0, 16.0, 16.0, [1.0, 0.0, 0.0, 0.0], *c).unwrap()
            })
            .collect()
    }

    #[test]
    fn object_random_exhaustive_and_reproducible() {
        assert_eq!(sample_object_random(5, 5, 9).unwrap(), vec![0, 1, 2, 3, 4]);
        let a = sample_object_random(100, 7, 42).unwrap();
        let b = sample_object_random(100, 7, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "strictly ascending");
        let c = sample_object_random(100, 7, 43).unwrap();
        assert_ne!(a, c, "different seed should differ");
        assert!(matches!(
            sample_object_random(3, 4, 0),
            Err(Error::InsufficientViews(_))
        ));
    }

    #[test]
    fn object_random_marginals_are_uniform() {
        // inclusion probability of each index is count/n = 0.3; check the
        // empirical frequency over 1e5 seeded draws within 3σ binomial bounds
        let (n, count, draws) = (10usize, 3usize, 100_000usize);
        let mut hits = vec![0usize; n];
        for seed in 0..draws {
            for i in sample_object_random(n, count, seed as u64).unwrap() {
                hits[i] += 1;
            }
        }
        let p = count as f64 / n as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / draws as f64;
            assert!(
                (freq - p).abs() < 3.0 * sigma,
                "index {i}: frequency {freq} vs expected {p} (3σ = {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn sequential_endpoints_only_and_saturated() {
        // count = 2 → exactly the two endpoints
        let idx = sample_sequential_gap(50, 2, 5, 10, 7).unwrap();
        assert_eq!(idx.len(), 2);
        let g = idx[1] - idx[0];
        assert!((5..=10).contains(&g));

        // count = g + 1 with min_gap = max_gap = g → full contiguous run
        let idx = sample_sequential_gap(30, 7, 6, 6, 11).unwrap();
        assert_eq!(idx.len(), 7);
        for w in idx.windows(2) {
            assert_eq!(w[1] - w[0], 1, "saturated interior must be contiguous");
        }
    }

    #[test]
    fn sequential_rejects_infeasible_bounds() {
        assert!(sample_sequential_gap(10, 1, 3, 5, 0).is_err());
        assert!(sample_sequential_gap(10, 5, 3, 6, 0).is_err()); // min_gap < count−1
        assert!(sample_sequential_gap(10, 2, 5, 10, 0).is_err()); // max_gap ≥ n_total
        assert!(sample_sequential_gap(10, 2, 7, 5, 0).is_err()); // min > max
    }

    proptest! {
        #[test]
        fn sequential_gap_bounds_always_hold(
            seed in 0u64..1000,
            n_total in 12usize..200,
            count in 2usize..6,
            min_gap in 5usize..10,
            extra in 0usize..5,
        ) {
            let max_gap = (min_gap + extra).min(n_total - 1);
            prop_assume!(min_gap <= max_gap && min_gap >= count - 1);
            let idx = sample_sequential_gap(n_total, count, min_gap, max_gap, seed).unwrap();
            prop_assert_eq!(idx.len(), count);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            let span = idx[count - 1] - idx[0];
            prop_assert!((min_gap..=max_gap).contains(&span));
            prop_assert!(idx[count - 1] < n_total);
        }
    }

    #[test]
    fn pose_distance_respects_threshold() {
        // two clusters far apart
        let mut centers = Vec::new();
        for i in 0..6 {
            centers.push(Vec3::new(i as f64 * 0.1, 0.0, 0.0));
        }
        for i in 0..6 {
            centers.push(Vec3::new(100.0 + i as f64 * 0.1, 0.0, 0.0));
        }
        let cams = line_cameras(&centers);
        for seed in 0..20 {
            let idx = sample_pose_distance(&cams, 4, 1.0, seed).unwrap();
            assert_eq!(idx.len(), 4);
            let first_cluster = idx[0] < 6;
            for &i in &idx {
                assert_eq!(i < 6, first_cluster, "indices {idx:?} straddle the clusters");
            }
            // every selected center within threshold of some common reference
            let ok = idx.iter().any(|&r| {
                idx.iter().all(|&i| (cams[i].t - cams[r].t).norm() <= 1.0)
            });
            assert!(ok, "no admissible reference for {idx:?}");
        }
    }

    #[test]
    fn pose_distance_infinite_threshold_behaves_like_random() {
        let cams = line_cameras(
            &(0..30).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect::<Vec<_>>(),
        );
        let idx = sample_pose_distance(&cams, 10, f64::INFINITY, 5).unwrap();
        assert_eq!(idx.len(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(*idx.last().unwrap() < 30);

        // tiny threshold: each reference admits only itself
        assert!(matches!(
            sample_pose_distance(&cams, 2, 0.5, 5),
            Err(Error::InsufficientViews(_))
        ));
    }

    #[test]
    fn split_eval_dense_and_sparse() {
        let (ctx, tgt) = split_eval(72, SplitMode::Dense).unwrap();
        assert_eq!(tgt.len(), 9);
        assert_eq!(ctx.len(), 63);
        let (ctx, tgt) = split_eval(8, SplitMode::Dense).unwrap();
        assert_eq!(tgt, vec![0]);
        assert_eq!(ctx.len(), 7);

        let (ctx, tgt) = split_eval(10, SplitMode::Sparse).unwrap();
        assert_eq!(tgt, vec![0, 2, 4, 6, 8]);
        assert_eq!(ctx, vec![1, 3, 5, 7, 9]);

        // partition property
        let (ctx, tgt) = split_eval(23, SplitMode::Dense).unwrap();
        let mut all: Vec<usize> = ctx.iter().chain(tgt.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());

        assert!(matches!(split_eval(7, SplitMode::Dense), Err(Error::InsufficientViews(_))));
        assert!(matches!(split_eval(1, SplitMode::Sparse), Err(Error::InsufficientViews(_))));
    }

    #[test]
    fn spec_dispatch_and_validation() {
        let json = r#"{"strategy": "object_random", "count": 3, "seed": 4}"#;
        let spec: SamplingSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.strategy, Strategy::ObjectRandom);
        let cams = line_cameras(&(0..9).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect::<Vec<_>>());
        let idx = sample(&spec, &cams).unwrap();
        assert_eq!(idx, sample_object_random(9, 3, 4).unwrap());

        let bad: SamplingSpec = serde_json::from_str(
            r#"{"strategy": "sequential_gap", "count": 0}"#,
        )
        .unwrap();
        assert!(matches!(sample(&bad, &cams), Err(Error::InvalidConfig(_))));
        assert!(serde_json::from_str::<SamplingSpec>(r#"{"strategy": "fancy"}"#).is_err());
        assert!(
            serde_json::from_str::<SamplingSpec>(r#"{"strategy": "object_random", "speed": 1}"#)
                .is_err()
        );
    }
}
