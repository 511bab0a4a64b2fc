//! Differentiable voxelization: cluster pixel-wise Gaussians into voxel-wise
//! Gaussians by rounding centers to a grid, aggregate every pre-activation
//! attribute with confidence-softmax weights, and push gradients back through
//! the weights (the discrete assignment itself is piecewise constant and
//! carries no gradient).

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianGrads, GaussianSet};
use crate::math::{quat_dot, Vec3};

/// Coordinates with |p/ε| beyond this lose integer precision in f64.
const MAX_COORD: f64 = 9.0e15;

#[derive(Debug, Clone)]
pub struct VoxelEntry {
    pub coord: [i64; 3],
    /// Member Gaussian ids, ascending.
    pub members: Vec<usize>,
}

/// Forward cache of one voxelization: assignment, per-member softmax weight
/// and quaternion alignment sign. Voxels are ordered by first member
/// occurrence, so the ε→0 limit reproduces the input set exactly.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub epsilon: f64,
    pub coords: Vec<[i64; 3]>,
    /// Gaussian id -> dense voxel index.
    pub voxel_of: Vec<usize>,
    pub voxels: Vec<VoxelEntry>,
    pub weights: Vec<f64>,
    /// ±1 per member: sign that aligns its quaternion with the voxel's
    /// highest-confidence member before averaging.
    pub sign: Vec<f64>,
}

impl VoxelGrid {
    pub fn n_members(&self) -> usize {
        self.voxel_of.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidVoxelSize(epsilon));
    }
    Ok(())
}

/// Round positions to voxel coordinates: `round_half_away_from_zero(p / ε)`
/// componentwise (the semantics of `f64::round`).
pub fn assign_voxels(positions: &[Vec3], epsilon: f64) -> Result<Vec<[i64; 3]>> {
    check_epsilon(epsilon)?;
    positions
        .iter()
        .map(|p| {
            let mut c = [0i64; 3];
            for k in 0..3 {
                let v = (p[k] / epsilon).round();
                if !v.is_finite() || v.abs() > MAX_COORD {
                    return Err(Error::Dimension(format!(
                        "voxel coordinate {v} overflows for position {} at epsilon {epsilon}",
                        p[k]
                    )));
                }
                c[k] = v as i64;
            }
            Ok(c)
        })
        .collect()
}

/// Intra-voxel softmax over confidences, computed with max-subtraction.
/// `voxel_of` maps each Gaussian to a dense voxel index.
pub fn compute_weights(confidence: &[f64], voxel_of: &[usize], n_voxels: usize) -> Vec<f64> {
    let mut max_c = vec![f64::NEG_INFINITY; n_voxels];
    for (g, &s) in voxel_of.iter().enumerate() {
        if confidence[g] > max_c[s] {
            max_c[s] = confidence[g];
        }
    }
    let mut denom = vec![0.0; n_voxels];
    let mut w: Vec<f64> = confidence
        .iter()
        .zip(voxel_of)
        .map(|(&c, &s)| (c - max_c[s]).exp())
        .collect();
    for (g, &s) in voxel_of.iter().enumerate() {
        denom[s] += w[g];
    }
    for (g, &s) in voxel_of.iter().enumerate() {
        w[g] /= denom[s];
    }
    w
}

/// Build the full voxelization cache for a Gaussian set.
pub fn build(set: &GaussianSet, epsilon: f64) -> Result<VoxelGrid> {
    check_epsilon(epsilon)?;
    if set.is_empty() {
        return Err(Error::EmptyScene);
    }
    let coords = assign_voxels(&set.positions, epsilon)?;

    let mut index: HashMap<[i64; 3], usize> = HashMap::with_capacity(coords.len());
    let mut voxels: Vec<VoxelEntry> = Vec::new();
    let mut voxel_of = Vec::with_capacity(coords.len());
    for (g, &c) in coords.iter().enumerate() {
        let s = *index.entry(c).or_insert_with(|| {
            voxels.push(VoxelEntry { coord: c, members: Vec::new() });
            voxels.len() - 1
        });
        voxels[s].members.push(g); // scan order keeps members ascending
        voxel_of.push(s);
    }

    let weights = compute_weights(&set.confidence, &voxel_of, voxels.len());

    // sign-align quaternions to the highest-confidence member (ties: lowest id)
    let mut sign = vec![1.0; coords.len()];
    for v in &voxels {
        let mut ref_g = v.members[0];
        for &g in &v.members[1..] {
            if set.confidence[g] > set.confidence[ref_g] {
                ref_g = g;
            }
        }
        let q_ref = set.raw_quaternion[ref_g];
        for &g in &v.members {
            if quat_dot(&set.raw_quaternion[g], &q_ref) < 0.0 {
                sign[g] = -1.0;
            }
        }
    }

    Ok(VoxelGrid { epsilon, coords, voxel_of, voxels, weights, sign })
}

fn check_grid(set: &GaussianSet, grid: &VoxelGrid) -> Result<()> {
    if grid.n_members() != set.len() {
        return Err(Error::StaleState(format!(
            "voxel grid was built over {} gaussians, set has {}",
            grid.n_members(),
            set.len()
        )));
    }
    Ok(())
}

/// Collapse each voxel to a single Gaussian: every pre-activation attribute
/// (including confidence) becomes the softmax-weighted convex combination of
/// its members; quaternions are sign-aligned first.
pub fn aggregate(set: &GaussianSet, grid: &VoxelGrid) -> Result<GaussianSet> {
    check_grid(set, grid)?;
    let nc3 = 3 * set.n_coeffs();
    let mut out = GaussianSet::empty(set.sh_degree)?;
    out.positions.reserve(grid.n_voxels());

    for v in &grid.voxels {
        let mut pos = Vec3::zeros();
        let mut lo = 0.0;
        let mut q = [0.0; 4];
        let mut ls = Vec3::zeros();
        let mut shv = vec![0.0; nc3];
        let mut conf = 0.0;
        if let [g] = v.members[..] {
            // singleton fast path: exact identity
            pos = set.positions[g];
            lo = set.logit_opacity[g];
            q = set.raw_quaternion[g];
            ls = set.log_scale[g];
            shv.copy_from_slice(set.sh_slice(g));
            conf = set.confidence[g];
        } else {
            for &g in &v.members {
                let w = grid.weights[g];
                let s = grid.sign[g];
                pos += w * set.positions[g];
                lo += w * set.logit_opacity[g];
                for k in 0..4 {
                    q[k] += w * s * set.raw_quaternion[g][k];
                }
                ls += w * set.log_scale[g];
                for (acc, &c) in shv.iter_mut().zip(set.sh_slice(g)) {
                    *acc += w * c;
                }
                conf += w * set.confidence[g];
            }
        }
        out.positions.push(pos);
        out.logit_opacity.push(lo);
        out.raw_quaternion.push(q);
        out.log_scale.push(ls);
        out.sh.extend_from_slice(&shv);
        out.confidence.push(conf);
    }
    Ok(out)
}

/// Backward of `aggregate`: distribute upstream gradients on the aggregated
/// attributes to member attributes (weight-scaled) and to member confidences
/// (softmax Jacobian). No gradient flows through the rounding itself.
pub fn backward(
    set: &GaussianSet,
    grid: &VoxelGrid,
    upstream: &GaussianGrads,
) -> Result<GaussianGrads> {
    check_grid(set, grid)?;
    if upstream.len() != grid.n_voxels() {
        return Err(Error::StaleState(format!(
            "upstream gradients cover {} gaussians, grid has {} voxels",
            upstream.len(),
            grid.n_voxels()
        )));
    }
    let nc3 = 3 * set.n_coeffs();
    let mut out = GaussianGrads::zeros(set.len(), set.sh_degree);

    // each member belongs to exactly one voxel, so per-voxel parallel writes
    // into the member-indexed arrays never collide
    let results: Vec<(usize, Vec<MemberGrad>)> = grid
        .voxels
        .par_iter()
        .enumerate()
        .map(|(s, v)| {
            // recompute aggregated attributes (needed for the softmax term)
            let mut mean_pos = Vec3::zeros();
            let mut mean_lo = 0.0;
            let mut mean_q = [0.0; 4];
            let mut mean_ls = Vec3::zeros();
            let mut mean_sh = vec![0.0; nc3];
            let mut mean_conf = 0.0;
            for &g in &v.members {
                let w = grid.weights[g];
                let sg = grid.sign[g];
                mean_pos += w * set.positions[g];
                mean_lo += w * set.logit_opacity[g];
                for k in 0..4 {
                    mean_q[k] += w * sg * set.raw_quaternion[g][k];
                }
                mean_ls += w * set.log_scale[g];
                for (acc, &c) in mean_sh.iter_mut().zip(set.sh_slice(g)) {
                    *acc += w * c;
                }
                mean_conf += w * set.confidence[g];
            }

            let up_pos = upstream.positions[s];
            let up_lo = upstream.logit_opacity[s];
            let up_q = upstream.raw_quaternion[s];
            let up_ls = upstream.log_scale[s];
            let up_sh = &upstream.sh[s * nc3..(s + 1) * nc3];
            let up_conf = upstream.confidence[s];

            let grads = v
                .members
                .iter()
                .map(|&g| {
                    let w = grid.weights[g];
                    let sg = grid.sign[g];
                    let mut mg = MemberGrad {
                        g,
                        pos: w * up_pos,
                        lo: w * up_lo,
                        q: [w * sg * up_q[0], w * sg * up_q[1], w * sg * up_q[2], w * sg * up_q[3]],
                        ls: w * up_ls,
                        sh: up_sh.iter().map(|u| w * u).collect(),
                        conf: w * up_conf,
                    };
                    // softmax path: dL/dC_g = w_g * <upstream, a_g - ā> over
                    // every aggregated attribute, confidence included
                    let mut inner = up_pos.dot(&(set.positions[g] - mean_pos))
                        + up_lo * (set.logit_opacity[g] - mean_lo)
                        + up_ls.dot(&(set.log_scale[g] - mean_ls))
                        + up_conf * (set.confidence[g] - mean_conf);
                    for k in 0..4 {
                        inner += up_q[k] * (sg * set.raw_quaternion[g][k] - mean_q[k]);
                    }
                    for (j, u) in up_sh.iter().enumerate() {
                        inner += u * (set.sh_slice(g)[j] - mean_sh[j]);
                    }
                    mg.conf += w * inner;
                    mg
                })
                .collect();
            (s, grads)
        })
        .collect();

    for (_, grads) in results {
        for mg in grads {
            out.positions[mg.g] = mg.pos;
            out.logit_opacity[mg.g] = mg.lo;
            out.raw_quaternion[mg.g] = mg.q;
            out.log_scale[mg.g] = mg.ls;
            out.sh[mg.g * nc3..(mg.g + 1) * nc3].copy_from_slice(&mg.sh);
            out.confidence[mg.g] = mg.conf;
        }
    }
    Ok(out)
}

struct MemberGrad {
    g: usize,
    pos: Vec3,
    lo: f64,
    q: [f64; 4],
    ls: Vec3,
    sh: Vec<f64>,
    conf: f64,
}
