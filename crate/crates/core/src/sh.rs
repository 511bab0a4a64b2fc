//! Real spherical harmonics up to degree 3 in the splatting convention:
//! colors are `basis · coeffs + 0.5`, clamped to [0, 1] at render time.

use crate::error::{Error, Result};
use crate::math::Vec3;

pub const MAX_DEGREE: usize = 3;

const C0: f64 = 0.28209479177387814;
const C1: f64 = 0.4886025119029199;
const C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub fn n_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_DEGREE {
        return Err(Error::UnsupportedShDegree(degree));
    }
    Ok(())
}

/// Basis values at a unit direction, in the (degree, order) ordering used by
/// the splatting file format. Only the first `n_coeffs(degree)` entries are
/// filled; the rest stay zero.
pub fn basis(degree: usize, dir: &Vec3) -> [f64; 16] {
    let mut b = [0.0; 16];
    b[0] = C0;
    if degree == 0 {
        return b;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    b[1] = -C1 * y;
    b[2] = C1 * z;
    b[3] = -C1 * x;
    if degree == 1 {
        return b;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    b[4] = C2[0] * xy;
    b[5] = C2[1] * yz;
    b[6] = C2[2] * (2.0 * zz - xx - yy);
    b[7] = C2[3] * xz;
    b[8] = C2[4] * (xx - yy);
    if degree == 2 {
        return b;
    }
    b[9] = C3[0] * y * (3.0 * xx - yy);
    b[10] = C3[1] * xy * z;
    b[11] = C3[2] * y * (4.0 * zz - xx - yy);
    b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    b[13] = C3[4] * x * (4.0 * zz - xx - yy);
    b[14] = C3[5] * z * (xx - yy);
    b[15] = C3[6] * x * (xx - 3.0 * yy);
    b
}

/// Derivative of every basis entry with respect to the direction vector.
pub fn basis_grad(degree: usize, dir: &Vec3) -> [Vec3; 16] {
    let mut g = [Vec3::zeros(); 16];
    if degree == 0 {
        return g;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    g[1] = Vec3::new(0.0, -C1, 0.0);
    g[2] = Vec3::new(0.0, 0.0, C1);
    g[3] = Vec3::new(-C1, 0.0, 0.0);
    if degree == 1 {
        return g;
    }
    g[4] = C2[0] * Vec3::new(y, x, 0.0);
    g[5] = C2[1] * Vec3::new(0.0, z, y);
    g[6] = C2[2] * Vec3::new(-2.0 * x, -2.0 * y, 4.0 * z);
    g[7] = C2[3] * Vec3::new(z, 0.0, x);
    g[8] = C2[4] * Vec3::new(2.0 * x, -2.0 * y, 0.0);
    if degree == 2 {
        return g;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    g[9] = C3[0] * Vec3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
    g[10] = C3[1] * Vec3::new(y * z, x * z, x * y);
    g[11] = C3[2] * Vec3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
    g[12] = C3[3] * Vec3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
    g[13] = C3[4] * Vec3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
    g[14] = C3[5] * Vec3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
    g[15] = C3[6] * Vec3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
    g
}

/// Evaluate an RGB color from per-channel coefficients laid out
/// channel-major (`coeffs[ch * n + j]`). `view_dir` must be unit length.
/// The result carries the +0.5 offset but is NOT clamped; the renderer
/// clamps to [0, 1].
pub fn evaluate_sh(degree: usize, coeffs: &[f64], view_dir: &Vec3) -> Result<Vec3> {
    check_degree(degree)?;
    let n = n_coeffs(degree);
    if coeffs.len() != 3 * n {
        return Err(Error::Dimension(format!(
            "sh coefficient count {} does not match degree {} (expected {})",
            coeffs.len(),
            degree,
            3 * n
        )));
    }
    debug_assert!((view_dir.norm() - 1.0).abs() < 1e-6);
    let b = basis(degree, view_dir);
    let mut rgb = Vec3::zeros();
    for ch in 0..3 {
        let mut acc = 0.5;
        for j in 0..n {
            acc += b[j] * coeffs[ch * n + j];
        }
        rgb[ch] = acc;
    }
    Ok(rgb)
}
