//! Small dense linear-algebra aliases plus quaternion utilities with
//! analytic derivatives. Quaternions are stored scalar-first `[w, x, y, z]`.

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat4 = nalgebra::Matrix4<f64>;

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: &[f64; 4]) -> [f64; 4] {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Canonical sign: scalar part non-negative. For a zero scalar the first
/// non-zero vector component is made non-negative so the choice stays
/// deterministic.
pub fn quat_canonical(q: &[f64; 4]) -> [f64; 4] {
    let flip = if q[0] != 0.0 {
        q[0] < 0.0
    } else if q[1] != 0.0 {
        q[1] < 0.0
    } else if q[2] != 0.0 {
        q[2] < 0.0
    } else {
        q[3] < 0.0
    };
    if flip {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        *q
    }
}

pub fn quat_dot(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Rotation matrix of a unit quaternion (scalar-first).
pub fn quat_to_rot(q: &[f64; 4]) -> Mat3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Derivatives of `quat_to_rot` with respect to each quaternion component,
/// treating the quadratic form as a function on all of R^4 (chain through
/// `normalize_jacobian4` for derivatives of the normalized map).
pub fn quat_to_rot_grad(q: &[f64; 4]) -> [Mat3; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Mat3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Mat3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Mat3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    [dw, dx, dy, dz]
}

/// Unit quaternion (canonical sign) of a rotation matrix.
pub fn rot_to_quat(r: &Mat3) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let uq = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    quat_canonical(&[uq.w, uq.i, uq.j, uq.k])
}

/// Jacobian of `q -> q / |q|` as a 4x4 matrix (row = output component).
pub fn normalize_jacobian4(q: &[f64; 4]) -> Mat4 {
    let n = quat_norm(q);
    let u = quat_normalize(q);
    let mut j = Mat4::identity();
    for i in 0..4 {
        for k in 0..4 {
            j[(i, k)] = (if i == k { 1.0 } else { 0.0 }) - u[i] * u[k];
            j[(i, k)] /= n;
        }
    }
    j
}

/// Jacobian of `v -> v / |v|` as a 3x3 matrix.
pub fn normalize_jacobian3(v: &Vec3) -> Mat3 {
    let n = v.norm();
    let u = v / n;
    (Mat3::identity() - u * u.transpose()) / n
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `sigmoid`; input must lie in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::assert_close;

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let r = quat_to_rot(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r, Mat3::identity());
    }

    #[test]
    fn half_turn_about_z() {
        // 90 degrees about +z maps +x to +y.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let r = quat_to_rot(&[s, 0.0, 0.0, s]);
        let v = r * Vec3::new(1.0, 0.0, 0.0);
        assert_close!(v.x, 0.0, 1e-12);
        assert_close!(v.y, 1.0, 1e-12);
        assert_close!(v.z, 0.0, 1e-12);
    }

    #[test]
    fn rot_quat_round_trip() {
        let q = quat_normalize(&[0.9, -0.2, 0.3, 0.4]);
        let r = quat_to_rot(&q);
        let q2 = rot_to_quat(&r);
        let qc = quat_canonical(&q);
        for k in 0..4 {
            assert_close!(q2[k], qc[k], 1e-12);
        }
    }

    #[test]
    fn canonical_sign_flips_negative_scalar() {
        let q = quat_canonical(&[-0.5, 0.5, 0.5, 0.5]);
        assert_eq!(q, [0.5, -0.5, -0.5, -0.5]);
        // zero scalar: first non-zero vector component decides
        let q = quat_canonical(&[0.0, -1.0, 0.0, 0.0]);
        assert_eq!(q, [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn rotation_grad_matches_finite_differences() {
        let q = [0.8, -0.3, 0.5, 0.1]; // deliberately non-unit
        let grads = quat_to_rot_grad(&q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (quat_to_rot(&qp) - quat_to_rot(&qm)) / (2.0 * h);
            for i in 0..3 {
                for j in 0..3 {
                    assert_close!(grads[k][(i, j)], fd[(i, j)], 1e-6);
                }
            }
        }
    }

    #[test]
    fn normalize_jacobians_match_finite_differences() {
        let q = [0.8, -0.3, 0.5, 0.1];
        let j = normalize_jacobian4(&q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let up = quat_normalize(&qp);
            let um = quat_normalize(&qm);
            for i in 0..4 {
                assert_close!(j[(i, k)], (up[i] - um[i]) / (2.0 * h), 1e-6);
            }
        }

        let v = Vec3::new(0.4, -1.2, 2.0);
        let j3 = normalize_jacobian3(&v);
        for k in 0..3 {
            let mut vp = v;
            let mut vm = v;
            vp[k] += h;
            vm[k] -= h;
            let d = (vp.normalize() - vm.normalize()) / (2.0 * h);
            for i in 0..3 {
                assert_close!(j3[(i, k)], d[i], 1e-6);
            }
        }
    }

    #[test]
    fn sigmoid_logit_inverse() {
        for &x in &[-30.0, -2.0, 0.0, 0.5, 10.0] {
            assert_close!(logit(sigmoid(x)), x, 1e-9);
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
