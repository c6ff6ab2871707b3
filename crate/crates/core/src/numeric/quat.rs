//! Quaternions stored as `[w, x, y, z]`.

use nalgebra::{Matrix3, Vector4};

pub type Quat = [f64; 4];

pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn normalize(q: &Quat) -> Quat {
    let n = norm(q);
    if n == 0.0 {
        return IDENTITY;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation of a unit quaternion.
pub fn unit_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
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

/// Rotation of an arbitrary non-zero quaternion (normalized first).
pub fn to_matrix(q: &Quat) -> Matrix3<f64> {
    unit_to_matrix(&normalize(q))
}

/// Gradient with respect to the raw (unnormalized) quaternion given `dL/dR`.
pub fn to_matrix_backward(q: &Quat, d_r: &Matrix3<f64>) -> Quat {
    let n = norm(q);
    if n == 0.0 {
        return [0.0; 4];
    }
    let [w, x, y, z] = normalize(q);
    let g = |i: usize, j: usize| d_r[(i, j)];
    // Partials of unit_to_matrix, written out entry by entry.
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let du = Vector4::new(dw, dx, dy, dz);
    let u = Vector4::new(w, x, y, z);
    let dq = (du - u * u.dot(&du)) / n;
    [dq[0], dq[1], dq[2], dq[3]]
}

pub fn from_matrix(m: &Matrix3<f64>) -> Quat {
    let r = nalgebra::Rotation3::from_matrix_unchecked(*m);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&r);
    let q = q.quaternion();
    [q.w, q.i, q.j, q.k]
}

/// Hamilton product `a ⊗ b` (rotate by `b`, then `a`).
pub fn mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if n == 0.0 {
        return IDENTITY;
    }
    let (s, c) = (0.5 * angle).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

/// Spherical interpolation along the shorter arc.
pub fn slerp(a: &Quat, b: &Quat, t: f64) -> Quat {
    let a = normalize(a);
    let mut b = normalize(b);
    let mut dot: f64 = (0..4).map(|i| a[i] * b[i]).sum();
    if dot < 0.0 {
        b = [-b[0], -b[1], -b[2], -b[3]];
        dot = -dot;
    }
    if dot > 1.0 - 1e-12 {
        let q = [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
            a[3] + t * (b[3] - a[3]),
        ];
        return normalize(&q);
    }
    let theta = dot.clamp(-1.0, 1.0).acos();
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s;
    let wb = (t * theta).sin() / s;
    normalize(&[
        wa * a[0] + wb * b[0],
        wa * a[1] + wb * b[1],
        wa * a[2] + wb * b[2],
        wa * a[3] + wb * b[3],
    ])
}

#[cfg(test)]
mod tests {

    #[test]
    fn product_matches_matrix_product() {
        let a = from_axis_angle([0.3, -1.0, 0.5], 0.7);
        let b = from_axis_angle([1.0, 0.2, 0.1], -1.9);
        let lhs = to_matrix(&mul(&a, &b));
        let rhs = to_matrix(&a) * to_matrix(&b);
        assert!((lhs - rhs).abs().max() < 1e-14);
    }

    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matrix_is_orthonormal() {
        let r = to_matrix(&[0.3, -1.2, 0.4, 2.0]);
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-14);
        assert!((r.determinant() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q: Quat = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let g = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let analytic = to_matrix_backward(&q, &g);
            for k in 0..4 {
                let h = 1e-6;
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (to_matrix(&qp).component_mul(&g).sum()
                    - to_matrix(&qm).component_mul(&g).sum())
                    / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn slerp_midpoint_is_half_angle() {
        let a = IDENTITY;
        let b = from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let m = slerp(&a, &b, 0.5);
        let expected = from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_4);
        for k in 0..4 {
            assert!((m[k] - expected[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn from_matrix_round_trip() {
        let q = normalize(&[0.8, 0.1, -0.5, 0.3]);
        let back = from_matrix(&unit_to_matrix(&q));
        let sign = if back[0] * q[0] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..4 {
            assert!((sign * back[k] - q[k]).abs() < 1e-12);
        }
    }
}
