//! 3×3 singular value decomposition by cyclic Jacobi on `mᵀm`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 30;

/// `m = u * diag(sigma) * vᵀ`, `sigma` non-negative and descending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.sigma) * self.v.transpose()
    }

    /// Nearest proper rotation `U Vᵀ`; when `det(U Vᵀ) < 0` the last column of
    /// `U` (smallest singular value) is negated first.
    pub fn nearest_rotation(&self) -> Matrix3<f64> {
        let r = self.u * self.v.transpose();
        if r.determinant() < 0.0 {
            let mut u = self.u;
            u.set_column(2, &(-u.column(2)));
            u * self.v.transpose()
        } else {
            r
        }
    }
}

/// Symmetric eigendecomposition of a 3×3 matrix. Returns eigenvalues (unsorted)
/// and eigenvectors as columns.
fn jacobi_eigen(mut a: Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let mut v = Matrix3::identity();
    let scale = a.abs().max().max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off = a[(0, 1)].abs() + a[(0, 2)].abs() + a[(1, 2)].abs();
        if off <= JACOBI_TOL * 1e-4 * scale {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq.abs() <= f64::MIN_POSITIVE {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Matrix3::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * a * rot;
            a[(p, q)] = 0.0;
            a[(q, p)] = 0.0;
            v *= rot;
        }
    }
    (a.diagonal(), v)
}

fn any_perpendicular(u: &Vector3<f64>) -> Vector3<f64> {
    let axis = if u.x.abs() <= u.y.abs() && u.x.abs() <= u.z.abs() {
        Vector3::x()
    } else if u.y.abs() <= u.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    u.cross(&axis).normalize()
}

pub fn svd3(m: &Matrix3<f64>) -> Result<Svd3> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("svd3 input"));
    }
    let (eig, vecs) = jacobi_eigen(m.transpose() * m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig[b].total_cmp(&eig[a]).then(a.cmp(&b)));
    let mut v = Matrix3::from_columns(&[
        vecs.column(order[0]).into_owned(),
        vecs.column(order[1]).into_owned(),
        vecs.column(order[2]).into_owned(),
    ]);
    if v.determinant() < 0.0 {
        v.set_column(2, &(-v.column(2)));
    }

    // Left vectors from m·v with Gram–Schmidt; the residual of each step has
    // magnitude sigma_i, so normalizing it keeps the reconstruction exact even
    // for tiny singular values.
    let mv0 = m * v.column(0);
    let u0 = if mv0.norm() > 0.0 {
        mv0.normalize()
    } else {
        Vector3::x()
    };
    let mv1 = m * v.column(1);
    let r1 = mv1 - u0 * u0.dot(&mv1);
    let u1 = if r1.norm() > f64::MIN_POSITIVE * 1e10 {
        // second pass: r1 may be pure rounding noise when sigma_1 ~ 0
        let r = r1.normalize();
        let r = r - u0 * u0.dot(&r);
        if r.norm() > 0.5 {
            r.normalize()
        } else {
            any_perpendicular(&u0)
        }
    } else {
        any_perpendicular(&u0)
    };
    let u1 = if u1.dot(&mv1) < 0.0 { -u1 } else { u1 };
    let mv2 = m * v.column(2);
    let mut u2 = u0.cross(&u1);
    if u2.dot(&mv2) < 0.0 {
        u2 = -u2;
    }
    let sigma = Vector3::new(u0.dot(&mv0), u1.dot(&mv1), u2.dot(&mv2).max(0.0));
    let mut out = Svd3 {
        u: Matrix3::from_columns(&[u0, u1, u2]),
        sigma,
        v,
    };
    // Rounding can leave near-equal values a hair out of order.
    for i in 0..2 {
        if out.sigma[i + 1] > out.sigma[i] {
            out.sigma[i + 1] = out.sigma[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check(m: &Matrix3<f64>) {
        let s = svd3(m).unwrap();
        let rec = (s.reconstruct() - m).abs().max();
        assert!(rec < 1e-8, "reconstruction {rec} for {m}");
        let iu = (s.u.transpose() * s.u - Matrix3::identity()).abs().max();
        let iv = (s.v.transpose() * s.v - Matrix3::identity()).abs().max();
        assert!(iu < 1e-8 && iv < 1e-8, "orthogonality {iu} {iv}");
        assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2] && s.sigma[2] >= 0.0);
    }

    #[test]
    fn identity() {
        let s = svd3(&Matrix3::identity()).unwrap();
        assert_eq!(s.sigma, Vector3::new(1.0, 1.0, 1.0));
        assert!((s.u - Matrix3::identity()).abs().max() < 1e-15);
        assert!((s.v - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn diagonal_gives_signed_permutations() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 3.0, 2.0));
        let s = svd3(&m).unwrap();
        assert!((s.sigma - Vector3::new(3.0, 2.0, 1.0)).abs().max() < 1e-14);
        for mat in [s.u, s.v] {
            for x in mat.iter() {
                assert!(x.abs() < 1e-14 || (x.abs() - 1.0).abs() < 1e-14);
            }
        }
        check(&m);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = Matrix3::identity();
        m[(1, 2)] = f64::INFINITY;
        assert!(svd3(&m).is_err());
    }

    #[test]
    fn random_and_rank_deficient_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..10_000 {
            let mut m = Matrix3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            match i % 5 {
                1 => {
                    let c = m.column(0) * 0.7 - m.column(1) * 1.3;
                    m.set_column(2, &c);
                }
                2 => {
                    let a = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                    let b = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                    m = a * b.transpose();
                }
                3 => m = Matrix3::zeros(),
                4 => {
                    let r = nalgebra::Rotation3::from_scaled_axis(Vector3::from_fn(|_, _| {
                        rng.gen_range(-3.0..3.0)
                    }));
                    m = r.into_inner() * 1.5;
                }
                _ => {}
            }
            check(&m);
        }
    }

    #[test]
    fn singular_values_agree_with_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let m = Matrix3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let ours = svd3(&m).unwrap().sigma;
            let mut theirs: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
            theirs.sort_by(|a, b| b.total_cmp(a));
            for k in 0..3 {
                assert!((ours[k] - theirs[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nearest_rotation_is_proper() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let r = svd3(&m).unwrap().nearest_rotation();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }
}
