//! Rotation parameterizations: axis-angle (Rodrigues) with exact derivatives,
//! and the continuous 6D representation used by the pose regressor.

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("degenerate 6D rotation: the two 3-vectors are zero or parallel")]
    Degenerate6D,
}

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
const SERIES_ANGLE: f64 = 1e-3;

/// Cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients of `R = I + a·K + b·K²` (K = [aa]×) together with
/// `a'(t)/t` and `b'(t)/t`, all as functions of the angle t = |aa|.
fn rodrigues_coefficients(t2: f64) -> (f64, f64, f64, f64) {
    let t = t2.sqrt();
    if t < SERIES_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = t.sin_cos();
        (
            s / t,
            (1.0 - c) / t2,
            (t * c - s) / (t2 * t),
            (t * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

/// Rodrigues formula. The zero vector maps to the identity.
pub fn axis_angle_to_matrix(aa: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = rodrigues_coefficients(aa.norm_squared());
    let k = skew(aa);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix and its partial derivatives `∂R/∂aa_i` for i = 0..3.
pub fn axis_angle_with_jacobian(aa: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (a, b, da, db) = rodrigues_coefficients(aa.norm_squared());
    let k = skew(aa);
    let k2 = k * k;
    let r = Matrix3::identity() + k * a + k2 * b;
    let mut jac = [Matrix3::zeros(); 3];
    for (i, d) in jac.iter_mut().enumerate() {
        let e = skew(&Vector3::ith(i, 1.0));
        *d = e * a + (e * k + k * e) * b + k * (da * aa[i]) + k2 * (db * aa[i]);
    }
    (r, jac)
}

/// Inverse of [`axis_angle_to_matrix`]; the returned angle lies in [0, π].
pub fn matrix_to_axis_angle(m: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix(m).scaled_axis()
}

/// First two columns of `m`, concatenated.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

const DEGENERATE_EPS: f64 = 1e-12;

/// Gram–Schmidt decode of a 6D rotation.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Matrix3<f64>, RotationError> {
    let a = Vector3::new(r[0], r[1], r[2]);
    let b = Vector3::new(r[3], r[4], r[5]);
    let an = a.norm();
    if an < DEGENERATE_EPS {
        return Err(RotationError::Degenerate6D);
    }
    let c1 = a / an;
    let bp = b - c1 * c1.dot(&b);
    let bn = bp.norm();
    if bn < DEGENERATE_EPS * b.norm().max(1.0) {
        return Err(RotationError::Degenerate6D);
    }
    let c2 = bp / bn;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Vector-Jacobian product of [`rot6d_to_matrix`]: maps `∂L/∂R` to `∂L/∂r`.
pub fn rot6d_vjp(r: &[f64; 6], grad_m: &Matrix3<f64>) -> Result<[f64; 6], RotationError> {
    let m = rot6d_to_matrix(r)?;
    let a = Vector3::new(r[0], r[1], r[2]);
    let b = Vector3::new(r[3], r[4], r[5]);
    let c1: Vector3<f64> = m.column(0).into();
    let c2: Vector3<f64> = m.column(1).into();
    let g3: Vector3<f64> = grad_m.column(2).into();
    let mut g1: Vector3<f64> = grad_m.column(0).into();
    let mut g2: Vector3<f64> = grad_m.column(1).into();

    // c3 = c1 × c2
    g1 += c2.cross(&g3);
    g2 += g3.cross(&c1);

    // c2 = bp / |bp|
    let bp = b - c1 * c1.dot(&b);
    let g_bp = (g2 - c2 * c2.dot(&g2)) / bp.norm();
    // bp = b - (c1·b) c1
    let g_b = g_bp - c1 * c1.dot(&g_bp);
    g1 -= g_bp * c1.dot(&b) + b * c1.dot(&g_bp);

    // c1 = a / |a|
    let g_a = (g1 - c1 * c1.dot(&g1)) / a.norm();
    Ok([g_a.x, g_a.y, g_a.z, g_b.x, g_b.y, g_b.z])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Quaternion, UnitQuaternion};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    /// Independent route: build the rotation from a unit quaternion.
    fn quaternion_oracle(aa: &Vector3<f64>) -> Matrix3<f64> {
        let t = aa.norm();
        if t == 0.0 {
            return Matrix3::identity();
        }
        let axis = aa / t;
        let (s, c) = (t / 2.0).sin_cos();
        let q = UnitQuaternion::from_quaternion(Quaternion::new(c, axis.x * s, axis.y * s, axis.z * s));
        q.to_rotation_matrix().into_inner()
    }

    #[test]
    fn zero_vector_is_identity() {
        assert_eq!(axis_angle_to_matrix(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_x() {
        let r = axis_angle_to_matrix(&Vector3::new(FRAC_PI_2, 0.0, 0.0));
        let v = r * Vector3::new(0.0, 1.0, 0.0);
        assert_relative_eq!(v, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn jacobian_at_zero_is_generator() {
        let (_, jac) = axis_angle_with_jacobian(&Vector3::zeros());
        for (i, j) in jac.iter().enumerate() {
            assert_relative_eq!(*j, skew(&Vector3::ith(i, 1.0)), epsilon = 1e-15);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let h = 1e-6;
        for aa in [
            Vector3::new(0.3, -1.2, 0.7),
            Vector3::new(2e-4, 1e-4, -3e-4),
            Vector3::new(0.0, 0.0, 3.0),
        ] {
            let (_, jac) = axis_angle_with_jacobian(&aa);
            for i in 0..3 {
                let mut p = aa;
                let mut m = aa;
                p[i] += h;
                m[i] -= h;
                let fd = (axis_angle_to_matrix(&p) - axis_angle_to_matrix(&m)) / (2.0 * h);
                assert_relative_eq!(jac[i], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn six_d_examples() {
        assert_eq!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), Matrix3::identity());
        assert_eq!(rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), Matrix3::identity());
        assert_eq!(matrix_to_rot6d(&Matrix3::identity()), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let rz = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let r6 = matrix_to_rot6d(&rz);
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r6.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn six_d_degenerate_inputs() {
        assert_eq!(rot6d_to_matrix(&[0.0; 6]), Err(RotationError::Degenerate6D));
        assert_eq!(
            rot6d_to_matrix(&[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]),
            Err(RotationError::Degenerate6D)
        );
    }

    #[test]
    fn six_d_vjp_matches_finite_differences() {
        let r = [0.9, 0.2, -0.3, 0.1, 1.1, 0.4];
        let w = Matrix3::new(0.3, -0.2, 0.5, 1.0, 0.1, -0.7, 0.2, 0.9, -0.4);
        let f = |r: &[f64; 6]| rot6d_to_matrix(r).unwrap().component_mul(&w).sum();
        let g = rot6d_vjp(&r, &w).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut p = r;
            let mut m = r;
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "component {i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn rodrigues_matches_quaternion(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
            let aa = Vector3::new(x, y, z);
            let r = axis_angle_to_matrix(&aa);
            prop_assert!((r - quaternion_oracle(&aa)).abs().max() < 1e-10);
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn six_d_decode_is_rotation(v in prop::array::uniform6(-2.0..2.0f64), sa in 0.1..10.0f64, sb in 0.1..10.0f64) {
            let a = Vector3::new(v[0], v[1], v[2]);
            let b = Vector3::new(v[3], v[4], v[5]);
            prop_assume!(a.norm() > 1e-3 && a.cross(&b).norm() > 1e-3 * a.norm() * b.norm());
            let m = rot6d_to_matrix(&v).unwrap();
            prop_assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
            let scaled = [v[0] * sa, v[1] * sa, v[2] * sa, v[3] * sb, v[4] * sb, v[5] * sb];
            let ms = rot6d_to_matrix(&scaled).unwrap();
            prop_assert!((m - ms).abs().max() < 1e-12);
        }

        #[test]
        fn axis_angle_round_trip(x in -1.5..1.5f64, y in -1.5..1.5f64, z in -1.5..1.5f64) {
            let aa = Vector3::new(x, y, z);
            let back = matrix_to_axis_angle(&axis_angle_to_matrix(&aa));
            prop_assert!((back - aa).norm() < 1e-9);
        }
    }
}
