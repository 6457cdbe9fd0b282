//! Small rotation toolkit: axis-angle, quaternions, polar decomposition,
//! each paired with its vector-Jacobian product.

use nalgebra::{Matrix3, Vector3, Vector4};

/// Cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Axial vector of `a - a^T`, so that `<a, [w]x> = vee_antisym(a) . w`.
pub fn vee_antisym(a: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(a[(2, 1)] - a[(1, 2)], a[(0, 2)] - a[(2, 0)], a[(1, 0)] - a[(0, 1)])
}

// Below this angle the trigonometric coefficients are evaluated by series.
const SERIES_ANGLE: f64 = 1e-3;

struct RodriguesCoeffs {
    a: f64,
    b: f64,
    // a'(theta)/theta and b'(theta)/theta
    da: f64,
    db: f64,
}

fn rodrigues_coeffs(theta: f64) -> RodriguesCoeffs {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        RodriguesCoeffs {
            a: 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0,
            b: 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0,
            da: -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0,
            db: -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0,
        }
    } else {
        let (s, c) = theta.sin_cos();
        RodriguesCoeffs {
            a: s / theta,
            b: (1.0 - c) / t2,
            da: (theta * c - s) / (t2 * theta),
            db: (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        }
    }
}

/// Rodrigues' formula. Angles below 1e-3 rad use a series expansion.
pub fn axis_angle_to_rotation(aa: &Vector3<f64>) -> Matrix3<f64> {
    let theta = aa.norm();
    let k = skew(aa);
    let c = rodrigues_coeffs(theta);
    Matrix3::identity() + k * c.a + k * k * c.b
}

/// Gradient of `<grad, R(aa)>` with respect to `aa`.
pub fn axis_angle_vjp(aa: &Vector3<f64>, grad: &Matrix3<f64>) -> Vector3<f64> {
    let theta = aa.norm();
    let k = skew(aa);
    let c = rodrigues_coeffs(theta);
    let g_k = grad.component_mul(&k).sum();
    let g_k2 = grad.component_mul(&(k * k)).sum();
    let q = grad * k.transpose() + k.transpose() * grad;
    aa * (c.da * g_k + c.db * g_k2) + vee_antisym(grad) * c.a + vee_antisym(&q) * c.b
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quaternion_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    unit_quaternion_matrix(&q)
}

fn unit_quaternion_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
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

/// Gradient of `<grad, quaternion_to_rotation(q)>` with respect to the raw
/// (unnormalized) quaternion.
pub fn quaternion_vjp(q: &Vector4<f64>, grad: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let u = q / norm;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let g = |r: usize, c: usize| grad[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let du = Vector4::new(dw, dx, dy, dz);
    (du - u * u.dot(&du)) / norm
}

/// Quaternion `(w, x, y, z)` of a proper rotation matrix (Shepperd's method).
pub fn rotation_to_quaternion(r: &Matrix3<f64>) -> Vector4<f64> {
    let trace = r.trace();
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Vector4::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q / q.norm()
}

/// Polar decomposition `m = rotation * stretch` of a matrix with positive
/// determinant.
#[derive(Debug, Clone, Copy)]
pub struct Polar {
    pub rotation: Matrix3<f64>,
    pub stretch: Matrix3<f64>,
}

/// Orthogonal polar factor by Newton iteration `X <- (X + X^-T) / 2`.
///
/// Returns `None` when `det(m) <= 0`, where no proper rotation factor exists.
pub fn polar_decompose(m: &Matrix3<f64>) -> Option<Polar> {
    if !(m.determinant() > 0.0) {
        return None;
    }
    let mut x = *m;
    for _ in 0..64 {
        let inv_t = x.try_inverse()?.transpose();
        let next = (x + inv_t) * 0.5;
        let delta = (next - x).abs().max();
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    // One more sweep pins the result to the fixed point irrespective of the
    // iteration count that reached it.
    x = (x + x.try_inverse()?.transpose()) * 0.5;
    let h = x.transpose() * m;
    let stretch = (h + h.transpose()) * 0.5;
    Some(Polar { rotation: x, stretch })
}

/// Gradient with respect to `m` of `<grad, polar(m).rotation>`.
pub fn polar_vjp(polar: &Polar, grad: &Matrix3<f64>) -> Matrix3<f64> {
    let r = &polar.rotation;
    let h = &polar.stretch;
    let a = vee_antisym(&(r.transpose() * grad));
    let k = Matrix3::identity() * h.trace() - h;
    let b = k.try_inverse().map(|ki| ki * a).unwrap_or_else(Vector3::zeros);
    r * skew(&b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn fd_check(f: impl Fn(&Vector3<f64>) -> Matrix3<f64>, x: Vector3<f64>, g: Matrix3<f64>, analytic: Vector3<f64>) {
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp).component_mul(&g).sum() - f(&xm).component_mul(&g).sum()) / (2.0 * h);
            assert!(
                (num - analytic[i]).abs() < 1e-7,
                "component {i}: {num} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn zero_axis_angle_is_identity() {
        assert_eq!(axis_angle_to_rotation(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn half_turn_about_z_flips_x() {
        let r = axis_angle_to_rotation(&Vector3::new(0.0, 0.0, PI));
        let v = r * Vector3::x();
        assert!((v - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn quarter_turn_about_x_maps_y_to_z() {
        let r = axis_angle_to_rotation(&Vector3::new(PI / 2.0, 0.0, 0.0));
        let v = r * Vector3::y();
        assert!((v - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn series_branch_matches_closed_form_at_the_seam() {
        let v = Vector3::new(0.3, -0.2, 0.5).normalize();
        let below = axis_angle_to_rotation(&(v * (SERIES_ANGLE * (1.0 - 1e-9))));
        let above = axis_angle_to_rotation(&(v * (SERIES_ANGLE * (1.0 + 1e-9))));
        assert!((below - above).abs().max() < 1e-11);
    }

    #[test]
    fn axis_angle_vjp_matches_finite_differences() {
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 1.1, 0.2, -0.9);
        for x in [
            Vector3::new(0.4, -0.7, 1.3),
            Vector3::new(2e-4, -1e-4, 3e-4),
            Vector3::new(0.0, 0.0, 3.0),
        ] {
            fd_check(axis_angle_to_rotation, x, g, axis_angle_vjp(&x, &g));
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let r = axis_angle_to_rotation(&Vector3::new(0.2, 1.9, -0.6));
        let q = rotation_to_quaternion(&r);
        assert!((quaternion_to_rotation(&q) - r).abs().max() < 1e-12);
        let r = axis_angle_to_rotation(&Vector3::new(3.1, 0.0, 0.05));
        let q = rotation_to_quaternion(&r);
        assert!((quaternion_to_rotation(&q) - r).abs().max() < 1e-12);
    }

    #[test]
    fn quaternion_vjp_matches_finite_differences() {
        let q = Vector4::new(0.9, -0.3, 0.5, 0.2);
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 1.1, 0.2, -0.9);
        let an = quaternion_vjp(&q, &g);
        let h = 1e-6;
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let num = (quaternion_to_rotation(&qp).component_mul(&g).sum()
                - quaternion_to_rotation(&qm).component_mul(&g).sum())
                / (2.0 * h);
            assert!((num - an[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn polar_of_blended_rotations() {
        let ra = axis_angle_to_rotation(&Vector3::new(0.1, 0.4, -0.2));
        let rb = axis_angle_to_rotation(&Vector3::new(-0.3, 0.2, 0.6));
        let m = ra * 0.3 + rb * 0.7;
        let p = polar_decompose(&m).unwrap();
        let r = p.rotation;
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r * p.stretch - m).abs().max() < 1e-12);
    }

    #[test]
    fn polar_rejects_reflections() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(polar_decompose(&m).is_none());
    }

    #[test]
    fn polar_vjp_matches_finite_differences() {
        let m = axis_angle_to_rotation(&Vector3::new(0.1, 0.4, -0.2)) * 0.6
            + axis_angle_to_rotation(&Vector3::new(-0.3, 0.2, 0.6)) * 0.4;
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 1.1, 0.2, -0.9);
        let an = polar_vjp(&polar_decompose(&m).unwrap(), &g);
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..3 {
                let mut mp = m;
                let mut mm = m;
                mp[(r, c)] += h;
                mm[(r, c)] -= h;
                let fp = polar_decompose(&mp).unwrap().rotation.component_mul(&g).sum();
                let fm = polar_decompose(&mm).unwrap().rotation.component_mul(&g).sum();
                let num = (fp - fm) / (2.0 * h);
                assert!((num - an[(r, c)]).abs() < 1e-7, "({r},{c}) {num} vs {}", an[(r, c)]);
            }
        }
    }
}
