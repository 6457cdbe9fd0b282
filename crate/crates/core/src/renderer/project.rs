//! EWA projection of a 3D Gaussian through a pinhole camera.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::camera::Camera;

/// Low-pass dilation added to the screen-space covariance, pixels^2.
pub const DILATION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub cam_point: Vector3<f64>,
    pub cam_cov: Matrix3<f64>,
    pub jacobian: Matrix2x3<f64>,
}

/// Projects a Gaussian with world mean `mean` and covariance `cov`.
/// Returns `None` when the Gaussian is culled.
pub fn project_gaussian(mean: &Vector3<f64>, cov: &Matrix3<f64>, cam: &Camera) -> Option<Projection> {
    let pc = cam.to_camera(mean);
    let z = pc.z;
    if !(z > cam.near) {
        return None;
    }
    let (x, y) = (pc.x, pc.y);
    let jacobian = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let cam_cov = cam.rotation * cov * cam.rotation.transpose();
    let cov2d = jacobian * cam_cov * jacobian.transpose() + Matrix2::identity() * DILATION;
    let det = cov2d.determinant();
    if !(det > 0.0 && cov2d[(0, 0)] > 0.0) {
        log::warn!("non positive-definite screen covariance; culling");
        return None;
    }
    let conic = cov2d.try_inverse()?;
    Some(Projection {
        mean2d: Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy),
        cov2d,
        conic,
        depth: z,
        cam_point: pc,
        cam_cov,
        jacobian,
    })
}

/// Maps gradients on `mean2d` and `cov2d` back to the world mean and
/// covariance.
pub fn project_backward(
    proj: &Projection,
    cam: &Camera,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let j = &proj.jacobian;
    let sc = &proj.cam_cov;
    let d_cam_cov = j.transpose() * d_cov2d * j;
    let d_j = d_cov2d * j * sc.transpose() + d_cov2d.transpose() * j * sc;
    let d_cov = cam.rotation.transpose() * d_cam_cov * cam.rotation;

    let (x, y, z) = (proj.cam_point.x, proj.cam_point.y, proj.cam_point.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_pc = Vector3::new(
        d_mean2d.x * fx * iz,
        d_mean2d.y * fy * iz,
        -d_mean2d.x * fx * x * iz2 - d_mean2d.y * fy * y * iz2,
    );
    // Jacobian entries: J00 = fx/z, J02 = -fx x/z^2, J11 = fy/z, J12 = -fy y/z^2
    d_pc.x += -d_j[(0, 2)] * fx * iz2;
    d_pc.y += -d_j[(1, 2)] * fy * iz2;
    d_pc.z += -d_j[(0, 0)] * fx * iz2 + d_j[(0, 2)] * 2.0 * fx * x * iz3 - d_j[(1, 1)] * fy * iz2
        + d_j[(1, 2)] * 2.0 * fy * y * iz3;
    (cam.rotation.transpose() * d_pc, d_cov)
}
