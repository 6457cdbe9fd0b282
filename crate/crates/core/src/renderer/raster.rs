//! Per-pixel front-to-back alpha blending of projected Gaussians.
//!
//! The forward pass records every discrete decision it makes (visibility,
//! per-pixel candidate lists in depth order, early termination, alpha
//! clamping) in a [`RasterPlan`]. The backward pass differentiates the
//! blend with those decisions held fixed, and a forward pass can be replayed
//! under a recorded plan.

use nalgebra::{Matrix2, Vector2, Vector3};

use super::camera::Camera;
use super::image::Image;
use super::project::{project_backward, project_gaussian, Projection};
use crate::avatar::{PosedGaussians, PosedGrads};

pub const ALPHA_MAX: f64 = 0.999;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Squared Mahalanobis radius of the 3-sigma ellipse.
pub const CUTOFF: f64 = 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RasterPlan {
    width: usize,
    height: usize,
    visible: Vec<bool>,
    offsets: Vec<usize>,
    entries: Vec<u32>,
    used: Vec<u32>,
    clamped: Vec<bool>,
}

impl RasterPlan {
    pub fn is_visible(&self, gaussian: usize) -> bool {
        self.visible[gaussian]
    }

    /// Gaussians blended at pixel `(x, y)`, front to back.
    pub fn blended(&self, x: usize, y: usize) -> &[u32] {
        let p = y * self.width + x;
        &self.entries[self.offsets[p]..self.offsets[p] + self.used[p] as usize]
    }
}

#[derive(Debug, Clone)]
pub struct RasterTrace {
    pub plan: RasterPlan,
    pub projections: Vec<Option<Projection>>,
    /// Transmittance left after the last blended Gaussian, per pixel.
    pub final_transmittance: Vec<f64>,
}

pub fn rasterize(posed: &PosedGaussians, cam: &Camera, background: &Vector3<f64>) -> Image {
    rasterize_traced(posed, cam, background, None).0
}

fn gaussian_weight(proj: &Projection, px: f64, py: f64) -> (f64, Vector2<f64>) {
    let d = Vector2::new(px - proj.mean2d.x, py - proj.mean2d.y);
    ((proj.conic * d).dot(&d), d)
}

fn build_candidates(
    posed: &PosedGaussians,
    projections: &[Option<Projection>],
    cam: &Camera,
) -> (Vec<usize>, Vec<u32>) {
    let mut order: Vec<usize> = (0..posed.len()).filter(|i| projections[*i].is_some()).collect();
    order.sort_by(|a, b| {
        let (da, db) = (projections[*a].unwrap().depth, projections[*b].unwrap().depth);
        da.total_cmp(&db).then(a.cmp(b))
    });
    let (w, h) = (cam.width as i64, cam.height as i64);
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for &g in &order {
        let p = projections[g].as_ref().unwrap();
        let rx = 3.0 * p.cov2d[(0, 0)].sqrt();
        let ry = 3.0 * p.cov2d[(1, 1)].sqrt();
        let x0 = ((p.mean2d.x - rx).ceil() as i64).max(0);
        let x1 = ((p.mean2d.x + rx).floor() as i64).min(w - 1);
        let y0 = ((p.mean2d.y - ry).ceil() as i64).max(0);
        let y1 = ((p.mean2d.y + ry).floor() as i64).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if gaussian_weight(p, x as f64, y as f64).0 <= CUTOFF {
                    pairs.push(((y * w + x) as u32, g as u32));
                }
            }
        }
    }
    let pixels = cam.width * cam.height;
    let mut offsets = vec![0usize; pixels + 1];
    for (p, _) in &pairs {
        offsets[*p as usize + 1] += 1;
    }
    for i in 0..pixels {
        offsets[i + 1] += offsets[i];
    }
    let mut fill = offsets.clone();
    let mut entries = vec![0u32; pairs.len()];
    for (p, g) in pairs {
        entries[fill[p as usize]] = g;
        fill[p as usize] += 1;
    }
    (offsets, entries)
}

/// Renders `posed`; with `frozen` set, replays that plan's decisions
/// instead of making new ones.
pub fn rasterize_traced(
    posed: &PosedGaussians,
    cam: &Camera,
    background: &Vector3<f64>,
    frozen: Option<&RasterPlan>,
) -> (Image, RasterTrace) {
    let n = posed.len();
    let projections: Vec<Option<Projection>> = (0..n)
        .map(|i| match frozen {
            Some(plan) if !plan.visible[i] => None,
            _ => project_gaussian(&posed.means[i], &posed.covariances[i], cam),
        })
        .collect();
    let pixels = cam.width * cam.height;
    let (visible, offsets, entries) = match frozen {
        Some(plan) => (plan.visible.clone(), plan.offsets.clone(), plan.entries.clone()),
        None => {
            let (o, e) = build_candidates(posed, &projections, cam);
            (projections.iter().map(Option::is_some).collect(), o, e)
        }
    };
    let mut used = vec![0u32; pixels];
    let mut clamped = vec![false; entries.len()];
    let mut final_t = vec![1.0; pixels];
    let mut image = Image::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = y * cam.width + x;
            let list = offsets[p]..offsets[p + 1];
            let limit = frozen.map(|f| f.used[p] as usize).unwrap_or(list.len());
            let mut t = 1.0;
            let mut color = Vector3::zeros();
            let mut count = 0;
            for e in list.start..list.start + limit {
                let g = entries[e] as usize;
                count += 1;
                let Some(proj) = projections[g].as_ref() else { continue };
                let (q, _) = gaussian_weight(proj, x as f64, y as f64);
                let raw = posed.opacities[g] * (-0.5 * q).exp();
                let is_clamped = match frozen {
                    Some(f) => f.clamped[e],
                    None => raw > ALPHA_MAX,
                };
                clamped[e] = is_clamped;
                let alpha = if is_clamped { ALPHA_MAX } else { raw };
                color += posed.colors[g] * (alpha * t);
                t *= 1.0 - alpha;
                if frozen.is_none() && t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            used[p] = count as u32;
            final_t[p] = t;
            color += background * t;
            image.set_pixel(x, y, &color);
        }
    }
    let plan = RasterPlan {
        width: cam.width,
        height: cam.height,
        visible,
        offsets,
        entries,
        used,
        clamped,
    };
    (
        image,
        RasterTrace {
            plan,
            projections,
            final_transmittance: final_t,
        },
    )
}

/// Gradients of a rasterization with respect to the posed Gaussians, plus
/// the screen-space mean gradient used by density control.
#[derive(Debug, Clone)]
pub struct RasterGrads {
    pub posed: PosedGrads,
    pub mean2d: Vec<Vector2<f64>>,
}

pub fn rasterize_backward(
    posed: &PosedGaussians,
    cam: &Camera,
    background: &Vector3<f64>,
    trace: &RasterTrace,
    d_image: &Image,
) -> RasterGrads {
    let n = posed.len();
    let plan = &trace.plan;
    let mut d_mean2d = vec![Vector2::zeros(); n];
    let mut d_conic = vec![Matrix2::zeros(); n];
    let mut d_opacity = vec![0.0; n];
    let mut d_color = vec![Vector3::zeros(); n];
    let mut alphas: Vec<f64> = Vec::new();
    let mut trans: Vec<f64> = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = y * cam.width + x;
            let dc = d_image.pixel(x, y);
            if dc == Vector3::zeros() {
                continue;
            }
            let range = plan.offsets[p]..plan.offsets[p] + plan.used[p] as usize;
            alphas.clear();
            trans.clear();
            let mut t = 1.0;
            for e in range.clone() {
                let g = plan.entries[e] as usize;
                let alpha = match trace.projections[g].as_ref() {
                    None => 0.0,
                    Some(_) if plan.clamped[e] => ALPHA_MAX,
                    Some(proj) => posed.opacities[g] * (-0.5 * gaussian_weight(proj, x as f64, y as f64).0).exp(),
                };
                alphas.push(alpha);
                trans.push(t);
                t *= 1.0 - alpha;
            }
            // Color accumulated behind the current entry, including background.
            let mut behind = background * t;
            for (k, e) in range.enumerate().rev() {
                let g = plan.entries[e] as usize;
                let Some(proj) = trace.projections[g].as_ref() else {
                    continue;
                };
                let (alpha, ti) = (alphas[k], trans[k]);
                let c = posed.colors[g];
                d_color[g] += dc * (alpha * ti);
                let d_alpha = ti * c.dot(&dc) - behind.dot(&dc) / (1.0 - alpha);
                behind += c * (alpha * ti);
                if plan.clamped[e] {
                    continue;
                }
                let (q, d) = gaussian_weight(proj, x as f64, y as f64);
                let g_val = (-0.5 * q).exp();
                d_opacity[g] += d_alpha * g_val;
                let d_q = -0.5 * alpha * d_alpha;
                // q = d^T C d with d = u - mean
                d_mean2d[g] -= (proj.conic + proj.conic.transpose()) * d * d_q;
                d_conic[g] += d * d.transpose() * d_q;
            }
        }
    }
    let mut grads = PosedGrads::zeros(n);
    for i in 0..n {
        let Some(proj) = trace.projections[i].as_ref() else {
            continue;
        };
        let ci = proj.conic.transpose();
        let d_cov2d = -(ci * d_conic[i] * ci);
        let (dm, dcov) = project_backward(proj, cam, &d_mean2d[i], &d_cov2d);
        grads.means[i] = dm;
        grads.covariances[i] = dcov;
        grads.opacities[i] = d_opacity[i];
        grads.colors[i] = d_color[i];
    }
    RasterGrads {
        posed: grads,
        mean2d: d_mean2d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn camera(size: usize) -> Camera {
        Camera {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: 10.0,
            fy: 10.0,
            cx: 4.0,
            cy: 4.0,
            width: size,
            height: size,
            near: 0.1,
        }
    }

    fn one(mean: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> PosedGaussians {
        PosedGaussians {
            means: vec![mean],
            covariances: vec![Matrix3::identity() * sigma * sigma],
            opacities: vec![opacity],
            colors: vec![color],
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let bg = Vector3::new(0.2, 0.4, 0.6);
        let img = rasterize(&PosedGaussians::default(), &camera(8), &bg);
        for px in img.data.chunks(3) {
            assert_eq!(px, bg.as_slice());
        }
    }

    #[test]
    fn single_gaussian_on_pixel_center() {
        let c = Vector3::new(0.9, 0.5, 0.1);
        let img = rasterize(
            &one(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.6, c),
            &camera(8),
            &Vector3::zeros(),
        );
        assert!((img.pixel(4, 4) - c * 0.6).norm() < 1e-15);
    }

    #[test]
    fn two_coincident_gaussians() {
        let (c1, c2) = (Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let posed = PosedGaussians {
            means: vec![Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, 0.0, 2.0)],
            covariances: vec![Matrix3::identity() * 0.01; 2],
            opacities: vec![0.5, 0.5],
            colors: vec![c2, c1],
        };
        let img = rasterize(&posed, &camera(8), &Vector3::zeros());
        assert!((img.pixel(4, 4) - (c1 * 0.5 + c2 * 0.25)).norm() < 1e-15);
    }

    #[test]
    fn pixels_outside_three_sigma_untouched() {
        let img = rasterize(
            &one(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.9, Vector3::repeat(1.0)),
            &camera(16),
            &Vector3::zeros(),
        );
        // sigma is about 0.59 px on screen, so 3 px away is far outside
        assert_eq!(img.pixel(7, 4), Vector3::zeros());
        assert!(img.pixel(4, 4).x > 0.0);
    }

    #[test]
    fn opaque_stack_terminates_early() {
        let k = 8;
        let posed = PosedGaussians {
            means: (0..k).map(|i| Vector3::new(0.0, 0.0, 2.0 + i as f64 * 0.1)).collect(),
            covariances: vec![Matrix3::identity() * 0.04; k],
            opacities: vec![0.99999; k],
            colors: vec![Vector3::repeat(0.5); k],
        };
        let (_, trace) = rasterize_traced(&posed, &camera(8), &Vector3::zeros(), None);
        assert!(trace.plan.blended(4, 4).len() < k);
        assert!(trace.final_transmittance[4 * 8 + 4] < MIN_TRANSMITTANCE);
    }

    #[test]
    fn frozen_replay_reproduces_image() {
        let posed = PosedGaussians {
            means: vec![Vector3::new(0.05, -0.1, 2.0), Vector3::new(-0.1, 0.02, 2.5)],
            covariances: vec![Matrix3::identity() * 0.02, Matrix3::identity() * 0.05],
            opacities: vec![0.7, 0.9],
            colors: vec![Vector3::new(0.1, 0.8, 0.3), Vector3::new(0.9, 0.2, 0.4)],
        };
        let bg = Vector3::new(0.1, 0.1, 0.1);
        let (a, trace) = rasterize_traced(&posed, &camera(8), &bg, None);
        let (b, _) = rasterize_traced(&posed, &camera(8), &bg, Some(&trace.plan));
        assert_eq!(a, b);
    }
}
