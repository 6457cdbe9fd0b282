//! Blur-compositor loss and its exact gradient with respect to every
//! parameter group.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::loss::{photometric_loss, photometric_loss_grad, CameraLoss, LossReport};
use super::model::{Grads, Group, Model};
use crate::avatar::{
    effective_weights_backward, effective_weights_traced, forward_kinematics, forward_kinematics_backward,
    warp_backward, warp_with_weights, Kinematics, PosedGaussians, WarpTrace,
};
use crate::error::{Error, Result};
use crate::motion::{inter_frame_reg, inter_frame_reg_with_grad, subframe_time, DisplacementTrace, Pose};
use crate::renderer::{
    average_images, rasterize_backward, rasterize_traced, BBox, Camera, Image, RasterPlan, RasterTrace,
};

/// One blurry observation.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub camera_id: &'a str,
    pub camera: &'a Camera,
    pub frame: usize,
    pub image: &'a Image,
    pub crop: Option<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub subframes: usize,
    pub lambda_reg: f64,
    pub background: Vector3<f64>,
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rendered: Image,
    pub report: LossReport,
    pub grads: Grads,
    /// Sum over sub-frames of the screen-space mean gradient norm.
    pub mean2d_grad: Vec<f64>,
    /// Whether each Gaussian survived culling in at least one sub-frame.
    pub visible: Vec<bool>,
    /// Rasterization decisions of each sub-frame.
    pub plans: Vec<RasterPlan>,
}

struct Subframe {
    weights: Vec<f64>,
    pose: Pose,
    displacement: DisplacementTrace,
    kin: Kinematics,
    posed: PosedGaussians,
    warp: WarpTrace,
    raster: RasterTrace,
    image: Image,
}

fn check_frozen(settings: &Settings, frozen: Option<&[RasterPlan]>) -> Result<()> {
    if settings.subframes == 0 {
        return Err(Error::Parameter("subframe count must be at least 1".into()));
    }
    if let Some(f) = frozen {
        if f.len() != settings.subframes {
            return Err(Error::Parameter("frozen plans do not match the subframe count".into()));
        }
    }
    Ok(())
}

fn forward_subframes(
    model: &Model,
    skin_weights: &[f64],
    target: &Target,
    settings: &Settings,
    frozen: Option<&[RasterPlan]>,
) -> Result<Vec<Subframe>> {
    let avatar = &model.avatar;
    (0..settings.subframes)
        .into_par_iter()
        .map(|t| {
            let s = subframe_time(t, settings.subframes);
            let weights = model.bank.weights(s)?;
            let hat = model.bank.pose_with_weights(target.frame, &weights)?;
            let (pose, displacement) = model.net.displace_traced(&hat, s);
            let kin = forward_kinematics(&avatar.skeleton, &avatar.shape, &pose)?;
            let (posed, warp) = warp_with_weights(&avatar.gaussians, skin_weights, &kin);
            let plan = frozen.map(|f| &f[t]);
            let (image, raster) = rasterize_traced(&posed, target.camera, &settings.background, plan);
            Ok(Subframe {
                weights,
                pose,
                displacement,
                kin,
                posed,
                warp,
                raster,
                image,
            })
        })
        .collect()
}

fn report(model: &Model, target: &Target, l1: f64, settings: &Settings) -> LossReport {
    LossReport::new(
        vec![CameraLoss {
            camera: target.camera_id.to_string(),
            frame: target.frame,
            l1,
        }],
        inter_frame_reg(&model.bank),
        settings.lambda_reg,
    )
}

/// Loss only, optionally replaying recorded rasterization decisions.
pub fn loss(model: &Model, target: &Target, settings: &Settings, frozen: Option<&[RasterPlan]>) -> Result<LossReport> {
    check_frozen(settings, frozen)?;
    let (skin_weights, _) = effective_weights_traced(&model.avatar.skin, &model.avatar.gaussians);
    let subs = forward_subframes(model, &skin_weights, target, settings, frozen)?;
    let images: Vec<Image> = subs.into_iter().map(|s| s.image).collect();
    let rendered = average_images(&images);
    let l1 = photometric_loss(&rendered, target.image, target.crop.as_ref())?;
    Ok(report(model, target, l1, settings))
}

/// Loss and gradients. With `frozen`, culling, ordering, early termination
/// and alpha clamping follow the given plans.
pub fn loss_and_grad(
    model: &Model,
    target: &Target,
    settings: &Settings,
    frozen: Option<&[RasterPlan]>,
) -> Result<Evaluation> {
    check_frozen(settings, frozen)?;
    let avatar = &model.avatar;
    let n = avatar.gaussians.len();
    let k = avatar.skeleton.joint_count();
    let (skin_weights, skin_trace) = effective_weights_traced(&avatar.skin, &avatar.gaussians);
    let subs = forward_subframes(model, &skin_weights, target, settings, frozen)?;
    let images: Vec<Image> = subs.iter().map(|s| s.image.clone()).collect();
    let rendered = average_images(&images);
    let (l1, mut d_image) = photometric_loss_grad(&rendered, target.image, target.crop.as_ref())?;
    let inv_t = 1.0 / settings.subframes as f64;
    for v in &mut d_image.data {
        *v *= inv_t;
    }

    let per_sub: Vec<(Grads, Vec<f64>, Vec<f64>)> = subs
        .par_iter()
        .map(|sub| {
            let mut g = Grads::zeros_like(model);
            let rg = rasterize_backward(&sub.posed, target.camera, &settings.background, &sub.raster, &d_image);
            let wg = warp_backward(&avatar.gaussians, &skin_weights, &sub.kin, &sub.warp, &rg.posed);
            let (d_pose, d_shape) =
                forward_kinematics_backward(&avatar.skeleton, &sub.pose, &sub.kin, &wg.skin_rot, &wg.skin_trans);
            let d_hat = model
                .net
                .backward(&sub.displacement, &d_pose, g.get_mut(Group::Nonrigid));
            model
                .bank
                .accumulate_pose_grad(target.frame, &sub.weights, &d_hat, g.get_mut(Group::Knots));
            g.get_mut(Group::Means).copy_from_slice(&wg.means);
            g.get_mut(Group::Rotations).copy_from_slice(&wg.rotations);
            g.get_mut(Group::LogScales).copy_from_slice(&wg.log_scales);
            g.get_mut(Group::Opacities).copy_from_slice(&wg.opacity_logits);
            g.get_mut(Group::Colors).copy_from_slice(&wg.colors);
            g.get_mut(Group::Shape).copy_from_slice(&d_shape);
            let norms = rg.mean2d.iter().map(|v| v.norm()).collect();
            (g, wg.weights, norms)
        })
        .collect();

    let mut grads = Grads::zeros_like(model);
    let mut d_weights = vec![0.0; n * k];
    let mut mean2d_grad = vec![0.0; n];
    for (g, dw, norms) in &per_sub {
        grads.add_assign(g);
        for (a, b) in d_weights.iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in mean2d_grad.iter_mut().zip(norms) {
            *a += b;
        }
    }
    {
        let mut d_lbs = vec![0.0; model.params(Group::Lbs).len()];
        let mut d_means = vec![0.0; 3 * n];
        effective_weights_backward(
            &avatar.skin,
            &skin_weights,
            &skin_trace,
            &d_weights,
            &mut d_lbs,
            &mut d_means,
        );
        for (a, b) in grads.get_mut(Group::Lbs).iter_mut().zip(&d_lbs) {
            *a += b;
        }
        for (a, b) in grads.get_mut(Group::Means).iter_mut().zip(&d_means) {
            *a += b;
        }
    }
    let l_reg = inter_frame_reg_with_grad(&model.bank, settings.lambda_reg, grads.get_mut(Group::Knots));
    grads.check_finite()?;

    let visible = (0..n)
        .map(|i| subs.iter().any(|s| s.raster.plan.is_visible(i)))
        .collect();
    let plans = subs.into_iter().map(|s| s.raster.plan).collect();
    Ok(Evaluation {
        rendered,
        report: LossReport::new(
            vec![CameraLoss {
                camera: target.camera_id.to_string(),
                frame: target.frame,
                l1,
            }],
            l_reg,
            settings.lambda_reg,
        ),
        grads,
        mean2d_grad,
        visible,
        plans,
    })
}
