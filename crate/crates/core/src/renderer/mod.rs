//! Pinhole Gaussian splatting and the blur compositor.

pub mod camera;
pub mod image;
pub mod project;
pub mod raster;

use nalgebra::Vector3;
use rayon::prelude::*;

pub use camera::{Camera, CameraSpec};
pub use image::{BBox, Image};
pub use project::{project_gaussian, Projection};
pub use raster::{rasterize, rasterize_backward, rasterize_traced, RasterGrads, RasterPlan, RasterTrace};

use crate::avatar::{forward_kinematics, warp_gaussians, CanonicalAvatar};
use crate::error::{Error, Result};
use crate::motion::{subframe_time, NonRigidNet, Pose, SplineBank};

/// Full pose of `frame` at normalized time `s`.
pub fn subframe_pose(bank: &SplineBank, net: &NonRigidNet, frame: usize, s: f64) -> Result<Pose> {
    let hat = bank.interpolate_pose(frame, s)?;
    Ok(net.displace_pose(&hat, s))
}

pub fn render_posed(avatar: &CanonicalAvatar, pose: &Pose, cam: &Camera, background: &Vector3<f64>) -> Result<Image> {
    let kin = forward_kinematics(&avatar.skeleton, &avatar.shape, pose)?;
    let posed = warp_gaussians(avatar, &kin);
    Ok(rasterize(&posed, cam, background))
}

pub fn render_sharp(
    avatar: &CanonicalAvatar,
    bank: &SplineBank,
    net: &NonRigidNet,
    frame: usize,
    s: f64,
    cam: &Camera,
    background: &Vector3<f64>,
) -> Result<Image> {
    let pose = subframe_pose(bank, net, frame, s)?;
    render_posed(avatar, &pose, cam, background)
}

/// Mean of `subframes` sharp renders spread uniformly over the exposure.
pub fn render_blur(
    avatar: &CanonicalAvatar,
    bank: &SplineBank,
    net: &NonRigidNet,
    frame: usize,
    cam: &Camera,
    subframes: usize,
    background: &Vector3<f64>,
) -> Result<Image> {
    if subframes == 0 {
        return Err(Error::Parameter("subframe count must be at least 1".into()));
    }
    let renders = (0..subframes)
        .into_par_iter()
        .map(|t| render_sharp(avatar, bank, net, frame, subframe_time(t, subframes), cam, background))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_images(&renders))
}

/// Pixel-wise mean, summed in slice order.
pub fn average_images(images: &[Image]) -> Image {
    let first = &images[0];
    let mut out = Image::new(first.width, first.height);
    for img in images {
        for (o, v) in out.data.iter_mut().zip(&img.data) {
            *o += v;
        }
    }
    let inv = images.len() as f64;
    for o in &mut out.data {
        *o /= inv;
    }
    out
}
