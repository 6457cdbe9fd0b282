use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::avatar::{seed_gaussians, CanonicalAvatar, SeedOptions, ShapeParams, Skeleton, SkinWeights, SKIN_HIDDEN};
use crate::config::{Ablation, RunConfig};
use crate::error::{Error, Result};
use crate::motion::{KnotBasis, NonRigidNet, Pose, SplineBank, NONRIGID_HIDDEN};

/// Optimizable parameter groups, each a flat array with its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Means,
    Rotations,
    LogScales,
    Opacities,
    Colors,
    Knots,
    Nonrigid,
    Lbs,
    Shape,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::Means,
        Group::Rotations,
        Group::LogScales,
        Group::Opacities,
        Group::Colors,
        Group::Knots,
        Group::Nonrigid,
        Group::Lbs,
        Group::Shape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Means => "means",
            Group::Rotations => "rotations",
            Group::LogScales => "log_scales",
            Group::Opacities => "opacities",
            Group::Colors => "colors",
            Group::Knots => "knots",
            Group::Nonrigid => "nonrigid",
            Group::Lbs => "lbs",
            Group::Shape => "shape",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Values per Gaussian for groups indexed by Gaussian.
    pub fn stride(self) -> Option<usize> {
        match self {
            Group::Means | Group::LogScales | Group::Colors => Some(3),
            Group::Rotations => Some(4),
            Group::Opacities => Some(1),
            _ => None,
        }
    }
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub avatar: CanonicalAvatar,
    pub bank: SplineBank,
    pub net: NonRigidNet,
}

impl Model {
    /// Fresh model for training: Gaussians seeded on the unit-shape
    /// skeleton, constant splines at the coarse poses, zero-output networks.
    pub fn initialize<R: Rng>(skeleton: Skeleton, coarse: &[Pose], cfg: &RunConfig, rng: &mut R) -> Result<Model> {
        let cfg = cfg.effective();
        let k = skeleton.joint_count();
        let shape = ShapeParams::unit(k);
        let options = SeedOptions {
            density: cfg.model.seed_density,
            jitter: cfg.model.seed_jitter,
        };
        let (gaussians, base) = seed_gaussians(&skeleton, &shape, options, rng)?;
        let skin = SkinWeights::new(base, k, SKIN_HIDDEN, rng);
        let basis = match cfg.ablation {
            Ablation::NoInterp => KnotBasis::PiecewiseLinear,
            _ => KnotBasis::BSpline,
        };
        if coarse.iter().any(|p| p.channels.len() != k + 1) {
            return Err(Error::Dataset("coarse poses do not match the skeleton".into()));
        }
        let bank = SplineBank::constant(coarse, cfg.model.spline_order, basis)?;
        let net = NonRigidNet::new(NONRIGID_HIDDEN, cfg.model.nonrigid_scale, rng);
        Ok(Model {
            avatar: CanonicalAvatar {
                skeleton,
                shape,
                gaussians,
                skin,
            },
            bank,
            net,
        })
    }

    pub fn params(&self, g: Group) -> &[f64] {
        let gs = &self.avatar.gaussians;
        match g {
            Group::Means => &gs.means,
            Group::Rotations => &gs.rotations,
            Group::LogScales => &gs.log_scales,
            Group::Opacities => &gs.opacity_logits,
            Group::Colors => &gs.colors,
            Group::Knots => self.bank.knots(),
            Group::Nonrigid => self.net.mlp.params(),
            Group::Lbs => self.avatar.skin.offset_net.params(),
            Group::Shape => &self.avatar.shape.log_scales,
        }
    }

    pub fn params_mut(&mut self, g: Group) -> &mut [f64] {
        let gs = &mut self.avatar.gaussians;
        match g {
            Group::Means => &mut gs.means,
            Group::Rotations => &mut gs.rotations,
            Group::LogScales => &mut gs.log_scales,
            Group::Opacities => &mut gs.opacity_logits,
            Group::Colors => &mut gs.colors,
            Group::Knots => self.bank.knots_mut(),
            Group::Nonrigid => self.net.mlp.params_mut(),
            Group::Lbs => self.avatar.skin.offset_net.params_mut(),
            Group::Shape => &mut self.avatar.shape.log_scales,
        }
    }

    pub fn gaussian_count(&self) -> usize {
        self.avatar.gaussians.len()
    }
}

/// Gradients laid out like the model's parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    groups: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            groups: Group::ALL.iter().map(|g| vec![0.0; model.params(*g).len()]).collect(),
        }
    }

    pub fn get(&self, g: Group) -> &[f64] {
        &self.groups[g.index()]
    }

    pub fn get_mut(&mut self, g: Group) -> &mut [f64] {
        &mut self.groups[g.index()]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.groups.iter_mut().flatten() {
            *v *= factor;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for g in Group::ALL {
            if let Some(index) = self.get(g).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { group: g.name(), index });
            }
        }
        Ok(())
    }
}
