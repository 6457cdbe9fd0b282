//! Training state as a single JSON document with exact float round-trip.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::density::DensityStats;
use super::model::{Group, Model};
use crate::avatar::{CanonicalAvatar, GaussianSet, ShapeParams, Skeleton, SkinWeights};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::motion::{KnotBasis, NonRigidNet, SplineBank};
use crate::nn::Mlp;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineLayout {
    pub frames: usize,
    pub channels: usize,
    pub order: usize,
    pub basis: KnotBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<Group, Vec<f64>>,
    pub second: BTreeMap<Group, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub iteration: usize,
    pub rng_seed: u64,
    pub skeleton: Skeleton,
    pub spline: SplineLayout,
    pub nonrigid_sizes: Vec<usize>,
    pub nonrigid_scale: f64,
    pub lbs_sizes: Vec<usize>,
    pub base_weights: Vec<f64>,
    pub groups: BTreeMap<Group, ParamArray>,
    pub adam: AdamState,
    pub density: DensityStats,
}

fn group_shape(model: &Model, g: Group) -> Vec<usize> {
    let n = model.params(g).len();
    match g.stride() {
        Some(s) => vec![n / s, s],
        None => match g {
            Group::Knots => {
                let b = &model.bank;
                vec![b.frames(), b.channels(), b.order(), 3]
            }
            _ => vec![n],
        },
    }
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: &Adam, density: &DensityStats, config: &RunConfig, iteration: usize) -> Self {
        let groups = Group::ALL
            .iter()
            .map(|&g| {
                (
                    g,
                    ParamArray {
                        shape: group_shape(model, g),
                        data: model.params(g).to_vec(),
                    },
                )
            })
            .collect();
        let moments = |v: &Vec<Vec<f64>>| Group::ALL.iter().map(|&g| (g, v[g.index()].clone())).collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            iteration,
            rng_seed: config.seed,
            skeleton: model.avatar.skeleton.clone(),
            spline: SplineLayout {
                frames: model.bank.frames(),
                channels: model.bank.channels(),
                order: model.bank.order(),
                basis: model.bank.basis(),
            },
            nonrigid_sizes: model.net.mlp.sizes().to_vec(),
            nonrigid_scale: model.net.scale,
            lbs_sizes: model.avatar.skin.offset_net.sizes().to_vec(),
            base_weights: model.avatar.skin.base.clone(),
            groups,
            adam: AdamState {
                step: adam.step,
                first: moments(&adam.first),
                second: moments(&adam.second),
            },
            density: density.clone(),
        }
    }

    fn group(&self, g: Group) -> Result<&ParamArray> {
        let a = self
            .groups
            .get(&g)
            .ok_or_else(|| Error::Parameter(format!("checkpoint lacks group `{}`", g.name())))?;
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::Parameter(format!(
                "group `{}` shape does not match its data",
                g.name()
            )));
        }
        Ok(a)
    }

    pub fn model(&self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parameter(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        self.skeleton.validate()?;
        let data = |g| self.group(g).map(|a| a.data.clone());
        let gaussians = GaussianSet {
            means: data(Group::Means)?,
            rotations: data(Group::Rotations)?,
            log_scales: data(Group::LogScales)?,
            opacity_logits: data(Group::Opacities)?,
            colors: data(Group::Colors)?,
        };
        let n = gaussians.len();
        let k = self.skeleton.joint_count();
        if gaussians.means.len() != 3 * n
            || gaussians.rotations.len() != 4 * n
            || gaussians.log_scales.len() != 3 * n
            || gaussians.colors.len() != 3 * n
            || self.base_weights.len() != n * k
        {
            return Err(Error::Parameter("checkpoint Gaussian groups disagree on count".into()));
        }
        let mlp = |sizes: &[usize], g| {
            Mlp::from_params(sizes, data(g)?)
                .ok_or_else(|| Error::Parameter(format!("group `{}` does not fit its layer sizes", Group::name(g))))
        };
        let offset_net = mlp(&self.lbs_sizes, Group::Lbs)?;
        if offset_net.output_size() != k {
            return Err(Error::Parameter("skinning network does not match the skeleton".into()));
        }
        let shape = ShapeParams {
            log_scales: data(Group::Shape)?,
        };
        if shape.log_scales.len() != k {
            return Err(Error::Parameter("shape size does not match the skeleton".into()));
        }
        let l = &self.spline;
        let mut bank = SplineBank::new(l.frames, l.channels, l.order, l.basis)?;
        let knots = data(Group::Knots)?;
        if knots.len() != bank.knots().len() || l.channels != k + 1 {
            return Err(Error::Parameter("spline knots do not match their layout".into()));
        }
        bank.knots_mut().copy_from_slice(&knots);
        Ok(Model {
            avatar: CanonicalAvatar {
                skeleton: self.skeleton.clone(),
                shape,
                gaussians,
                skin: SkinWeights {
                    base: self.base_weights.clone(),
                    offset_net,
                },
            },
            bank,
            net: NonRigidNet {
                mlp: mlp(&self.nonrigid_sizes, Group::Nonrigid)?,
                scale: self.nonrigid_scale,
            },
        })
    }

    pub fn adam(&self, model: &Model) -> Result<Adam> {
        let take = |m: &BTreeMap<Group, Vec<f64>>| -> Result<Vec<Vec<f64>>> {
            Group::ALL
                .iter()
                .map(|&g| {
                    let v = m.get(&g).cloned().unwrap_or_default();
                    if v.len() != model.params(g).len() {
                        return Err(Error::Parameter(format!(
                            "Adam moments of `{}` have the wrong size",
                            g.name()
                        )));
                    }
                    Ok(v)
                })
                .collect()
        };
        Ok(Adam {
            step: self.adam.step,
            first: take(&self.adam.first)?,
            second: take(&self.adam.second)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parameter(format!("invalid checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::rng_for;
    use crate::motion::Pose;
    use rand::Rng;

    #[test]
    fn round_trip_is_identity() {
        let skel = Skeleton::stickman();
        let poses = vec![Pose::zeros(skel.joint_count()); 3];
        let cfg = RunConfig::default();
        let mut rng = rng_for(11, 0);
        let mut model = Model::initialize(skel, &poses, &cfg, &mut rng).unwrap();
        let mut adam = Adam::new(&model);
        for g in Group::ALL {
            for v in model.params_mut(g) {
                *v += rng.random_range(-1.0..1.0) * 1e-3 + 1.0 / 3.0;
            }
            for v in adam.first[g.index()]
                .iter_mut()
                .chain(adam.second[g.index()].iter_mut())
            {
                *v = rng.random::<f64>() * 1e-7;
            }
        }
        adam.step = 17;
        let mut stats = DensityStats::new(model.gaussian_count());
        stats.grad_sum[0] = 0.1 + 0.2;
        stats.visible_count[0] = 3;
        let ck = Checkpoint::capture(&model, &adam, &stats, &cfg, 42);
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap(), model);
        assert_eq!(back.adam(&model).unwrap(), adam);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn corrupted_shape_rejected() {
        let skel = Skeleton::stickman();
        let poses = vec![Pose::zeros(skel.joint_count()); 2];
        let cfg = RunConfig::default();
        let model = Model::initialize(skel, &poses, &cfg, &mut rng_for(1, 0)).unwrap();
        let mut ck = Checkpoint::capture(
            &model,
            &Adam::new(&model),
            &DensityStats::new(model.gaussian_count()),
            &cfg,
            0,
        );
        ck.groups.get_mut(&Group::Colors).unwrap().data.pop();
        assert!(ck.model().is_err());
    }
}
