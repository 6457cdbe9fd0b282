//! Analytic gradients against central finite differences on a tiny scene.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Group, Model};
use super::pipeline::{loss, loss_and_grad, Settings, Target};
use crate::avatar::{CanonicalAvatar, GaussianSet, Joint, ShapeParams, Skeleton, SkinWeights};
use crate::config::{rng_for, streams, GradcheckConfig, RunConfig};
use crate::error::Result;
use crate::motion::{KnotBasis, NonRigidNet, SplineBank};
use crate::renderer::{Camera, Image, RasterPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub group: Group,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub settings: GradcheckConfig,
    pub gaussians: usize,
    pub samples: Vec<GradSample>,
    pub per_group: BTreeMap<Group, GroupSummary>,
    pub max_rel_err: f64,
    pub median_rel_err: f64,
    /// Largest gradient magnitude on any parameter of the culled Gaussian.
    pub culled_analytic_max: f64,
    pub culled_numeric_max: f64,
    pub passed: bool,
}

impl GradcheckReport {
    /// Samples whose error exceeds the maximum tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &GradSample> {
        self.samples.iter().filter(|s| s.rel_err >= self.settings.max_tolerance)
    }
}

/// The fixture: model, camera, blurry target and blur settings.
pub struct Scene {
    pub model: Model,
    pub camera: Camera,
    pub target: Image,
    pub settings: Settings,
    /// Index of the Gaussian placed behind the camera.
    pub culled: usize,
}

fn randomize(params: &mut [f64], scale: f64, rng: &mut impl Rng) {
    for p in params {
        *p += rng.random_range(-scale..scale);
    }
}

/// Two joints, 17 Gaussians (one behind the camera), an 8x8 view, two
/// frames with random knots and random nonzero networks.
pub fn scene(seed: u64) -> Result<Scene> {
    let mut rng = rng_for(seed, streams::GRADCHECK);
    let skeleton = Skeleton {
        name: "pair".into(),
        joints: vec![
            Joint {
                name: "root".into(),
                parent: None,
                rest_offset: [0.0; 3],
                bone_radius: 0.08,
            },
            Joint {
                name: "tip".into(),
                parent: Some(0),
                rest_offset: [0.35, 0.0, 0.0],
                bone_radius: 0.08,
            },
        ],
        palette: vec![[0.8, 0.3, 0.2], [0.2, 0.4, 0.9]],
    };
    let k = skeleton.joint_count();
    let mut gaussians = GaussianSet::default();
    let mut base = Vec::new();
    let mut push = |mean: Vector3<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
        let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let ls = Vector3::from_fn(|_, _| rng.random_range(0.05f64..0.12).ln());
        let color = Vector3::from_fn(|_, _| rng.random_range(0.1..0.9));
        gaussians.push(mean, q, ls, rng.random_range(-1.0..1.5), color);
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        base.extend(w.iter().map(|v| v / s));
    };
    for _ in 0..16 {
        let m = Vector3::new(
            rng.random_range(-0.1..0.45),
            rng.random_range(-0.12..0.12),
            rng.random_range(-0.12..0.12),
        );
        push(m, &mut rng);
    }
    let culled = 16;
    push(Vector3::new(0.1, 0.0, -2.5), &mut rng);

    let mut skin = SkinWeights::new(base, k, 8, &mut rng);
    randomize(skin.offset_net.params_mut(), 0.3, &mut rng);
    let mut net = NonRigidNet::new(8, 0.1, &mut rng);
    randomize(net.mlp.params_mut(), 0.3, &mut rng);
    let mut bank = SplineBank::new(2, k + 1, 4, KnotBasis::BSpline)?;
    for n in 0..2 {
        for j in 0..=k {
            let amp = if j < k { 0.3 } else { 0.05 };
            for p in 0..4 {
                let v = Vector3::from_fn(|_, _| rng.random_range(-amp..amp));
                bank.set_knot(n, j, p, &v);
            }
        }
    }
    let shape = ShapeParams {
        log_scales: (0..k).map(|_| rng.random_range(-0.1..0.1)).collect(),
    };
    let model = Model {
        avatar: CanonicalAvatar {
            skeleton,
            shape,
            gaussians,
            skin,
        },
        bank,
        net,
    };
    let camera = Camera {
        rotation: Matrix3::identity(),
        translation: Vector3::new(-0.15, 0.0, 1.6),
        fx: 10.0,
        fy: 10.0,
        cx: 3.5,
        cy: 3.5,
        width: 8,
        height: 8,
        near: 0.1,
    };
    let settings = Settings {
        subframes: 3,
        lambda_reg: 0.7,
        background: Vector3::new(0.1, 0.2, 0.05),
    };
    // Keep every residual well away from the kink of |x|.
    let blank = Image::new(8, 8);
    let probe = Target {
        camera_id: "probe",
        camera: &camera,
        frame: 0,
        image: &blank,
        crop: None,
    };
    let rendered = loss_and_grad(&model, &probe, &settings, None)?.rendered;
    let mut target = rendered.clone();
    for v in &mut target.data {
        let gap = rng.random_range(0.05..0.25);
        *v += if rng.random_bool(0.5) { gap } else { -gap };
    }
    Ok(Scene {
        model,
        camera,
        target,
        settings,
        culled,
    })
}

fn central_difference(
    model: &Model,
    target: &Target,
    settings: &Settings,
    plans: &[RasterPlan],
    group: Group,
    index: usize,
    h: f64,
) -> Result<f64> {
    let mut m = model.clone();
    let p0 = m.params(group)[index];
    m.params_mut(group)[index] = p0 + h;
    let up = loss(&m, target, settings, Some(plans))?.total;
    m.params_mut(group)[index] = p0 - h;
    let down = loss(&m, target, settings, Some(plans))?.total;
    Ok((up - down) / (2.0 * h))
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    let diff = (a - n).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(n.abs()).max(floor)
    }
}

/// Runs the harness with the `gradcheck` section of `cfg`.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let g = &cfg.gradcheck;
    let sc = scene(cfg.seed)?;
    let target = Target {
        camera_id: "gradcheck",
        camera: &sc.camera,
        frame: 0,
        image: &sc.target,
        crop: None,
    };
    let eval = loss_and_grad(&sc.model, &target, &sc.settings, None)?;
    let plans = eval.plans;
    let analytic = |group: Group, i: usize| eval.grads.get(group)[i] * g.inject_gradient_scale;
    let mut rng = rng_for(cfg.seed, streams::GRADCHECK + 1);
    let mut samples = Vec::new();
    for group in Group::ALL {
        let len = sc.model.params(group).len();
        let mut picks = sample(&mut rng, len, g.samples_per_group.min(len)).into_vec();
        picks.sort_unstable();
        for index in picks {
            let a = analytic(group, index);
            let n = central_difference(&sc.model, &target, &sc.settings, &plans, group, index, g.step)?;
            samples.push(GradSample {
                group,
                index,
                analytic: a,
                numeric: n,
                rel_err: relative_error(a, n, g.abs_floor),
            });
        }
    }

    let (mut culled_a, mut culled_n) = (0.0f64, 0.0f64);
    for group in Group::ALL {
        let Some(stride) = group.stride() else { continue };
        for index in sc.culled * stride..(sc.culled + 1) * stride {
            culled_a = culled_a.max(analytic(group, index).abs());
            let n = central_difference(&sc.model, &target, &sc.settings, &plans, group, index, g.step)?;
            culled_n = culled_n.max(n.abs());
        }
    }

    let mut errs: Vec<f64> = samples.iter().map(|s| s.rel_err).collect();
    errs.sort_by(f64::total_cmp);
    let max_rel_err = errs.last().copied().unwrap_or(0.0);
    let median_rel_err = if errs.is_empty() {
        0.0
    } else if errs.len() % 2 == 1 {
        errs[errs.len() / 2]
    } else {
        0.5 * (errs[errs.len() / 2 - 1] + errs[errs.len() / 2])
    };
    let mut per_group: BTreeMap<Group, GroupSummary> = BTreeMap::new();
    for s in &samples {
        let e = per_group.entry(s.group).or_insert(GroupSummary {
            count: 0,
            max_rel_err: 0.0,
        });
        e.count += 1;
        e.max_rel_err = e.max_rel_err.max(s.rel_err);
    }
    let passed =
        max_rel_err < g.max_tolerance && median_rel_err < g.median_tolerance && culled_a == 0.0 && culled_n == 0.0;
    Ok(GradcheckReport {
        settings: g.clone(),
        gaussians: sc.model.gaussian_count(),
        samples,
        per_group,
        max_rel_err,
        median_rel_err,
        culled_analytic_max: culled_a,
        culled_numeric_max: culled_n,
        passed,
    })
}
