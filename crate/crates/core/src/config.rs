//! Run configuration shared by every subcommand.
//!
//! Every numeric default lives here. A config file may set any subset of the
//! keys; missing keys take their defaults and unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "BAL_SEED";

/// Experiment variants. Each disables one component of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Independent pose per sub-frame instead of a spline (P = T).
    NoInterp,
    NoNonrigid,
    NoLbsOpt,
    NoShapeOpt,
    NoReg,
    /// One mid-exposure render matched directly to the blurry target.
    BlurNaive,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::NoInterp,
        Ablation::NoNonrigid,
        Ablation::NoLbsOpt,
        Ablation::NoShapeOpt,
        Ablation::NoReg,
        Ablation::BlurNaive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoInterp => "no-interp",
            Ablation::NoNonrigid => "no-nonrigid",
            Ablation::NoLbsOpt => "no-lbs-opt",
            Ablation::NoShapeOpt => "no-shape-opt",
            Ablation::NoReg => "no-reg",
            Ablation::BlurNaive => "blur-naive",
        }
    }

    pub fn parse(name: &str) -> Option<Ablation> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub subframes: usize,
    pub spline_order: usize,
    pub lambda_reg: f64,
    pub nonrigid_scale: f64,
    pub background: [f64; 3],
    pub seed_density: f64,
    pub seed_jitter: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            subframes: 5,
            spline_order: 4,
            lambda_reg: 1.0,
            nonrigid_scale: 0.1,
            background: [0.0; 3],
            seed_density: 100.0,
            seed_jitter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub means: f64,
    /// Multiplier reached by the mean rate at the final iteration.
    pub means_final_factor: f64,
    /// Multiplier reached by every other rate at the final iteration.
    pub final_factor: f64,
    pub rotations: f64,
    pub log_scales: f64,
    pub opacities: f64,
    pub colors: f64,
    pub knots: f64,
    pub nonrigid: f64,
    pub lbs: f64,
    pub shape: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: 2e-4,
            means_final_factor: 0.01,
            final_factor: 0.1,
            rotations: 1e-3,
            log_scales: 5e-3,
            opacities: 5e-2,
            colors: 2.5e-3,
            knots: 1e-3,
            nonrigid: 1e-3,
            lbs: 1e-3,
            shape: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    /// Restrict the photometric loss to the padded bounding box of each
    /// training image's non-background pixels.
    pub crop_to_subject: bool,
    pub crop_padding: usize,
    pub learning_rates: LearningRates,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            checkpoint_every: 1000,
            crop_to_subject: true,
            crop_padding: 4,
            learning_rates: LearningRates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    pub enabled: bool,
    pub start: usize,
    pub end: usize,
    pub every: usize,
    pub grad_threshold: f64,
    pub scale_threshold: f64,
    pub split_divisor: f64,
    pub min_opacity: f64,
    pub max_scale: f64,
    pub max_gaussians: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            start: 300,
            end: 2000,
            every: 200,
            grad_threshold: 2e-5,
            scale_threshold: 0.05,
            split_divisor: 1.6,
            min_opacity: 0.01,
            max_scale: 0.3,
            max_gaussians: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub cameras: usize,
    pub radius: f64,
    pub height: f64,
    pub target: [f64; 3],
    pub width: usize,
    pub image_height: usize,
    pub focal: f64,
    pub near: f64,
    /// Indices into the ring used as blurry training views; the rest are
    /// held out as sharp evaluation views.
    pub train_cameras: Vec<usize>,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            cameras: 12,
            radius: 3.0,
            height: 0.3,
            target: [0.0, 0.0, 0.0],
            width: 128,
            image_height: 128,
            focal: 120.0,
            near: 0.1,
            train_cameras: vec![0, 3, 6, 9],
        }
    }
}

/// One sinusoidal channel: `axis * amplitude * sin(2 pi frequency t + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelMotion {
    pub axis: [f64; 3],
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionScript {
    /// Joint name to its rotation script (radians). Joints not listed stay
    /// at zero rotation.
    pub joints: BTreeMap<String, ChannelMotion>,
    /// Root translation script (meters).
    pub root: Option<ChannelMotion>,
}

impl Default for MotionScript {
    fn default() -> Self {
        let m = |axis: [f64; 3], amplitude: f64, frequency: f64, phase: f64| ChannelMotion {
            axis,
            amplitude,
            frequency,
            phase,
        };
        let z = [0.0, 0.0, 1.0];
        let x = [1.0, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0];
        let joints = [
            ("pelvis", m(y, 0.6, 0.15, 0.0)),
            ("spine", m(z, 0.4, 0.25, 0.4)),
            ("head", m(x, 0.5, 0.3, 1.0)),
            ("l_shoulder", m(z, 1.4, 0.35, 0.0)),
            ("r_shoulder", m(z, 1.4, 0.35, 0.0)),
            ("l_elbow", m(y, 1.2, 0.45, 0.5)),
            ("r_elbow", m(y, 1.2, 0.45, 2.0)),
            ("l_hip", m(x, 1.0, 0.35, 0.0)),
            ("r_hip", m(x, 1.0, 0.35, std::f64::consts::PI)),
            ("l_knee", m(x, 1.0, 0.35, 1.2)),
            ("r_knee", m(x, 1.0, 0.35, 4.3)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            joints,
            root: Some(m(x, 0.1, 0.125, 0.0)),
        }
    }
}

impl MotionScript {
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for m in out.joints.values_mut() {
            m.amplitude *= factor;
        }
        if let Some(r) = out.root.as_mut() {
            r.amplitude *= factor;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub frames: usize,
    /// Exposure duration in seconds; frame `n` covers `[n tau, (n+1) tau)`.
    pub exposure: f64,
    pub subframes: usize,
    pub pose_noise_rotation: f64,
    pub pose_noise_translation: f64,
    pub float_dump: bool,
    pub motion: MotionScript,
    /// Joint name to ground-truth bone-length scale. Unlisted joints use 1.
    pub shape_scales: BTreeMap<String, f64>,
    pub gt_density: f64,
    /// Optional skeleton file; the built-in stick figure when absent.
    pub skeleton: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let shape_scales = [("l_elbow", 1.08), ("r_elbow", 1.08), ("l_knee", 1.06), ("r_knee", 1.06)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            frames: 20,
            exposure: 0.2,
            subframes: 33,
            pose_noise_rotation: 0.05,
            pose_noise_translation: 0.02,
            float_dump: true,
            motion: MotionScript::default(),
            shape_scales,
            gt_density: 100.0,
            skeleton: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub timesteps: Vec<f64>,
    pub crop_padding: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![0.0, 0.5, 1.0],
            crop_padding: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub step: f64,
    pub samples_per_group: usize,
    pub max_tolerance: f64,
    pub median_tolerance: f64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    /// Multiplies analytic gradients before comparison; anything other than
    /// 1 should make the check fail.
    pub inject_gradient_scale: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples_per_group: 30,
            max_tolerance: 1e-3,
            median_tolerance: 1e-5,
            abs_floor: 1e-8,
            inject_gradient_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Exposure durations, seconds.
    pub exposures: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            exposures: vec![0.1, 0.2, 0.4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub density: DensityConfig,
    pub rig: RigConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            ablation: Ablation::None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            density: DensityConfig::default(),
            rig: RigConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies `BAL_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        if m.subframes == 0 {
            return bad("model.subframes must be at least 1".into());
        }
        if m.spline_order == 0 || m.spline_order > crate::motion::MAX_ORDER {
            return bad(format!(
                "model.spline_order must be in 1..={}",
                crate::motion::MAX_ORDER
            ));
        }
        if !(m.seed_density > 0.0) || !(m.nonrigid_scale >= 0.0) || !(m.lambda_reg >= 0.0) {
            return bad("model.seed_density must be positive; nonrigid_scale and lambda_reg nonnegative".into());
        }
        let d = &self.data;
        if d.frames == 0 || d.subframes == 0 || !(d.exposure > 0.0) || !(d.gt_density > 0.0) {
            return bad("data.frames, data.subframes, data.exposure and data.gt_density must be positive".into());
        }
        if !(d.pose_noise_rotation >= 0.0) || !(d.pose_noise_translation >= 0.0) {
            return bad("data pose noise must be nonnegative".into());
        }
        let r = &self.rig;
        if r.train_cameras.is_empty() || r.train_cameras.iter().any(|&c| c >= r.cameras) {
            return bad("rig.train_cameras must be nonempty indices below rig.cameras".into());
        }
        let mut sorted = r.train_cameras.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != r.train_cameras.len() {
            return bad("rig.train_cameras contains duplicates".into());
        }
        if r.width == 0 || r.image_height == 0 || !(r.focal > 0.0) || !(r.near > 0.0) || !(r.radius > r.near) {
            return bad("rig resolution, focal, near and radius must be positive with radius > near".into());
        }
        if self.eval.timesteps.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("eval.timesteps must lie in [0, 1]".into());
        }
        if self.sweep.exposures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("sweep.exposures must be positive".into());
        }
        if self.density.every == 0 || !(self.density.split_divisor > 0.0) {
            return bad("density.every and density.split_divisor must be positive".into());
        }
        let g = &self.gradcheck;
        if !(g.step > 0.0) || g.samples_per_group == 0 {
            return bad("gradcheck.step and gradcheck.samples_per_group must be positive".into());
        }
        Ok(())
    }

    /// Configuration actually trained under the selected ablation.
    pub fn effective(&self) -> RunConfig {
        let mut c = self.clone();
        let lr = &mut c.train.learning_rates;
        match self.ablation {
            Ablation::None => {}
            Ablation::NoInterp => c.model.spline_order = c.model.subframes,
            Ablation::NoNonrigid => lr.nonrigid = 0.0,
            Ablation::NoLbsOpt => lr.lbs = 0.0,
            Ablation::NoShapeOpt => lr.shape = 0.0,
            Ablation::NoReg => c.model.lambda_reg = 0.0,
            Ablation::BlurNaive => {
                c.model.subframes = 1;
                c.model.spline_order = 1;
                c.model.lambda_reg = 0.0;
                lr.nonrigid = 0.0;
            }
        }
        c
    }
}

/// Independent deterministic random stream `stream` of `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod streams {
    pub const GT_AVATAR: u64 = 1;
    pub const POSE_NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const GRADCHECK: u64 = 4;
    /// Density control adds the iteration to this base.
    pub const DENSITY_BASE: u64 = 1 << 32;
}

/// Human-readable description of every config key.
pub const CONFIG_KEYS: &str = "\
Config keys (JSON; every key optional, unknown keys rejected):
  seed                                 master seed for every random stream [7]; BAL_SEED overrides
  ablation                             none | no-interp | no-nonrigid | no-lbs-opt | no-shape-opt | no-reg | blur-naive [none]
  model.subframes                      virtual sharp renders per blurry frame, T [5]
  model.spline_order                   control knots per frame and channel, P [4]
  model.lambda_reg                     weight of the inter-frame regularizer [1.0]
  model.nonrigid_scale                 bound on the non-rigid pose displacement, radians [0.1]
  model.background                     RGB background [0,0,0]
  model.seed_density                   initial Gaussians per meter of bone [100]
  model.seed_jitter                    jitter initial Gaussians within the bone radius [true]
  train.iterations                     optimizer steps [3000]
  train.checkpoint_every               periodic checkpoint interval, 0 disables [1000]
  train.crop_to_subject                photometric loss on the padded subject bounding box only [true]
  train.crop_padding                   bounding-box padding in pixels [4]
  train.learning_rates.means           Gaussian mean rate [2e-4]
  train.learning_rates.means_final_factor  exponential decay target of the mean rate [0.01]
  train.learning_rates.final_factor    exponential decay target of every other rate [0.1]
  train.learning_rates.rotations       [1e-3]
  train.learning_rates.log_scales      [5e-3]
  train.learning_rates.opacities       [5e-2]
  train.learning_rates.colors          [2.5e-3]
  train.learning_rates.knots           spline control knots [1e-3]
  train.learning_rates.nonrigid        non-rigid displacement network [1e-3]
  train.learning_rates.lbs             skinning offset network [1e-3]
  train.learning_rates.shape           bone-length log-scales [1e-3]
  density.enabled                      run clone/split/prune [true]
  density.start, density.end, density.every  iteration window and period [300, 2000, 200]
  density.grad_threshold               mean screen-space gradient norm for densification [2e-5]
  density.scale_threshold              max scale separating clone from split, meters [0.05]
  density.split_divisor                scale divisor for split children [1.6]
  density.min_opacity                  prune below this opacity [0.01]
  density.max_scale                    prune above this max scale, meters [0.3]
  density.max_gaussians                cap on the Gaussian count [20000]
  rig.cameras                          cameras on the ring [12]
  rig.radius, rig.height               ring radius and camera height, meters [3.0, 0.3]
  rig.target                           point every camera looks at [0,0,0]
  rig.width, rig.image_height          resolution in pixels [128, 128]
  rig.focal                            fx = fy in pixels; principal point at the image center [120]
  rig.near                             near plane, meters [0.1]
  rig.train_cameras                    ring indices used as blurry training views [0,3,6,9]
  data.frames                          exposure frames, N_e [20]
  data.exposure                        exposure duration tau, seconds [0.2]
  data.subframes                       sharp renders averaged per blurry frame [33]
  data.pose_noise_rotation             coarse pose noise sigma, radians [0.05]
  data.pose_noise_translation          coarse root noise sigma, meters [0.02]
  data.float_dump                      write .f32 dumps next to every PNG [true]
  data.motion.joints.<name>            {axis, amplitude, frequency, phase} rotation script per joint
  data.motion.root                     {axis, amplitude, frequency, phase} root translation script or null
  data.shape_scales.<name>             ground-truth bone-length scale per joint [elbows 1.08, knees 1.06]
  data.gt_density                      ground-truth Gaussians per meter of bone [100]
  data.skeleton                        skeleton JSON path, built-in stickman-11 when null
  eval.timesteps                       normalized exposure times evaluated [0, 0.5, 1]
  eval.crop_padding                    bounding-box padding in pixels [4]
  gradcheck.step                       central difference step [1e-4]
  gradcheck.samples_per_group          sampled parameters per group [30]
  gradcheck.max_tolerance              maximum relative error allowed [1e-3]
  gradcheck.median_tolerance           median relative error allowed [1e-5]
  gradcheck.abs_floor                  floor of the relative-error denominator [1e-8]
  gradcheck.inject_gradient_scale      scales analytic gradients, for harness self-tests [1.0]
  sweep.exposures                      exposure durations of the blur-magnitude sweep, seconds [0.1, 0.2, 0.4]
";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips() {
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sede": 3}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"model": {"T": 3}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_nested_override() {
        let c = RunConfig::from_json(r#"{"model": {"subframes": 3}, "ablation": "no-reg"}"#).unwrap();
        assert_eq!(c.model.subframes, 3);
        assert_eq!(c.model.spline_order, 4);
        assert_eq!(c.ablation, Ablation::NoReg);
        assert_eq!(c.effective().model.lambda_reg, 0.0);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"subframes": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"rig": {"train_cameras": [12]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"timesteps": [1.5]}}"#).is_err());
    }

    #[test]
    fn no_interp_uses_one_knot_per_subframe() {
        let c = RunConfig {
            ablation: Ablation::NoInterp,
            ..RunConfig::default()
        };
        assert_eq!(c.effective().model.spline_order, c.model.subframes);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
    }

    #[test]
    fn help_mentions_every_leaf_key() {
        fn leaves(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
            match v {
                serde_json::Value::Object(map)
                    if !prefix.ends_with("joints")
                        && !prefix.ends_with("shape_scales")
                        && !prefix.ends_with("root") =>
                {
                    for (k, child) in map {
                        let p = if prefix.is_empty() {
                            k.clone()
                        } else {
                            format!("{prefix}.{k}")
                        };
                        leaves(&p, child, out);
                    }
                }
                _ => out.push(prefix.to_string()),
            }
        }
        let mut keys = Vec::new();
        leaves("", &serde_json::to_value(RunConfig::default()).unwrap(), &mut keys);
        for key in keys {
            let last = key.rsplit('.').next().unwrap();
            assert!(CONFIG_KEYS.contains(last), "{key} undocumented");
        }
    }
}
