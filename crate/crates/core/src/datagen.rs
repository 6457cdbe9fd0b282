//! Synthetic blurry multi-view benchmark.
//!
//! A ground-truth avatar follows a sinusoidal motion script. Each training
//! camera sees the exact mean of `data.subframes` sharp renders per exposure;
//! each evaluation camera sees one sharp render at mid-exposure.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::{seed_gaussians, CanonicalAvatar, SeedOptions, ShapeParams, Skeleton, SkinWeights, SKIN_HIDDEN};
use crate::config::{rng_for, streams, ChannelMotion, MotionScript, RigConfig, RunConfig};
use crate::diffopt::{Adam, Checkpoint, DensityStats, Model};
use crate::error::{Error, Result};
use crate::motion::{subframe_time, KnotBasis, NonRigidNet, Pose, SplineBank, NONRIGID_HIDDEN};
use crate::renderer::{average_images, render_posed, render_sharp, Camera, CameraSpec, Image};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SKELETON_FILE: &str = "skeleton.json";
pub const GT_CHECKPOINT_FILE: &str = "gt_checkpoint.json";
pub const COARSE_POSES_FILE: &str = "coarse_poses.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraRole {
    TrainBlur,
    EvalSharp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub id: String,
    pub role: CameraRole,
    pub camera: CameraSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub skeleton: String,
    pub cameras: Vec<CameraEntry>,
    /// Camera id to image paths (relative to the dataset root), one per frame.
    pub frames: BTreeMap<String, Vec<String>>,
    pub frame_count: usize,
    pub exposure: f64,
    pub subframes: usize,
    pub background: [f64; 3],
    pub motion: MotionScript,
    pub gt_checkpoint: String,
    pub coarse_poses: String,
    pub seed: u64,
    pub float_dump: bool,
}

impl Manifest {
    pub fn camera(&self, id: &str) -> Option<&CameraEntry> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn cameras_with_role(&self, role: CameraRole) -> impl Iterator<Item = &CameraEntry> {
        self.cameras.iter().filter(move |c| c.role == role)
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        m.validate(dir)?;
        Ok(m)
    }

    /// Checks that every referenced file exists and camera roles are sane.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("unsupported manifest version {}", self.version)));
        }
        let mut ids: Vec<&str> = self.cameras.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.cameras.len() {
            return Err(Error::Dataset("duplicate camera ids".into()));
        }
        if self.cameras_with_role(CameraRole::TrainBlur).next().is_none() {
            return Err(Error::Dataset("no train-blur cameras".into()));
        }
        for c in &self.cameras {
            c.camera.to_camera()?;
            let frames = self
                .frames
                .get(&c.id)
                .ok_or_else(|| Error::Dataset(format!("camera {} lists no frames", c.id)))?;
            if frames.len() != self.frame_count {
                return Err(Error::Dataset(format!(
                    "camera {} has {} frames, expected {}",
                    c.id,
                    frames.len(),
                    self.frame_count
                )));
            }
        }
        let files = self
            .frames
            .values()
            .flatten()
            .chain([&self.skeleton, &self.gt_checkpoint, &self.coarse_poses]);
        for f in files {
            let p = dir.join(f);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                ));
            }
        }
        Ok(())
    }
}

/// Loads `path`, preferring the exact float dump next to it when present.
pub fn load_image(path: &Path) -> Result<Image> {
    let dump = path.with_extension("f32");
    if dump.is_file() {
        Image::read_f32(&dump)
    } else {
        Image::read_png(path)
    }
}

/// A camera together with one image per frame.
#[derive(Debug, Clone)]
pub struct View {
    pub id: String,
    pub camera: Camera,
    pub images: Vec<Image>,
}

/// A dataset loaded for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub skeleton: Skeleton,
    pub coarse_poses: Vec<Pose>,
    pub train: Vec<View>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = Manifest::load(dir)?;
        let skeleton = Skeleton::load(&dir.join(&manifest.skeleton))?;
        let cp = dir.join(&manifest.coarse_poses);
        let text = std::fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
        let nested: Vec<Vec<[f64; 3]>> = serde_json::from_str(&text).map_err(|e| Error::json(&cp, e))?;
        if nested.len() != manifest.frame_count || nested.iter().any(|p| p.len() != skeleton.channel_count()) {
            return Err(Error::Dataset("coarse poses do not match frames and skeleton".into()));
        }
        let coarse_poses = nested.iter().map(|p| Pose::from_nested(p)).collect();
        let train = manifest
            .cameras_with_role(CameraRole::TrainBlur)
            .map(|c| {
                let images = manifest.frames[&c.id]
                    .iter()
                    .map(|f| load_image(&dir.join(f)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(View {
                    id: c.id.clone(),
                    camera: c.camera.to_camera()?,
                    images,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest,
            skeleton,
            coarse_poses,
            train,
        })
    }

    pub fn eval_cameras(&self) -> Result<Vec<(String, Camera)>> {
        self.manifest
            .cameras_with_role(CameraRole::EvalSharp)
            .map(|c| Ok((c.id.clone(), c.camera.to_camera()?)))
            .collect()
    }

    pub fn image(&self, camera_id: &str, frame: usize) -> Result<Image> {
        let path = self
            .manifest
            .frames
            .get(camera_id)
            .and_then(|f| f.get(frame))
            .ok_or_else(|| Error::Dataset(format!("no image for camera {camera_id} frame {frame}")))?;
        load_image(&self.root.join(path))
    }

    pub fn background(&self) -> Vector3<f64> {
        Vector3::from(self.manifest.background)
    }
}

fn channel_value(m: &ChannelMotion, t: f64) -> Result<Vector3<f64>> {
    let axis = Vector3::from(m.axis);
    let norm = axis.norm();
    if !(norm > 0.0) || !m.amplitude.is_finite() || !m.frequency.is_finite() || !m.phase.is_finite() {
        return Err(Error::Config(
            "motion channels need a nonzero axis and finite parameters".into(),
        ));
    }
    Ok(axis / norm * (m.amplitude * (2.0 * PI * m.frequency * t + m.phase).sin()))
}

/// Pose of the scripted motion at absolute time `t` seconds.
pub fn script_pose(skel: &Skeleton, script: &MotionScript, t: f64) -> Result<Pose> {
    let mut pose = Pose::zeros(skel.joint_count());
    for (name, m) in &script.joints {
        let j = skel
            .joint_index(name)
            .ok_or_else(|| Error::Config(format!("motion script names unknown joint `{name}`")))?;
        pose.channels[j] = channel_value(m, t)?;
    }
    if let Some(root) = &script.root {
        pose.channels[skel.joint_count()] = channel_value(root, t)?;
    }
    Ok(pose)
}

/// Absolute time of normalized exposure time `s` in frame `n`.
pub fn frame_time(n: usize, s: f64, exposure: f64) -> f64 {
    (n as f64 + s) * exposure
}

/// The ring of cameras, ids `cam00`, `cam01`, ...
pub fn rig_cameras(rig: &RigConfig) -> Vec<(String, Camera)> {
    let target = Vector3::from(rig.target);
    (0..rig.cameras)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / rig.cameras as f64;
            let eye = target + Vector3::new(rig.radius * az.sin(), rig.height, rig.radius * az.cos());
            let mut cam = Camera::look_at(eye, target, Vector3::y(), rig.focal, rig.width, rig.image_height);
            cam.near = rig.near;
            (format!("cam{i:02}"), cam)
        })
        .collect()
}

pub fn load_skeleton(cfg: &RunConfig) -> Result<Skeleton> {
    match &cfg.data.skeleton {
        Some(p) => Skeleton::load(p),
        None => Ok(Skeleton::stickman()),
    }
}

/// Ground-truth avatar: bone scales from the config, Gaussians seeded on
/// the scaled skeleton, zero skinning offsets.
pub fn ground_truth_avatar(cfg: &RunConfig, skeleton: Skeleton) -> Result<CanonicalAvatar> {
    let mut scales = vec![1.0; skeleton.joint_count()];
    for (name, s) in &cfg.data.shape_scales {
        let j = skeleton
            .joint_index(name)
            .ok_or_else(|| Error::Config(format!("data.shape_scales names unknown joint `{name}`")))?;
        if !(*s > 0.0) {
            return Err(Error::Config(format!("shape scale of `{name}` must be positive")));
        }
        scales[j] = *s;
    }
    let shape = ShapeParams::from_scales(&scales);
    let mut rng = rng_for(cfg.seed, streams::GT_AVATAR);
    let options = SeedOptions {
        density: cfg.data.gt_density,
        jitter: true,
    };
    let (gaussians, base) = seed_gaussians(&skeleton, &shape, options, &mut rng)?;
    let skin = SkinWeights::new(base, skeleton.joint_count(), SKIN_HIDDEN, &mut rng);
    Ok(CanonicalAvatar {
        skeleton,
        shape,
        gaussians,
        skin,
    })
}

/// Least-squares spline knots reproducing the script over each exposure,
/// sampled at the synthesis sub-frame times.
pub fn fit_spline(
    skel: &Skeleton,
    script: &MotionScript,
    frames: usize,
    exposure: f64,
    order: usize,
    samples: usize,
) -> Result<SplineBank> {
    let channels = skel.channel_count();
    let mut bank = SplineBank::new(frames, channels, order, KnotBasis::BSpline)?;
    let samples = samples.max(order).max(2);
    let times: Vec<f64> = (0..samples).map(|t| subframe_time(t, samples)).collect();
    let mut a = DMatrix::zeros(samples, order);
    for (r, s) in times.iter().enumerate() {
        for (c, w) in bank.weights(*s)?.iter().enumerate() {
            a[(r, c)] = *w;
        }
    }
    let normal = a.transpose() * &a;
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Parameter("spline fit is singular".into()))?;
    for n in 0..frames {
        let poses = times
            .iter()
            .map(|s| script_pose(skel, script, frame_time(n, *s, exposure)))
            .collect::<Result<Vec<_>>>()?;
        for j in 0..channels {
            for c in 0..3 {
                let b = DVector::from_iterator(samples, poses.iter().map(|p| p.channels[j][c]));
                let x = chol.solve(&(a.transpose() * b));
                for p in 0..order {
                    let i = bank.knot_index(n, j, p) + c;
                    bank.knots_mut()[i] = x[p];
                }
            }
        }
    }
    Ok(bank)
}

/// Ground-truth model: the true avatar, fitted splines and zero networks.
pub fn ground_truth_model(cfg: &RunConfig, skeleton: Skeleton) -> Result<Model> {
    let d = &cfg.data;
    let bank = fit_spline(
        &skeleton,
        &d.motion,
        d.frames,
        d.exposure,
        cfg.model.spline_order,
        d.subframes,
    )?;
    let avatar = ground_truth_avatar(cfg, skeleton)?;
    let mut rng = rng_for(cfg.seed, streams::GT_AVATAR);
    let net = NonRigidNet::new(NONRIGID_HIDDEN, cfg.model.nonrigid_scale, &mut rng);
    Ok(Model { avatar, bank, net })
}

/// Mid-exposure script poses plus seeded Gaussian noise.
pub fn coarse_poses(cfg: &RunConfig, skel: &Skeleton) -> Result<Vec<Pose>> {
    let d = &cfg.data;
    let mut rng = rng_for(cfg.seed, streams::POSE_NOISE);
    let rot = Normal::new(0.0, d.pose_noise_rotation).map_err(|e| Error::Config(e.to_string()))?;
    let trans = Normal::new(0.0, d.pose_noise_translation).map_err(|e| Error::Config(e.to_string()))?;
    let k = skel.joint_count();
    (0..d.frames)
        .map(|n| {
            let mut pose = script_pose(skel, &d.motion, frame_time(n, 0.5, d.exposure))?;
            for (j, c) in pose.channels.iter_mut().enumerate() {
                let dist = if j < k { &rot } else { &trans };
                for v in c.iter_mut() {
                    *v += dist.sample(&mut rng);
                }
            }
            Ok(pose)
        })
        .collect()
}

/// Sharp sub-frame renders of one exposure at `f32` precision, in time order.
pub fn blur_subframes(avatar: &CanonicalAvatar, cfg: &RunConfig, cam: &Camera, frame: usize) -> Result<Vec<Image>> {
    let d = &cfg.data;
    let bg = Vector3::from(cfg.model.background);
    (0..d.subframes)
        .into_par_iter()
        .map(|t| {
            let s = subframe_time(t, d.subframes);
            let pose = script_pose(&avatar.skeleton, &d.motion, frame_time(frame, s, d.exposure))?;
            Ok(render_posed(avatar, &pose, cam, &bg)?.quantize_f32())
        })
        .collect()
}

/// Blurry observation: the fixed-order mean of [`blur_subframes`], stored
/// at `f32` precision.
pub fn blurry_frame(subframes: &[Image]) -> Image {
    average_images(subframes).quantize_f32()
}

/// Sharp reference image at normalized time `s` of `frame`, at `f32`
/// precision. The middle timestep is rendered from the ground-truth model;
/// other times follow the motion script.
pub fn reference_image(
    gt: &Model,
    motion: &MotionScript,
    exposure: f64,
    background: &Vector3<f64>,
    cam: &Camera,
    frame: usize,
    s: f64,
) -> Result<Image> {
    let img = if s == 0.5 {
        render_sharp(&gt.avatar, &gt.bank, &gt.net, frame, s, cam, background)?
    } else {
        let pose = script_pose(&gt.avatar.skeleton, motion, frame_time(frame, s, exposure))?;
        render_posed(&gt.avatar, &pose, cam, background)?
    };
    Ok(img.quantize_f32())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Options that do not change the dataset content.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenerateOptions {
    /// Also dump every synthesis sub-frame as `<frame>_sub<t>.f32`.
    pub subframe_dumps: bool,
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    generate_with(cfg, out, GenerateOptions::default())
}

pub fn generate_with(cfg: &RunConfig, out: &Path, options: GenerateOptions) -> Result<Manifest> {
    cfg.validate()?;
    let skeleton = load_skeleton(cfg)?;
    skeleton.validate()?;
    let d = &cfg.data;
    let gt = ground_truth_model(cfg, skeleton.clone())?;
    let coarse = coarse_poses(cfg, &skeleton)?;
    let cams = rig_cameras(&cfg.rig);
    create_dir(out)?;

    let mut entries = Vec::new();
    let mut frames = BTreeMap::new();
    let mut jobs = Vec::new();
    for (i, (id, cam)) in cams.iter().enumerate() {
        let role = if cfg.rig.train_cameras.contains(&i) {
            CameraRole::TrainBlur
        } else {
            CameraRole::EvalSharp
        };
        entries.push(CameraEntry {
            id: id.clone(),
            role,
            camera: CameraSpec::from(cam),
        });
        create_dir(&out.join("images").join(id))?;
        let paths: Vec<String> = (0..d.frames).map(|n| format!("images/{id}/{n:04}.png")).collect();
        for (n, p) in paths.iter().enumerate() {
            jobs.push((role, cam, n, out.join(p)));
        }
        frames.insert(id.clone(), paths);
    }

    jobs.par_iter().try_for_each(|(role, cam, n, path)| -> Result<()> {
        let img = match role {
            CameraRole::TrainBlur => {
                let subs = blur_subframes(&gt.avatar, cfg, cam, *n)?;
                if options.subframe_dumps {
                    for (t, s) in subs.iter().enumerate() {
                        s.write_f32(&path.with_file_name(format!("{n:04}_sub{t:02}.f32")))?;
                    }
                }
                blurry_frame(&subs)
            }
            CameraRole::EvalSharp => reference_image(
                &gt,
                &d.motion,
                d.exposure,
                &Vector3::from(cfg.model.background),
                cam,
                *n,
                0.5,
            )?,
        };
        img.write_png(path)?;
        if d.float_dump {
            img.write_f32(&path.with_extension("f32"))?;
        }
        Ok(())
    })?;

    write_json(&out.join(SKELETON_FILE), &skeleton)?;
    let nested: Vec<Vec<[f64; 3]>> = coarse.iter().map(Pose::to_nested).collect();
    write_json(&out.join(COARSE_POSES_FILE), &nested)?;
    let adam = Adam::new(&gt);
    let ck = Checkpoint::capture(&gt, &adam, &DensityStats::new(gt.gaussian_count()), cfg, 0);
    ck.save(&out.join(GT_CHECKPOINT_FILE))?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        skeleton: SKELETON_FILE.into(),
        cameras: entries,
        frames,
        frame_count: d.frames,
        exposure: d.exposure,
        subframes: d.subframes,
        background: cfg.model.background,
        motion: d.motion.clone(),
        gt_checkpoint: GT_CHECKPOINT_FILE.into(),
        coarse_poses: COARSE_POSES_FILE.into(),
        seed: cfg.seed,
        float_dump: d.float_dump,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Directory name used for exposure `tau` inside a sweep.
pub fn sweep_dir_name(tau: f64) -> String {
    format!("tau_{tau:.3}")
}

/// One dataset per exposure duration, sharing everything else.
pub fn blur_magnitude_sweep(cfg: &RunConfig, exposures: &[f64], out: &Path) -> Result<Vec<(f64, PathBuf, Manifest)>> {
    if exposures.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Config("sweep exposures must be positive".into()));
    }
    exposures
        .iter()
        .map(|&tau| {
            let mut c = cfg.clone();
            c.data.exposure = tau;
            let dir = out.join(sweep_dir_name(tau));
            let m = generate(&c, &dir)?;
            Ok((tau, dir, m))
        })
        .collect()
}

/// Mean absolute difference between a blurry frame and the mid-exposure
/// sharp render of the same camera, averaged over frames.
pub fn blur_spread(cfg: &RunConfig, camera: &Camera) -> Result<f64> {
    let gt = ground_truth_model(cfg, load_skeleton(cfg)?)?;
    let bg = Vector3::from(cfg.model.background);
    let mut total = 0.0;
    for n in 0..cfg.data.frames {
        let blurry = blurry_frame(&blur_subframes(&gt.avatar, cfg, camera, n)?);
        let pose = script_pose(
            &gt.avatar.skeleton,
            &cfg.data.motion,
            frame_time(n, 0.5, cfg.data.exposure),
        )?;
        let sharp = render_posed(&gt.avatar, &pose, camera, &bg)?;
        total += crate::diffopt::photometric_loss(&blurry, &sharp, None)?;
    }
    Ok(total / cfg.data.frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.frames = 2;
        cfg.data.subframes = 5;
        cfg.data.gt_density = 30.0;
        cfg.rig.cameras = 3;
        cfg.rig.train_cameras = vec![0];
        cfg.rig.width = 32;
        cfg.rig.image_height = 32;
        cfg.rig.focal = 30.0;
        cfg
    }

    #[test]
    fn script_is_continuous_across_frames() {
        let cfg = RunConfig::default();
        let skel = Skeleton::stickman();
        for n in 0..5 {
            let end = script_pose(&skel, &cfg.data.motion, frame_time(n, 1.0, 0.2)).unwrap();
            let start = script_pose(&skel, &cfg.data.motion, frame_time(n + 1, 0.0, 0.2)).unwrap();
            assert_eq!(end, start);
        }
    }

    #[test]
    fn unknown_joint_in_script_is_config_error() {
        let mut script = MotionScript::default();
        script.joints.insert("tail".into(), script.joints["head"].clone());
        assert!(matches!(
            script_pose(&Skeleton::stickman(), &script, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rig_faces_target() {
        let cfg = RigConfig::default();
        for (_, cam) in rig_cameras(&cfg) {
            cam.validate().unwrap();
            let p = cam.to_camera(&Vector3::from(cfg.target));
            assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        }
    }

    #[test]
    fn spline_fit_tracks_script() {
        let cfg = RunConfig::default();
        let skel = Skeleton::stickman();
        let bank = fit_spline(&skel, &cfg.data.motion, 3, 0.2, 4, 33).unwrap();
        for n in 0..3 {
            for s in [0.0, 0.3, 0.5, 1.0] {
                let fit = bank.interpolate_pose(n, s).unwrap();
                let truth = script_pose(&skel, &cfg.data.motion, frame_time(n, s, 0.2)).unwrap();
                for (a, b) in fit.channels.iter().zip(&truth.channels) {
                    assert!((a - b).norm() < 1e-3, "{n} {s}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn coarse_noise_is_seeded() {
        let cfg = RunConfig::default();
        let skel = Skeleton::stickman();
        assert_eq!(coarse_poses(&cfg, &skel).unwrap(), coarse_poses(&cfg, &skel).unwrap());
        let mut quiet = cfg.clone();
        quiet.data.pose_noise_rotation = 0.0;
        quiet.data.pose_noise_translation = 0.0;
        let exact = coarse_poses(&quiet, &skel).unwrap();
        let truth = script_pose(&skel, &cfg.data.motion, frame_time(3, 0.5, cfg.data.exposure)).unwrap();
        assert_eq!(exact[3], truth);
    }

    #[test]
    fn static_script_blur_equals_sharp() {
        let mut cfg = small_cfg();
        cfg.data.motion = cfg.data.motion.scaled(0.0);
        let gt = ground_truth_avatar(&cfg, Skeleton::stickman()).unwrap();
        let (_, cam) = &rig_cameras(&cfg.rig)[0];
        let subs = blur_subframes(&gt, &cfg, cam, 1).unwrap();
        let blurry = blurry_frame(&subs);
        assert_eq!(blurry, subs[0]);
    }
}
