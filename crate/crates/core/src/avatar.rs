//! Canonical avatar: toy skeleton, shared bone-length shape, skinning
//! weights with a learned offset network, and the LBS warp of canonical
//! Gaussians into observation space.

use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, UnitBall};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Polar};
use crate::motion::Pose;
use crate::nn::{Mlp, MlpTrace};

/// Guards `log(w)` for zero base weights.
pub const SKIN_EPS: f64 = 1e-6;
pub const SKIN_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Offset from the parent joint in the rest pose, meters.
    pub rest_offset: [f64; 3],
    /// Radius used when seeding Gaussians on this joint's bone, meters.
    pub bone_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skeleton {
    pub name: String,
    pub joints: Vec<Joint>,
    /// RGB per joint, used to color Gaussians the joint controls.
    pub palette: Vec<[f64; 3]>,
}

impl Skeleton {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Number of pose channels: one per joint plus the root translation.
    pub fn channel_count(&self) -> usize {
        self.joints.len() + 1
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Structural("skeleton has no joints".into()));
        }
        if self.joints[0].parent.is_some() {
            return Err(Error::Structural("joint 0 must be the root".into()));
        }
        for (i, j) in self.joints.iter().enumerate().skip(1) {
            match j.parent {
                None => return Err(Error::Structural(format!("joint `{}` has no parent", j.name))),
                Some(p) if p >= i => {
                    return Err(Error::Structural(format!(
                        "joint `{}` has parent {p}, which does not precede it",
                        j.name
                    )))
                }
                _ => {}
            }
        }
        if self
            .joints
            .iter()
            .any(|j| !(j.bone_radius > 0.0) || j.rest_offset.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Structural(
                "bone radii must be positive and offsets finite".into(),
            ));
        }
        if self.palette.len() != self.joints.len() {
            return Err(Error::Structural(format!(
                "palette has {} colors for {} joints",
                self.palette.len(),
                self.joints.len()
            )));
        }
        Ok(())
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.joints
            .iter()
            .enumerate()
            .filter(move |(_, j)| j.parent == Some(joint))
            .map(|(i, _)| i)
    }

    fn offset(&self, j: usize) -> Vector3<f64> {
        Vector3::from(self.joints[j].rest_offset)
    }

    /// Rest-pose joint positions at unit shape: the canonical frame.
    pub fn rest_positions(&self) -> Vec<Vector3<f64>> {
        self.shaped_rest_positions(&vec![1.0; self.joints.len()])
    }

    fn shaped_rest_positions(&self, scales: &[f64]) -> Vec<Vector3<f64>> {
        let mut out: Vec<Vector3<f64>> = Vec::with_capacity(self.joints.len());
        for (i, j) in self.joints.iter().enumerate() {
            let base = j.parent.map(|p| out[p]).unwrap_or_else(Vector3::zeros);
            out.push(base + self.offset(i) * scales[i]);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let skel: Skeleton = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        skel.validate()?;
        Ok(skel)
    }

    /// Default eleven-joint stick figure, Y up, facing +Z, arms out.
    pub fn stickman() -> Self {
        let joint = |name: &str, parent: Option<usize>, off: [f64; 3], r: f64| Joint {
            name: name.into(),
            parent,
            rest_offset: off,
            bone_radius: r,
        };
        let joints = vec![
            joint("pelvis", None, [0.0, 0.0, 0.0], 0.07),
            joint("spine", Some(0), [0.0, 0.3, 0.0], 0.07),
            joint("head", Some(1), [0.0, 0.2, 0.0], 0.06),
            joint("l_shoulder", Some(1), [0.2, 0.0, 0.0], 0.05),
            joint("r_shoulder", Some(1), [-0.2, 0.0, 0.0], 0.05),
            joint("l_elbow", Some(3), [0.28, 0.0, 0.0], 0.05),
            joint("r_elbow", Some(4), [-0.28, 0.0, 0.0], 0.05),
            joint("l_hip", Some(0), [0.1, -0.05, 0.0], 0.06),
            joint("r_hip", Some(0), [-0.1, -0.05, 0.0], 0.06),
            joint("l_knee", Some(7), [0.0, -0.4, 0.0], 0.06),
            joint("r_knee", Some(8), [0.0, -0.4, 0.0], 0.06),
        ];
        let palette = vec![
            [0.85, 0.85, 0.85],
            [0.95, 0.80, 0.25],
            [0.95, 0.70, 0.55],
            [0.20, 0.55, 0.95],
            [0.95, 0.30, 0.25],
            [0.30, 0.85, 0.95],
            [0.95, 0.55, 0.20],
            [0.35, 0.75, 0.30],
            [0.65, 0.35, 0.85],
            [0.20, 0.45, 0.20],
            [0.45, 0.20, 0.60],
        ];
        Self {
            name: "stickman-11".into(),
            joints,
            palette,
        }
    }
}

/// Per-joint bone-length scales stored as logs; shared over all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub log_scales: Vec<f64>,
}

impl ShapeParams {
    pub fn unit(joint_count: usize) -> Self {
        Self {
            log_scales: vec![0.0; joint_count],
        }
    }

    pub fn from_scales(scales: &[f64]) -> Self {
        Self {
            log_scales: scales.iter().map(|s| s.ln()).collect(),
        }
    }

    pub fn scales(&self) -> Vec<f64> {
        self.log_scales.iter().map(|l| l.exp()).collect()
    }
}

/// Canonical Gaussians in structure-of-arrays layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    /// 3 per Gaussian, meters.
    pub means: Vec<f64>,
    /// Quaternion `(w, x, y, z)` per Gaussian, normalized on use.
    pub rotations: Vec<f64>,
    /// 3 per Gaussian; `exp(min(v, 0))` gives the axis scale in meters.
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    /// RGB per Gaussian in [0, 1].
    pub colors: Vec<f64>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn mean(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.means[3 * i], self.means[3 * i + 1], self.means[3 * i + 2])
    }

    pub fn rotation(&self, i: usize) -> Vector4<f64> {
        Vector4::new(
            self.rotations[4 * i],
            self.rotations[4 * i + 1],
            self.rotations[4 * i + 2],
            self.rotations[4 * i + 3],
        )
    }

    pub fn log_scale(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.log_scales[3 * i],
            self.log_scales[3 * i + 1],
            self.log_scales[3 * i + 2],
        )
    }

    /// Axis scales after the 1 m clamp.
    pub fn scale(&self, i: usize) -> Vector3<f64> {
        self.log_scale(i).map(|l| l.min(0.0).exp())
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn color(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.colors[3 * i], self.colors[3 * i + 1], self.colors[3 * i + 2])
    }

    pub fn push(
        &mut self,
        mean: Vector3<f64>,
        rotation: Vector4<f64>,
        log_scale: Vector3<f64>,
        opacity_logit: f64,
        color: Vector3<f64>,
    ) {
        self.means.extend_from_slice(mean.as_slice());
        self.rotations.extend_from_slice(rotation.as_slice());
        self.log_scales.extend_from_slice(log_scale.as_slice());
        self.opacity_logits.push(opacity_logit);
        self.colors.extend_from_slice(color.as_slice());
    }

    /// Canonical covariance `R S S^T R^T`.
    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        let r = geometry::quaternion_to_rotation(&self.rotation(i));
        let s2 = self.scale(i).map(|s| s * s);
        r * Matrix3::from_diagonal(&s2) * r.transpose()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Base skinning weights plus the offset network `mean -> logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    /// `K` simplex weights per Gaussian.
    pub base: Vec<f64>,
    pub offset_net: Mlp,
}

impl SkinWeights {
    pub fn new<R: Rng>(base: Vec<f64>, joint_count: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            base,
            offset_net: Mlp::new_zero_output(&[3, hidden, hidden, joint_count], rng),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.offset_net.output_size()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalAvatar {
    pub skeleton: Skeleton,
    pub shape: ShapeParams,
    pub gaussians: GaussianSet,
    pub skin: SkinWeights,
}

/// Effective skinning weights `softmax(log(base + eps) + offset(mean))`,
/// `K` per Gaussian.
pub fn effective_weights(skin: &SkinWeights, gaussians: &GaussianSet) -> Vec<f64> {
    effective_weights_traced(skin, gaussians).0
}

pub struct SkinTrace {
    traces: Vec<MlpTrace>,
}

pub fn effective_weights_traced(skin: &SkinWeights, gaussians: &GaussianSet) -> (Vec<f64>, SkinTrace) {
    let k = skin.joint_count();
    let mut out = Vec::with_capacity(gaussians.len() * k);
    let mut traces = Vec::with_capacity(gaussians.len());
    for i in 0..gaussians.len() {
        let trace = skin.offset_net.forward_traced(&gaussians.means[3 * i..3 * i + 3]);
        let logits: Vec<f64> = (0..k)
            .map(|j| (skin.base[i * k + j] + SKIN_EPS).ln() + trace.output()[j])
            .collect();
        out.extend(softmax(&logits));
        traces.push(trace);
    }
    (out, SkinTrace { traces })
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Back-propagates a gradient on effective weights into the offset network
/// and the canonical means.
pub fn effective_weights_backward(
    skin: &SkinWeights,
    weights: &[f64],
    trace: &SkinTrace,
    grad_weights: &[f64],
    grad_net: &mut [f64],
    grad_means: &mut [f64],
) {
    let k = skin.joint_count();
    for (i, t) in trace.traces.iter().enumerate() {
        let w = &weights[i * k..(i + 1) * k];
        let g = &grad_weights[i * k..(i + 1) * k];
        let dot: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
        let dz: Vec<f64> = w.iter().zip(g).map(|(wi, gi)| wi * (gi - dot)).collect();
        let dm = skin.offset_net.backward(t, &dz, grad_net);
        for c in 0..3 {
            grad_means[3 * i + c] += dm[c];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Result of forward kinematics.
#[derive(Debug, Clone)]
pub struct Kinematics {
    /// World transform of each joint frame.
    pub posed: Vec<RigidTransform>,
    /// `posed[j] * rest[j]^-1`: maps canonical points to observation space.
    pub skinning: Vec<RigidTransform>,
    local: Vec<Matrix3<f64>>,
    scales: Vec<f64>,
    rest: Vec<Vector3<f64>>,
}

pub fn forward_kinematics(skel: &Skeleton, shape: &ShapeParams, pose: &Pose) -> Result<Kinematics> {
    let k = skel.joint_count();
    if pose.channels.len() != k + 1 {
        return Err(Error::Parameter(format!(
            "pose has {} channels, skeleton needs {}",
            pose.channels.len(),
            k + 1
        )));
    }
    if shape.log_scales.len() != k {
        return Err(Error::Parameter("shape size does not match skeleton".into()));
    }
    let scales = shape.scales();
    let rest = skel.rest_positions();
    let mut posed: Vec<RigidTransform> = Vec::with_capacity(k);
    let mut local = Vec::with_capacity(k);
    for (j, joint) in skel.joints.iter().enumerate() {
        let rot = geometry::axis_angle_to_rotation(pose.joint(j));
        let offset = skel.offset(j) * scales[j];
        let t = match joint.parent {
            None => RigidTransform {
                rotation: rot,
                translation: pose.root_translation() + offset,
            },
            Some(p) if p < j => {
                let parent = posed[p];
                RigidTransform {
                    rotation: parent.rotation * rot,
                    translation: parent.translation + parent.rotation * offset,
                }
            }
            Some(p) => {
                return Err(Error::Structural(format!(
                    "joint {j} has parent {p} that does not precede it"
                )))
            }
        };
        if j > 0 && joint.parent.is_none() {
            return Err(Error::Structural(format!("joint {j} is a second root")));
        }
        local.push(rot);
        posed.push(t);
    }
    let skinning = posed
        .iter()
        .zip(&rest)
        .map(|(t, a)| RigidTransform {
            rotation: t.rotation,
            translation: t.translation - t.rotation * a,
        })
        .collect();
    Ok(Kinematics {
        posed,
        skinning,
        local,
        scales,
        rest,
    })
}

/// Gradients of forward kinematics with respect to pose channels and
/// shape log-scales, given gradients on the skinning transforms.
pub fn forward_kinematics_backward(
    skel: &Skeleton,
    pose: &Pose,
    kin: &Kinematics,
    grad_rot: &[Matrix3<f64>],
    grad_trans: &[Vector3<f64>],
) -> (Vec<Vector3<f64>>, Vec<f64>) {
    let k = skel.joint_count();
    // skinning: R = Rw, t = p - Rw a
    let mut d_rw: Vec<Matrix3<f64>> = (0..k)
        .map(|j| grad_rot[j] - grad_trans[j] * kin.rest[j].transpose())
        .collect();
    let mut d_p: Vec<Vector3<f64>> = grad_trans.to_vec();
    let mut d_pose = vec![Vector3::zeros(); k + 1];
    let mut d_log_shape = vec![0.0; k];
    for j in (0..k).rev() {
        let offset = skel.offset(j);
        let s = kin.scales[j];
        let d_local = match skel.joints[j].parent {
            None => {
                d_pose[k] += d_p[j];
                d_log_shape[j] = d_p[j].dot(&offset) * s;
                d_rw[j]
            }
            Some(p) => {
                let parent_rot = kin.posed[p].rotation;
                let dr = d_rw[j];
                let dp = d_p[j];
                d_rw[p] += dr * kin.local[j].transpose() + dp * (offset * s).transpose();
                d_p[p] += dp;
                d_log_shape[j] = dp.dot(&(parent_rot * offset)) * s;
                parent_rot.transpose() * dr
            }
        };
        d_pose[j] = geometry::axis_angle_vjp(pose.joint(j), &d_local);
    }
    (d_pose, d_log_shape)
}

/// Gaussians in observation space, ready for projection.
#[derive(Debug, Clone, Default)]
pub struct PosedGaussians {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    /// Opacity after the sigmoid, in (0, 1).
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl PosedGaussians {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Orientation transport decision for one Gaussian.
#[derive(Debug, Clone, Copy)]
enum Transport {
    Polar(Polar),
    /// Blended rotation was degenerate; the dominant joint's rotation is used.
    Dominant(usize),
}

#[derive(Debug, Clone)]
pub struct WarpTrace {
    transport: Vec<Transport>,
    rotation: Vec<Matrix3<f64>>,
    canonical_rot: Vec<Matrix3<f64>>,
    canonical_cov: Vec<Matrix3<f64>>,
}

/// Warps every canonical Gaussian through the skinning transforms.
pub fn warp_gaussians(avatar: &CanonicalAvatar, kin: &Kinematics) -> PosedGaussians {
    let weights = effective_weights(&avatar.skin, &avatar.gaussians);
    warp_with_weights(&avatar.gaussians, &weights, kin).0
}

pub fn warp_with_weights(gaussians: &GaussianSet, weights: &[f64], kin: &Kinematics) -> (PosedGaussians, WarpTrace) {
    let n = gaussians.len();
    let k = kin.skinning.len();
    let mut posed = PosedGaussians {
        means: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
    };
    let mut trace = WarpTrace {
        transport: Vec::with_capacity(n),
        rotation: Vec::with_capacity(n),
        canonical_rot: Vec::with_capacity(n),
        canonical_cov: Vec::with_capacity(n),
    };
    for i in 0..n {
        let w = &weights[i * k..(i + 1) * k];
        let mu = gaussians.mean(i);
        let mut mean = Vector3::zeros();
        let mut blend = Matrix3::zeros();
        for (wk, t) in w.iter().zip(&kin.skinning) {
            mean += (t.rotation * mu + t.translation) * *wk;
            blend += t.rotation * *wk;
        }
        let (transport, rot) = match geometry::polar_decompose(&blend) {
            Some(p) => (Transport::Polar(p), p.rotation),
            None => {
                let dominant = argmax(w);
                log::warn!("degenerate blended rotation for Gaussian {i}; using joint {dominant}");
                (Transport::Dominant(dominant), kin.skinning[dominant].rotation)
            }
        };
        let r_q = geometry::quaternion_to_rotation(&gaussians.rotation(i));
        let s2 = gaussians.scale(i).map(|s| s * s);
        let cov_c = r_q * Matrix3::from_diagonal(&s2) * r_q.transpose();
        posed.means.push(mean);
        posed.covariances.push(rot * cov_c * rot.transpose());
        posed.opacities.push(gaussians.opacity(i));
        posed.colors.push(gaussians.color(i));
        trace.transport.push(transport);
        trace.rotation.push(rot);
        trace.canonical_rot.push(r_q);
        trace.canonical_cov.push(cov_c);
    }
    (posed, trace)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// Gradients on posed Gaussians, laid out like [`PosedGaussians`].
#[derive(Debug, Clone)]
pub struct PosedGrads {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl PosedGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vector3::zeros(); n],
            covariances: vec![Matrix3::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![Vector3::zeros(); n],
        }
    }
}

/// Gradients produced by [`warp_backward`].
#[derive(Debug, Clone)]
pub struct WarpGrads {
    pub means: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<f64>,
    pub weights: Vec<f64>,
    pub skin_rot: Vec<Matrix3<f64>>,
    pub skin_trans: Vec<Vector3<f64>>,
}

pub fn warp_backward(
    gaussians: &GaussianSet,
    weights: &[f64],
    kin: &Kinematics,
    trace: &WarpTrace,
    grad: &PosedGrads,
) -> WarpGrads {
    let n = gaussians.len();
    let k = kin.skinning.len();
    let mut out = WarpGrads {
        means: vec![0.0; 3 * n],
        rotations: vec![0.0; 4 * n],
        log_scales: vec![0.0; 3 * n],
        opacity_logits: vec![0.0; n],
        colors: vec![0.0; 3 * n],
        weights: vec![0.0; n * k],
        skin_rot: vec![Matrix3::zeros(); k],
        skin_trans: vec![Vector3::zeros(); k],
    };
    for i in 0..n {
        let w = &weights[i * k..(i + 1) * k];
        let mu = gaussians.mean(i);
        let d_mean = grad.means[i];
        let d_cov = grad.covariances[i];
        let rot = trace.rotation[i];
        let cov_c = trace.canonical_cov[i];

        // cov' = R cov_c R^T
        let d_rot = d_cov * rot * cov_c.transpose() + d_cov.transpose() * rot * cov_c;
        let d_cov_c = rot.transpose() * d_cov * rot;

        // cov_c = Rq S^2 Rq^T
        let r_q = trace.canonical_rot[i];
        let ls = gaussians.log_scale(i);
        let s2 = gaussians.scale(i).map(|s| s * s);
        let s2m = Matrix3::from_diagonal(&s2);
        let d_rq = d_cov_c * r_q * s2m + d_cov_c.transpose() * r_q * s2m;
        let d_s2 = r_q.transpose() * d_cov_c * r_q;
        for c in 0..3 {
            if ls[c] < 0.0 {
                out.log_scales[3 * i + c] += d_s2[(c, c)] * 2.0 * s2[c];
            }
        }
        let dq = geometry::quaternion_vjp(&gaussians.rotation(i), &d_rq);
        for c in 0..4 {
            out.rotations[4 * i + c] += dq[c];
        }

        // Orientation transport.
        match trace.transport[i] {
            Transport::Polar(p) => {
                let d_blend = geometry::polar_vjp(&p, &d_rot);
                for j in 0..k {
                    out.skin_rot[j] += d_blend * w[j];
                    out.weights[i * k + j] += d_blend.component_mul(&kin.skinning[j].rotation).sum();
                }
            }
            Transport::Dominant(j) => out.skin_rot[j] += d_rot,
        }

        // mean' = sum_k w_k (R_k mu + t_k)
        let mut d_mu = Vector3::zeros();
        for j in 0..k {
            let t = &kin.skinning[j];
            d_mu += t.rotation.transpose() * d_mean * w[j];
            out.skin_rot[j] += d_mean * mu.transpose() * w[j];
            out.skin_trans[j] += d_mean * w[j];
            out.weights[i * k + j] += d_mean.dot(&(t.rotation * mu + t.translation));
        }
        for c in 0..3 {
            out.means[3 * i + c] += d_mu[c];
            out.colors[3 * i + c] += grad.colors[i][c];
        }
        let o = grad.opacities[i];
        let p = gaussians.opacity(i);
        out.opacity_logits[i] += o * p * (1.0 - p);
    }
    out
}

/// Bone segment in canonical space, with the joint whose rotation moves it.
#[derive(Debug, Clone, Copy)]
pub struct Bone {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub joint: usize,
    pub radius: f64,
}

/// Bones driven by each joint: one from every parent to child, plus a tip
/// segment continuing past each leaf joint. Endpoints are scaled by `scales`.
fn bones(skel: &Skeleton, scales: &[f64]) -> Vec<Bone> {
    let rest = skel.shaped_rest_positions(scales);
    let mut out = Vec::new();
    for (j, joint) in skel.joints.iter().enumerate() {
        if let Some(p) = joint.parent {
            out.push(Bone {
                start: rest[p],
                end: rest[j],
                joint: p,
                radius: joint.bone_radius,
            });
        }
        if j > 0 && skel.children(j).next().is_none() {
            let dir = skel.offset(j) * scales[j];
            out.push(Bone {
                start: rest[j],
                end: rest[j] + dir,
                joint: j,
                radius: joint.bone_radius,
            });
        }
    }
    out
}

/// Canonical bones at unit shape.
pub fn canonical_bones(skel: &Skeleton) -> Vec<Bone> {
    bones(skel, &vec![1.0; skel.joint_count()])
}

pub fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// Base weights from inverse distance to the two nearest canonical bones.
pub fn inverse_distance_weights(skel: &Skeleton, bones: &[Bone], p: &Vector3<f64>) -> Vec<f64> {
    let mut dist: Vec<(f64, usize)> = bones
        .iter()
        .map(|b| (point_segment_distance(p, &b.start, &b.end), b.joint))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut w = vec![0.0; skel.joint_count()];
    for (d, j) in dist.iter().take(2) {
        w[*j] += 1.0 / (d + SKIN_EPS);
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Seeding controls for [`seed_gaussians`].
#[derive(Debug, Clone, Copy)]
pub struct SeedOptions {
    /// Gaussians per meter of bone.
    pub density: f64,
    pub jitter: bool,
}

/// Samples Gaussians along every bone of the skeleton at the given shape and
/// returns them in canonical coordinates with base skinning weights.
pub fn seed_gaussians<R: Rng>(
    skel: &Skeleton,
    shape: &ShapeParams,
    options: SeedOptions,
    rng: &mut R,
) -> Result<(GaussianSet, Vec<f64>)> {
    if !(options.density > 0.0) {
        return Err(Error::Parameter(format!(
            "seeding density {} must be positive",
            options.density
        )));
    }
    skel.validate()?;
    let scales = shape.scales();
    let shaped = skel.shaped_rest_positions(&scales);
    let rest = skel.rest_positions();
    let canon = canonical_bones(skel);
    let mut set = GaussianSet::default();
    let mut base = Vec::new();
    let identity = Vector4::new(1.0, 0.0, 0.0, 0.0);
    for bone in bones(skel, &scales) {
        let length = (bone.end - bone.start).norm();
        let count = (length * options.density).floor() as usize;
        // shaped rest -> canonical for the controlling joint
        let to_canonical = rest[bone.joint] - shaped[bone.joint];
        let color = Vector3::from(skel.palette[bone.joint]);
        let log_scale = Vector3::repeat((bone.radius * 0.5).ln());
        for c in 0..count {
            let t = (c as f64 + 0.5) / count as f64;
            let mut p = bone.start + (bone.end - bone.start) * t;
            if options.jitter {
                let v: [f64; 3] = UnitBall.sample(rng);
                p += Vector3::from(v) * bone.radius;
            }
            let p = p + to_canonical;
            base.extend(inverse_distance_weights(skel, &canon, &p));
            set.push(p, identity, log_scale, 0.0, color);
        }
    }
    Ok((set, base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn chain() -> Skeleton {
        Skeleton {
            name: "chain".into(),
            joints: vec![
                Joint {
                    name: "root".into(),
                    parent: None,
                    rest_offset: [0.0; 3],
                    bone_radius: 0.05,
                },
                Joint {
                    name: "child".into(),
                    parent: Some(0),
                    rest_offset: [1.0, 0.0, 0.0],
                    bone_radius: 0.05,
                },
            ],
            palette: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    fn avatar(seed: u64) -> CanonicalAvatar {
        let skel = Skeleton::stickman();
        let shape = ShapeParams::unit(skel.joint_count());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gaussians, base) = seed_gaussians(
            &skel,
            &shape,
            SeedOptions {
                density: 30.0,
                jitter: true,
            },
            &mut rng,
        )
        .unwrap();
        let skin = SkinWeights::new(base, skel.joint_count(), SKIN_HIDDEN, &mut rng);
        CanonicalAvatar {
            skeleton: skel,
            shape,
            gaussians,
            skin,
        }
    }

    fn random_pose(k: usize, rng: &mut impl Rng) -> Pose {
        Pose {
            channels: (0..=k)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn stickman_is_valid() {
        let s = Skeleton::stickman();
        s.validate().unwrap();
        assert_eq!(s.joint_count(), 11);
    }

    #[test]
    fn cyclic_parent_rejected() {
        let mut s = chain();
        s.joints[1].parent = Some(1);
        assert!(matches!(s.validate(), Err(Error::Structural(_))));
    }

    #[test]
    fn zero_pose_gives_identity_skinning() {
        let s = Skeleton::stickman();
        let kin = forward_kinematics(&s, &ShapeParams::unit(11), &Pose::zeros(11)).unwrap();
        for t in &kin.skinning {
            assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-15);
            assert!(t.translation.norm() < 1e-15);
        }
    }

    #[test]
    fn child_position_ignores_child_rotation() {
        let s = chain();
        let mut pose = Pose::zeros(2);
        pose.channels[1] = Vector3::new(0.3, 1.2, -0.4);
        pose.channels[2] = Vector3::new(0.5, -0.25, 2.0);
        let kin = forward_kinematics(&s, &ShapeParams::unit(2), &pose).unwrap();
        assert!((kin.posed[1].translation - Vector3::new(1.5, -0.25, 2.0)).norm() < 1e-15);
    }

    #[test]
    fn root_quarter_turn_moves_child() {
        let s = chain();
        let mut pose = Pose::zeros(2);
        pose.channels[0] = Vector3::new(0.0, 0.0, PI / 2.0);
        pose.channels[2] = Vector3::new(0.1, 0.2, 0.3);
        let kin = forward_kinematics(&s, &ShapeParams::unit(2), &pose).unwrap();
        assert!((kin.posed[1].translation - Vector3::new(0.1, 1.2, 0.3)).norm() < 1e-12);
    }

    #[test]
    fn doubling_leaf_scale_doubles_bone() {
        let s = Skeleton::stickman();
        let leaf = s.joint_index("l_elbow").unwrap();
        let parent = s.joints[leaf].parent.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = random_pose(11, &mut rng);
        let mut shape = ShapeParams::unit(11);
        let kin1 = forward_kinematics(&s, &shape, &pose).unwrap();
        shape.log_scales[leaf] = 2.0f64.ln();
        let kin2 = forward_kinematics(&s, &shape, &pose).unwrap();
        let d1 = (kin1.posed[leaf].translation - kin1.posed[parent].translation).norm();
        let d2 = (kin2.posed[leaf].translation - kin2.posed[parent].translation).norm();
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn fk_rotations_are_proper() {
        let s = Skeleton::stickman();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let kin = forward_kinematics(&s, &ShapeParams::unit(11), &random_pose(11, &mut rng)).unwrap();
            for t in &kin.posed {
                let r = t.rotation;
                assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-10);
                assert!((r.determinant() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fk_backward_matches_finite_differences() {
        let s = Skeleton::stickman();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pose = random_pose(11, &mut rng);
        let mut shape = ShapeParams::unit(11);
        shape
            .log_scales
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.2..0.2));
        let g_rot: Vec<Matrix3<f64>> = (0..11)
            .map(|_| Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let g_tr: Vec<Vector3<f64>> = (0..11)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let objective = |pose: &Pose, shape: &ShapeParams| {
            let kin = forward_kinematics(&s, shape, pose).unwrap();
            kin.skinning
                .iter()
                .enumerate()
                .map(|(j, t)| t.rotation.component_mul(&g_rot[j]).sum() + t.translation.dot(&g_tr[j]))
                .sum::<f64>()
        };
        let kin = forward_kinematics(&s, &shape, &pose).unwrap();
        let (d_pose, d_shape) = forward_kinematics_backward(&s, &pose, &kin, &g_rot, &g_tr);
        let h = 1e-6;
        for j in 0..12 {
            for c in 0..3 {
                let mut pp = pose.clone();
                pp.channels[j][c] += h;
                let mut pm = pose.clone();
                pm.channels[j][c] -= h;
                let num = (objective(&pp, &shape) - objective(&pm, &shape)) / (2.0 * h);
                assert!(
                    (num - d_pose[j][c]).abs() < 1e-6,
                    "pose {j},{c}: {num} vs {}",
                    d_pose[j][c]
                );
            }
        }
        for j in 0..11 {
            let mut sp = shape.clone();
            sp.log_scales[j] += h;
            let mut sm = shape.clone();
            sm.log_scales[j] -= h;
            let num = (objective(&pose, &sp) - objective(&pose, &sm)) / (2.0 * h);
            assert!((num - d_shape[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_warp_preserves_canonical_gaussians() {
        let a = avatar(1);
        let kin = forward_kinematics(&a.skeleton, &a.shape, &Pose::zeros(11)).unwrap();
        let posed = warp_gaussians(&a, &kin);
        for i in 0..a.gaussians.len() {
            assert!((posed.means[i] - a.gaussians.mean(i)).amax() < 1e-12);
            assert!((posed.covariances[i] - a.gaussians.covariance(i)).amax() < 1e-12);
        }
    }

    #[test]
    fn one_hot_weights_warp_rigidly() {
        let a = avatar(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kin = forward_kinematics(&a.skeleton, &a.shape, &random_pose(11, &mut rng)).unwrap();
        let n = a.gaussians.len();
        let mut w = vec![0.0; n * 11];
        for i in 0..n {
            w[i * 11 + 3] = 1.0;
        }
        let (posed, _) = warp_with_weights(&a.gaussians, &w, &kin);
        let t = &kin.skinning[3];
        for i in 0..n {
            assert!((posed.means[i] - t.apply(&a.gaussians.mean(i))).amax() < 1e-12);
        }
        for i in 0..n.min(30) {
            for j in 0..n.min(30) {
                let d0 = (a.gaussians.mean(i) - a.gaussians.mean(j)).norm();
                let d1 = (posed.means[i] - posed.means[j]).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn equal_weight_translations_average() {
        let s = chain();
        let kin = Kinematics {
            posed: vec![RigidTransform::identity(); 2],
            skinning: vec![
                RigidTransform {
                    rotation: Matrix3::identity(),
                    translation: Vector3::new(1.0, 0.0, 0.0),
                },
                RigidTransform {
                    rotation: Matrix3::identity(),
                    translation: Vector3::new(0.0, 2.0, -4.0),
                },
            ],
            local: vec![Matrix3::identity(); 2],
            scales: vec![1.0; 2],
            rest: s.rest_positions(),
        };
        let mut g = GaussianSet::default();
        g.push(
            Vector3::new(0.3, 0.4, 0.5),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::repeat(-3.0),
            0.0,
            Vector3::zeros(),
        );
        let (posed, _) = warp_with_weights(&g, &[0.5, 0.5], &kin);
        assert!((posed.means[0] - Vector3::new(0.8, 1.4, -1.5)).norm() < 1e-15);
    }

    #[test]
    fn opposed_rotations_fall_back_to_dominant_joint() {
        let s = chain();
        let flip = geometry::axis_angle_to_rotation(&Vector3::new(0.0, 0.0, PI));
        let kin = Kinematics {
            posed: vec![RigidTransform::identity(); 2],
            skinning: vec![
                RigidTransform {
                    rotation: Matrix3::identity(),
                    translation: Vector3::zeros(),
                },
                RigidTransform {
                    rotation: flip,
                    translation: Vector3::zeros(),
                },
            ],
            local: vec![Matrix3::identity(); 2],
            scales: vec![1.0; 2],
            rest: s.rest_positions(),
        };
        let mut g = GaussianSet::default();
        g.push(
            Vector3::zeros(),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::new(-1.0, -2.0, -3.0),
            0.0,
            Vector3::zeros(),
        );
        let (posed, _) = warp_with_weights(&g, &[0.45, 0.55], &kin);
        let expected = flip * g.covariance(0) * flip.transpose();
        assert!((posed.covariances[0] - expected).amax() < 1e-15);
    }

    #[test]
    fn effective_weights_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = GaussianSet::default();
        g.push(
            Vector3::new(0.1, 0.2, 0.3),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::zeros(),
            0.0,
            Vector3::zeros(),
        );
        let skin = SkinWeights::new(vec![1.0, 0.0, 0.0, 0.0], 4, 8, &mut rng);
        let w = effective_weights(&skin, &g);
        assert!((w[0] - 1.0).abs() < 1e-5);

        // Uniform base weights with a log-2 offset on joint 0 give a 2:1 ratio.
        let mut skin = SkinWeights::new(vec![0.25; 4], 4, 8, &mut rng);
        let n = skin.offset_net.params().len();
        skin.offset_net.params_mut()[n - 4] = 2.0f64.ln();
        let w = effective_weights(&skin, &g);
        assert!((w[0] / w[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn effective_weights_stay_on_simplex() {
        let mut a = avatar(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in a.skin.offset_net.params_mut() {
            *p += rng.random_range(-2.0..2.0);
        }
        let w = effective_weights(&a.skin, &a.gaussians);
        for row in w.chunks(11) {
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn seeding_counts_and_simplex() {
        let s = chain();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut short = s.clone();
        short.joints[1].rest_offset = [0.25, 0.0, 0.0];
        let (g, base) = seed_gaussians(
            &short,
            &ShapeParams::unit(2),
            SeedOptions {
                density: 100.0,
                jitter: true,
            },
            &mut rng,
        )
        .unwrap();
        // bone root->child plus the child's tip segment, 25 each
        assert_eq!(g.len(), 50);
        for row in base.chunks(2) {
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(seed_gaussians(
            &s,
            &ShapeParams::unit(2),
            SeedOptions {
                density: 0.0,
                jitter: true
            },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn unjittered_seeds_lie_on_bones() {
        let s = Skeleton::stickman();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (g, _) = seed_gaussians(
            &s,
            &ShapeParams::unit(11),
            SeedOptions {
                density: 50.0,
                jitter: false,
            },
            &mut rng,
        )
        .unwrap();
        let bones = canonical_bones(&s);
        for i in 0..g.len() {
            let d = bones
                .iter()
                .map(|b| point_segment_distance(&g.mean(i), &b.start, &b.end))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-12);
        }
    }
}
