//! Sub-frame pose trajectories.
//!
//! Each exposure frame owns `P` control knots per pose channel. A pose at
//! normalized time `s in [0, 1]` inside the exposure is `B(s) * M * knots`,
//! where `B(s) = [1, s, .., s^(P-1)]` and `M` is the uniform B-spline
//! matrix of order `P`. Channels `0..K` are joint axis-angles (radians);
//! the last channel is the root translation (meters).

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpTrace};

pub const MAX_ORDER: usize = 8;

/// Uniform B-spline basis matrix of order `P`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpMatrix {
    order: usize,
    entries: Vec<f64>,
}

impl InterpMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.order + col]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Row vector `b * M`.
    pub fn apply_row(&self, b: &[f64]) -> Vec<f64> {
        let p = self.order;
        (0..p)
            .map(|j| (0..p).map(|i| b[i] * self.entries[i * p + j]).sum())
            .collect()
    }
}

fn binomial(n: i128, k: i128) -> i128 {
    if k < 0 || k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Integer numerators of the basis matrix; entries are these over `(P-1)!`.
pub(crate) fn interpolation_numerators(order: usize) -> Vec<i128> {
    let p = order as i128;
    let mut out = Vec::with_capacity(order * order);
    for i in 0..p {
        for j in 0..p {
            let sum: i128 = (j..p)
                .map(|s| {
                    let sign = if (s - j) % 2 == 0 { 1 } else { -1 };
                    sign * binomial(p, s - j) * (p - s - 1).pow((p - 1 - i) as u32)
                })
                .sum();
            out.push(binomial(p - 1, p - 1 - i) * sum);
        }
    }
    out
}

pub fn interpolation_matrix(order: usize) -> Result<InterpMatrix> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::Parameter(format!(
            "spline order {order} outside 1..={MAX_ORDER}"
        )));
    }
    let factorial: i128 = (1..order as i128).product();
    let entries = interpolation_numerators(order)
        .into_iter()
        .map(|n| n as f64 / factorial as f64)
        .collect();
    Ok(InterpMatrix { order, entries })
}

/// Power basis `[1, s, s^2, .., s^(P-1)]`.
pub fn timestep_basis(s: f64, order: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Parameter(format!("normalized time {s} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(order);
    let mut v = 1.0;
    for _ in 0..order {
        out.push(v);
        v *= s;
    }
    Ok(out)
}

/// Normalized time of sub-frame `t` out of `count`; a single sub-frame sits
/// at the start of the exposure.
pub fn subframe_time(t: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        t as f64 / (count - 1) as f64
    }
}

/// How knot weights are derived from normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnotBasis {
    /// Uniform B-spline of order `P`.
    BSpline,
    /// One independent pose per knot, placed at `s = p / (P-1)`, linearly
    /// interpolated in between.
    PiecewiseLinear,
}

/// Pose for every channel: `K` joint axis-angles followed by root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub channels: Vec<Vector3<f64>>,
}

impl Pose {
    pub fn zeros(joint_count: usize) -> Self {
        Self {
            channels: vec![Vector3::zeros(); joint_count + 1],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn joint(&self, j: usize) -> &Vector3<f64> {
        &self.channels[j]
    }

    pub fn root_translation(&self) -> &Vector3<f64> {
        self.channels.last().unwrap()
    }

    pub fn to_nested(&self) -> Vec<[f64; 3]> {
        self.channels.iter().map(|c| [c.x, c.y, c.z]).collect()
    }

    pub fn from_nested(channels: &[[f64; 3]]) -> Self {
        Self {
            channels: channels.iter().map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
        }
    }
}

/// Control knots for every exposure frame and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBank {
    frames: usize,
    channels: usize,
    order: usize,
    basis: KnotBasis,
    matrix: InterpMatrix,
    knots: Vec<f64>,
}

impl SplineBank {
    pub fn new(frames: usize, channels: usize, order: usize, basis: KnotBasis) -> Result<Self> {
        let matrix = match basis {
            KnotBasis::BSpline => interpolation_matrix(order)?,
            KnotBasis::PiecewiseLinear => {
                if order == 0 {
                    return Err(Error::Parameter("knot count must be at least 1".into()));
                }
                // Unused for this basis; keep a valid identity placeholder.
                InterpMatrix {
                    order,
                    entries: (0..order * order)
                        .map(|k| if k / order == k % order { 1.0 } else { 0.0 })
                        .collect(),
                }
            }
        };
        if frames == 0 || channels == 0 {
            return Err(Error::Parameter("spline bank needs frames and channels".into()));
        }
        Ok(Self {
            frames,
            channels,
            order,
            basis,
            matrix,
            knots: vec![0.0; frames * channels * order * 3],
        })
    }

    /// Every knot of frame `n` set to `poses[n]`, so each frame starts as a
    /// constant trajectory.
    pub fn constant(poses: &[Pose], order: usize, basis: KnotBasis) -> Result<Self> {
        let channels = poses
            .first()
            .ok_or_else(|| Error::Parameter("no poses".into()))?
            .channels
            .len();
        let mut bank = Self::new(poses.len(), channels, order, basis)?;
        for (n, pose) in poses.iter().enumerate() {
            if pose.channels.len() != channels {
                return Err(Error::Parameter("poses disagree on channel count".into()));
            }
            for (j, c) in pose.channels.iter().enumerate() {
                for p in 0..order {
                    bank.set_knot(n, j, p, c);
                }
            }
        }
        Ok(bank)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn basis(&self) -> KnotBasis {
        self.basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn knots_mut(&mut self) -> &mut [f64] {
        &mut self.knots
    }

    pub fn knot_index(&self, frame: usize, channel: usize, knot: usize) -> usize {
        ((frame * self.channels + channel) * self.order + knot) * 3
    }

    pub fn knot(&self, frame: usize, channel: usize, knot: usize) -> Vector3<f64> {
        let i = self.knot_index(frame, channel, knot);
        Vector3::new(self.knots[i], self.knots[i + 1], self.knots[i + 2])
    }

    pub fn set_knot(&mut self, frame: usize, channel: usize, knot: usize, v: &Vector3<f64>) {
        let i = self.knot_index(frame, channel, knot);
        self.knots[i..i + 3].copy_from_slice(v.as_slice());
    }

    /// Blending weight of each knot at normalized time `s`.
    pub fn weights(&self, s: f64) -> Result<Vec<f64>> {
        match self.basis {
            KnotBasis::BSpline => Ok(self.matrix.apply_row(&timestep_basis(s, self.order)?)),
            KnotBasis::PiecewiseLinear => {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::Parameter(format!("normalized time {s} outside [0, 1]")));
                }
                let mut w = vec![0.0; self.order];
                if self.order == 1 {
                    w[0] = 1.0;
                    return Ok(w);
                }
                let u = s * (self.order - 1) as f64;
                let snapped = u.round();
                let u = if (u - snapped).abs() < 1e-9 { snapped } else { u };
                let i = (u.floor() as usize).min(self.order - 2);
                let frac = u - i as f64;
                w[i] = 1.0 - frac;
                w[i + 1] = frac;
                Ok(w)
            }
        }
    }

    pub fn interpolate_pose(&self, frame: usize, s: f64) -> Result<Pose> {
        let w = self.weights(s)?;
        self.pose_with_weights(frame, &w)
    }

    pub(crate) fn pose_with_weights(&self, frame: usize, w: &[f64]) -> Result<Pose> {
        if frame >= self.frames {
            return Err(Error::Parameter(format!(
                "frame {frame} outside bank of {} frames",
                self.frames
            )));
        }
        let channels = (0..self.channels)
            .map(|j| (0..self.order).fold(Vector3::zeros(), |acc, p| acc + self.knot(frame, j, p) * w[p]))
            .collect();
        Ok(Pose { channels })
    }

    /// Scatters a pose gradient back onto the knots of `frame`.
    pub(crate) fn accumulate_pose_grad(&self, frame: usize, w: &[f64], grad: &[Vector3<f64>], out: &mut [f64]) {
        for (j, g) in grad.iter().enumerate() {
            for (p, wp) in w.iter().enumerate() {
                let i = self.knot_index(frame, j, p);
                out[i] += wp * g.x;
                out[i + 1] += wp * g.y;
                out[i + 2] += wp * g.z;
            }
        }
    }
}

pub const NONRIGID_HIDDEN: usize = 32;
pub const DEFAULT_NONRIGID_SCALE: f64 = 0.1;

/// Per-joint pose displacement network shared across joints: input is the
/// joint's interpolated axis-angle and the normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct NonRigidNet {
    pub mlp: Mlp,
    /// Bound on each displacement component, radians.
    pub scale: f64,
}

/// Forward intermediates of [`NonRigidNet::displace_traced`].
#[derive(Debug, Clone)]
pub struct DisplacementTrace {
    traces: Vec<MlpTrace>,
}

impl NonRigidNet {
    pub fn new<R: Rng>(hidden: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new_zero_output(&[4, hidden, hidden, 3], rng),
            scale,
        }
    }

    fn joint_input(theta: &Vector3<f64>, s: f64) -> [f64; 4] {
        [theta.x, theta.y, theta.z, s]
    }

    fn displacement(&self, out: &[f64]) -> Vector3<f64> {
        Vector3::new(out[0].tanh(), out[1].tanh(), out[2].tanh()) * self.scale
    }

    /// Full pose `theta_hat + scale * tanh(mlp(theta_hat, s))` on joint
    /// channels; the root translation passes through.
    pub fn displace_pose(&self, pose_hat: &Pose, s: f64) -> Pose {
        let k = pose_hat.joint_count();
        let mut channels = pose_hat.channels.clone();
        for c in channels.iter_mut().take(k) {
            let out = self.mlp.forward(&Self::joint_input(c, s));
            *c += self.displacement(&out);
        }
        Pose { channels }
    }

    pub fn displace_traced(&self, pose_hat: &Pose, s: f64) -> (Pose, DisplacementTrace) {
        let k = pose_hat.joint_count();
        let mut channels = pose_hat.channels.clone();
        let mut traces = Vec::with_capacity(k);
        for c in channels.iter_mut().take(k) {
            let trace = self.mlp.forward_traced(&Self::joint_input(c, s));
            *c += self.displacement(trace.output());
            traces.push(trace);
        }
        (Pose { channels }, DisplacementTrace { traces })
    }

    /// Maps a gradient on the full pose to one on the interpolated pose,
    /// accumulating network parameter gradients.
    pub fn backward(
        &self,
        trace: &DisplacementTrace,
        grad_pose: &[Vector3<f64>],
        grad_params: &mut [f64],
    ) -> Vec<Vector3<f64>> {
        let mut out = grad_pose.to_vec();
        for (j, t) in trace.traces.iter().enumerate() {
            let o = t.output();
            let g = &grad_pose[j];
            let grad_out: Vec<f64> = (0..3)
                .map(|c| {
                    let th = o[c].tanh();
                    g[c] * self.scale * (1.0 - th * th)
                })
                .collect();
            let gi = self.mlp.backward(t, &grad_out, grad_params);
            out[j] += Vector3::new(gi[0], gi[1], gi[2]);
        }
        out
    }
}

/// Mean L2 distance between the rigid pose at the end of each exposure and
/// at the start of the next, over all channels.
pub fn inter_frame_reg(bank: &SplineBank) -> f64 {
    inter_frame_reg_impl(bank, None)
}

/// Same as [`inter_frame_reg`], adding `scale * dL/dknots` into `grad`.
pub fn inter_frame_reg_with_grad(bank: &SplineBank, scale: f64, grad: &mut [f64]) -> f64 {
    inter_frame_reg_impl(bank, Some((scale, grad)))
}

fn inter_frame_reg_impl(bank: &SplineBank, mut grad: Option<(f64, &mut [f64])>) -> f64 {
    let frames = bank.frames();
    if frames < 2 {
        log::debug!("inter-frame regularizer needs two frames; reporting 0");
        return 0.0;
    }
    let w_end = bank.weights(1.0).expect("s = 1 is in range");
    let w_start = bank.weights(0.0).expect("s = 0 is in range");
    let norm = 1.0 / (bank.channels() * (frames - 1)) as f64;
    let mut total = 0.0;
    for n in 0..frames - 1 {
        let end = bank.pose_with_weights(n, &w_end).expect("frame in range");
        let start = bank.pose_with_weights(n + 1, &w_start).expect("frame in range");
        let mut g_end = Vec::with_capacity(bank.channels());
        let mut g_start = Vec::with_capacity(bank.channels());
        for (a, b) in end.channels.iter().zip(&start.channels) {
            let d = a - b;
            let len = d.norm();
            total += len;
            let unit = if len > 0.0 { d / len } else { Vector3::zeros() };
            g_end.push(unit * norm);
            g_start.push(-unit * norm);
        }
        if let Some((scale, out)) = grad.as_mut() {
            let g_end: Vec<_> = g_end.iter().map(|g| g * *scale).collect();
            let g_start: Vec<_> = g_start.iter().map(|g| g * *scale).collect();
            bank.accumulate_pose_grad(n, &w_end, &g_end, out);
            bank.accumulate_pose_grad(n + 1, &w_start, &g_start, out);
        }
    }
    total * norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Exact rational oracle for the basis matrix: numerators over (P-1)!,
    // evaluated with the De Boor-style closed form written out independently.
    fn oracle_numerator(p: i64, i: i64, j: i64) -> i64 {
        fn c(n: i64, k: i64) -> i64 {
            if k < 0 || k > n {
                return 0;
            }
            let mut r = 1i64;
            for t in 0..k {
                r = r * (n - t) / (t + 1);
            }
            r
        }
        let mut sum = 0i64;
        for s in j..p {
            let term = c(p, s - j) * (p - s - 1).pow((p - 1 - i) as u32);
            sum += if (s - j) % 2 == 0 { term } else { -term };
        }
        c(p - 1, p - 1 - i) * sum
    }

    #[test]
    fn order_one_is_identity() {
        let m = interpolation_matrix(1).unwrap();
        assert_eq!(m.entries(), &[1.0]);
    }

    #[test]
    fn order_two_is_linear_interpolation() {
        let m = interpolation_matrix(2).unwrap();
        assert_eq!(m.entries(), &[1.0, 0.0, -1.0, 1.0]);
        for s in [0.0, 0.25, 0.7, 1.0] {
            let w = m.apply_row(&timestep_basis(s, 2).unwrap());
            assert!((w[0] - (1.0 - s)).abs() < 1e-15 && (w[1] - s).abs() < 1e-15);
        }
    }

    #[test]
    fn order_four_is_cubic_bspline() {
        let reference = [1, 4, 1, 0, -3, 0, 3, 0, 3, -6, 3, 0, -1, 3, -3, 1];
        for (i, r) in reference.iter().enumerate() {
            assert_eq!(oracle_numerator(4, (i / 4) as i64, (i % 4) as i64), *r as i64);
        }
        let m = interpolation_matrix(4).unwrap();
        for (e, r) in m.entries().iter().zip(reference) {
            assert!((e - r as f64 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn numerators_match_oracle_for_all_orders() {
        for p in 1..=MAX_ORDER {
            let nums = interpolation_numerators(p);
            for i in 0..p {
                for j in 0..p {
                    assert_eq!(nums[i * p + j] as i64, oracle_numerator(p as i64, i as i64, j as i64));
                }
            }
        }
    }

    #[test]
    fn order_out_of_range_is_rejected() {
        assert!(interpolation_matrix(0).is_err());
        assert!(interpolation_matrix(9).is_err());
    }

    #[test]
    fn basis_examples() {
        assert_eq!(timestep_basis(0.0, 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(timestep_basis(1.0, 4).unwrap(), vec![1.0; 4]);
        assert_eq!(timestep_basis(0.5, 3).unwrap(), vec![1.0, 0.5, 0.25]);
        assert!(timestep_basis(1.5, 3).is_err());
        assert!(timestep_basis(-0.1, 3).is_err());
    }

    #[test]
    fn two_knot_midpoint_is_average() {
        let mut bank = SplineBank::new(1, 1, 2, KnotBasis::BSpline).unwrap();
        bank.set_knot(0, 0, 0, &Vector3::new(1.0, 2.0, 3.0));
        bank.set_knot(0, 0, 1, &Vector3::new(3.0, -2.0, 0.0));
        let p = bank.interpolate_pose(0, 0.5).unwrap();
        assert!((p.channels[0] - Vector3::new(2.0, 0.0, 1.5)).norm() < 1e-15);
    }

    #[test]
    fn cubic_start_value() {
        let mut bank = SplineBank::new(1, 1, 4, KnotBasis::BSpline).unwrap();
        bank.set_knot(0, 0, 2, &Vector3::x());
        bank.set_knot(0, 0, 3, &Vector3::x());
        let p = bank.interpolate_pose(0, 0.0).unwrap();
        assert!((p.channels[0].x - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn piecewise_linear_hits_knots_at_subframes() {
        let mut bank = SplineBank::new(1, 1, 5, KnotBasis::PiecewiseLinear).unwrap();
        for p in 0..5 {
            bank.set_knot(0, 0, p, &Vector3::new(p as f64, 0.0, 0.0));
        }
        for t in 0..5 {
            let pose = bank.interpolate_pose(0, subframe_time(t, 5)).unwrap();
            assert_eq!(pose.channels[0].x, t as f64);
        }
        let mid = bank.interpolate_pose(0, 0.125).unwrap();
        assert!((mid.channels[0].x - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reg_zero_for_shared_constant_knots() {
        let pose = Pose {
            channels: vec![Vector3::new(0.1, 0.2, 0.3); 3],
        };
        let bank = SplineBank::constant(&vec![pose; 4], 4, KnotBasis::BSpline).unwrap();
        assert!(inter_frame_reg(&bank) < 1e-12);
    }

    #[test]
    fn reg_two_frames_one_channel() {
        let a = Pose {
            channels: vec![Vector3::new(0.0, 0.0, 0.0)],
        };
        let b = Pose {
            channels: vec![Vector3::new(3.0, 4.0, 0.0)],
        };
        let bank = SplineBank::constant(&[a, b], 4, KnotBasis::BSpline).unwrap();
        assert!((inter_frame_reg(&bank) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn reg_single_frame_is_zero() {
        let bank = SplineBank::new(1, 2, 4, KnotBasis::BSpline).unwrap();
        assert!(inter_frame_reg(&bank) < 1e-12);
    }

    #[test]
    fn reg_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = SplineBank::new(3, 2, 4, KnotBasis::BSpline).unwrap();
        for k in bank.knots_mut() {
            *k = rng.random_range(-1.0..1.0);
        }
        let mut grad = vec![0.0; bank.knots().len()];
        inter_frame_reg_with_grad(&bank, 1.0, &mut grad);
        let h = 1e-6;
        for i in 0..grad.len() {
            let mut bp = bank.clone();
            bp.knots_mut()[i] += h;
            let mut bm = bank.clone();
            bm.knots_mut()[i] -= h;
            let num = (inter_frame_reg(&bp) - inter_frame_reg(&bm)) / (2.0 * h);
            assert!((num - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_initialized_net_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = NonRigidNet::new(NONRIGID_HIDDEN, DEFAULT_NONRIGID_SCALE, &mut rng);
        let pose = Pose {
            channels: vec![
                Vector3::new(0.3, -0.2, 1.0),
                Vector3::new(0.5, 0.5, 0.5),
                Vector3::new(1.0, 2.0, 3.0),
            ],
        };
        assert_eq!(net.displace_pose(&pose, 0.4), pose);
    }

    #[test]
    fn random_net_is_deterministic_and_bounded() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut net = NonRigidNet::new(NONRIGID_HIDDEN, DEFAULT_NONRIGID_SCALE, &mut rng);
            for p in net.mlp.params_mut() {
                *p += rng.random_range(-3.0..3.0);
            }
            net
        };
        let pose = Pose {
            channels: vec![Vector3::new(0.3, -0.2, 1.0), Vector3::new(2.0, 2.0, 2.0)],
        };
        let a = build().displace_pose(&pose, 0.7);
        let b = build().displace_pose(&pose, 0.7);
        assert_eq!(a, b);
        let d = a.channels[0] - pose.channels[0];
        assert!(d.amax() <= DEFAULT_NONRIGID_SCALE);
        assert_eq!(a.channels[1], pose.channels[1]);
    }

    proptest! {
        #[test]
        fn partition_of_unity(s in 0.0f64..=1.0, order in 1usize..=MAX_ORDER) {
            let m = interpolation_matrix(order).unwrap();
            let w = m.apply_row(&timestep_basis(s, order).unwrap());
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn constant_knots_reproduce_value(
            s in 0.0f64..=1.0,
            order in 1usize..=MAX_ORDER,
            v in proptest::array::uniform3(-3.0f64..3.0),
        ) {
            let pose = Pose { channels: vec![Vector3::from(v)] };
            let bank = SplineBank::constant(&[pose], order, KnotBasis::BSpline).unwrap();
            let out = bank.interpolate_pose(0, s).unwrap();
            prop_assert!((out.channels[0] - Vector3::from(v)).amax() < 1e-12);
        }

        #[test]
        fn pose_is_lipschitz_in_time(
            s in 0.0f64..0.999,
            order in 1usize..=MAX_ORDER,
            knots in proptest::collection::vec(-2.0f64..2.0, 3 * MAX_ORDER),
        ) {
            let mut bank = SplineBank::new(1, 1, order, KnotBasis::BSpline).unwrap();
            bank.knots_mut().copy_from_slice(&knots[..3 * order]);
            let eps = 1e-6;
            let a = bank.interpolate_pose(0, s).unwrap();
            let b = bank.interpolate_pose(0, s + eps).unwrap();
            let max_knot = knots[..3 * order].iter().fold(0.0f64, |m, k| m.max(k.abs()));
            let bound = order as f64 * max_knot * eps;
            prop_assert!((a.channels[0] - b.channels[0]).amax() <= bound + 1e-12);
        }

        #[test]
        fn reg_nonnegative_and_zero_iff_continuous(
            knots in proptest::collection::vec(-1.0f64..1.0, 2 * 2 * 4 * 3),
        ) {
            let mut bank = SplineBank::new(2, 2, 4, KnotBasis::BSpline).unwrap();
            bank.knots_mut().copy_from_slice(&knots);
            let reg = inter_frame_reg(&bank);
            prop_assert!(reg >= 0.0);
            let end = bank.interpolate_pose(0, 1.0).unwrap();
            let start = bank.interpolate_pose(1, 0.0).unwrap();
            let gap = end.channels.iter().zip(&start.channels).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            prop_assert_eq!(reg <= 1e-12, gap <= 1e-12);
        }
    }
}
