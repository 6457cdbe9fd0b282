//! Clone, split and prune of canonical Gaussians.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::model::{Group, Model};
use crate::config::DensityConfig;
use crate::geometry::quaternion_to_rotation;

/// Screen-space gradient statistics gathered between density steps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DensityStats {
    pub grad_sum: Vec<f64>,
    pub visible_count: Vec<u32>,
}

impl DensityStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            visible_count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, grad_norm: &[f64], visible: &[bool]) {
        for i in 0..self.grad_sum.len() {
            if visible[i] {
                self.grad_sum[i] += grad_norm[i];
                self.visible_count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        match self.visible_count[i] {
            0 => 0.0,
            c => self.grad_sum[i] / c as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DensityOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Whether density control runs after `iteration` (0-based).
pub fn is_density_step(cfg: &DensityConfig, iteration: usize) -> bool {
    let it = iteration + 1;
    cfg.enabled && it >= cfg.start && it <= cfg.end && it.is_multiple_of(cfg.every)
}

enum Source {
    Keep(usize),
    Copy(usize),
    Child {
        parent: usize,
        mean: Vector3<f64>,
        shrink: f64,
    },
}

fn max_scale(model: &Model, i: usize) -> f64 {
    model.avatar.gaussians.scale(i).max()
}

/// Applies the rule table and resets `stats`. Survivors keep their Adam
/// moments; new Gaussians start with zero moments.
pub fn density_control<R: Rng>(
    model: &mut Model,
    adam: &mut Adam,
    stats: &mut DensityStats,
    cfg: &DensityConfig,
    rng: &mut R,
) -> DensityOutcome {
    let n = model.gaussian_count();
    if log::log_enabled!(log::Level::Debug) {
        let mut m: Vec<f64> = (0..n).map(|i| stats.mean(i)).collect();
        m.sort_by(f64::total_cmp);
        if let (Some(lo), Some(hi)) = (m.first(), m.last()) {
            log::debug!("gradient statistic: min {lo:.3e} median {:.3e} max {hi:.3e}", m[n / 2]);
        }
    }
    let mut out = DensityOutcome::default();
    let mut sources: Vec<Source> = Vec::with_capacity(n);
    let mut added: Vec<Source> = Vec::new();
    let mut total = n;
    let mut capped = false;
    for i in 0..n {
        let opacity = model.avatar.gaussians.opacity(i);
        let scale = max_scale(model, i);
        if opacity < cfg.min_opacity || scale > cfg.max_scale {
            out.pruned += 1;
            total -= 1;
            continue;
        }
        let high = stats.mean(i) > cfg.grad_threshold;
        if !high {
            sources.push(Source::Keep(i));
            continue;
        }
        if total + 1 > cfg.max_gaussians {
            capped = true;
            sources.push(Source::Keep(i));
            continue;
        }
        if scale < cfg.scale_threshold {
            sources.push(Source::Keep(i));
            added.push(Source::Copy(i));
            out.cloned += 1;
        } else {
            let g = &model.avatar.gaussians;
            let rot = quaternion_to_rotation(&g.rotation(i));
            let s = g.scale(i);
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                let offset: Vector3<f64> = rot * Matrix3::from_diagonal(&s) * z;
                added.push(Source::Child {
                    parent: i,
                    mean: g.mean(i) + offset,
                    shrink: cfg.split_divisor.ln(),
                });
            }
            out.split += 1;
        }
        total += 1;
    }
    if capped {
        log::info!("Gaussian cap {} reached; densification stopped", cfg.max_gaussians);
    }
    sources.extend(added);
    rebuild(model, adam, &sources);
    *stats = DensityStats::new(model.gaussian_count());
    out
}

fn rebuild(model: &mut Model, adam: &mut Adam, sources: &[Source]) {
    let k = model.avatar.skeleton.joint_count();
    let old = model.clone();
    let old_base = &old.avatar.skin.base;
    let mut base = Vec::with_capacity(sources.len() * k);
    for src in sources {
        let (Source::Keep(p) | Source::Copy(p) | Source::Child { parent: p, .. }) = src;
        base.extend_from_slice(&old_base[p * k..(p + 1) * k]);
    }
    model.avatar.skin.base = base;
    for g in Group::ALL {
        let Some(stride) = g.stride() else { continue };
        let params = old.params(g);
        let (m_old, v_old) = (&adam.first[g.index()], &adam.second[g.index()]);
        let mut p_new = Vec::with_capacity(sources.len() * stride);
        let mut m_new = Vec::with_capacity(sources.len() * stride);
        let mut v_new = Vec::with_capacity(sources.len() * stride);
        for src in sources {
            match src {
                Source::Keep(i) => {
                    let r = i * stride..(i + 1) * stride;
                    p_new.extend_from_slice(&params[r.clone()]);
                    m_new.extend_from_slice(&m_old[r.clone()]);
                    v_new.extend_from_slice(&v_old[r]);
                }
                Source::Copy(i) => {
                    p_new.extend_from_slice(&params[i * stride..(i + 1) * stride]);
                    m_new.extend(std::iter::repeat_n(0.0, stride));
                    v_new.extend(std::iter::repeat_n(0.0, stride));
                }
                Source::Child { parent, mean, shrink } => {
                    let r = parent * stride..(parent + 1) * stride;
                    match g {
                        Group::Means => p_new.extend_from_slice(mean.as_slice()),
                        Group::LogScales => p_new.extend(params[r].iter().map(|l| l - shrink)),
                        _ => p_new.extend_from_slice(&params[r]),
                    }
                    m_new.extend(std::iter::repeat_n(0.0, stride));
                    v_new.extend(std::iter::repeat_n(0.0, stride));
                }
            }
        }
        set_group(model, g, p_new);
        adam.first[g.index()] = m_new;
        adam.second[g.index()] = v_new;
    }
}

fn set_group(model: &mut Model, g: Group, values: Vec<f64>) {
    let gs = &mut model.avatar.gaussians;
    match g {
        Group::Means => gs.means = values,
        Group::Rotations => gs.rotations = values,
        Group::LogScales => gs.log_scales = values,
        Group::Opacities => gs.opacity_logits = values,
        Group::Colors => gs.colors = values,
        _ => unreachable!("not a per-Gaussian group"),
    }
}
