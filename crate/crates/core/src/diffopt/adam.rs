use serde::{Deserialize, Serialize};

use super::model::{Grads, Group, Model};
use crate::config::LearningRates;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for every parameter group, bias-corrected with a shared
/// step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

/// Learning rate of each group, indexed by [`Group::index`].
pub type GroupRates = [f64; 9];

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros = || Group::ALL.iter().map(|g| vec![0.0; model.params(*g).len()]).collect();
        Self {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Grads, rates: &GroupRates) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for g in Group::ALL {
            let lr = rates[g.index()];
            let m = &mut self.first[g.index()];
            let v = &mut self.second[g.index()];
            let p = model.params_mut(g);
            for (((p, m), v), grad) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads.get(g)) {
                *m = BETA1 * *m + (1.0 - BETA1) * grad;
                *v = BETA2 * *v + (1.0 - BETA2) * grad * grad;
                if lr != 0.0 {
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
                }
            }
        }
        for c in model.params_mut(Group::Colors) {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

/// Per-group rates at `iteration` of a run of `total` iterations; the mean
/// rate decays exponentially to `means * means_final_factor` and the others
/// to `final_factor` times their base.
pub fn rates_at(lr: &LearningRates, iteration: usize, total: usize) -> GroupRates {
    let progress = if total > 1 {
        iteration.min(total - 1) as f64 / (total - 1) as f64
    } else {
        0.0
    };
    let means = lr.means * lr.means_final_factor.powf(progress);
    let d = lr.final_factor.powf(progress);
    let mut r = [0.0; 9];
    r[Group::Means.index()] = means;
    r[Group::Rotations.index()] = lr.rotations * d;
    r[Group::LogScales.index()] = lr.log_scales * d;
    r[Group::Opacities.index()] = lr.opacities * d;
    r[Group::Colors.index()] = lr.colors * d;
    r[Group::Knots.index()] = lr.knots * d;
    r[Group::Nonrigid.index()] = lr.nonrigid * d;
    r[Group::Lbs.index()] = lr.lbs * d;
    r[Group::Shape.index()] = lr.shape * d;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::Skeleton;
    use crate::config::{rng_for, RunConfig};
    use crate::motion::Pose;

    fn model() -> Model {
        let skel = Skeleton::stickman();
        let poses = vec![Pose::zeros(skel.joint_count()); 2];
        Model::initialize(skel, &poses, &RunConfig::default(), &mut rng_for(3, 0)).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut m = model();
        let before = m.clone();
        let mut adam = Adam::new(&m);
        let g = Grads::zeros_like(&m);
        for _ in 0..5 {
            adam.step(&mut m, &g, &[0.1; 9]);
        }
        assert_eq!(m, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m1 = 0.1 g, v1 = 0.001 g^2; corrected ratio is g / |g| = 1
        let mut m = model();
        let before = m.params(Group::Shape)[0];
        let mut adam = Adam::new(&m);
        let mut g = Grads::zeros_like(&m);
        g.get_mut(Group::Shape)[0] = 1.0;
        adam.step(&mut m, &g, &[0.1; 9]);
        let delta = m.params(Group::Shape)[0] - before;
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "{delta}");
    }

    #[test]
    fn zero_rate_freezes_group() {
        let mut m = model();
        let before = m.params(Group::Lbs).to_vec();
        let mut adam = Adam::new(&m);
        let mut g = Grads::zeros_like(&m);
        g.get_mut(Group::Lbs).iter_mut().for_each(|v| *v = 0.5);
        let mut rates = [0.1; 9];
        rates[Group::Lbs.index()] = 0.0;
        adam.step(&mut m, &g, &rates);
        assert_eq!(m.params(Group::Lbs), &before[..]);
    }

    #[test]
    fn colors_stay_in_unit_range() {
        let mut m = model();
        let mut adam = Adam::new(&m);
        let mut g = Grads::zeros_like(&m);
        g.get_mut(Group::Colors).iter_mut().for_each(|v| *v = -1.0);
        adam.step(&mut m, &g, &[10.0; 9]);
        assert!(m.params(Group::Colors).iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn mean_rate_decays_to_final_factor() {
        let lr = LearningRates::default();
        let r0 = rates_at(&lr, 0, 3000);
        let r1 = rates_at(&lr, 2999, 3000);
        assert_eq!(r0[Group::Means.index()], lr.means);
        assert!((r1[Group::Means.index()] - lr.means * lr.means_final_factor).abs() < 1e-18);
        assert!((r1[Group::Knots.index()] - lr.knots * lr.final_factor).abs() < 1e-18);
        assert_eq!(r0[Group::Knots.index()], lr.knots);
        let flat = LearningRates {
            final_factor: 1.0,
            ..lr
        };
        assert_eq!(rates_at(&flat, 2999, 3000)[Group::Opacities.index()], flat.opacities);
    }
}
