//! Adaptive-moment optimizer with one state per parameter group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CganError, Result};
use crate::nets::{ParamGroup, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients whose global norm exceeds this are rescaled to it.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(CganError::Config(format!(
                "adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0 && self.clip_norm > 0.0) {
            return Err(CganError::Config("adam eps and clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

/// First and second moment buffers of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Moments {
    fn for_params(params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Moments { step: 0, m: zeros(), v: zeros() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    groups: BTreeMap<ParamGroup, Moments>,
}

/// Global L2 norm over several gradient lists.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a [Tensor]>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.iter())
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt()
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            groups: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn moments(&self, group: ParamGroup) -> Option<&Moments> {
        self.groups.get(&group)
    }

    pub fn groups(&self) -> impl Iterator<Item = (ParamGroup, &Moments)> {
        self.groups.iter().map(|(g, m)| (*g, m))
    }

    pub fn insert_moments(&mut self, group: ParamGroup, moments: Moments) {
        self.groups.insert(group, moments);
    }

    /// Rescale factor bringing the combined norm of `grads` under the clip norm.
    pub fn clip_scale(&self, norm: f64) -> f64 {
        if norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        }
    }

    /// One Adam step on `params`. `scale` multiplies the gradient first (clipping).
    ///
    /// A zero learning rate leaves both the parameters and the moments untouched.
    pub fn update(
        &mut self,
        group: ParamGroup,
        params: &mut ParamSet,
        grads: &[Tensor],
        lr: f64,
        scale: f64,
        direction: Direction,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(CganError::Dimension(format!(
                "{group}: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if let Some((p, g)) = params.tensors().iter().zip(grads).find(|(p, g)| p.shape() != g.shape()) {
            return Err(CganError::Dimension(format!(
                "{group}: gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if lr == 0.0 {
            return Ok(());
        }
        let cfg = self.config;
        let state = self
            .groups
            .entry(group)
            .or_insert_with(|| Moments::for_params(params));
        state.step += 1;
        let t = state.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        let sign = match direction {
            Direction::Descend => -1.0,
            Direction::Ascend => 1.0,
        };
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut state.m)
            .zip(&mut state.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * scale;
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bias1;
                let vhat = *vv / bias2;
                *pv += sign * lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = one_param(&[1.0, -2.0, 0.5]);
        let g = [Tensor::new(&[3], vec![3.0, -0.1, 0.0]).unwrap()];
        adam.update(ParamGroup::Conditioner, &mut p, &g, 0.01, 1.0, Direction::Descend).unwrap();
        let got = p.tensors()[0].data();
        // With bias correction the first step is lr * g / (|g| + eps).
        let expect = [1.0 - 0.01 * 3.0 / (3.0 + 1e-8), -2.0 + 0.01 * 0.1 / (0.1 + 1e-8), 0.5];
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn ascent_mirrors_descent() {
        let g = [Tensor::new(&[2], vec![0.3, -0.7]).unwrap()];
        let mut up = one_param(&[0.0, 0.0]);
        let mut down = one_param(&[0.0, 0.0]);
        let mut a1 = Adam::new(AdamConfig::default());
        let mut a2 = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            a1.update(ParamGroup::Discriminator, &mut up, &g, 0.1, 1.0, Direction::Ascend).unwrap();
            a2.update(ParamGroup::Discriminator, &mut down, &g, 0.1, 1.0, Direction::Descend).unwrap();
        }
        for (a, b) in up.tensors()[0].data().iter().zip(down.tensors()[0].data()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = one_param(&[1.0, 2.0]);
        let before = p.fingerprint();
        let g = [Tensor::new(&[2], vec![5.0, 5.0]).unwrap()];
        adam.update(ParamGroup::Generator(0), &mut p, &g, 0.0, 1.0, Direction::Descend).unwrap();
        assert_eq!(p.fingerprint(), before);
        assert!(adam.moments(ParamGroup::Generator(0)).is_none());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = one_param(&[3.0, -4.0]);
        for _ in 0..2000 {
            let g = [p.tensors()[0].map(|x| 2.0 * x)];
            adam.update(ParamGroup::Conditioner, &mut p, &g, 0.01, 1.0, Direction::Descend).unwrap();
        }
        assert!(p.tensors()[0].sq_norm() < 1e-4);
    }

    #[test]
    fn clipping_scale() {
        let adam = Adam::new(AdamConfig::default());
        assert_eq!(adam.clip_scale(5.0), 1.0);
        assert_eq!(adam.clip_scale(40.0), 0.25);
        let a = [Tensor::new(&[1], vec![3.0]).unwrap()];
        let b = [Tensor::new(&[1], vec![4.0]).unwrap()];
        assert_eq!(global_norm([&a[..], &b[..]]), 5.0);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = one_param(&[1.0]);
        let g = [Tensor::zeros(&[2])];
        assert!(adam.update(ParamGroup::Conditioner, &mut p, &g, 0.1, 1.0, Direction::Descend).is_err());
        assert!(adam.update(ParamGroup::Conditioner, &mut p, &[], 0.1, 1.0, Direction::Descend).is_err());
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
    }
}
