//! Adam with coupled ℓ2 weight decay.

use serde::{Deserialize, Serialize};

use crate::capsule::{Gradients, ModelParams, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Adds `2·weight_decay·θ` to the gradient before the moment updates.
    pub weight_decay: f64,
    /// Decay biases and hop logits too, not only weight matrices.
    pub decay_all: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
            decay_all: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ModelParams) -> Self {
        Self {
            cfg,
            m: params.tensors().zeros_like(),
            v: params.tensors().zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Non-finite gradients abort before any parameter changes.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        if let Some((kind, index, value)) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient {
                param: kind.name().to_string(),
                index,
                value,
            });
        }
        if grads.kinds() != params.kinds() {
            return Err(Error::Validation(format!(
                "gradients for {:?}, parameters {:?}",
                grads.kinds(),
                params.kinds()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (kind, theta) in params.tensors_mut().iter_mut() {
            let g = grads.get(kind).expect("kinds checked");
            if g.shape() != theta.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for parameter {:?} ({})",
                    g.shape(),
                    theta.shape(),
                    kind.name()
                )));
            }
            let decay = if c.decay_all || kind.is_weight() {
                c.weight_decay
            } else {
                0.0
            };
            let m = self.m.get_mut(kind).expect("same layout").data_mut();
            let v = self.v.get_mut(kind).expect("same layout").data_mut();
            for (i, th) in theta.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + 2.0 * decay * *th;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *th -= c.learning_rate * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::{ModelDims, ParamKind};

    fn params() -> ModelParams {
        ModelParams::init(
            ModelDims {
                n_features: 3,
                n_primary: 2,
                primary_dim: 2,
                n_classes: 2,
                class_dim: 2,
                n_hops: 2,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        let g = p.tensors().zeros_like();
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.tensors(), before.tensors());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params();
        let before = p.get(ParamKind::ClassBias).unwrap().clone();
        let mut g = p.tensors().zeros_like();
        g.get_mut(ParamKind::ClassBias).unwrap().data_mut()[0] = 1.0;
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &g).unwrap();
        let delta = p.get(ParamKind::ClassBias).unwrap().data()[0] - before.data()[0];
        assert!((delta + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn decay_only_shrinks_weights() {
        let mut p = params();
        let cfg = AdamConfig {
            weight_decay: 0.5,
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        let g = p.tensors().zeros_like();
        let mut last = p.get(ParamKind::PrimaryWeights).unwrap().norm();
        for _ in 0..50 {
            adam.step(&mut p, &g).unwrap();
            let n = p.get(ParamKind::PrimaryWeights).unwrap().norm();
            assert!(n < last);
            last = n;
        }
        assert!(p.get(ParamKind::ClassBias).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_nan_gradient() {
        let mut p = params();
        let mut g = p.tensors().zeros_like();
        g.get_mut(ParamKind::Zeta).unwrap().data_mut()[1] = f64::NAN;
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &g).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1, .. }));
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn convex_quadratic_decreases() {
        // f(θ) = Σ (θ − 3)² over the class bias only.
        let mut p = params();
        let cfg = AdamConfig {
            learning_rate: 0.01,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        let loss = |p: &ModelParams| {
            p.get(ParamKind::ClassBias).unwrap().data().iter().map(|v| (v - 3.0).powi(2)).sum::<f64>()
        };
        let mut history = Vec::new();
        for _ in 0..100 {
            let mut g = p.tensors().zeros_like();
            let b = p.get(ParamKind::ClassBias).unwrap().map(|v| 2.0 * (v - 3.0));
            *g.get_mut(ParamKind::ClassBias).unwrap() = b;
            adam.step(&mut p, &g).unwrap();
            history.push(loss(&p));
        }
        assert!(history[10..].windows(2).all(|w| w[1] < w[0]));
    }
}
